"""Acceptance criteria, one recorded PASS/FAIL line each (see the terminal summary)."""

import time

import numpy as np
import pytest

from patchcad import modelfile
from patchcad.cli import RunConfig, cmd_diagnose, cmd_evaluate, cmd_saliency, cmd_synth, cmd_train
from patchcad.dataio import (
    IDENTITY,
    N_TRANSFORMS,
    ImageSample,
    Label,
    augment,
    augment_array,
    compose_transforms,
    normalize_array,
    save_image,
    split,
    tile,
    untile,
)
from patchcad.diagnosis import build_report, color_bucket
from patchcad.evaluation import ConfusionMatrix, accumulate, metrics
from patchcad.network import NetworkModel, model_forward
from patchcad.saliency import input_gradient, input_saliency, layer_saliency
from patchcad.tensor import make_rng

from .conftest import tiny_model
from .gradcases import LAYER_CASES
from .gradcheck import TOLERANCE, numeric_gradient, relative_error


def test_ac1_metric_reproduction(record_criterion):
    start = time.perf_counter()
    m = metrics(ConfusionMatrix(tp=6119, fp=530, tn=7585, fn=102))
    elapsed = time.perf_counter() - start
    got = m.rounded(2)
    want = (0.95, 0.92, 0.98, 0.95)
    ok = got == want and elapsed < 1.0
    detail = (
        f"A/P/R/F1 = {m.accuracy:.4f}/{m.precision:.4f}/{m.recall:.4f}/{m.f1:.4f} "
        f"-> rounded {got}, required {want}, {elapsed * 1e3:.2f} ms"
    )
    record_criterion(1, "metric reproduction", ok, detail)
    # precision, recall and F1 reproduce; accuracy 13704/14336 = 0.9559 rounds to 0.96
    assert got[1:] == want[1:] and elapsed < 1.0
    assert abs(m.accuracy - 13704 / 14336) < 1e-15
    if not ok:
        pytest.xfail("published accuracy 0.95 is 0.9559 truncated; two-decimal rounding gives 0.96")


def test_ac2_architecture_oracle(record_criterion):
    start = time.perf_counter()
    model = NetworkModel.initialize(make_rng(0))
    _, cache = model_forward(model, make_rng(1).standard_normal((2, 64, 64)))
    shapes = cache.activation_shapes()
    elapsed = time.perf_counter() - start
    table = [(128, 64, 64), (128, 32, 32), (64, 32, 32), (64, 16, 16), (32, 16, 16), (32, 8, 8), (150,), (2,)]
    ok = shapes == table and elapsed < 1.0
    record_criterion(2, "architecture oracle", ok, f"{' -> '.join(map(str, shapes))}, {elapsed:.2f} s")
    assert ok


def test_ac3_gradient_suite(record_criterion):
    start = time.perf_counter()
    worst = {}
    cases = 0
    for kind, case in sorted(LAYER_CASES.items()):
        for seed in range(8):
            err = case(100 + seed)
            worst[kind] = max(worst.get(kind, 0.0), err)
            cases += 1
    elapsed = time.perf_counter() - start
    ok = cases >= 50 and max(worst.values()) <= TOLERANCE and elapsed < 60
    detail = f"{cases} cases, worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s"
    record_criterion(3, "gradient suite", ok, detail)
    assert ok


def test_ac4_augmentation_arithmetic(record_criterion):
    start = time.perf_counter()
    image = ImageSample(make_rng(2).random((2, 1024, 1024)), Label.CONTROL, "x")
    patches = tile(image)
    inputs = sum(len(augment(p)) for p in patches)
    table = [[compose_transforms(a, b) for b in range(N_TRANSFORMS)] for a in range(N_TRANSFORMS)]
    closed = all(sorted(row) == list(range(8)) for row in table)
    identity = table[IDENTITY] == list(range(8)) and [row[IDENTITY] for row in table] == list(range(8))
    associative = all(
        table[table[a][b]][c] == table[a][table[b][c]] for a in range(8) for b in range(8) for c in range(8)
    )
    # table[a][b] is a followed by b, checked against the pixels
    x = make_rng(3).random((2, 8, 8))
    concrete = all(
        np.array_equal(augment_array(augment_array(x, a), b), augment_array(x, table[a][b]))
        for a in range(8)
        for b in range(8)
    )
    elapsed = time.perf_counter() - start
    ok = len(patches) == 256 and inputs == 2048 and closed and identity and associative and concrete and elapsed < 5
    record_criterion(
        4, "augmentation arithmetic", ok,
        f"{len(patches)} patches, {inputs} inputs, group closed={closed} assoc={associative} "
        f"matches pixels={concrete}, {elapsed:.2f} s",
    )
    assert ok


def test_ac5_dataset_counts(record_criterion):
    zero = np.broadcast_to(np.zeros(1), (2, 1024, 1024))
    images = [ImageSample(zero, Label.CONTROL, f"c{i}") for i in range(138)]
    images += [ImageSample(zero, Label.PATIENT, f"p{i}") for i in range(138)]
    data = split(images, make_rng(0))
    pool = len(data.train) + len(data.validation)
    ok = len(data.test) == 14336 and pool == 56320
    record_criterion(5, "dataset counts", ok, f"test {len(data.test)} patches, train pool {pool} patches")
    assert ok


# Adam at the published 0.01 blows the logits up on its first step for this
# unnormalized stack and the squared-error head then saturates; the end-to-end
# run uses a smaller step (everything else at the defaults).
E2E_ALPHA = 3e-4


@pytest.mark.slow
def test_ac6_end_to_end_synthetic(record_criterion, tmp_path):
    start = time.perf_counter()
    cmd_synth(20, 7, tmp_path / "corpus")
    config = RunConfig(seed=0, alpha=E2E_ALPHA, data=str(tmp_path / "corpus"), out=str(tmp_path / "run"))
    summary = cmd_train(config)
    result = cmd_evaluate(tmp_path / "run" / "model.cadcnn", tmp_path / "corpus", tmp_path / "run")
    elapsed = time.perf_counter() - start
    patch_row, image_row = result["rows"]
    epochs = summary["stopping_epoch"]
    medians = [e["median_batch_loss"] for e in summary["epochs"]]
    ok = (
        patch_row["accuracy"] >= 0.90
        and image_row["accuracy"] == 1.0
        and epochs <= 10
        and elapsed < 30 * 60
    )
    detail = (
        f"patch acc {patch_row['accuracy']:.4f}, image acc {image_row['accuracy']:.3f}, "
        f"{epochs} epochs (best {summary['best_epoch']}), median batch loss {np.round(medians, 4).tolist()}, "
        f"{elapsed / 60:.1f} min, alpha {E2E_ALPHA}"
    )
    record_criterion(6, "end-to-end synthetic run", ok, detail)
    print(result["table"])
    assert ok


def test_ac7_determinism(record_criterion, tmp_path):
    cmd_synth(4, 5, tmp_path / "corpus", size=128)
    for name in ("a", "b"):
        cmd_train(RunConfig(seed=3, max_epochs=2, data=str(tmp_path / "corpus"), out=str(tmp_path / name)), progress=None)
    same_model = (tmp_path / "a" / "model.cadcnn").read_bytes() == (tmp_path / "b" / "model.cadcnn").read_bytes()

    image = tmp_path / "corpus" / "patient" / "patient_000.png"
    for name in ("d1", "d2"):
        cmd_diagnose(tmp_path / "a" / "model.cadcnn", image, tmp_path / name)
    same_json = (tmp_path / "d1" / "patient_000_report.json").read_bytes() == (
        tmp_path / "d2" / "patient_000_report.json"
    ).read_bytes()
    same_png = (tmp_path / "d1" / "patient_000_overlay.png").read_bytes() == (
        tmp_path / "d2" / "patient_000_overlay.png"
    ).read_bytes()
    ok = same_model and same_json and same_png
    record_criterion(7, "determinism", ok, f"model files equal={same_model}, report equal={same_json}, overlay equal={same_png}")
    assert ok


def test_ac8_property_suites(record_criterion):
    rng = make_rng(8)
    checks = {}

    ok = True
    for _ in range(20):
        rows, cols = rng.integers(1, 4, 2)
        pixels = rng.random((2, 64 * rows, 64 * cols))
        ok &= np.array_equal(untile(tile(ImageSample(pixels, Label.CONTROL, "x"))), pixels)
    checks["tiling"] = ok

    ok = not normalize_array(np.full((2, 64, 64), 0.3)).any()
    for _ in range(20):
        y = normalize_array(rng.random((2, 64, 64)) * rng.uniform(0.01, 100))
        ok &= np.max(np.abs(normalize_array(y) - y)) < 1e-12
    checks["normalization"] = ok

    hits = [color_bucket(float(p)) for p in np.round(np.arange(10001) * 1e-4, 4)]
    checks["buckets"] = len(hits) == 10001 and all(h in ("cyan", "steel_blue", "yellow", "orange", "red") for h in hits)

    grid = [(r, c) for r in range(0, 1024, 64) for c in range(0, 1024, 64)]
    ok = build_report(grid, [0.2] * 128 + [0.8] * 128, (1024, 1024)).overall_label is Label.PATIENT
    for _ in range(50):
        rep = build_report(grid, rng.random(256), (1024, 1024))
        ok &= (rep.overall_label is Label.PATIENT) == (rep.score <= 50)
    checks["majority"] = ok

    model = tiny_model(8)
    loaded, _ = modelfile.loads(modelfile.dumps(model))
    x = rng.standard_normal((100, 2, 8, 8))
    checks["model file"] = model_forward(model, x)[0].tobytes() == model_forward(loaded, x)[0].tobytes()

    labels = ["control", "patient"]
    ok = True
    for _ in range(50):
        parts = [
            (list(rng.choice(labels, n)), list(rng.choice(labels, n))) for n in rng.integers(1, 20, 3)
        ]
        cms = [accumulate(p, t) for p, t in parts]
        whole = accumulate(sum((p for p, _ in parts), []), sum((t for _, t in parts), []))
        ok &= (cms[0] + cms[1]) + cms[2] == cms[0] + (cms[1] + cms[2]) == whole
    checks["confusion merge"] = ok

    passed = all(checks.values())
    record_criterion(8, "property suites", passed, ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert passed


def test_ac9_saliency(record_criterion, tmp_path):
    import cv2

    rng = make_rng(9)
    worst = 0.0
    for seed in range(3):
        model = tiny_model(seed)
        x = rng.standard_normal((2, 8, 8))
        for target in ("control", "patient"):
            g = input_gradient(model, x, target)
            idx = [int(i) for i in rng.choice(x.size, 10, replace=False)]

            def f():
                _, cache = model_forward(model, x)
                return float(cache.logits[0, 0 if target == "control" else 1])

            worst = max(worst, relative_error(g, numeric_gradient(f, x, idx), idx))

    dead = tiny_model(1)
    dead.conv1.kernels[:] = 0.0
    zero_map = not input_saliency(dead, rng.standard_normal((2, 8, 8)), "control").values.any()

    model = NetworkModel.initialize(make_rng(0), widths=(8, 6, 4), hidden=10)
    modelfile.save(model, tmp_path / "m.cadcnn")
    save_image(rng.random((2, 128, 128)), tmp_path / "scan.png")
    paths = cmd_saliency(tmp_path / "m.cadcnn", tmp_path / "scan.png", (0, 64), "all", tmp_path / "maps")
    sizes = [cv2.imread(str(p), cv2.IMREAD_UNCHANGED).shape[0] for p in paths]
    patch = normalize_array(rng.random((2, 64, 64)))
    api_sizes = [input_saliency(model, patch, "control").values.shape[0]] + [
        layer_saliency(model, patch, k, "control").values.shape[0] for k in (1, 2, 3)
    ]
    ok = worst <= TOLERANCE and zero_map and sizes == [64, 64, 32, 16] and api_sizes == sizes
    record_criterion(
        9, "saliency checks", ok,
        f"worst FD rel. error {worst:.1e}, zero-network map all zeros={zero_map}, map sizes {sizes}",
    )
    assert ok
