"""Acceptance suite: one PASS/FAIL line per criterion, printed past pytest's capture.

Criteria 8 and 9 train the desk model end to end through the CLI and take
several minutes each on one CPU core.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from infarctseg import kernels as K
from infarctseg.backbones import BackboneConfig, InvertedBottleneck, basic_block, bottleneck_block, dsc_cost_estimate
from infarctseg.balance import class_frequencies, median_frequency_weights, weighted_cross_entropy
from infarctseg.cli import main
from infarctseg.data import read_manifest
from infarctseg.gradcheck import check_function, gradient_check_stats
from infarctseg.layers import Activation, BatchNorm2d, Conv2d, ConvSpec, DepthwiseSeparable, MaxPool2d
from infarctseg.metrics import accumulate_confusion, accuracies, auto_tolerance, bfscore, iou_scores
from infarctseg.model import ASPP, AsppConfig, Decoder, SegmentationModel, desk_model_config
from infarctseg.phantom import PhantomSpec, generate_phantoms
from infarctseg.report import PER_IMAGE_COLUMNS
from infarctseg.trainer import LITERAL_E_MINUS_3, EarlyStopping, _stack, train_step

from oracles import bfscore_direct, confusion_direct, conv2d_direct
from test_metrics import metric_oracle, random_pair
from test_model import _DecoderPair, _tiny_config

REFERENCE_WEIGHTS = np.array([0.0163, 1.3923, 0.7802, 13.7678])  # background, blood, muscle, scar


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# 1 --------------------------------------------------------------------------


def literal_atrous(f, w, k):
    """h[y, x] = sum_{m, n} f[y + k(m - c), x + k(n - c)] w[m, n], zero outside, single channel."""
    h, wd = f.shape
    c = w.shape[0] // 2
    out = np.zeros_like(f)
    for y in range(h):
        for x in range(wd):
            s = 0.0
            for m in range(w.shape[0]):
                for n in range(w.shape[1]):
                    yy, xx = y + k * (m - c), x + k * (n - c)
                    if 0 <= yy < h and 0 <= xx < wd:
                        s += f[yy, xx] * w[m, n]
            out[y, x] = s
    return out


def test_criterion_1_kernel_correctness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    exact = 0
    for _ in range(100):
        n, c, o = (int(v) for v in rng.integers(1, [3, 5, 5]))
        h, w = (int(v) for v in rng.integers(1, 17, 2))
        kk = int(rng.choice([1, 3]))
        if kk == 3:
            h, w = max(h, 3), max(w, 3)
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, kk, kk))
        b = rng.standard_normal(o)
        got = K.atrous_conv2d(x, wt, b, 1, 1, "same")
        exact += np.array_equal(got, conv2d_direct(x, wt, b, 1, 1, kk // 2))
    dil_worst = 0.0
    for k in (2, 3, 6):
        for _ in range(5):
            f = rng.standard_normal((16, 16))
            wt = rng.standard_normal((3, 3))
            got = K.atrous_conv2d(f[None, None], wt[None, None], np.zeros(1), 1, k, "same")[0, 0]
            dil_worst = max(dil_worst, float(np.max(np.abs(got - literal_atrous(f, wt, k)))))
    elapsed = time.perf_counter() - t0
    ok = exact == 100 and dil_worst <= 1e-12 and elapsed < 60
    verdict(capsys, 1, ok, f"{exact}/100 bitwise equal at rate 1; dilated max |diff| {dil_worst:.1e}; {elapsed:.1f}s")


# 2 --------------------------------------------------------------------------


def _grad_cases(rng):
    yield "conv dilated", Conv2d(ConvSpec(2, 3, 3, dilation=2), rng), (1, 2, 8, 8)
    yield "conv strided", Conv2d(ConvSpec(2, 3, 3, stride=2, dilation=3), rng), (2, 2, 9, 8)
    yield "depthwise", Conv2d(ConvSpec(4, 4, 3, groups=4), rng), (1, 4, 6, 6)
    yield "dsc", DepthwiseSeparable(2, 3, rng, fused=True), (2, 2, 6, 6)
    yield "batch norm", BatchNorm2d(3), (2, 3, 4, 4)
    yield "relu", Activation("relu"), (1, 2, 5, 5)
    yield "relu6", Activation("relu6"), (1, 2, 5, 5)
    yield "max pool", MaxPool2d(), (2, 2, 8, 8)
    yield "residual block", basic_block(3, 4, 2, 1, rng), (2, 3, 6, 6)
    yield "bottleneck block", bottleneck_block(3, 2, 1, 2, rng), (2, 3, 6, 6)
    yield "inverted bottleneck", InvertedBottleneck(3, 3, 1, 2, rng), (2, 3, 6, 6)
    yield "aspp", ASPP(2, AsppConfig(1, 2), rng), (2, 2, 5, 5)
    yield "decoder", _DecoderPair(Decoder(2, 3, 2, 3, 4, rng), 2), (2, 5, 6, 6)


def test_criterion_2_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst, worst_name, skipped, probes = 0.0, "", 0, 0
    for name, layer, shape in _grad_cases(rng):
        x = rng.standard_normal(shape) * (4.0 if name == "relu6" else 1.0)
        res = gradient_check_stats(layer, x, seed=1)
        skipped += res.skipped
        probes += res.checked + res.skipped
        if res.max_error >= worst:
            worst, worst_name = res.max_error, name
    # weighted cross-entropy, checked against its analytic gradient
    scores = rng.standard_normal((2, 4, 5, 5))
    truth = rng.integers(0, 4, (2, 5, 5))
    w = np.array([0.2, 1.0, 0.7, 3.0])
    _, g = weighted_cross_entropy(scores, truth, w)
    ce = check_function(lambda s: weighted_cross_entropy(s, truth, w)[0], {"s": scores}, {"s": g})
    if ce >= worst:
        worst, worst_name = ce, "weighted cross-entropy"
    # full miniature model
    model = SegmentationModel(_tiny_config("resnet18", seed=1))
    res = gradient_check_stats(model, np.random.default_rng(2).standard_normal((2, 1, 32, 32)), seed=3, max_checks=10)
    if res.max_error >= worst:
        worst, worst_name = res.max_error, "full model"
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 300
    verdict(capsys, 2, ok, f"max relative error {worst:.2e} ({worst_name}); "
                           f"{skipped}/{probes} kink-straddling probes skipped; {elapsed:.1f}s")


# 3 --------------------------------------------------------------------------


def test_criterion_3_reference_weights(capsys):
    t0 = time.perf_counter()
    inv = 1.0 / REFERENCE_WEIGHTS
    w = median_frequency_weights(inv / inv.sum())
    err = float(np.max(np.abs(w - REFERENCE_WEIGHTS)))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 3, err <= 1e-3 and elapsed < 1,
            f"weights (scar, blood, muscle, background) = {np.round(w[[3, 1, 2, 0]], 4).tolist()}, max err {err:.1e}")


# 4 --------------------------------------------------------------------------


def test_criterion_4_dsc_cost(capsys):
    # hand arithmetic: e*D_I*(d*D_F)^2 + e*D_I*e*D_O*(d*D_F)^2
    cases = [
        ((1, 1, 32, 64, 56), 32 * 56 * 56 + 32 * 64 * 56 * 56),
        ((0.5, 1, 32, 64, 56), 16 * 56 * 56 + 16 * 32 * 56 * 56),
        ((1, 0.5, 32, 64, 56), 32 * 28 * 28 + 32 * 64 * 28 * 28),
    ]
    got = [dsc_cost_estimate(*a) for a, _ in cases]
    ok = all(g == e and float(g).is_integer() for g, (_, e) in zip(got, cases))
    verdict(capsys, 4, ok, f"costs {[int(g) for g in got]} vs hand {[e for _, e in cases]}")


# 5 --------------------------------------------------------------------------


def test_criterion_5_metric_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mism, bf_worst = 0, 0.0
    for _ in range(500):
        pred, truth = random_pair(rng)
        cm = accumulate_confusion(pred, truth)
        P = confusion_direct(truth=truth, pred=pred)
        g, a, per = accuracies(cm)
        iou, _, wi = iou_scores(cm)
        og, oa, oper, oiou, ow = metric_oracle(P)
        same = cm.P.tolist() == P and g == float(og) and abs(a - float(oa)) <= 1e-12 and abs(wi - float(ow)) <= 1e-12
        for c in range(4):
            same &= (math.isnan(per[c]) and oper[c] is None) or per[c] == float(oper[c])
            same &= (math.isnan(iou[c]) and oiou[c] is None) or iou[c] == float(oiou[c])
        mism += not same
        for tol in (1.5, "auto"):
            cls, mean = bfscore(pred, truth, tol)
            ocls, omean = bfscore_direct(pred, truth, auto_tolerance((8, 8)) if tol == "auto" else tol)
            for u, v in zip(list(cls) + [mean], list(ocls) + [omean]):
                if math.isnan(u) != math.isnan(v):
                    bf_worst = math.inf
                elif not math.isnan(u):
                    bf_worst = max(bf_worst, abs(u - v))
    tol256 = auto_tolerance((256, 256))
    elapsed = time.perf_counter() - t0
    ok = mism == 0 and bf_worst <= 1e-12 and abs(tol256 - 2.7153) <= 1e-3 and elapsed < 120
    verdict(capsys, 5, ok, f"{500 - mism}/500 exact; bfscore max |diff| {bf_worst:.1e}; "
                           f"auto tolerance(256) = {tol256:.4f}; {elapsed:.1f}s")


# 6 --------------------------------------------------------------------------


def test_criterion_6_boundary_shift(capsys):
    def canvas(shift):
        m = np.zeros((256, 256), dtype=np.uint8)
        m[100:150, 100 + shift:150 + shift] = 1
        return m

    _, s2 = bfscore(canvas(2), canvas(0), "auto", num_classes=2)
    _, s5 = bfscore(canvas(5), canvas(0), "auto", num_classes=2)
    verdict(capsys, 6, s2 == 1.0 and s5 < 1.0, f"bfscore shift 2 = {s2}, shift 5 = {s5:.4f}")


# 7 --------------------------------------------------------------------------


def test_criterion_7_training_loop(capsys):
    t0 = time.perf_counter()
    samples = generate_phantoms(PhantomSpec(size=64, seed=0), 10)
    x, y = _stack(samples)
    w = median_frequency_weights(class_frequencies([s.labels for s in samples]))
    model = SegmentationModel(desk_model_config("resnet18", seed=0))
    velocity = [np.zeros_like(p.value) for p in model.parameters()]
    first = last = None
    steps = 0
    for steps in range(1, 201):
        last = train_step(model, x, y, w, velocity, LITERAL_E_MINUS_3, 0.9)
        first = first if first is not None else last
        if last < 0.05 * first:
            break
    stop = EarlyStopping(4)
    fired = [stop.update(v) for v in (1.0, 0.9, 0.95, 0.96, 0.97, 0.98)]
    patience_ok = fired == [False] * 5 + [True] and stop.best_index == 2
    elapsed = time.perf_counter() - t0
    ok = last < 0.05 * first and patience_ok and elapsed < 600
    verdict(capsys, 7, ok, f"loss {first:.4f} -> {last:.4f} ({last / first:.3f}) after {steps} steps; "
                           f"patience sequence {'ok' if patience_ok else 'wrong'}; {elapsed:.1f}s")


# 8 and 9 --------------------------------------------------------------------


def _pipeline(root: Path, data: Path, workers: int) -> tuple[Path, Path, float]:
    run, ev = root / f"run_w{workers}", root / f"eval_w{workers}"
    t0 = time.perf_counter()
    assert main(["--workers", str(workers), "train", "--model", "mi-resnet18-ac", "--data", str(data / "manifest.json"),
                 "--out", str(run), "--seed", "0", "--lr", repr(LITERAL_E_MINUS_3)]) == 0
    assert main(["--workers", str(workers), "eval", "--checkpoint", str(run / "checkpoint.bin"),
                 "--data", str(data / "manifest.json"), "--out", str(ev)]) == 0
    return run, ev, time.perf_counter() - t0


@pytest.fixture(scope="module")
def phantom_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert main(["gen-synth", "--count", "200", "--size", "64", "--seed", "0", "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def benchmark(phantom_data):
    return _pipeline(phantom_data, phantom_data / "data", 1)


def test_criterion_8_phantom_benchmark(capsys, phantom_data, benchmark):
    _, ev, elapsed = benchmark
    rep = json.loads((ev / "report.json").read_text())
    recs = read_manifest(phantom_data / "data" / "manifest.json")
    f = class_frequencies([np.array(Image.open(phantom_data / "data" / r["label"])) for r in recs]).frequencies
    order_ok = f[0] > f[2] > f[1] > f[3]
    checks = {
        "gAcc": (rep["global_accuracy"], rep["global_accuracy"] >= 0.90),
        "scar IoU": (rep["class_iou"][3], rep["class_iou"][3] >= 0.50),
        "bfscore": (rep["bfscore"], rep["bfscore"] >= 0.60),
    }
    ok = all(v for _, v in checks.values()) and order_ok and elapsed < 1800
    detail = ", ".join(f"{k} {v:.4f}{'' if p else ' (below target)'}" for k, (v, p) in checks.items())
    verdict(capsys, 8, ok, f"{detail}; frequency order background > muscle > blood > scar "
                           f"{'holds' if order_ok else 'violated'}; {elapsed:.0f}s")


def test_criterion_9_determinism(capsys, phantom_data, benchmark):
    run1, ev1, _ = benchmark
    ref = ((run1 / "history.csv").read_bytes(), (ev1 / "report.json").read_bytes())
    results = {}
    repeat = phantom_data / "repeat"
    for workers in (1, 2, 4):
        run, ev, _ = _pipeline(repeat, phantom_data / "data", workers)
        results[workers] = ((run / "history.csv").read_bytes(), (ev / "report.json").read_bytes()) == ref
    verdict(capsys, 9, all(results.values()),
            "history.csv and report.json identical to the first run for workers "
            + ", ".join(f"{k}: {'yes' if v else 'no'}" for k, v in results.items()))


# 10 -------------------------------------------------------------------------


def test_criterion_10_report_fidelity(capsys, benchmark):
    from test_report import GOLDEN, _fixture_report
    from infarctseg.report import write_report

    _, ev, _ = benchmark
    out = ev.parent / "golden_check"
    write_report(out, "MI-ResNet18-AC", _fixture_report(), ["a.png", "b.png", "c.png"])
    golden_ok = all((out / n).read_bytes() == (GOLDEN / n).read_bytes()
                    for n in ("tables.txt", "report.json", "per_image.csv"))
    lines = (ev / "tables.txt").read_text().splitlines()
    head = lines[lines.index("Global segmentation performance") + 2]
    layout_ok = [c.strip() for c in head.split("  ") if c.strip()] == [
        "Model", "Global accuracy", "Mean Accuracy", "wIoU", "bfscore"]
    cat = lines[lines.index("Per-category performance") + 2].split()
    layout_ok &= cat == ["Category", "Scar", "Blood", "Muscle", "Back-ground"]
    conf = lines[lines.index("Confusion matrix (row-normalized)") + 2:]
    layout_ok &= [r.split()[-5] for r in conf[1:5]] == ["Scar", "Blood", "Muscle", "Background"]
    with open(ev / "per_image.csv") as fh:
        rows = list(csv.DictReader(fh))
    rep = json.loads((ev / "report.json").read_text())
    csv_ok = list(rows[0]) == PER_IMAGE_COLUMNS and len(rows) == rep["num_images"]
    ok = golden_ok and layout_ok and csv_ok
    verdict(capsys, 10, ok, f"golden files {'match' if golden_ok else 'differ'}; table layout "
                            f"{'ok' if layout_ok else 'wrong'}; per_image.csv {len(rows)} rows x {len(rows[0])} columns")
