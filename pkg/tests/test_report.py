import csv
import json
from pathlib import Path

import numpy as np
import pytest

from infarctseg.metrics import ConfusionMatrix, per_image_scores
from infarctseg.report import PER_IMAGE_COLUMNS, confusion_table, format_tables, write_report

GOLDEN = Path(__file__).parent / "golden"


def _fixture_report():
    rng = np.random.default_rng(42)
    truths, preds = [], []
    for _ in range(3):
        t = np.zeros((16, 16), np.uint8)
        t[4:12, 4:12] = 2
        t[6:10, 6:10] = 1
        t[4:6, 4:12] = 3
        p = t.copy()
        flip = rng.uniform(size=t.shape) < 0.1
        p[flip] = rng.integers(0, 4, int(flip.sum()))
        truths.append(t)
        preds.append(p)
    return per_image_scores(preds, truths, 1.5)


def test_golden_files(tmp_path):
    write_report(tmp_path, "MI-ResNet18-AC", _fixture_report(), ["a.png", "b.png", "c.png"])
    for name in ("tables.txt", "report.json", "per_image.csv"):
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes(), name


def test_table_structure():
    text = format_tables({"MI-ResNet50-AC": _fixture_report(), "MI-ResNet18-AC": _fixture_report()})
    lines = text.splitlines()
    header = lines[lines.index("Global segmentation performance") + 2]
    assert header.split("  ")[0] == "Model"
    assert [c.strip() for c in header.split("  ") if c.strip()] == [
        "Model", "Global accuracy", "Mean Accuracy", "wIoU", "bfscore"]
    cat = lines[lines.index("Per-category performance") + 2].split()
    assert cat == ["Category", "Scar", "Blood", "Muscle", "Back-ground"]
    body = lines[lines.index("Per-category performance") + 3:]
    assert [b.split()[-5] for b in body[:4]] == ["Accuracy", "bfscore", "Accuracy", "bfscore"]
    conf = lines[lines.index("Confusion matrix (row-normalized)") + 2:]
    assert conf[0].split()[-4:] == ["Scar", "Blood", "Muscle", "Background"]
    assert [row.split()[-5] for row in conf[1:5]] == ["Scar", "Blood", "Muscle", "Background"]


def test_confusion_row_format():
    # four-decimal cells with an exact zero printed bare; the muscle count absorbs the
    # remainder so the row sums to one
    cm = ConfusionMatrix(4)
    cm.P[3] = [0, 1180, 1379, 7441]
    cm.P[0, 0] = cm.P[1, 1] = cm.P[2, 2] = 1

    class R:
        confusion = cm

    row = confusion_table({"m": R()})[1].split()
    assert row[1:] == ["Scar", "0.7441", "0.1180", "0.1379", "0"]


def test_per_image_csv_scatter_columns(tmp_path):
    rep = _fixture_report()
    write_report(tmp_path, "m", rep)
    with open(tmp_path / "per_image.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == PER_IMAGE_COLUMNS
    assert len(rows) == len(rep.images)
    for row, s in zip(rows, rep.images):
        assert float(row["g_acc"]) == s.g_acc and float(row["bfscore"]) == s.bfscore
        assert int(row["scar_truth"]) == s.scar_truth
        assert int(row["scar_true_positive"]) <= int(row["scar_predicted"])
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["schema"] == 1 and data["bfscore"] == pytest.approx(rep.bfscore, abs=0)
