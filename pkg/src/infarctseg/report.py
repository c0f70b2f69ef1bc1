"""Report emission: aligned text tables, JSON and per-image CSV.

Class indices are background 0, blood 1, muscle 2, scar 3; the tables list
classes in the display order Scar, Blood, Muscle, Background.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .metrics import MetricsReport

DISPLAY_ORDER = (3, 1, 2, 0)
DISPLAY_NAMES = {3: "Scar", 1: "Blood", 2: "Muscle", 0: "Back-ground"}
CONFUSION_NAMES = {3: "Scar", 1: "Blood", 2: "Muscle", 0: "Background"}
GLOBAL_COLUMNS = ("Model", "Global accuracy", "Mean Accuracy", "wIoU", "bfscore")


def _fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if v == 0:
        return "0"
    return f"{v:.4f}"


def _align(rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]


def global_table(reports: Mapping[str, MetricsReport]) -> list[str]:
    rows = [list(GLOBAL_COLUMNS)]
    for name, r in reports.items():
        rows.append([name, _fmt(r.g_acc), _fmt(r.a_acc), _fmt(r.w_iou), _fmt(r.bfscore)])
    return _align(rows)


def class_table(reports: Mapping[str, MetricsReport]) -> list[str]:
    rows = [["", "Category"] + [DISPLAY_NAMES[c] for c in DISPLAY_ORDER]]
    for name, r in reports.items():
        rows.append([name, "Accuracy"] + [_fmt(r.class_accuracy[c]) for c in DISPLAY_ORDER])
        rows.append(["", "bfscore"] + [_fmt(r.class_bfscore[c]) for c in DISPLAY_ORDER])
    return _align(rows)


def confusion_table(reports: Mapping[str, MetricsReport]) -> list[str]:
    """Row-normalized confusion: rows are true classes, columns predicted classes."""
    rows = [["", "True \\ Predicted"] + [CONFUSION_NAMES[c] for c in DISPLAY_ORDER]]
    for name, r in reports.items():
        norm = r.confusion.row_normalized()
        for k, a in enumerate(DISPLAY_ORDER):
            rows.append([name if k == 0 else "", CONFUSION_NAMES[a]] + [_fmt(norm[a, b]) for b in DISPLAY_ORDER])
    return _align(rows)


def format_tables(reports: Mapping[str, MetricsReport]) -> str:
    out = ["Global segmentation performance", ""]
    out += global_table(reports)
    out += ["", "Per-category performance", ""]
    out += class_table(reports)
    out += ["", "Confusion matrix (row-normalized)", ""]
    out += confusion_table(reports)
    return "\n".join(out) + "\n"


PER_IMAGE_COLUMNS = (
    ["image", "g_acc", "a_acc", "bfscore"]
    + [f"iou_{n}" for n in ("background", "blood", "muscle", "scar")]
    + [f"bfscore_{n}" for n in ("background", "blood", "muscle", "scar")]
    + ["scar_truth", "scar_true_positive", "scar_predicted"]
)


def _csv_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_per_image_csv(path: str | Path, report: MetricsReport, names: list[str] | None = None) -> None:
    names = names if names is not None else [str(i) for i in range(len(report.images))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_IMAGE_COLUMNS)
        for name, s in zip(names, report.images):
            w.writerow([name] + [_csv_value(v) for v in (
                s.g_acc, s.a_acc, s.bfscore, *s.class_iou, *s.class_bfscore,
                s.scar_truth, s.scar_true_positive, s.scar_predicted)])


def write_json(path: str | Path, payload: dict) -> None:
    payload = dict(payload)
    payload.setdefault("schema", 1)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_report(out_dir: str | Path, name: str, report: MetricsReport, image_names: list[str] | None = None) -> None:
    """report.json, tables.txt and per_image.csv for a single model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", {"model": name, **report.to_dict()})
    (out / "tables.txt").write_text(format_tables({name: report}))
    write_per_image_csv(out / "per_image.csv", report, image_names)
