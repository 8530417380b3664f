"""Metrics, the 3x3 position grid, answer templating and heatmap export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import pnm

CELL_LABELS = (
    "top left",
    "top",
    "top right",
    "left",
    "center",
    "right",
    "bottom left",
    "bottom",
    "bottom right",
)

NORMAL_ANSWER = "No, there are no abnormalities in the image."

ANSWER_TEMPLATES = (
    "Yes, the anomaly is visible at {position}.",
    "Yes, there is an anomaly in the image; it's at the {position}.",
    "Yes, an abnormality can be seen at the {position}.",
    "Yes, the image is anomalous; the defect is located at the {position}.",
    "Yes, there is a defect at the {position} of the image.",
)

REPORT_COLUMNS = ("split", "n_images", "i_auroc", "p_auroc", "accuracy")


class MetricUndefinedError(ValueError):
    """Raised when a metric needs both classes but only one is present."""


@dataclass(frozen=True)
class GridCell:
    id: int

    def __post_init__(self):
        if not 0 <= self.id <= 8:
            raise ValueError(f"grid cell id must be in [0, 8], got {self.id}")

    @property
    def row(self) -> int:
        return self.id // 3

    @property
    def col(self) -> int:
        return self.id % 3

    @property
    def label(self) -> str:
        return CELL_LABELS[self.id]

    @classmethod
    def at(cls, row: int, col: int) -> "GridCell":
        return cls(3 * row + col)


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC undefined: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # midrank of each tie group (1-based)
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [s.size]])
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    # U = sum of positive ranks - n_pos (n_pos + 1) / 2, kept in twice-scaled integers
    twice_u = 2.0 * ranks[y].sum() - n_pos * (n_pos + 1)
    return float(twice_u / (2.0 * n_pos * n_neg))


def pixel_auroc(maps: Iterable[np.ndarray], gts: Iterable[np.ndarray]) -> float:
    """AUROC over every pixel of every image flattened together."""
    scores, labels = [], []
    for m, g in zip(maps, gts, strict=True):
        m = getattr(m, "fused", m)
        if np.shape(m) != np.shape(g):
            raise ValueError(f"map shape {np.shape(m)} != mask shape {np.shape(g)}")
        scores.append(np.ravel(m))
        labels.append(np.ravel(g) > 0.5)
    return auroc(np.concatenate(scores), np.concatenate(labels))


def accuracy(predicted: Sequence[str], truth: Sequence[str]) -> float:
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} labels")
    if not truth:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(p == t for p, t in zip(predicted, truth)) / len(truth)


# ---------------------------------------------------------------------------
# Position grid
# ---------------------------------------------------------------------------


def _bounds(n: int) -> list[tuple[int, int]]:
    return [((k * n) // 3, ((k + 1) * n) // 3) for k in range(3)]


def position_cells(gt_mask: np.ndarray, coverage_threshold: float = 0.10) -> list[GridCell]:
    """Grid cells holding at least ``coverage_threshold`` of the mask area.

    Falls back to the cell containing the mask centroid when no cell reaches
    the threshold. Returned in ascending id order.
    """
    mask = np.asarray(gt_mask) > 0.5
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    total = int(mask.sum())
    if total == 0:
        raise ValueError("position_cells: empty mask has no position")
    H, W = mask.shape
    cells = []
    for r, (r0, r1) in enumerate(_bounds(H)):
        for c, (c0, c1) in enumerate(_bounds(W)):
            if mask[r0:r1, c0:c1].sum() >= coverage_threshold * total:
                cells.append(GridCell.at(r, c))
    if cells:
        return cells
    rows, cols = np.nonzero(mask)
    cr, cc = rows.mean(), cols.mean()
    r = next(k for k, (a, b) in enumerate(_bounds(H)) if a <= cr < b or k == 2)
    c = next(k for k, (a, b) in enumerate(_bounds(W)) if a <= cc < b or k == 2)
    return [GridCell.at(r, c)]


def primary_cell(gt_mask: np.ndarray) -> GridCell:
    """The single cell with the largest mask area (lowest id on ties)."""
    mask = np.asarray(gt_mask) > 0.5
    H, W = mask.shape
    areas = [
        mask[r0:r1, c0:c1].sum() for (r0, r1) in _bounds(H) for (c0, c1) in _bounds(W)
    ]
    if max(areas) == 0:
        raise ValueError("primary_cell: empty mask has no position")
    return GridCell(int(np.argmax(areas)))


def render_answer(label: str, cells: Iterable[GridCell | int], template_seed: int = 0) -> str:
    if label == "normal":
        return NORMAL_ANSWER
    if label != "abnormal":
        raise ValueError(f"label must be 'normal' or 'abnormal', got {label!r}")
    ids = sorted({c.id if isinstance(c, GridCell) else int(c) for c in cells})
    if not ids:
        raise ValueError("abnormal answer needs at least one position cell")
    rng = np.random.default_rng(template_seed)
    template = ANSWER_TEMPLATES[int(rng.integers(len(ANSWER_TEMPLATES)))]
    return template.format(position=", ".join(CELL_LABELS[i] for i in ids))


def render_answer_with(template_index: int, cells: Iterable[GridCell | int]) -> str:
    ids = sorted({c.id if isinstance(c, GridCell) else int(c) for c in cells})
    if not ids:
        raise ValueError("abnormal answer needs at least one position cell")
    return ANSWER_TEMPLATES[template_index].format(position=", ".join(CELL_LABELS[i] for i in ids))


# ---------------------------------------------------------------------------
# Reports and heatmaps
# ---------------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


@dataclass
class MetricsReport:
    split: str
    n_images: int
    n_pixels: int
    i_auroc: float
    p_auroc: float
    accuracy: float | None  # None when no answer head is involved (few-shot path)
    position_accuracy: float | None = None

    def __post_init__(self):
        for name in ("i_auroc", "p_auroc", "accuracy", "position_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerow(
            [self.split, self.n_images]
            + [_fmt(getattr(self, c)) for c in ("i_auroc", "p_auroc", "accuracy")]
        )
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return csv_path, json_path


def heatmap_bytes(score_map: np.ndarray) -> np.ndarray:
    """Quantise a [0, 1] map to uint8 with round-half-away-from-zero."""
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {m.shape}")
    if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
        raise ValueError("heatmap values must lie in [0, 1]")
    return np.floor(255.0 * m + 0.5).astype(np.uint8)


def export_heatmap(score_map: np.ndarray, path: str | Path) -> Path:
    return pnm.write_pgm(path, heatmap_bytes(score_map))
