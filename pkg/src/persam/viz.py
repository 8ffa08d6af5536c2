"""Attention reports for one case: CSV tables plus 8-bit PGM patch-grid heatmaps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.tensor import no_grad
from .data.bags import make_bag
from .data.synth import SyntheticCase, SyntheticDataset


@dataclass
class AttentionReport:
    case_id: int
    record_source: str  # "real", "case:<id>" or "class:<c>"
    class_wise: np.ndarray  # (L, C)
    exploratory: np.ndarray  # (L,)
    explanatory: np.ndarray  # (L, C)
    clinical_to_patch: np.ndarray  # (M, L)
    grid: np.ndarray  # (L, 2) row, col of each patch
    grid_shape: tuple[int, int]
    y_hat: np.ndarray  # (C,)
    evidence: np.ndarray  # (L,) ground-truth mask, for reference

    @property
    def L(self) -> int:
        return self.exploratory.shape[0]

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.y_hat))

    def validate(self) -> None:
        L, C = self.class_wise.shape
        if self.explanatory.shape != (L, C) or self.exploratory.shape != (L,):
            raise ValueError("attention arrays disagree on the bag size")
        if self.clinical_to_patch.shape[1] != L or self.grid.shape != (L, 2):
            raise ValueError("clinical-to-patch rows or grid do not cover the bag")
        for name in ("class_wise", "exploratory", "explanatory", "clinical_to_patch"):
            v = getattr(self, name)
            if v.min() < 0.0 or v.max() > 1.0:
                raise ValueError(f"{name} leaves [0, 1]")


def grid_layout(n: int) -> tuple[tuple[int, int], np.ndarray]:
    """Near-square row-major layout of ``n`` patches."""
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    idx = np.arange(n)
    return (rows, cols), np.stack([idx // cols, idx % cols], axis=1)


def attention_report(model, case: SyntheticCase, records=None, source: str = "real") -> AttentionReport:
    """Run ``model`` (a PersAM) on the whole patch pool of ``case`` in eval mode."""
    if not hasattr(model, "clinical_to_patch"):
        raise TypeError(f"{getattr(model, 'kind', type(model).__name__)} does not produce attention reports")
    bag = make_bag(case, records=records)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = model(bag)
    finally:
        model.train(was_training)
    shape, grid = grid_layout(bag.L)
    att = out.attention
    return AttentionReport(
        case_id=case.case_id,
        record_source=source,
        class_wise=att.a.data.copy(),
        exploratory=att.psi.data.copy(),
        explanatory=att.a_prime.data.copy(),
        clinical_to_patch=model.clinical_to_patch(out),
        grid=grid,
        grid_shape=shape,
        y_hat=out.y_hat.data.copy(),
        evidence=bag.mask.astype(np.int64),
    )


def swap_records(ds: SyntheticDataset, case: SyntheticCase, target: str, rng: np.random.Generator):
    """Substitute records for ``case``: ``"class"`` draws one per class, a digit string names a case.

    Class-wise donors are atypical cases of that class (their records name
    it), never the case itself.
    """
    if target == "class":
        out = []
        C = int(ds.labels().max()) + 1
        for c in range(C):
            donors = [d for d in ds.cases if d.label == c and d.typicality == "atypical"
                      and d.case_id != case.case_id]
            if not donors:
                donors = [d for d in ds.cases if d.label == c and d.case_id != case.case_id]
            if not donors:
                raise KeyError(f"no donor case of class {c}")
            donor = donors[int(rng.integers(len(donors)))]
            out.append((f"class:{c}", donor.records()))
        return out
    try:
        donor = ds.by_id(int(target))
    except ValueError:
        raise KeyError(f"--swap-record must be a case id or 'class', got {target!r}") from None
    return [(f"case:{donor.case_id}", donor.records())]


# -- files ---------------------------------------------------------------

def quantize(values: np.ndarray) -> np.ndarray:
    """Attention in [0, 1] to 8-bit gray levels, round(255 * value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("heatmap values must lie in [0, 1]")
    return np.rint(255.0 * v).astype(np.uint8)


def write_pgm(path, values: np.ndarray, grid: np.ndarray, shape: tuple[int, int]) -> Path:
    """Binary PGM with one pixel per grid cell; unused cells are 0."""
    rows, cols = shape
    img = np.zeros((rows, cols), dtype=np.uint8)
    img[grid[:, 0], grid[:, 1]] = quantize(values)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(parts[4][: rows * cols], dtype=np.uint8).reshape(rows, cols)


def _columns(report: AttentionReport) -> list[str]:
    C = report.class_wise.shape[1]
    M = report.clinical_to_patch.shape[0]
    return (["patch", "row", "col", "evidence"]
            + [f"class_wise_{c}" for c in range(C)]
            + ["exploratory"]
            + [f"explanatory_{c}" for c in range(C)]
            + [f"clinical_to_patch_{m}" for m in range(M)])


def write_csv(path, report: AttentionReport) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_columns(report))
        for i in range(report.L):
            values = ([*report.class_wise[i], report.exploratory[i], *report.explanatory[i],
                       *report.clinical_to_patch[:, i]])
            w.writerow([i, int(report.grid[i, 0]), int(report.grid[i, 1]), int(report.evidence[i])]
                       + [f"{v:.6f}" for v in values])
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    return {name: body[:, j] for j, name in enumerate(header)}


def write_report(report: AttentionReport, out_dir, prefix: str) -> list[Path]:
    """CSV plus one heatmap per attention map; returns the files written."""
    report.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [write_csv(out_dir / f"{prefix}.csv", report)]
    g, shape = report.grid, report.grid_shape
    C = report.class_wise.shape[1]
    for c in range(C):
        files.append(write_pgm(out_dir / f"{prefix}_class_wise_{c}.pgm", report.class_wise[:, c], g, shape))
    files.append(write_pgm(out_dir / f"{prefix}_exploratory.pgm", report.exploratory, g, shape))
    for c in range(C):
        files.append(write_pgm(out_dir / f"{prefix}_explanatory_{c}.pgm", report.explanatory[:, c], g, shape))
    for m in range(report.clinical_to_patch.shape[0]):
        files.append(write_pgm(out_dir / f"{prefix}_clinical_to_patch_{m}.pgm",
                               report.clinical_to_patch[m], g, shape))
    return files


# -- comparisons -----------------------------------------------------------

def jensen_shannon(p, q) -> float:
    """JS divergence (natural log) between two nonnegative vectors, normalized first."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by the rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("ROC-AUC needs both positive and negative examples")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))
