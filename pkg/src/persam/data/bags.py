"""Materialized bags: what a model consumes for one forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import BagSample, SyntheticCase, SyntheticDataset, sample_bags


@dataclass
class Bag:
    case_id: int
    patches: np.ndarray  # (L, h, w, ch) float64
    records: list[np.ndarray]  # standardized clinical factors, one per m
    label: int
    mask: np.ndarray  # (L,) bool
    indices: np.ndarray  # positions in the case pool

    @property
    def L(self) -> int:
        return self.patches.shape[0]

    @property
    def flat_record(self) -> np.ndarray:
        return np.concatenate(self.records)


def augment(patches: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and rotation by a multiple of 90 degrees, per patch."""
    out = np.empty_like(patches)
    flips = rng.random(len(patches)) < 0.5
    turns = rng.integers(0, 4, size=len(patches))
    for i, p in enumerate(patches):
        if flips[i]:
            p = p[:, ::-1]
        out[i] = np.rot90(p, int(turns[i]), axes=(0, 1))
    return out


def make_bag(case: SyntheticCase, sample: BagSample | np.ndarray | None = None,
             records: list[np.ndarray] | None = None, rng: np.random.Generator | None = None,
             label: int | None = None) -> Bag:
    """Build a bag from ``case``; ``sample=None`` uses the whole pool.

    ``records`` substitutes another clinical record (already standardized).
    Passing ``rng`` turns on augmentation.
    """
    if sample is None:
        idx = np.arange(case.pool_size)
    elif isinstance(sample, BagSample):
        idx = sample.indices
    else:
        idx = np.asarray(sample)
    patches = case.patches[idx].astype(np.float64)
    if rng is not None:
        patches = augment(patches, rng)
    return Bag(
        case_id=case.case_id,
        patches=patches,
        records=records if records is not None else case.records(),
        label=case.label if label is None else label,
        mask=case.mask[idx].copy(),
        indices=np.asarray(idx),
    )


class BagSet:
    """Fixed bag draws for a list of cases; patches are cut lazily."""

    def __init__(self, dataset: SyntheticDataset, case_ids, n_bags: int, L: int, seed: int):
        rng = np.random.default_rng(seed)
        self.dataset = dataset
        self._cases = {c.case_id: c for c in dataset.cases}
        self.samples: list[BagSample] = []
        for cid in case_ids:
            self.samples.extend(sample_bags(self._cases[cid], n_bags, L, rng))

    def __len__(self) -> int:
        return len(self.samples)

    def bag(self, i: int, rng: np.random.Generator | None = None) -> Bag:
        s = self.samples[i]
        return make_bag(self._cases[s.case_id], s, rng=rng)

    def __iter__(self):
        for i in range(len(self)):
            yield self.bag(i)
