"""Synthetic multimodal MIL cases with known evidence patches.

Each case owns a pool of 16x16 RGB patches on a stained-tissue-like
background and a two-part clinical record (18-dim basic/interview factor,
10-dim blood-test factor).

Class motifs: class 0 shows a high-frequency "large cell" texture, class 1
shows ring ("follicle") structures, class 2 shows background only.

* typical cases carry strong-contrast motifs of their own class on a large
  fraction of the pool; the record's hint field names one of the *other*
  classes, so a records-only reader is right on at most the atypical half.
* atypical cases carry a few weak-contrast motifs of their own class *and* of a
  randomly chosen confuser class, so the image narrows the label to a pair;
  the record's hint field names the true class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

C = 3
MOTIF_NONE, MOTIF_TEXTURE, MOTIF_RING = 0, 1, 2
CLASS_MOTIF = (MOTIF_TEXTURE, MOTIF_RING, MOTIF_NONE)
CLASS_NAMES = ("large_cell", "follicular", "reactive")

BINARY_FIELDS = (
    "gender", "organ_lymph_node", "organ_tonsil", "organ_other", "fever", "weight_loss",
    "hepatomegaly", "splenomegaly", "swelling_none", "swelling_whole_body", "swelling_neck",
    "swelling_armpit", "swelling_deep_abdominal", "swelling_mouse_diameter", "swelling_septum",
    "swelling_other", "night_sweats",
)
# t1 layout: [age, *BINARY_FIELDS]; these three binary fields carry the class hint
HINT_FIELDS = ("fever", "weight_loss", "hepatomegaly")
HINT_INDEX = tuple(1 + BINARY_FIELDS.index(f) for f in HINT_FIELDS)
BLOOD_FIELDS = ("rbc", "wbc", "plt", "ldh", "stab", "seg", "eosino", "baso", "mono", "lympho")

AGE_MEAN = (58.0, 56.0, 53.0)
AGE_STD = 14.0
BLOOD_MEAN = np.array([4.5, 6.5, 250.0, 230.0, 3.0, 55.0, 3.0, 0.5, 6.0, 32.0])
BLOOD_STD = np.array([0.5, 2.0, 60.0, 80.0, 1.5, 10.0, 1.5, 0.3, 2.0, 9.0])
LDH_SHIFT = (25.0, 0.0, -15.0)
BINARY_P = 0.3
BINARY_SHIFT = 0.05  # class-dependent tilt of the non-hint binary fields

BASE_COLOR = np.array([0.86, 0.62, 0.76])
# hematoxylin-like (blue-purple) for the large-cell texture, eosin-like (pink) for rings
MOTIF_STAIN = {MOTIF_TEXTURE: np.array([-0.55, -0.6, -0.25]), MOTIF_RING: np.array([-0.1, -0.55, -0.1])}


class InsufficientPatchesError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class SynthSpec:
    """Dataset-level generator settings."""

    n_cases: int = 300
    atypical_fraction: float = 0.5
    pool_size: int = 40
    patch_size: int = 16
    typical_evidence_fraction: float = 0.6
    atypical_evidence_fraction: float = 0.1  # per motif; evidence (own motif) stays <= 10%
    strong_contrast: float = 0.5
    weak_contrast: float = 0.3
    noise_std: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.typical_evidence_fraction < 0.3:
            raise ValueError("typical cases need at least 30% evidence patches")
        if self.atypical_evidence_fraction > 0.1 + 1e-12:
            raise ValueError("atypical weak evidence must stay within 10% of the pool")
        if not 0.0 <= self.atypical_fraction <= 1.0:
            raise ValueError("atypical_fraction must lie in [0, 1]")
        if self.n_cases < 1 or self.pool_size < 1:
            raise ValueError("n_cases and pool_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def grid(self) -> tuple[int, int]:
        cols = math.ceil(math.sqrt(self.pool_size))
        return math.ceil(self.pool_size / cols), cols


@dataclass
class SyntheticCase:
    case_id: int
    label: int
    typicality: str  # "typical" | "atypical"
    patches: np.ndarray  # (pool, h, w, 3) float32
    t1: np.ndarray  # (18,) float32: age then 17 binary fields
    t2: np.ndarray  # (10,) float32 blood tests
    mask: np.ndarray  # (pool,) bool: true-class evidence
    kinds: np.ndarray  # (pool,) uint8 motif drawn on each patch
    confuser: int = -1  # atypical only: the other class whose motif is shown
    seed: int = 0

    @property
    def pool_size(self) -> int:
        return self.patches.shape[0]

    @property
    def hint(self) -> int:
        return int(np.argmax(self.t1[list(HINT_INDEX)]))

    @property
    def one_hot(self) -> np.ndarray:
        y = np.zeros(C)
        y[self.label] = 1.0
        return y

    def records(self) -> list[np.ndarray]:
        """Standardized factor vectors as the networks consume them."""
        return standardize_record(self.t1, self.t2)


@dataclass
class BagSample:
    case_id: int
    indices: np.ndarray
    label: int


@dataclass
class Fold:
    train: list[int]
    val: list[int]
    test: list[int]


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    cases: list[SyntheticCase] = field(default_factory=list)

    def by_id(self, case_id: int) -> SyntheticCase:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(f"unknown case id {case_id}")

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.cases])


def standardize_record(t1: np.ndarray, t2: np.ndarray) -> list[np.ndarray]:
    r1 = np.asarray(t1, dtype=np.float64).copy()
    r1[0] = (r1[0] - 55.0) / 15.0
    r2 = (np.asarray(t2, dtype=np.float64) - BLOOD_MEAN) / BLOOD_STD
    return [r1, r2]


def case_seed(spec_seed: int, case_id: int) -> int:
    return int(np.random.SeedSequence([spec_seed, case_id]).generate_state(1)[0])


# -- rendering ------------------------------------------------------------

def _background(rng: np.random.Generator, s: int, noise: float) -> np.ndarray:
    coarse = rng.normal(0.0, 0.03, size=(s // 4, s // 4, 1))
    blotch = np.kron(coarse, np.ones((4, 4, 1)))
    img = BASE_COLOR + blotch + rng.normal(0.0, noise, size=(s, s, 3))
    return img


def _texture(rng: np.random.Generator, s: int) -> np.ndarray:
    return (rng.random((s, s)) < 0.5).astype(np.float64)


def _ring(rng: np.random.Generator, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    cy, cx = s / 2 + rng.uniform(-1.5, 1.5, size=2)
    r = rng.uniform(0.28 * s, 0.38 * s)
    d = np.hypot(yy - cy, xx - cx)
    return np.clip(1.0 - np.abs(d - r) / 1.3, 0.0, 1.0)


def render_patch(rng: np.random.Generator, kind: int, contrast: float, spec: SynthSpec) -> np.ndarray:
    s = spec.patch_size
    img = _background(rng, s, spec.noise_std)
    if kind == MOTIF_TEXTURE:
        img = img + contrast * _texture(rng, s)[..., None] * MOTIF_STAIN[kind]
    elif kind == MOTIF_RING:
        img = img + contrast * _ring(rng, s)[..., None] * MOTIF_STAIN[kind]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- records --------------------------------------------------------------

def _record(rng: np.random.Generator, label: int, hint: int) -> tuple[np.ndarray, np.ndarray]:
    t1 = np.zeros(18, dtype=np.float32)
    t1[0] = max(0, round(rng.normal(AGE_MEAN[label], AGE_STD)))
    p = np.full(len(BINARY_FIELDS), BINARY_P)
    p[1::3] += BINARY_SHIFT * (label - 1)
    t1[1:] = (rng.random(len(BINARY_FIELDS)) < p).astype(np.float32)
    t1[list(HINT_INDEX)] = 0.0
    t1[HINT_INDEX[hint]] = 1.0
    t2 = rng.normal(BLOOD_MEAN, BLOOD_STD)
    t2[3] += LDH_SHIFT[label]
    t2[4:] = np.clip(t2[4:], 0.0, 100.0)
    t2[:4] = np.maximum(t2[:4], 0.0)
    return t1, t2.astype(np.float32)


# -- generation -----------------------------------------------------------

def generate_case(label: int, typicality: str, seed: int, spec: SynthSpec | None = None,
                  case_id: int = 0) -> SyntheticCase:
    """Draw one case of class ``label``; fully determined by ``seed`` and ``spec``."""
    spec = spec or SynthSpec()
    if not 0 <= label < C:
        raise ValueError(f"class {label} outside [0, {C})")
    if typicality not in ("typical", "atypical"):
        raise ValueError(f"typicality must be 'typical' or 'atypical', got {typicality!r}")
    rng = np.random.default_rng(seed)
    n = spec.pool_size
    kinds = np.full(n, MOTIF_NONE, dtype=np.uint8)
    strong = np.zeros(n, dtype=bool)
    mask = np.zeros(n, dtype=bool)
    order = rng.permutation(n)
    confuser = -1

    if typicality == "typical":
        motif = CLASS_MOTIF[label]
        if motif != MOTIF_NONE:
            k = max(1, round(spec.typical_evidence_fraction * n))
            slots = order[:k]
            kinds[slots] = motif
            strong[slots] = True
            mask[slots] = True
        hint = int(rng.choice([c for c in range(C) if c != label]))
    else:
        confuser = int(rng.choice([c for c in range(C) if c != label]))
        k = max(1, round(spec.atypical_evidence_fraction * n))
        own, other = order[:k], order[k:2 * k]
        if CLASS_MOTIF[label] != MOTIF_NONE:
            kinds[own] = CLASS_MOTIF[label]
            mask[own] = True
        if CLASS_MOTIF[confuser] != MOTIF_NONE:
            kinds[other] = CLASS_MOTIF[confuser]
        hint = label

    patches = np.stack([
        render_patch(rng, int(kinds[i]), spec.strong_contrast if strong[i] else spec.weak_contrast, spec)
        for i in range(n)
    ])
    t1, t2 = _record(rng, label, hint)
    return SyntheticCase(case_id, label, typicality, patches, t1, t2, mask, kinds, confuser, seed)


def generate_dataset(spec: SynthSpec) -> SyntheticDataset:
    """Balanced classes; the atypical subset is chosen per class so strata stay balanced too."""
    # own stream so the stratum choice cannot line up with fold shuffles seeded alike
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    labels = np.arange(spec.n_cases) % C
    atypical = np.zeros(spec.n_cases, dtype=bool)
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        k = round(spec.atypical_fraction * len(idx))
        atypical[rng.permutation(idx)[:k]] = True
    cases = [
        generate_case(int(labels[i]), "atypical" if atypical[i] else "typical",
                      case_seed(spec.seed, i), spec, case_id=i)
        for i in range(spec.n_cases)
    ]
    return SyntheticDataset(spec, cases)


def with_hint(case: SyntheticCase, hint: int) -> tuple[np.ndarray, int]:
    """Record ``t1`` with the hint bits pointing at ``hint``, and the resulting label.

    Only defined for atypical cases and hints inside the pair their image shows.
    """
    if case.typicality != "atypical":
        raise ValueError("hint edits are only meaningful for atypical cases")
    if hint not in (case.label, case.confuser):
        raise ValueError(f"hint {hint} is not one of the classes the image supports "
                         f"({case.label}, {case.confuser})")
    t1 = case.t1.copy()
    t1[list(HINT_INDEX)] = 0.0
    t1[HINT_INDEX[hint]] = 1.0
    return t1, hint


# -- bags and folds -------------------------------------------------------

MAX_BAGS = 30


def sample_bags(case: SyntheticCase, n_bags: int, L: int, rng: np.random.Generator,
                max_bags: int = MAX_BAGS) -> list[BagSample]:
    if not 1 <= n_bags <= max_bags:
        raise ValueError(f"n_bags={n_bags} outside [1, {max_bags}]")
    if case.pool_size < L:
        raise InsufficientPatchesError(f"case {case.case_id} has {case.pool_size} patches, bag needs {L}")
    return [BagSample(case.case_id, np.sort(rng.choice(case.pool_size, size=L, replace=False)), case.label)
            for _ in range(n_bags)]


def split_folds(labels, k: int = 5, rng: np.random.Generator | None = None) -> list[Fold]:
    """Stratified 3:1:1 train/val/test splits for ``k``-fold cross-validation.

    Each class is shuffled and cut into ``k`` chunks; fold ``f`` tests on chunk
    ``f``, validates on chunk ``f + 1`` and trains on the rest. With ``k=1``
    the single fold trains, validates and tests on everything.
    """
    labels = np.asarray(labels)
    rng = rng or np.random.default_rng(0)
    chunks = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise StratificationError(f"class {c} has {len(idx)} cases, fewer than k={k}")
        idx = rng.permutation(idx)
        for f, part in enumerate(np.array_split(idx, k)):
            chunks[f].extend(int(i) for i in part)
    if k == 1:
        everything = sorted(chunks[0])
        return [Fold(everything, everything, everything)]
    folds = []
    for f in range(k):
        v = (f + 1) % k
        train = sorted(i for j in range(k) if j not in (f, v) for i in chunks[j])
        folds.append(Fold(train, sorted(chunks[v]), sorted(chunks[f])))
    return folds


# -- ground-truth oracles -------------------------------------------------

def image_only_bayes_accuracy(n_classes: int = C) -> float:
    """Accuracy ceiling of any image-only classifier on the atypical stratum.

    Labels are uniform and the confuser is uniform over the other classes; the
    image reveals exactly the unordered pair {label, confuser}. Each pair has
    two equally likely labels, so the best guess is right half the time.
    """
    prior = np.full(n_classes, 1.0 / n_classes)
    confuser = (np.ones((n_classes, n_classes)) - np.eye(n_classes)) / (n_classes - 1)
    acc = 0.0
    for i in range(n_classes):
        for j in range(i + 1, n_classes):
            # joint mass of (label, image pair {i, j})
            acc += max(prior[i] * confuser[i, j], prior[j] * confuser[j, i])
    return acc


def motif_signature(case: SyntheticCase) -> tuple[int, ...]:
    """The set of motifs a perfect image reader would see in the pool."""
    return tuple(sorted(set(int(k) for k in case.kinds) - {MOTIF_NONE}))


def mask_oracle(case: SyntheticCase) -> int:
    """Class implied by the mask-selected patches alone (typical cases)."""
    sel = set(int(k) for k in case.kinds[case.mask])
    if not sel:
        return CLASS_MOTIF.index(MOTIF_NONE)
    (motif,) = sel
    return CLASS_MOTIF.index(motif)
