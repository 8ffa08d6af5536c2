import numpy as np
import pytest
from scipy.stats import binomtest

from persam.baselines import (
    MODEL_KINDS,
    BaselineKind,
    ConfigError,
    UnsupportedOperation,
    baseline_attention,
    build,
)
from persam.data import SynthSpec, generate_dataset, split_folds
from persam.data.bags import BagSet, make_bag
from persam.data.synth import SyntheticDataset
from persam.gradsuite import tiny_bag, tiny_config
from persam.model import ModelConfig
from persam.training import OptimConfig, evaluate, select_model, train

IMAGE_KINDS = ["img_mil", "img_clinical_mil", "img_transformer", "img_clinical_transformer"]


def test_every_kind_builds():
    cfg = tiny_config()
    for kind in BaselineKind:
        assert build(kind, cfg).kind == kind.value
    assert len(MODEL_KINDS) == 6
    with pytest.raises(ConfigError):
        build("resnet", cfg)


def test_clinical_mlp_ignores_patches():
    cfg = tiny_config()
    model = build("clinical_mlp", cfg, 0).eval()
    bag = tiny_bag(cfg, 0)
    base = model(bag).y_hat.data
    bag.patches = np.random.default_rng(1).random(bag.patches.shape)[::-1]
    np.testing.assert_array_equal(model(bag).y_hat.data, base)
    with pytest.raises(UnsupportedOperation):
        baseline_attention(model, bag)


def test_clinical_mlp_widths():
    model = build("clinical_mlp", tiny_config(), 0)
    shapes = [layer.weight.shape for layer in model.net.layers]
    assert shapes == [(28, 256), (256, 512), (512, 3)]


@pytest.mark.parametrize("kind", ["img_mil", "img_transformer"])
def test_image_only_models_ignore_records(kind):
    cfg = tiny_config()
    model = build(kind, cfg, 0).eval()
    bag = tiny_bag(cfg, 0)
    base = model(bag).y_hat.data
    bag.records = [r[::-1] * 3 for r in bag.records]
    np.testing.assert_array_equal(model(bag).y_hat.data, base)


@pytest.mark.parametrize("kind", ["img_clinical_mil", "img_clinical_transformer"])
def test_multimodal_baselines_use_records(kind):
    cfg = tiny_config()
    model = build(kind, cfg, 0).eval()
    bag = tiny_bag(cfg, 0)
    base = model(bag).y_hat.data
    bag.records = [r + 1.0 for r in bag.records]
    assert not np.allclose(model(bag).y_hat.data, base)


@pytest.mark.parametrize("gated", [False, True])
@pytest.mark.parametrize("kind", IMAGE_KINDS)
def test_attention_weights(kind, gated):
    cfg = tiny_config(gated=gated)
    model = build(kind, cfg, 0).eval()
    bag = tiny_bag(cfg, 2)
    w = baseline_attention(model, bag)
    assert w.shape == (bag.L,) and w.min() >= 0.0
    if kind.endswith("mil"):
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
    perm = np.random.default_rng(3).permutation(bag.L)
    bag.patches = bag.patches[perm]
    np.testing.assert_allclose(baseline_attention(model, bag), w[perm], atol=1e-12)


def _subset(ds, typical_only=True):
    cases = [c for c in ds.cases if c.typicality == "typical" or not typical_only]
    return SyntheticDataset(ds.spec, cases)


@pytest.fixture(scope="module")
def typical_ds():
    return generate_dataset(SynthSpec(n_cases=90, atypical_fraction=0.0, pool_size=24, seed=3))


def _fit(kind, ds, cfg, optim, train_bags=2, L=16):
    labels = ds.labels()
    ids = np.array([c.case_id for c in ds.cases])
    fold = split_folds(labels, 5, np.random.default_rng(0))[0]
    pick = lambda idx: [int(ids[i]) for i in idx]
    tr = BagSet(ds, pick(fold.train), train_bags, L, 1)
    va = BagSet(ds, pick(fold.val), 1, L, 2)
    te = BagSet(ds, pick(fold.test), 2, L, 3)
    model = build(kind, cfg, 0)
    model.load_state_dict(select_model(train(model, tr, va, optim, seed=0)).state)
    return evaluate(model, te)


@pytest.mark.parametrize("kind", IMAGE_KINDS)
def test_image_baselines_learn_typical_cases(kind, typical_ds):
    ev = _fit(kind, typical_ds, ModelConfig.desk(), OptimConfig.desk(), train_bags=5)
    assert ev.accuracy > 0.9, ev.accuracy


def test_clinical_mlp_at_chance_when_records_carry_nothing(typical_ds):
    # shuffle records across cases: images still separate the classes, records do not
    rng = np.random.default_rng(11)
    perm = rng.permutation(len(typical_ds.cases))
    cases = []
    for case, donor in zip(typical_ds.cases, [typical_ds.cases[i] for i in perm]):
        c = type(case)(**{**case.__dict__, "t1": donor.t1, "t2": donor.t2})
        cases.append(c)
    ev = _fit("clinical_mlp", SyntheticDataset(typical_ds.spec, cases), ModelConfig.desk(),
              OptimConfig.clinical_mlp(epochs=200), train_bags=1)
    hits = int(np.sum(ev.case_pred == ev.case_labels))
    n = len(ev.case_ids)
    ci = binomtest(hits, n, 1 / 3).proportion_ci(0.99)
    assert ci.low <= 1 / 3 <= ci.high, (hits, n)
