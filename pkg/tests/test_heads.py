import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score
from torch import nn

from pimt.encoder import EncoderConfig
from pimt.errors import ConfigurationError, MetricUndefinedError
from pimt.heads import (FinetuneConfig, FinetuneModel, MetricsReport, angular_error, classify, macro_f1, pool_mean,
                        predict_class, regress, run_finetune, summarize)
from pimt.model import BackboneConfig, build_backbone

TINY_BB = BackboneConfig(n_bands=2, n_channels=2, window_samples=40, patch_samples=10,
                         encoder=EncoderConfig(n_layers=1, model_dim=8, state_dim=4))


def _linear(d, k, weight=None, bias=None):
    head = nn.Linear(d, k)
    with torch.no_grad():
        head.weight.copy_(torch.zeros(k, d) if weight is None else weight)
        head.bias.copy_(torch.zeros(k) if bias is None else bias)
    return head


# ------------------------------------------------------------- pooling and heads

def test_pool_mean_examples():
    v = torch.randn(8)
    assert torch.allclose(pool_mean(v.expand(5, 8)), v)
    assert torch.equal(pool_mean(torch.stack([v, -v])), torch.zeros(8))
    z = np.random.default_rng(0).standard_normal((384, 64))
    oracle = np.array([sum(z[:, j]) / 384 for j in range(64)])
    np.testing.assert_allclose(pool_mean(torch.as_tensor(z)).numpy(), oracle, atol=1e-6)
    np.testing.assert_allclose(pool_mean(z), oracle, atol=1e-6)


@given(st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_pool_mean_commutes_with_token_permutation(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(2, 12, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(12, generator=g)
    torch.testing.assert_close(pool_mean(z[:, perm]), pool_mean(z))


def test_classify_tie_break_and_argmax():
    logits = classify(torch.randn(3, 10, 4), _linear(4, 3))
    assert torch.equal(logits, torch.zeros(3, 3))
    assert predict_class(logits).tolist() == [0, 0, 0]
    assert predict_class(torch.tensor([[0.1, 0.9]])).tolist() == [1]


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_argmax_shift_invariance(logits, c):
    t = torch.tensor([logits], dtype=torch.float64)
    assert predict_class(t + c).tolist() == predict_class(t).tolist() or np.isclose(
        np.sort(logits)[-1], np.sort(logits)[-2])


def test_regress_examples():
    head = _linear(4, 2, bias=torch.tensor([3.0, -2.0]))
    assert torch.allclose(regress(torch.randn(1, 7, 4), head), torch.tensor([[3.0, -2.0]]))
    assert torch.equal(regress(torch.randn(1, 7, 4), _linear(4, 2)), torch.zeros(1, 2))
    identity = _linear(2, 2, weight=torch.eye(2))
    z = torch.tensor([[[0.0, 0.0], [2.0, 2.0]]])
    assert torch.allclose(regress(z, identity), torch.tensor([[1.0, 1.0]]))


# ------------------------------------------------------------- metrics

def test_macro_f1_examples():
    assert macro_f1([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(1 / 3)
    assert macro_f1([0, 1, 2], [0, 1, 2]) == 1.0
    with pytest.raises(MetricUndefinedError):
        macro_f1([], [])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
@settings(max_examples=100, deadline=None)
def test_macro_f1_matches_reference_implementation(pairs):
    preds, labels = map(np.array, zip(*pairs))
    classes = sorted(set(preds) | set(labels))
    ref = f1_score(labels, preds, labels=classes, average="macro", zero_division=0)
    assert macro_f1(preds, labels) == pytest.approx(ref, abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40), st.randoms())
@settings(max_examples=50, deadline=None)
def test_macro_f1_permutation_invariance(pairs, rnd):
    preds, labels = map(np.array, zip(*pairs))
    order = list(range(len(preds)))
    rnd.shuffle(order)
    rename = np.array([2, 0, 1])
    base = macro_f1(preds, labels)
    assert macro_f1(preds[order], labels[order]) == pytest.approx(base)
    assert macro_f1(rename[preds], rename[labels]) == pytest.approx(base)


def test_angular_error_examples():
    assert angular_error([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert angular_error([[3.0, 4.0]], [[0.0, 0.0]]) == pytest.approx(5.0)
    assert angular_error([[0.0, 0.0], [6.0, 8.0]], [[0.0, 0.0], [0.0, 0.0]]) == pytest.approx(5.0)


@given(st.integers(0, 1000), st.floats(-50, 50), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_angular_error_translation_invariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(-15, 15, (2, 5, 2))
    shift = np.array([dx, dy])
    assert angular_error(p + shift, g + shift) == pytest.approx(angular_error(p, g), abs=1e-9)


def test_summary_statistics():
    reports = [MetricsReport("classification", 10, macro_f1=v, seed=i) for i, v in enumerate([0.9, 1.0, 0.8])]
    s = summarize(reports)
    assert s["mean"] == pytest.approx(0.9)
    assert s["std"] == pytest.approx(np.std([0.9, 1.0, 0.8]))
    assert s["seeds"] == [0, 1, 2]


# ------------------------------------------------------------- training

def test_cross_entropy_on_separable_features_converges():
    torch.manual_seed(0)
    y = torch.arange(64) % 2
    x = torch.randn(64, 5, 4)
    x[:, :, 0] += (2.0 * y - 1)[:, None]  # pooled feature 0 separates the classes with margin
    head = nn.Linear(4, 2)
    opt = torch.optim.Adam(head.parameters(), lr=0.05)
    for _ in range(200):
        loss = nn.functional.cross_entropy(classify(x, head), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.1


def _task(n=40, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    t = np.arange(40) / 200.0
    freq = np.where(y == 0, 10.0, 40.0)[:, None, None, None]
    x = np.sin(2 * np.pi * freq * t + rng.uniform(0, 6, (n, 2, 2, 1))) + 0.1 * rng.standard_normal((n, 2, 2, 40))
    return x.astype(np.float32), y


def test_finetune_learns_easy_task_and_is_deterministic():
    x, y = _task()
    cfg = FinetuneConfig(epochs=6)
    a = run_finetune(build_backbone(TINY_BB), x[:32], y[:32], x[32:], y[32:], "classification", cfg)
    b = run_finetune(build_backbone(TINY_BB), x[:32], y[:32], x[32:], y[32:], "classification", cfg)
    assert a.report.macro_f1 == b.report.macro_f1
    assert a.history == b.history
    assert a.history[-1]["train_loss"] < a.history[0]["train_loss"]


def test_frozen_and_unfrozen_reports_share_schema():
    x, y = _task(20)
    bb = build_backbone(TINY_BB)
    before = {k: v.clone() for k, v in bb.state_dict().items()}
    frozen = run_finetune(bb, x[:16], y[:16], x[16:], y[16:], cfg=FinetuneConfig(epochs=1, freeze_encoder=True))
    free = run_finetune(bb, x[:16], y[:16], x[16:], y[16:], cfg=FinetuneConfig(epochs=1))
    assert frozen.report.to_dict().keys() == free.report.to_dict().keys()
    for k, v in bb.state_dict().items():
        assert torch.equal(v, before[k])
    for k, v in frozen.model.backbone.state_dict().items():
        assert torch.equal(v, before[k])


def test_gaze_regression_path():
    x, _ = _task(20)
    y = np.random.default_rng(0).uniform(-15, 15, (20, 2))
    res = run_finetune(build_backbone(TINY_BB), x[:16], y[:16], x[16:], y[16:], "gaze", FinetuneConfig(epochs=1))
    assert res.report.task == "gaze" and res.report.angular_error_deg >= 0
    assert res.model.predict(x[16:]).shape == (4, 2)


def test_batch_size_defaults_and_validation():
    assert FinetuneConfig().batch_for("classification") == 8
    assert FinetuneConfig().batch_for("gaze") == 10
    with pytest.raises(ConfigurationError):
        FinetuneConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        FinetuneModel(build_backbone(TINY_BB), "segmentation")
    x, y = _task(8)
    with pytest.raises(ConfigurationError):
        run_finetune(build_backbone(TINY_BB), x, y.astype(float), x, y)
