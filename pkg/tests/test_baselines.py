import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stimpute.baselines import (empty_embeddings, mean_impute, mf_fit, mf_impute, rnn_impute,
                                train_univariate, univariate_cell_step, univariate_config)
from stimpute.diffcore import Tensor
from stimpute.model import GraphBatch, init_shared
from stimpute.model.layers import grnn_cell_step
from stimpute.trainer import Patient, TrainConfig


# --------------------------------------------------------------------------- mean

def test_mean_fully_observed_identity(rng):
    x = rng.uniform(size=(3, 7))
    assert np.array_equal(mean_impute(x, np.ones_like(x)), x)


def test_mean_hand_cases():
    x = np.array([[0.4, 0.9, 0.9], [0.2, 0.7, 0.6]])
    m = np.array([[1, 0, 0], [1, 0, 1]], float)
    out = mean_impute(x, m)
    np.testing.assert_allclose(out, [[0.4, 0.4, 0.4], [0.2, 0.4, 0.6]])


def test_mean_unobserved_node_uses_global_mean():
    x = np.array([[0.2, 0.4], [0.9, 0.9]])
    out = mean_impute(x, np.array([[1, 1], [0, 0]], float))
    np.testing.assert_allclose(out[1], [0.3, 0.3])
    with pytest.raises(ValueError):
        mean_impute(x, np.zeros_like(x))


@given(arrays(np.float64, (4, 6), elements=st.floats(0, 1)),
       arrays(np.bool_, (4, 6)))
@settings(max_examples=50, deadline=None)
def test_mean_idempotent_and_keeps_observed(x, seen):
    if not seen.any():
        return
    m = seen.astype(float)
    once = mean_impute(x, m)
    assert np.array_equal(once[seen], x[seen])
    np.testing.assert_allclose(mean_impute(once, m), once, rtol=0, atol=1e-15)


# --------------------------------------------------------------------------- matrix factorisation

def test_mf_rank_one_exact(rng):
    x = np.outer(rng.uniform(0.2, 1, 12), rng.uniform(0.2, 1, 30))
    state = mf_fit(x, np.ones_like(x), rank=1, iterations=200, ridge=1e-12)
    assert np.abs(state.reconstruction() - x).max() < 1e-6


def test_mf_objective_monotone(rng):
    x = rng.uniform(size=(15, 40))
    m = (rng.uniform(size=x.shape) < 0.5).astype(float)
    state = mf_fit(x, m, rank=3, iterations=20)
    obj = np.array(state.objective)
    assert len(obj) == 40
    assert np.all(np.diff(obj) <= 1e-12 * obj[:-1])


def test_mf_keeps_observed_and_clips(rng):
    x = rng.uniform(size=(10, 25))
    m = (rng.uniform(size=x.shape) < 0.6).astype(float)
    out = mf_impute(x, m, rank=2)
    assert np.array_equal(out[m > 0], x[m > 0])
    assert out.min() >= 0 and out.max() <= 1


def test_mf_errors_and_warning(rng, caplog):
    x = rng.uniform(size=(4, 5))
    with pytest.raises(ValueError):
        mf_impute(x, np.zeros_like(x))
    with pytest.raises(ValueError):
        mf_fit(x, np.ones_like(x), rank=0)
    with caplog.at_level(logging.WARNING):
        mf_fit(x, np.ones_like(x), rank=10, iterations=2)
    assert "observed entries" in caplog.text


def test_mf_deterministic(rng):
    x = rng.uniform(size=(6, 9))
    m = (rng.uniform(size=x.shape) < 0.7).astype(float)
    assert np.array_equal(mf_impute(x, m, rank=2, seed=3), mf_impute(x, m, rank=2, seed=3))


# --------------------------------------------------------------------------- univariate RNN

def test_univariate_cell_equals_empty_graph_cell(rng):
    config = univariate_config(d=3)
    params = init_shared(config, 4)
    for v in params.values():
        v.data[...] = rng.normal(0, 0.6, v.data.shape)
    n = 5
    graph = GraphBatch([np.zeros((n, n))], use_graph=False)
    h, z = Tensor(rng.normal(size=(n, 3))), Tensor(rng.normal(size=(n, 3)))
    a = grnn_cell_step(h, z, graph, params, "fwd/l0")
    b = univariate_cell_step(h, z, params, "fwd/l0")
    np.testing.assert_allclose(a.data, b.data, rtol=1e-13, atol=1e-15)


def test_univariate_config_rejects_graph_terms(ico):
    from stimpute.model import ModelConfig
    p = Patient("a", ico, np.full((12, 30), 0.5))
    with pytest.raises(ValueError):
        train_univariate([p], TrainConfig(window=5), model_config=ModelConfig(d=2))


def _constant_run(ico, bidirectional):
    p = Patient("a", ico, np.full((12, 40), 0.35))
    cfg = TrainConfig(batch_size=4, window=5, epochs=40, iterations_per_epoch=5, learning_rate=1e-2,
                      area_range=(0.1, 0.5), dwell_range=(0.2, 0.3), patience=40)
    res = train_univariate([p], cfg, bidirectional, univariate_config(bidirectional, 4, 8, 8))
    mask = np.zeros_like(p.values)
    mask[:, ::4] = 1.0
    return res, p, rnn_impute(res, ico, p.values, mask, 5), mask


def test_rnn_memorises_constant(ico):
    res, p, out, mask = _constant_run(ico, True)
    assert np.array_equal(out[mask > 0], p.values[mask > 0])
    assert np.abs(out - p.values)[mask == 0].mean() < 0.02
    assert empty_embeddings(12).V.shape == (12, 0)


def test_bidirectional_report(ico, capsys):
    maes = {}
    for flag in (False, True):
        _, p, out, mask = _constant_run(ico, flag)
        maes[flag] = float(np.abs(out - p.values)[mask == 0].mean())
    with capsys.disabled():
        print(f"\nunivariate RNN MAE {maes[False]:.4f}, Bi-RNN MAE {maes[True]:.4f}")
