import numpy as np
import pytest
from scipy import stats

from stimpute import trainer
from stimpute.diffcore import Tensor, ops
from stimpute.model import GraphBatch, ModelConfig, checksum, forward, init_embeddings, init_shared
from stimpute.trainer import (PUBLISHED_GRID, Adam, FineTuneConfig, Patient, TrainConfig,
                              TrainingDiverged, WalkSpec, cosine_lr, draw_walk_spec,
                              evaluation_mask, expand_grid, fine_tune, hyper_search,
                              predict_quantiles, sample_training_mask, temporal_split,
                              train_model, validation_mae, walk_mask)

SMALL = ModelConfig(d=4, q=2, r=2, enc_hidden=8, dec_hidden=8)


def toy_patient(mesh, frames=40, seed=0, pid="p0"):
    """Travelling wave on the mesh, values in [0, 1]."""
    t = np.arange(frames) / 70.0
    phase = 3.0 * mesh.vertices[:, :1] + 2 * np.pi * 4.0 * t[None]
    rng = np.random.default_rng(seed)
    return Patient(pid, mesh, 0.5 + 0.45 * np.sin(phase + rng.uniform(0, 6)), 70.0)


def quick(**kw):
    base = dict(batch_size=4, window=5, epochs=3, iterations_per_epoch=4, learning_rate=1e-2,
                area_range=(0.1, 0.5), dwell_range=(0.2, 0.5), seed=0)
    return TrainConfig(**{**base, **kw})


# --------------------------------------------------------------------------- configs

@pytest.mark.parametrize("bad", [dict(area_range=(0.01, 0.2)), dict(area_range=(0.1, 0.6)),
                                 dict(dwell_range=(0.1, 1.0)), dict(dwell_range=(1.0, 5.0)),
                                 dict(overlap_range=(0, 4)), dict(window=1), dict(batch_size=0),
                                 dict(scheduler="step")])
def test_train_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_json_strict():
    cfg = quick()
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_json({"epochs": 2, "momentum": 0.9})
    with pytest.raises(ValueError):
        FineTuneConfig.from_json({"lr": 0.1})
    with pytest.raises(ValueError):
        FineTuneConfig(learning_rate=0.0)


# --------------------------------------------------------------------------- masks

def test_full_area_mask_is_all_ones(sphere42):
    p = toy_patient(sphere42)
    mask, spec = sample_training_mask(p, TrainConfig(area_range=(1.0, 1.0)), 3)
    assert spec.area == 1.0 and mask.all()


def test_mask_deterministic(sphere42):
    p = toy_patient(sphere42, frames=140)
    a, sa = sample_training_mask(p, TrainConfig(), 11)
    b, sb = sample_training_mask(p, TrainConfig(), 11)
    assert sa == sb and np.array_equal(a, b)
    assert a.shape == (42, 140) and set(np.unique(a)) <= {0.0, 1.0}


def test_area_draws_uniform():
    rng = np.random.default_rng(0)
    cfg = TrainConfig()
    draws = [draw_walk_spec(cfg, rng) for _ in range(10_000)]
    areas = np.array([d.area for d in draws])
    lo, hi = cfg.area_range
    assert stats.kstest(areas, "uniform", args=(lo, hi - lo)).pvalue > 0.01
    assert all(0.2 <= d.dwell <= 4.0 and d.overlap in (0, 1, 2, 3) for d in draws)
    assert set(d.overlap for d in draws) == {0, 1, 2, 3}


def test_evaluation_mask_fixed(sphere162):
    p = toy_patient(sphere162, frames=140)
    m = evaluation_mask(p)
    assert np.array_equal(m, evaluation_mask(p))
    frac = m.mean(axis=0)
    assert 0.05 < frac.mean() < 0.2  # about a tenth of the atrium seen at a time


# --------------------------------------------------------------------------- optimiser

def test_adam_first_step_is_learning_rate():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = Adam([x], 0.1)
    opt.step({id(x): np.array([4.0, -0.01, 0.0])})
    np.testing.assert_allclose(x.data, [0.9, -1.9, 0.5], atol=1e-6)


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    opt = Adam([x], 0.05)
    for _ in range(2000):
        opt.step({id(x): 2 * x.data})
    assert np.abs(x.data).max() < 1e-3


def test_cosine_schedule():
    assert cosine_lr(0, 11, 1.0, 0.1) == pytest.approx(1.0)
    assert cosine_lr(5, 11, 1.0, 0.1) == pytest.approx(0.55)
    assert cosine_lr(10, 11, 1.0, 0.1) == pytest.approx(0.1)
    lrs = [cosine_lr(s, 50, 1.0, 0.0) for s in range(50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# --------------------------------------------------------------------------- inference

def test_stitching_averages_windows(ico):
    p = toy_patient(ico, frames=13)
    params = init_shared(SMALL, 0)
    emb = init_embeddings(SMALL, 12, 0)
    mask = (np.random.default_rng(0).uniform(size=(12, 13)) < 0.5).astype(float)
    got = predict_quantiles(params, emb, ico, p.values, mask, SMALL, window=6, stride=3)
    acc, hits = np.zeros((12, 13, 3)), np.zeros(13)
    for s in (0, 3, 6, 7):
        out = forward(params, [emb], GraphBatch.from_meshes([ico]), (p.values * mask)[:, s:s + 6].T,
                      mask[:, s:s + 6].T, SMALL)
        acc[:, s:s + 6] += out.Y.data.transpose(1, 0, 2)
        hits[s:s + 6] += 1
    np.testing.assert_allclose(got, acc / hits[None, :, None], rtol=1e-12)


# --------------------------------------------------------------------------- training

def test_eval_mask_is_whole_field(ico, monkeypatch):
    seen = []
    real = trainer.combined_loss

    def spy(out, target, eval_mask, config):
        seen.append(eval_mask.copy())
        return real(out, target, eval_mask, config)

    monkeypatch.setattr(trainer, "combined_loss", spy)
    train_model([toy_patient(ico)], SMALL, quick(epochs=1, iterations_per_epoch=2))
    assert seen and all(e.all() for e in seen)
    # the probe is meaningful: hiding entries from the loss changes its value
    params, emb = init_shared(SMALL, 0), init_embeddings(SMALL, 12, 0)
    X = toy_patient(ico).values[:, :5].T
    out = forward(params, [emb], GraphBatch.from_meshes([ico]), X, np.ones_like(X), SMALL)
    flipped = np.ones_like(X)
    flipped[:, :6] = 0
    assert real(out, X, np.ones_like(X), SMALL).item() != real(out, X, flipped, SMALL).item()


def test_divergence_reports_context(ico, monkeypatch):
    monkeypatch.setattr(trainer, "combined_loss",
                        lambda *a: ops.mul(ops.mean(a[0].Y), float("nan")))
    with pytest.raises(TrainingDiverged) as err:
        train_model([toy_patient(ico)], SMALL, quick())
    assert (err.value.epoch, err.value.iteration) == (0, 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_loss_decreases(ico, seed):
    res = train_model([toy_patient(ico, seed=seed)], SMALL,
                      quick(epochs=5, iterations_per_epoch=8, area_range=(1.0, 1.0), seed=seed))
    losses = [r["train_loss"] for r in res.history]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_overfit_single_patient(ico):
    p = toy_patient(ico, frames=30)
    cfg = quick(epochs=200, iterations_per_epoch=5, learning_rate=1e-2, area_range=(1.0, 1.0),
                patience=200)
    res = train_model([p], SMALL, cfg)
    ones = np.ones_like(p.values)
    q = predict_quantiles(res.params, res.embeddings["p0"], ico, p.values, ones, SMALL, 5)
    assert np.abs(q[..., SMALL.median_index] - p.values).mean() < 0.02


def test_training_is_deterministic(ico):
    cfg = quick(epochs=2)
    a = train_model([toy_patient(ico)], SMALL, cfg)
    b = train_model([toy_patient(ico)], SMALL, cfg)
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]
    assert checksum(a.params) == checksum(b.params)


def test_early_stopping_restores_best(ico):
    train = [toy_patient(ico, 140, 0, "a")]
    val = [toy_patient(ico, 140, 1, "b")]
    res = train_model(train, SMALL, quick(epochs=6, learning_rate=0.05, patience=3), validation=val)
    maes = [r["val_mae"] for r in res.history]
    assert res.best_epoch == int(np.argmin(maes))
    again = validation_mae(res.params, res.embeddings, val, SMALL, 5, 210)
    assert again == pytest.approx(min(maes), rel=1e-12)
    assert "epoch,train_loss,val_mae" in res.history_csv()


# --------------------------------------------------------------------------- fine-tuning

@pytest.fixture(scope="module")
def pretrained():
    from stimpute.geometry import build_icosphere
    mesh = build_icosphere(1)
    p = toy_patient(mesh, frames=70)
    res = train_model([p], SMALL, quick(epochs=8, iterations_per_epoch=6, window=10))
    return mesh, p, res


FT = FineTuneConfig(batch_size=4, window=10, max_epochs=4, iterations_per_epoch=3, patience=10)


def _walk(mesh, frames):
    return walk_mask(mesh, frames, 70.0, WalkSpec(0.25, 0.2, 0), 5, fixed=True)


def test_fine_tune_freezes_shared(pretrained):
    mesh, p, res = pretrained
    before = checksum(res.params)
    ft = fine_tune(res.params, SMALL, mesh, p.values, _walk(mesh, 70), FT, truth=p.values)
    assert checksum(res.params) == before
    assert ft.quantiles.shape == (42, 70, 3)
    assert "hidden_mae" in ft.history[0] and ft.history[0]["epoch"] == -1


def test_fine_tune_returns_best(pretrained):
    mesh, p, res = pretrained
    ft = fine_tune(res.params, SMALL, mesh, p.values, _walk(mesh, 70), FT)
    losses = [h["observed_loss"] for h in ft.history]
    assert ft.best_epoch == ft.history[int(np.argmin(losses))]["epoch"]
    q = predict_quantiles(res.params, ft.embeddings, mesh, p.values * _walk(mesh, 70),
                          _walk(mesh, 70), SMALL, 10)
    np.testing.assert_allclose(q, ft.quantiles)


def test_fine_tune_ignores_never_observed(pretrained, rng):
    mesh, p, res = pretrained
    mask = walk_mask(mesh, 70, 70.0, WalkSpec(0.25, 0.5, 0), 5, fixed=True)  # two of four patches
    never = mask.sum(axis=1) == 0
    assert never.any()
    noisy = p.values.copy()
    noisy[never] = rng.uniform(-5, 5, noisy[never].shape)
    a = fine_tune(res.params, SMALL, mesh, p.values, mask, FT)
    b = fine_tune(res.params, SMALL, mesh, noisy, mask, FT)
    assert np.array_equal(a.quantiles, b.quantiles)


def test_fine_tune_self_consistency(pretrained):
    mesh, p, res = pretrained
    mask = _walk(mesh, 70)
    q = predict_quantiles(res.params, res.embeddings["p0"], mesh, p.values * mask, mask, SMALL, 10)
    trained = ops.pinball(Tensor(q), p.values, mask, SMALL.quantiles).item()
    cfg = FineTuneConfig(batch_size=4, window=10, max_epochs=15, iterations_per_epoch=5)
    ft = fine_tune(res.params, SMALL, mesh, p.values, mask, cfg)
    assert min(h["observed_loss"] for h in ft.history) <= 1.1 * trained


def test_fine_tune_needs_observation(pretrained):
    mesh, p, res = pretrained
    with pytest.raises(ValueError):
        fine_tune(res.params, SMALL, mesh, p.values, np.zeros_like(p.values), FT)


# --------------------------------------------------------------------------- search

def test_temporal_split_sizes(ico):
    parts = temporal_split(toy_patient(ico, frames=100))
    assert [q.n_frames for q in parts] == [85, 5, 10]
    np.testing.assert_array_equal(np.concatenate([q.values for q in parts], 1),
                                  toy_patient(ico, frames=100).values)


def test_published_point_in_grid():
    point = dict(batch_size=16, window=40, d=64, q=64, r=16, layers=1, width=1024)
    assert all(point[k] in PUBLISHED_GRID[k] for k in point)
    grid = expand_grid({k: [v] for k, v in point.items()})
    (mc, tc), = grid
    assert (tc.batch_size, tc.window, mc.d, mc.q, mc.r, mc.layers) == (16, 40, 64, 64, 16, 1)
    assert mc.enc_hidden == mc.dec_hidden == 1024


def test_search_single_candidate_unconditional(ico):
    only = expand_grid({"d": [4]})
    assert hyper_search([toy_patient(ico)], only).best is only[0]


def test_search_tie_goes_to_fewer_parameters(ico, monkeypatch):
    monkeypatch.setattr(trainer, "validation_mae", lambda *a, **k: 0.25)
    grid = expand_grid({"d": [6, 3]}, SMALL, quick(epochs=1, iterations_per_epoch=1))
    out = hyper_search([toy_patient(ico, frames=80)], grid)
    assert out.best[0].d == 3 and len(out.table) == 2


def test_search_prefers_lower_mae(ico, monkeypatch):
    monkeypatch.setattr(trainer, "validation_mae",
                        lambda params, emb, pts, mc, *a, **k: 0.3 if mc.d == 3 else 0.1)
    grid = expand_grid({"d": [3, 6]}, SMALL, quick(epochs=1, iterations_per_epoch=1))
    assert hyper_search([toy_patient(ico, frames=80)], grid).best[0].d == 6
