import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spanset.corpus import CorpusSpec, generate
from spanset.intervals import TimeSpan, iou
from spanset.losses import final_set_loss
from spanset.model import ModelConfig, VidGTR, collate
from spanset.trainer import (
    AdamState, DivergenceError, TrainConfig, adamw_step, batch_indices, clip_grad_norm,
    detect_phase, read_curve, train, write_curve,
)
from spanset.autodiff import Tensor, parameters_norm


def micro_cfg(**kw):
    base = dict(d_in=8, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=2, ffn_width=16,
                proposals_per_query=3, max_queries=2, frame_count=8, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


def micro_corpus(n=12):
    return generate(CorpusSpec(n_samples=n, seed=5, T=8, d_in=8, k_max=2))


# ---------------------------------------------------------------- AdamW


def _param(v):
    return {"w": Tensor(np.array([float(v)]), requires_grad=True)}


def test_adamw_first_step_unit_gradient():
    p = _param(0.0)
    st_ = AdamState()
    adamw_step(p, {"w": np.array([1.0])}, st_, lr=1e-4, weight_decay=0.0)
    assert p["w"].data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert st_.step == 1


def test_adamw_zero_gradient_no_decay():
    p = _param(0.7)
    adamw_step(p, {"w": np.array([0.0])}, AdamState(), lr=1e-4, weight_decay=0.0)
    assert p["w"].data[0] == 0.7


def test_adamw_pure_decay():
    p = _param(1.0)
    adamw_step(p, {"w": np.array([0.0])}, AdamState(), lr=1e-4, weight_decay=1e-4)
    assert p["w"].data[0] - 1.0 == pytest.approx(-1e-8, rel=1e-6)


def test_adamw_skips_non_finite():
    p = _param(1.0)
    st_ = AdamState()
    assert not adamw_step(p, {"w": np.array([np.nan])}, st_, lr=1e-3, weight_decay=1e-4)
    assert st_.skipped == 1 and st_.step == 0 and p["w"].data[0] == 1.0


def test_adamw_matches_reference_over_steps(rng):
    # independent scalar re-derivation of the update rule
    x = rng.standard_normal(5)
    p = {"w": Tensor(x.copy(), requires_grad=True)}
    st_ = AdamState()
    m = np.zeros(5)
    v = np.zeros(5)
    ref = x.copy()
    lr, wd, b1, b2 = 3e-3, 1e-2, 0.9, 0.999
    for t in range(1, 20):
        g = rng.standard_normal(5)
        adamw_step(p, {"w": g.copy()}, st_, lr=lr, weight_decay=wd)
        for i in range(5):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            ref[i] = ref[i] - lr * mh / (math.sqrt(vh) + 1e-8) - lr * wd * ref[i]
    assert np.allclose(p["w"].data, ref, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- schedule / clip


def test_lr_schedule_two_plateaus():
    cfg = TrainConfig(total_steps=100)
    assert cfg.lr_drop_step == 70
    lrs = [cfg.lr_at(s) for s in range(100)]
    assert set(lrs[:70]) == {1e-4} and set(lrs[70:]) == {1e-4 * 0.1}
    assert lrs[70] == pytest.approx(1e-5)


def test_lr_schedule_linear_mode():
    cfg = TrainConfig(total_steps=11, lr_schedule="linear")
    assert cfg.lr_at(0) == 1e-4 and cfg.lr_at(10) == pytest.approx(1e-5)
    assert np.all(np.diff([cfg.lr_at(s) for s in range(11)]) < 0)


def test_config_validation():
    for bad in (dict(lr=0), dict(weight_decay=-1), dict(batch_size=0),
                dict(total_steps=10, lr_drop_step=11), dict(lr_schedule="cosine")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(total_steps=40, lr=3e-4, weights={"lambda_l1": 2, "lambda_iou": 1, "lambda_sg": 1})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(1e-3, 10.0))
def test_clip_bounds_norm(values, max_norm):
    grads = {"a": np.asarray(values[: len(values) // 2 + 1]), "b": np.asarray(values[len(values) // 2 + 1:])}
    before = parameters_norm(grads.values())
    ret = clip_grad_norm(grads, max_norm)
    after = parameters_norm(grads.values())
    assert ret == before
    assert after <= max_norm + 1e-9
    if before <= max_norm:
        assert after == before


# ---------------------------------------------------------------- batching


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(10, 5, s, seed=1) for s in range(2)])
    assert sorted(seen.tolist()) == list(range(10))
    wrap = batch_indices(10, 4, 2, seed=1)   # crosses the epoch boundary
    assert len(wrap) == 4
    assert np.array_equal(batch_indices(10, 4, 7, 3), batch_indices(10, 4, 7, 3))


def test_gradients_invariant_to_order_within_batch():
    c = micro_corpus(5)
    m = VidGTR(micro_cfg(dropout=0.0), seed=2).train()

    def grads(samples):
        m.zero_grad()
        out = m(collate(samples))
        final_set_loss(out, [s.targets for s in samples])[0].backward()
        return {k: p.grad.copy() for k, p in m.parameters().items()}

    a = grads(c)
    b = grads([c[3], c[0], c[4], c[2], c[1]])
    for k in a:
        assert np.allclose(a[k], b[k], rtol=1e-10, atol=1e-13), k


# ---------------------------------------------------------------- loop


def test_training_is_deterministic():
    c = micro_corpus()
    cfg = TrainConfig(total_steps=15, batch_size=4, lr=1e-3, seed=7)
    r1 = train(VidGTR(micro_cfg(), seed=1), c, cfg)
    r2 = train(VidGTR(micro_cfg(), seed=1), c, cfg)
    assert r1.curve == r2.curve
    s1, s2 = r1.model.state_dict(), r2.model.state_dict()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)


def test_resume_reproduces_uninterrupted_run():
    c = micro_corpus()
    cfg = TrainConfig(total_steps=12, batch_size=3, lr=1e-3, seed=2)
    full = train(VidGTR(micro_cfg(), seed=1), c, cfg)
    first = train(VidGTR(micro_cfg(), seed=1), c, cfg, stop_step=6)
    rest = train(first.model, c, cfg, start_step=6, optimizer=first.optimizer)
    assert first.curve + rest.curve == full.curve


def test_loss_decreases_on_small_corpus():
    c = micro_corpus(8)
    res = train(VidGTR(micro_cfg(dropout=0.0), seed=0), c, TrainConfig(total_steps=200, batch_size=8, lr=1e-3))
    first = np.mean([r["total"] for r in res.curve[:10]])
    last = np.mean([r["total"] for r in res.curve[-10:]])
    assert last < 0.7 * first


def test_divergence_guard():
    c = micro_corpus(4)
    for s in c:
        s.frames[:] = np.nan
    with pytest.raises(DivergenceError):
        train(VidGTR(micro_cfg()), c, TrainConfig(total_steps=30, batch_size=2))


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train(VidGTR(micro_cfg()), [], TrainConfig(total_steps=1))


def test_overfit_single_sample():
    sample = generate(CorpusSpec(n_samples=1, seed=0))
    cfg = ModelConfig(d_model=32, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_width=64, dropout=0.0)
    model = VidGTR(cfg, seed=0)
    train(model, sample, TrainConfig(total_steps=500, batch_size=1))
    out = model.predict(sample)[0]
    _, _, assign = final_set_loss(out, [sample[0].targets])
    spans = out.spans(0)
    ious = [iou(TimeSpan(*spans[j]), sample[0].targets[i][0]) for i, j in assign[0].pairs]
    assert len(ious) == sample[0].K and np.mean(ious) >= 0.95


# ---------------------------------------------------------------- curves / phase


def _rows(sg, span):
    return [dict(step=i, lr=1e-4, l1=span[i] / 2, giou=span[i] / 2, set_guidance=sg[i],
                 total=0.0, grad_norm=1.0) for i in range(len(sg))]


def test_phase_detects_cliff_and_rebound():
    n = 1000
    t = np.arange(n)
    sg = np.where(t < 400, 1.0, 0.1) + 0.0
    span = 1.0 - 0.0004 * t + np.where((t >= 395) & (t < 440), 0.3 * np.sin(np.pi * (t - 395) / 45), 0.0)
    rep = detect_phase(_rows(sg, span))
    assert rep.cliff and rep.sg_drop_ratio == pytest.approx(0.9, abs=0.02)
    assert abs(rep.sg_drop_step - 400) <= 50
    assert rep.span_rebound and rep.rebound_delta > 0
    assert 0 <= rep.sg_drop_step < n


def test_phase_gradual_decay_is_not_a_cliff():
    n = 1000
    t = np.arange(n)
    sg = np.exp(-t / 2000)
    span = 1.0 - 0.0004 * t
    rep = detect_phase(_rows(sg, span))
    assert not rep.cliff and not rep.span_rebound


def test_phase_short_curves():
    rep = detect_phase(_rows([1.0, 0.5], [1.0, 1.0]))
    assert not rep.cliff and rep.sg_drop_step == 0


def test_curve_csv_round_trip(tmp_path):
    rows = [dict(step=i, lr=1e-4, l1=0.1 * i, giou=1 / 3, set_guidance=2.0 ** -i, total=1e-17 * i,
                 grad_norm=float(i)) for i in range(5)]
    path = tmp_path / "curves.csv"
    write_curve(path, rows[:3])
    write_curve(path, rows[3:], append=True)
    assert read_curve(path) == rows
    assert path.read_text().splitlines()[0] == "step,lr,l1,giou,set_guidance,total,grad_norm"
