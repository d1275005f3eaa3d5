import dataclasses
import itertools
import math

import numpy as np
import pytest

from da_bias import autodiff as ad
from da_bias.autodiff import Parameter
from da_bias.checkpoint import to_bytes
from da_bias.corpus import generate_corpus
from da_bias.model import DA_PREFIXES, TRANSDUCER_PREFIXES
from da_bias.trainer import (
    AdamState,
    LrSchedule,
    TrainConfig,
    TrainingError,
    adam_step,
    adapt_stage2,
    clip_global_norm,
    dev_loss,
    freeze_mask,
    lr_at,
    mix_batches,
    pretrain_stage1,
)

from helpers import small_corpus, small_model_config, small_spec


# -- schedule ------------------------------------------------------------------


def test_full_scale_schedule_values():
    s = LrSchedule.full_scale()
    assert lr_at(0, s) == 1.5e-7
    assert lr_at(3000, s) == 4e-4
    assert lr_at(3000 + 150_000, s) == 4e-4
    tail = [lr_at(153_000 + k, s) for k in range(1, 2000, 37)]
    assert all(a > b for a, b in zip(tail, tail[1:]))


def test_schedule_continuity_and_monotone_tail():
    s = LrSchedule.full_scale()
    for edge in (s.warmup_steps, s.warmup_steps + s.hold_steps):
        assert abs(lr_at(edge - 1e-6, s) - lr_at(edge, s)) <= 1e-12
        assert abs(lr_at(edge + 1e-6, s) - lr_at(edge, s)) <= 1e-12
    d = LrSchedule()
    seq = [lr_at(k, d) for k in range(d.warmup_steps, d.warmup_steps + d.hold_steps + 500)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, d)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="finetune")
    with pytest.raises(ValueError):
        TrainConfig(da_freeze_policy="thaw")
    with pytest.raises(ValueError):
        TrainConfig(fusion_mode="middle")
    with pytest.raises(ValueError):
        TrainConfig(mix_ratio=(-1.0, 1.0))


# -- Adam ------------------------------------------------------------------------


def _param(values):
    return Parameter("w", ad.Tensor(np.array(values, dtype=float), requires_grad=True))


def test_adam_zero_gradient_leaves_parameter():
    p = _param([1.0, -2.0])
    adam_step([p], {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = _param([0.0, 0.0, 0.0])
    adam_step([p], {"w": np.array([3.0, -0.5, 1e-3])}, AdamState(), 0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-5)


def test_adam_two_steps_match_closed_form():
    g, lr, b1, b2, eps = np.array([0.3, -1.2]), 0.05, 0.9, 0.999, 1e-8
    p = _param([1.0, 2.0])
    st = AdamState()
    x = np.array([1.0, 2.0])
    m = v = np.zeros(2)
    for t in (1, 2):
        adam_step([p], {"w": g.copy()}, st, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-12)


def test_adam_skips_frozen_parameters():
    p = _param([1.0])
    p.trainable = False
    adam_step([p], {"w": np.array([1.0])}, AdamState(), 1.0)
    assert p.data[0] == 1.0


def test_global_norm_clipping():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    assert math.sqrt(sum(float((g * g).sum()) for g in grads.values())) == pytest.approx(1.0)


# -- mixing ----------------------------------------------------------------------


def test_mix_ratio_over_5000_draws():
    users, general = [("u", i) for i in range(30)], [("g", i) for i in range(20)]
    draws = list(itertools.islice(mix_batches(users, general, (1.5, 1.0), seed=0), 5000))
    frac = sum(d[0] == "u" for d in draws) / 5000
    assert abs(frac - 0.6) <= 0.02


def test_mix_determinism_and_degenerate_ratio():
    users, general = list(range(10)), list(range(100, 110))
    a = list(itertools.islice(mix_batches(users, general, seed=4), 200))
    assert a == list(itertools.islice(mix_batches(users, general, seed=4), 200))
    assert a != list(itertools.islice(mix_batches(users, general, seed=5), 200))
    only = list(itertools.islice(mix_batches(users, general, (1.0, 0.0), seed=1), 300))
    assert all(x < 100 for x in only)
    with pytest.raises(ValueError):
        next(mix_batches([], general))


# -- stages ----------------------------------------------------------------------


def _stage1(fusion="early_late", steps=2, seed=0):
    corpus = small_corpus()
    cfg = TrainConfig(fusion_mode=fusion, max_steps=steps, batch_size=4, early_stop_patience=0, seed=seed)
    return pretrain_stage1(cfg, small_model_config(small_spec()), corpus), corpus


@pytest.fixture(scope="module")
def stage1():
    return _stage1()


@pytest.mark.parametrize("policy", ["freeze", "unfreeze"])
def test_freeze_semantics_after_100_steps(stage1, policy):
    ck, corpus = stage1
    before = ck.state()
    stats = {}
    cfg = TrainConfig(stage="adapt", fusion_mode="early_late", da_freeze_policy=policy, max_steps=100,
                      batch_size=2, early_stop_patience=0)
    out = adapt_stage2(cfg, ck, corpus, stats)
    after = out.state()
    for name, v in before.items():
        if name.startswith(TRANSDUCER_PREFIXES):
            assert np.array_equal(after[name], v), name
    da_changed = [not np.array_equal(after[n], v) for n, v in before.items() if n.startswith(DA_PREFIXES)]
    assert da_changed and (any(da_changed) if policy == "unfreeze" else not any(da_changed))
    # gradients reach the frozen parameters; only the update is withheld
    assert stats["frozen_grad_seen"]
    assert set(out.freeze_mask) == freeze_mask(out.model, "adapt", policy)
    assert ck.state().keys() == before.keys()          # stage-1 checkpoint is not mutated


def test_unfreeze_moves_da_parameters_after_one_step(stage1):
    ck, corpus = stage1
    cfg = TrainConfig(stage="adapt", fusion_mode="early_late", da_freeze_policy="unfreeze", max_steps=1,
                      batch_size=4, early_stop_patience=0)
    after = adapt_stage2(cfg, ck, corpus).state()
    assert any(not np.array_equal(after[n], v) for n, v in ck.state().items() if n.startswith(DA_PREFIXES))


def test_freeze_mask_contents(stage1):
    ck, _ = stage1
    m = ck.model
    assert freeze_mask(m, "pretrain", "freeze") == set()
    unfrozen = freeze_mask(m, "adapt", "unfreeze")
    assert unfrozen == {p.name for p in m.parameter_group(TRANSDUCER_PREFIXES)}
    assert freeze_mask(m, "adapt", "freeze") == unfrozen | {p.name for p in m.parameter_group(DA_PREFIXES)}


def test_stage_preconditions(stage1):
    ck, corpus = stage1
    with pytest.raises(ValueError):
        adapt_stage2(TrainConfig(stage="adapt"), None, corpus)
    with pytest.raises(ValueError, match="fusion"):
        adapt_stage2(TrainConfig(stage="adapt", fusion_mode="late"), ck, corpus)
    with pytest.raises(ValueError):
        pretrain_stage1(TrainConfig(stage="adapt"), small_model_config(small_spec()), corpus)


def test_no_context_pretraining_has_no_da_parameters():
    ck, _ = _stage1("none")
    assert not ck.model.parameter_group(DA_PREFIXES) and not ck.model.has_adapter


def test_equal_seeds_give_identical_checkpoints():
    a, corpus = _stage1(steps=5, seed=3)
    b, _ = _stage1(steps=5, seed=3)
    assert to_bytes(a) == to_bytes(b)
    cfg = TrainConfig(stage="adapt", fusion_mode="early_late", max_steps=5, batch_size=3, seed=1)
    assert to_bytes(adapt_stage2(cfg, a, corpus)) == to_bytes(adapt_stage2(cfg, b, corpus))


def test_nan_loss_raises_training_error():
    ck, corpus = _stage1("none", steps=1)
    for p in ck.model.parameters():
        p.tensor.data = np.full_like(p.data, np.nan)
    cfg = TrainConfig(stage="adapt", max_steps=3, batch_size=2, early_stop_patience=0)
    with pytest.raises(TrainingError, match="step 1"):
        adapt_stage2(cfg, ck, corpus)


def test_toy_corpus_loss_halves():
    spec = small_spec(n_train=50, n_dev=0, n_test=0, f_raw=8, noise_sigma=0.1)
    corpus = generate_corpus(spec)
    mc = small_model_config(spec, enc_hidden=16, enc_out=16, pred_hidden=16, pred_embed=8, joint_hidden=16)
    cfg = TrainConfig(max_steps=400, batch_size=5, lr_peak=2e-2, warmup_steps=10, hold_steps=1000,
                      early_stop_patience=0)
    initial = dev_loss(pretrain_stage1(dataclasses.replace(cfg, max_steps=0), mc, corpus).model, corpus["train"], 10)
    final = dev_loss(pretrain_stage1(cfg, mc, corpus).model, corpus["train"], 10)
    assert final <= 0.5 * initial


def test_early_stopping_restores_best(stage1):
    _, corpus = stage1
    stats = {}
    cfg = TrainConfig(fusion_mode="none", max_steps=60, batch_size=4, eval_every=5, early_stop_patience=2,
                      lr_peak=0.5, warmup_steps=1)
    ck = pretrain_stage1(cfg, small_model_config(small_spec()), corpus, stats)
    best_step, best = min(stats["history"], key=lambda h: h[1])
    assert stats["best_step"] == best_step
    assert dev_loss(ck.model, corpus["dev"], 4) == pytest.approx(best, rel=1e-12)
