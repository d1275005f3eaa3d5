"""Two-stage training: DA-aware transducer pretraining, then contextual
adaptation with the transducer frozen."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .catalog import select_catalogs
from .checkpoint import Checkpoint
from .corpus import Corpus, Utterance
from .dialog_act import DaVocabulary, check_fusion_mode
from .model import ADAPTER_PREFIXES, DA_PREFIXES, TRANSDUCER_PREFIXES, Batch, ContextualTransducer, ModelConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LrSchedule:
    """Linear warmup, constant hold, exponential decay."""

    start: float = 1.5e-7
    peak: float = 4e-4
    warmup_steps: int = 300
    hold_steps: int = 500
    decay_rate: float = 0.99
    decay_interval: int = 10

    @classmethod
    def full_scale(cls) -> "LrSchedule":
        return cls(start=1.5e-7, peak=4e-4, warmup_steps=3000, hold_steps=150_000)


def lr_at(step: int, schedule: LrSchedule) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    s = schedule
    if step < s.warmup_steps:
        return s.start + (s.peak - s.start) * step / s.warmup_steps
    past = step - s.warmup_steps - s.hold_steps
    if past <= 0:
        return s.peak
    return s.peak * s.decay_rate ** (past / s.decay_interval)


@dataclass
class TrainConfig:
    stage: str = "pretrain"                  # pretrain | adapt
    fusion_mode: str = "none"
    da_freeze_policy: str = "freeze"         # freeze | unfreeze
    catalog_selection: bool = True
    mix_ratio: tuple[float, float] = (1.5, 1.0)
    lr_start: float = 1.5e-7
    lr_peak: float = 1e-2
    warmup_steps: int = 100
    hold_steps: int = 500
    decay_rate: float = 0.99
    decay_interval: int = 10
    adapt_lr: float = 1e-3
    batch_size: int = 8
    max_steps: int = 1500
    early_stop_patience: int = 5
    eval_every: int = 50
    eval_utterances: int = 60
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        check_fusion_mode(self.fusion_mode)
        if self.stage not in ("pretrain", "adapt"):
            raise ValueError(f"stage must be pretrain or adapt, got {self.stage!r}")
        if self.da_freeze_policy not in ("freeze", "unfreeze"):
            raise ValueError(f"da_freeze_policy must be freeze or unfreeze, got {self.da_freeze_policy!r}")
        self.mix_ratio = tuple(float(x) for x in self.mix_ratio)
        if len(self.mix_ratio) != 2 or min(self.mix_ratio) < 0 or sum(self.mix_ratio) <= 0:
            raise ValueError(f"mix_ratio must be two non-negative numbers, got {self.mix_ratio}")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_start, self.lr_peak, self.warmup_steps, self.hold_steps,
                          self.decay_rate, self.decay_interval)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Parameter], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam, in place.  Parameters with ``trainable=False`` or
    without a gradient are skipped."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p in params:
        g = grads.get(p.name)
        if g is None or not p.trainable:
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(g)
            state.v[p.name] = np.zeros_like(g)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.tensor.data = p.tensor.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------------
# data


def shuffled_stream(items: Sequence, rng: np.random.Generator) -> Iterator:
    if not items:
        raise ValueError("cannot stream an empty collection")
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def mix_batches(user_items: Sequence, general_items: Sequence, ratio: tuple[float, float] = (1.5, 1.0),
                seed: int = 0) -> Iterator:
    """Endless stream drawing user-specific vs general items at ``ratio``."""
    r_user, r_gen = ratio
    if (r_user > 0 and not user_items) or (r_gen > 0 and not general_items):
        raise ValueError("mix_batches: a stream with non-zero weight is empty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    p_user = r_user / (r_user + r_gen)
    user = shuffled_stream(user_items, np.random.default_rng(np.random.SeedSequence([seed, 12]))) if r_user > 0 else None
    gen = shuffled_stream(general_items, np.random.default_rng(np.random.SeedSequence([seed, 13]))) if r_gen > 0 else None
    while True:
        yield next(user) if rng.random() < p_user else next(gen)


def make_batch(utts: Sequence[Utterance], model: ContextualTransducer, selection: bool = True,
               stats: Optional[dict] = None) -> Batch:
    frames = [u.frames for u in utts]
    T = max(f.shape[0] for f in frames)
    F = frames[0].shape[1]
    feats = np.zeros((len(utts), T, F))
    for b, f in enumerate(frames):
        feats[b, : f.shape[0]] = f
    catalogs = None
    if model.has_adapter:
        K = model.config.max_catalog
        catalogs = [select_catalogs(u.da, u.catalog, K, required=u.entities, enabled=selection) for u in utts]
        if stats is not None:
            stats.setdefault("entities_fed", []).extend(len(c) for c in catalogs)
    return Batch(feats, [f.shape[0] for f in frames], [list(u.tokens) for u in utts], [u.da for u in utts], catalogs)


def dev_loss(model: ContextualTransducer, utts: Sequence[Utterance], batch_size: int, selection: bool = True) -> float:
    total = 0.0
    with ad.no_tape():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i : i + batch_size]
            total += model.loss(make_batch(chunk, model, selection)).item() * len(chunk)
    return total / max(len(utts), 1)


# ---------------------------------------------------------------------------
# stages


def freeze_mask(model: ContextualTransducer, stage: str, policy: str) -> set[str]:
    """Names of parameters the optimizer must not touch."""
    if stage == "pretrain":
        return set()
    frozen = {p.name for p in model.parameter_group(TRANSDUCER_PREFIXES)}
    if policy == "freeze":
        frozen |= {p.name for p in model.parameter_group(DA_PREFIXES)}
    return frozen


def _train_loop(model: ContextualTransducer, stream: Iterator[Utterance], dev: Sequence[Utterance],
                cfg: TrainConfig, lr_fn, selection: bool, stats: dict) -> int:
    params = model.parameters()
    trainable = [p for p in params if p.trainable]
    state = AdamState()
    best = math.inf
    best_state = None
    bad = 0
    step = 0
    history = stats.setdefault("history", [])
    for step in range(1, cfg.max_steps + 1):
        utts = [next(stream) for _ in range(cfg.batch_size)]
        batch = make_batch(utts, model, selection, stats)
        for p in params:
            p.tensor.grad = None
        tape = ad.Tape()
        try:
            with tape:
                loss = model.loss(batch)
                ad.backward(loss)
        except FloatingPointError as e:
            raise TrainingError(f"non-finite loss at step {step}: {e}") from e
        finally:
            tape.release()
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = {p.name: p.tensor.grad for p in trainable if p.tensor.grad is not None}
        stats["frozen_grad_seen"] = stats.get("frozen_grad_seen", False) or any(
            p.tensor.grad is not None for p in params if not p.trainable)
        clip_global_norm(grads, cfg.grad_clip)
        adam_step(trainable, grads, state, lr_fn(step - 1))
        stats.setdefault("train_loss", []).append(value)
        if cfg.early_stop_patience > 0 and dev and step % cfg.eval_every == 0:
            d = dev_loss(model, dev, cfg.batch_size, selection)
            history.append((step, d))
            log.info("step %d train %.4f dev %.4f", step, value, d)
            if d < best - 1e-9:
                best, bad = d, 0
                best_state = {p.name: p.data.copy() for p in trainable}
                stats["best_step"] = step
            else:
                bad += 1
                if bad >= cfg.early_stop_patience:
                    log.info("early stop at step %d (best %d)", step, stats.get("best_step"))
                    break
    if best_state is not None:
        for p in trainable:
            p.tensor.data = best_state[p.name]
    return step


def pretrain_stage1(cfg: TrainConfig, model_config: ModelConfig, corpus: Corpus,
                    stats: Optional[dict] = None) -> Checkpoint:
    """Train transducer (+ DA encoder and fusion networks) on all training data."""
    if cfg.stage != "pretrain":
        raise ValueError("pretrain_stage1 needs stage=pretrain")
    if model_config.fusion_mode != cfg.fusion_mode:
        model_config = dataclasses.replace(model_config, fusion_mode=cfg.fusion_mode)
    stats = {} if stats is None else stats
    vocab = DaVocabulary.from_acts(corpus.acts())
    model = ContextualTransducer(model_config, vocab, seed=cfg.seed)
    train = corpus["train"]
    dev = corpus.splits.get("dev", [])[: cfg.eval_utterances]
    stream = shuffled_stream(train, np.random.default_rng(np.random.SeedSequence([cfg.seed, 21])))
    steps = _train_loop(model, stream, dev, cfg, lambda s: lr_at(s, cfg.schedule), True, stats)
    return Checkpoint(model, step=steps, seed=cfg.seed,
                      meta={"stage": "pretrain", "fusion_mode": cfg.fusion_mode})


def adapt_stage2(cfg: TrainConfig, stage1: Checkpoint, corpus: Corpus, stats: Optional[dict] = None) -> Checkpoint:
    """Train catalog encoder + biasing network on mixed data, transducer frozen."""
    if cfg.stage != "adapt":
        raise ValueError("adapt_stage2 needs stage=adapt")
    if stage1 is None:
        raise ValueError("adapt_stage2 needs a stage-1 checkpoint")
    if stage1.model.config.fusion_mode != cfg.fusion_mode:
        raise ValueError(
            f"stage-1 checkpoint has fusion mode {stage1.model.config.fusion_mode!r}, config asks for {cfg.fusion_mode!r}"
        )
    stats = {} if stats is None else stats
    model = copy.deepcopy(stage1.model)
    if model.has_adapter:
        raise ValueError("stage-1 checkpoint already carries a contextual adapter")
    model.attach_adapter(cfg.seed)
    frozen = freeze_mask(model, "adapt", cfg.da_freeze_policy)
    for p in model.parameters():
        p.trainable = p.name not in frozen
    train = corpus["train"]
    user = [u for u in train if u.has("user_specific")]
    general = [u for u in train if u.has("general")]
    stream = mix_batches(user, general, cfg.mix_ratio, cfg.seed)
    dev = corpus.splits.get("dev", [])[: cfg.eval_utterances]
    steps = _train_loop(model, stream, dev, cfg, lambda s: cfg.adapt_lr, cfg.catalog_selection, stats)
    return Checkpoint(model, step=steps, seed=cfg.seed,
                      meta={"stage": "adapt", "fusion_mode": cfg.fusion_mode,
                            "da_freeze_policy": cfg.da_freeze_policy,
                            "catalog_selection": cfg.catalog_selection})


def adapter_group(model: ContextualTransducer) -> list[Parameter]:
    return model.parameter_group(ADAPTER_PREFIXES)
