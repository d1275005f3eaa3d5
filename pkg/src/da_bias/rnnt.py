"""Streaming transducer: LSTM encoder, LSTM prediction network, joint network,
the transducer loss and greedy decoding.

Lattice layout is ``[T, U+1, V+1]`` (or batched ``[B, T, U+1, V+1]``) holding
log-probabilities; the blank symbol is the last index ``V``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .nn import Dense, Module, uniform_param

MAX_SYMBOLS_PER_FRAME = 5


class ConfigurationError(ValueError):
    pass


class LstmLayer(Module):
    """Unidirectional LSTM.  Gate blocks in the fused weights are ordered
    (input, forget, cell, output); the forget block of the bias starts at 1."""

    def __init__(self, prefix: str, input_size: int, hidden_size: int, rng: np.random.Generator):
        k = 1.0 / math.sqrt(hidden_size)
        H = hidden_size
        self.w_ih = uniform_param(f"{prefix}.w_ih", (input_size, 4 * H), k, rng)
        self.w_hh = uniform_param(f"{prefix}.w_hh", (H, 4 * H), k, rng)
        self.bias = uniform_param(f"{prefix}.bias", (4 * H,), k, rng)
        self.bias.data[H : 2 * H] = 1.0
        self.input_size, self.hidden_size = input_size, hidden_size

    def __call__(self, x) -> Tensor:
        return ad.lstm_sequence(x, self.w_ih.tensor, self.w_hh.tensor, self.bias.tensor)

    def step(self, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        pre = x @ self.w_ih.data + self.bias.data
        h, c, _ = ad.lstm_step_np(pre, h, c, self.w_hh.data)
        return h, c

    def zero_state(self, batch: Optional[int] = None):
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return np.zeros(shape), np.zeros(shape)


class EncoderNetwork(Module):
    def __init__(self, input_size: int, hidden: int, layers: int, out_dim: int, rng: np.random.Generator):
        self.layers = []
        n_in = input_size
        for i in range(layers):
            self.layers.append(LstmLayer(f"encoder.lstm{i}", n_in, hidden, rng))
            n_in = hidden
        self.proj = Dense("encoder.proj", hidden, out_dim, rng)
        self.input_size = input_size

    def __call__(self, x) -> Tensor:
        h = x
        for layer in self.layers:
            h = layer(h)
        return self.proj(h)


class PredictionNetwork(Module):
    """Embeds the emitted-token prefix.  Row ``V`` of the embedding table is
    the start-of-sequence state, not a vocabulary entry."""

    def __init__(self, vocab_size: int, embed: int, hidden: int, layers: int, out_dim: int, rng: np.random.Generator):
        self.embedding = uniform_param("prediction.embedding", (vocab_size + 1, embed), 1.0 / math.sqrt(embed), rng)
        self.layers = []
        n_in = embed
        for i in range(layers):
            self.layers.append(LstmLayer(f"prediction.lstm{i}", n_in, hidden, rng))
            n_in = hidden
        self.proj = Dense("prediction.proj", hidden, out_dim, rng)
        self.vocab_size = vocab_size

    @property
    def sos(self) -> int:
        return self.vocab_size

    def __call__(self, tokens: np.ndarray) -> Tensor:
        """``tokens [B, U]`` (padded) -> ``[B, U+1, D_a]``; row 0 is the SOS state."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        ids = np.concatenate([np.full((tokens.shape[0], 1), self.sos, dtype=np.int64), tokens], axis=1)
        h = ad.embedding_lookup(self.embedding.tensor, ids)
        for layer in self.layers:
            h = layer(h)
        return self.proj(h)

    def initial_state(self):
        return [layer.zero_state() for layer in self.layers]

    def step(self, token: int, state):
        """Advance by one token; returns (output [D_a], new state)."""
        x = self.embedding.data[token]
        new_state = []
        for layer, (h, c) in zip(self.layers, state):
            h, c = layer.step(x, h, c)
            new_state.append((h, c))
            x = h
        return self.proj.np_forward(x), new_state


class JointNetwork(Module):
    """``tanh(h_enc W_e + h_pre W_p + b) W_o + b_o`` -> ``V+1`` logits.

    The join is addition after separate projections."""

    def __init__(self, in_dim: int, hidden: int, vocab_size: int, rng: np.random.Generator):
        k = 1.0 / math.sqrt(in_dim)
        self.w_enc = uniform_param("joint.w_enc", (in_dim, hidden), k, rng)
        self.w_pre = uniform_param("joint.w_pre", (in_dim, hidden), k, rng)
        self.bias = uniform_param("joint.bias", (hidden,), k, rng)
        self.out = Dense("joint.out", hidden, vocab_size + 1, rng)
        self.in_dim = in_dim
        self.vocab_size = vocab_size

    @property
    def blank(self) -> int:
        return self.vocab_size

    def logits_np(self, h_enc_t: np.ndarray, h_pre_u: np.ndarray) -> np.ndarray:
        z = np.tanh(h_enc_t @ self.w_enc.data + h_pre_u @ self.w_pre.data + self.bias.data)
        return self.out.np_forward(z)


def build_lattice(joint: JointNetwork, h_enc, h_pre) -> Tensor:
    """Log-softmax joint outputs for every (t, u).

    ``h_enc [B,T,D]`` and ``h_pre [B,U+1,D]`` give ``[B,T,U+1,V+1]``; unbatched
    ``[T,D]`` / ``[U+1,D]`` inputs give ``[T,U+1,V+1]``.
    """
    h_enc, h_pre = ad.as_tensor(h_enc), ad.as_tensor(h_pre)
    squeeze = h_enc.data.ndim == 2
    if squeeze:
        if h_pre.data.ndim != 2:
            raise DimensionError(f"build_lattice: rank mismatch {h_enc.shape} vs {h_pre.shape}")
        h_enc = ad.reshape(h_enc, (1,) + h_enc.shape)
        h_pre = ad.reshape(h_pre, (1,) + h_pre.shape)
    if h_enc.shape[-1] != joint.in_dim or h_pre.shape[-1] != joint.in_dim:
        raise DimensionError(
            f"build_lattice: joint expects width {joint.in_dim}, got {h_enc.shape} and {h_pre.shape}"
        )
    a = ad.linear(h_enc, joint.w_enc.tensor, joint.bias.tensor)
    b = ad.linear(h_pre, joint.w_pre.tensor)
    z = ad.tanh(ad.outer_add(a, b))
    lat = ad.log_softmax(joint.out(z))
    if squeeze:
        lat = ad.reshape(lat, lat.shape[1:])
    return lat


# ---------------------------------------------------------------------------
# loss


def _alpha_beta(logp: np.ndarray, targets: np.ndarray, T_len: np.ndarray, U_len: np.ndarray, blank: int):
    """Forward/backward variables on a right-padded ``[B, T, U+1, V+1]``
    lattice, swept by anti-diagonals for all utterances at once.

    ``targets`` is ``[B, U]`` (padding ids are arbitrary non-blank values).
    Cells outside an utterance's own ``T_b x (U_b+1)`` region carry -inf in
    beta; alpha there is never read.  Returns (alpha, beta, lp_blank,
    lp_emit, loglik[B]).
    """
    B, T, U1, _ = logp.shape
    U = U1 - 1
    bi = np.arange(B)
    lp_blank = logp[..., blank]
    lp_emit = np.full((B, T, U1), -np.inf)
    if U:
        lp_emit[:, :, :U] = np.take_along_axis(logp[:, :, :U, :], targets[:, None, :, None], axis=3)[..., 0]

    alpha = np.full((B, T, U1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for n in range(1, T + U):
        t = np.arange(max(0, n - U), min(n, T - 1) + 1)
        u = n - t
        from_top = np.full((B, t.size), -np.inf)
        m = t > 0
        from_top[:, m] = alpha[:, t[m] - 1, u[m]] + lp_blank[:, t[m] - 1, u[m]]
        from_left = np.full((B, t.size), -np.inf)
        m = u > 0
        from_left[:, m] = alpha[:, t[m], u[m] - 1] + lp_emit[:, t[m], u[m] - 1]
        alpha[:, t, u] = np.logaddexp(from_top, from_left)

    tt = np.arange(T)[None, :, None]
    uu = np.arange(U1)[None, None, :]
    valid = (tt < T_len[:, None, None]) & (uu <= U_len[:, None, None])
    terminal = (tt == T_len[:, None, None] - 1) & (uu == U_len[:, None, None])
    beta = np.full((B, T, U1), -np.inf)
    for n in range(T + U - 1, -1, -1):
        t = np.arange(max(0, n - U), min(n, T - 1) + 1)
        u = n - t
        down = np.full((B, t.size), -np.inf)
        m = t < T - 1
        down[:, m] = beta[:, t[m] + 1, u[m]] + lp_blank[:, t[m], u[m]]
        right = np.full((B, t.size), -np.inf)
        m = u < U
        right[:, m] = beta[:, t[m], u[m] + 1] + lp_emit[:, t[m], u[m]]
        val = np.logaddexp(down, right)
        val = np.where(terminal[:, t, u], lp_blank[:, t, u], val)
        beta[:, t, u] = np.where(valid[:, t, u], val, -np.inf)

    loglik = alpha[bi, T_len - 1, U_len] + lp_blank[bi, T_len - 1, U_len]
    return alpha, beta, lp_blank, lp_emit, loglik


def _loss_and_grad(logp: np.ndarray, targets: Sequence[Sequence[int]], T_len: Sequence[int], blank: int):
    """Per-utterance NLL ``[B]`` and gradient for a padded lattice."""
    B, T, U1, V1 = logp.shape
    U = U1 - 1
    T_len = np.asarray(T_len, dtype=np.int64)
    U_len = np.array([len(y) for y in targets], dtype=np.int64)
    pad = 0 if blank != 0 else 1
    tgt = np.full((B, U), pad, dtype=np.int64)
    for b, y in enumerate(targets):
        tgt[b, : len(y)] = y
    with np.errstate(invalid="ignore"):
        alpha, beta, lp_blank, lp_emit, loglik = _alpha_beta(logp, tgt, T_len, U_len, blank)
        ll = loglik[:, None, None]
        bi = np.arange(B)
        grad = np.zeros_like(logp)
        nxt = np.full((B, T, U1), -np.inf)
        nxt[:, : T - 1] = beta[:, 1:]
        nxt[bi, T_len - 1, U_len] = 0.0
        grad[..., blank] = -np.exp(alpha + lp_blank + nxt - ll)
        if U:
            g_emit = -np.exp(alpha[:, :, :U] + lp_emit[:, :, :U] + beta[:, :, 1:] - ll)
            # only cells that lead to the utterance's own terminal carry mass
            g_emit = np.where(np.isfinite(g_emit), g_emit, 0.0)
            b_i, t_i, u_i = np.meshgrid(bi, np.arange(T), np.arange(U), indexing="ij")
            np.add.at(grad, (b_i, t_i, u_i, np.broadcast_to(tgt[:, None, :], (B, T, U))), g_emit)
    grad = np.where(np.isfinite(grad), grad, 0.0)
    return -loglik, grad


def rnnt_loss_np(logp: np.ndarray, target: Sequence[int], blank: Optional[int] = None):
    """Negative log-likelihood and its gradient w.r.t. the lattice entries."""
    logp = np.asarray(logp, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T, U1, V1 = logp.shape
    blank = V1 - 1 if blank is None else blank
    if T < 1:
        raise DimensionError("rnnt_loss: lattice has no frames")
    if len(target) != U1 - 1:
        raise DimensionError(f"rnnt_loss: target length {len(target)} does not fit lattice U+1={U1}")
    if len(target) and (target.min() < 0 or target.max() >= V1 or (target == blank).any()):
        raise DimensionError(f"rnnt_loss: target ids must be non-blank tokens < {V1}")
    loss, grad = _loss_and_grad(logp[None], [target], [T], blank)
    return float(loss[0]), grad[0]


def rnnt_loss(lattice, target: Sequence[int]) -> Tensor:
    """Transducer loss ``-log P(target | x)`` for one ``[T, U+1, V+1]`` lattice.

    ``target`` may be shorter than ``U`` of the lattice only via
    :func:`rnnt_loss_batch`; here the lattice must match exactly.
    """
    lattice = ad.as_tensor(lattice)
    if lattice.data.ndim != 3:
        raise DimensionError(f"rnnt_loss: lattice must be [T,U+1,V+1], got {lattice.shape}")
    if len(target) > lattice.shape[1] - 1:
        raise DimensionError(
            f"rnnt_loss: target of length {len(target)} exceeds lattice U dimension {lattice.shape[1] - 1}"
        )
    return rnnt_loss_batch(ad.reshape(lattice, (1,) + lattice.shape), [target], [lattice.shape[0]], reduction="sum")


def rnnt_loss_batch(lattice, targets: Sequence[Sequence[int]], frame_lengths: Sequence[int], reduction: str = "mean") -> Tensor:
    """Summed or mean loss over a right-padded ``[B, T, U+1, V+1]`` lattice."""
    lattice = ad.as_tensor(lattice)
    L = lattice.data
    if L.ndim != 4 or len(targets) != L.shape[0] or len(frame_lengths) != L.shape[0]:
        raise DimensionError(f"rnnt_loss_batch: lattice {L.shape} vs {len(targets)} targets")
    U_max = L.shape[2] - 1
    for b, (tgt, T_b) in enumerate(zip(targets, frame_lengths)):
        if len(tgt) > U_max or T_b > L.shape[1] or T_b < 1:
            raise DimensionError(
                f"rnnt_loss_batch: utterance {b} (T={T_b}, U={len(tgt)}) exceeds lattice {L.shape[1:3]}"
            )
    blank = L.shape[3] - 1
    losses, grad = _loss_and_grad(L, [np.asarray(t, dtype=np.int64) for t in targets], frame_lengths, blank)
    if not np.all(np.isfinite(losses)):
        bad = int(np.flatnonzero(~np.isfinite(losses))[0])
        raise FloatingPointError(f"rnnt_loss: non-finite loss for utterance {bad}")
    total = float(losses.sum())
    if reduction == "mean":
        total /= L.shape[0]
        grad /= L.shape[0]
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return ad._emit(np.array(total), (lattice,), lambda g: (grad * float(g),))


# ---------------------------------------------------------------------------
# decoding


def greedy_decode_lattice(lattice_fn, num_frames: int, sos_state, step_fn, blank: int,
                          max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    """Generic greedy transducer search.

    ``step_fn(token, state) -> (pred_out, state)`` advances the prediction
    network; ``lattice_fn(t, pred_out) -> logits`` scores frame ``t``.
    """
    hyp: list[int] = []
    pred_out, state = sos_state
    for t in range(num_frames):
        for _ in range(max_symbols):
            k = int(np.argmax(lattice_fn(t, pred_out)))
            if k == blank:
                break
            hyp.append(k)
            pred_out, state = step_fn(k, state)
    return hyp


def greedy_decode(h_enc: np.ndarray, prediction: PredictionNetwork, joint: JointNetwork,
                  max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    """Greedy search over encoder outputs ``[T, D_a]`` (already biased if the
    model carries a contextual adapter)."""
    h_enc = np.asarray(h_enc)
    enc_proj = h_enc @ joint.w_enc.data + joint.bias.data
    pre_w = joint.w_pre.data

    def lattice_fn(t, pred_out):
        z = np.tanh(enc_proj[t] + pred_out @ pre_w)
        return joint.out.np_forward(z)

    start = prediction.step(prediction.sos, prediction.initial_state())
    return greedy_decode_lattice(lattice_fn, h_enc.shape[0], start, prediction.step, joint.blank, max_symbols)
