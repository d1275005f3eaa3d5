"""Dialog acts: parsing, vocabulary, the DA encoder and the fusion networks."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .nn import Dense, Module, uniform_param

DEFAULT_ACTION = "DefaultDialogAct"
DEFAULT_SLOT = "None"
UNK = "<unk>"

FUSION_MODES = ("none", "early", "late", "early_late")

_DA_RE = re.compile(r"^\s*([^()]+?)\s*\(\s*([^()]+?)\s*\)\s*$")


class DialogActParseError(ValueError):
    pass


@dataclass(frozen=True)
class DialogAct:
    action: str
    slot: str

    def __post_init__(self):
        for part in (self.action, self.slot):
            if not part or "(" in part or ")" in part:
                raise DialogActParseError(f"invalid dialog act part {part!r}")

    def __str__(self) -> str:
        return f"{self.action}({self.slot})"

    @property
    def is_default(self) -> bool:
        return self.action == DEFAULT_ACTION


DEFAULT_DA = DialogAct(DEFAULT_ACTION, DEFAULT_SLOT)


def parse_da(text: str) -> DialogAct:
    """Parse ``action(slot)``, e.g. ``SlotValueElicitation(ProperName)``."""
    m = _DA_RE.match(text)
    if m is None:
        raise DialogActParseError(f"malformed dialog act: {text!r}")
    return DialogAct(m.group(1), m.group(2))


def uses_early(mode: str) -> bool:
    return mode in ("early", "early_late")


def uses_late(mode: str) -> bool:
    return mode in ("late", "early_late")


def check_fusion_mode(mode: str) -> str:
    if mode not in FUSION_MODES:
        raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    return mode


class DaVocabulary:
    """Dense action and slot ids; id 0 of each map is reserved for UNK."""

    def __init__(self, actions: Iterable[str], slots: Iterable[str], max_acts: int | None = None):
        self.actions = {UNK: 0}
        self.slots = {UNK: 0}
        for a in [DEFAULT_ACTION, *actions]:
            self.actions.setdefault(a, len(self.actions))
        for s in [DEFAULT_SLOT, *slots]:
            self.slots.setdefault(s, len(self.slots))
        self.max_acts = max_acts

    @classmethod
    def from_acts(cls, acts: Iterable[DialogAct], max_acts: int | None = 49) -> "DaVocabulary":
        acts = sorted(set(acts), key=str)
        if max_acts is not None and len(set(acts) | {DEFAULT_DA}) > max_acts:
            raise ValueError(f"{len(acts)} distinct dialog acts exceed the inventory bound {max_acts}")
        return cls([a.action for a in acts], [a.slot for a in acts], max_acts)

    def action_id(self, action: str) -> int:
        return self.actions.get(action, 0)

    def slot_id(self, slot: str) -> int:
        return self.slots.get(slot, 0)

    def ids(self, da: DialogAct) -> tuple[int, int]:
        return self.action_id(da.action), self.slot_id(da.slot)

    def to_json(self) -> dict:
        return {"actions": list(self.actions), "slots": list(self.slots), "max_acts": self.max_acts}

    @classmethod
    def from_json(cls, obj: dict) -> "DaVocabulary":
        vocab = cls([], [], obj.get("max_acts"))
        vocab.actions = {a: i for i, a in enumerate(obj["actions"])}
        vocab.slots = {s: i for i, s in enumerate(obj["slots"])}
        return vocab

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_slots(self) -> int:
        return len(self.slots)


class DaEncoder(Module):
    """``relu(FFN(action_emb + slot_emb))`` -> ``[d_da]``."""

    def __init__(self, n_actions: int, n_slots: int, emb_dim: int, d_da: int, rng: np.random.Generator):
        k = 1.0 / math.sqrt(emb_dim)
        self.action_table = uniform_param("da_encoder.action_embedding", (n_actions, emb_dim), k, rng)
        self.slot_table = uniform_param("da_encoder.slot_embedding", (n_slots, emb_dim), k, rng)
        self.ffn = Dense("da_encoder.ffn", emb_dim, d_da, rng, activation="relu")
        self.d_da = d_da

    def __call__(self, action_ids, slot_ids) -> Tensor:
        h_a = ad.embedding_lookup(self.action_table.tensor, action_ids)
        h_s = ad.embedding_lookup(self.slot_table.tensor, slot_ids)
        return self.ffn(ad.add(h_a, h_s))


def encode_da(da: DialogAct, enc: DaEncoder, vocab: DaVocabulary) -> Tensor:
    a, s = vocab.ids(da)
    return enc(a, s)


def encode_da_batch(das: Sequence[DialogAct], enc: DaEncoder, vocab: DaVocabulary) -> Tensor:
    ids = np.array([vocab.ids(d) for d in das], dtype=np.int64).reshape(-1, 2)
    return enc(ids[:, 0], ids[:, 1])


def early_fuse(x_t, h_dae) -> Tensor:
    """Frame features first, DA embedding second."""
    x_t, h_dae = ad.as_tensor(x_t), ad.as_tensor(h_dae)
    if x_t.data.ndim != h_dae.data.ndim or x_t.shape[:-1] != h_dae.shape[:-1]:
        raise DimensionError(f"early_fuse: cannot join {x_t.shape} with {h_dae.shape}")
    return ad.concat(x_t, h_dae, axis=-1)


def repeat_over_time(h: Tensor, num_frames: int) -> Tensor:
    """``[B, d] -> [B, T, d]`` by repeating each row."""
    idx = np.repeat(np.arange(h.shape[0])[:, None], num_frames, axis=1)
    return ad.take(h, idx)


class LateFusionNetwork(Module):
    """``relu(FFN(concat(h_enc, h_dae)))``, ``D_a + d_da -> D_a``."""

    def __init__(self, enc_dim: int, d_da: int, rng: np.random.Generator):
        self.ffn = Dense("late_fusion.ffn", enc_dim + d_da, enc_dim, rng, activation="relu")
        self.enc_dim, self.d_da = enc_dim, d_da

    def __call__(self, h_enc, h_dae) -> Tensor:
        h_enc, h_dae = ad.as_tensor(h_enc), ad.as_tensor(h_dae)
        if h_enc.shape[-1] != self.enc_dim or h_dae.shape[-1] != self.d_da:
            raise DimensionError(
                f"late_fuse: expected widths ({self.enc_dim}, {self.d_da}), got {h_enc.shape} and {h_dae.shape}"
            )
        return self.ffn(early_fuse(h_enc, h_dae))


def late_fuse(h_enc_t, h_dae, net: LateFusionNetwork) -> Tensor:
    return net(h_enc_t, h_dae)
