"""User catalogs, dialog-act driven catalog selection, the BiLSTM catalog
encoder and the cross-attention biasing network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import text
from .autodiff import ContractError, DimensionError, Tensor
from .dialog_act import DialogAct
from .nn import Dense, Module, const_param, uniform_param
from .rnnt import LstmLayer

CATALOG_TYPES = ("ContactName", "DeviceName", "DeviceLocation")
SLOT_TO_TYPE = {"ProperName": "ContactName", "DeviceName": "DeviceName", "DeviceLocation": "DeviceLocation"}


@dataclass(frozen=True)
class CatalogEntity:
    text: str
    type: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("catalog entity text is empty")
        if self.type not in CATALOG_TYPES:
            raise ValueError(f"unknown catalog type {self.type!r}")

    @property
    def tokens(self) -> list[int]:
        return text.encode(self.text)


@dataclass
class CatalogSet:
    contacts: list[str] = field(default_factory=list)
    device_names: list[str] = field(default_factory=list)
    device_locations: list[str] = field(default_factory=list)

    def typed(self, ctype: str) -> list[CatalogEntity]:
        src = {"ContactName": self.contacts, "DeviceName": self.device_names, "DeviceLocation": self.device_locations}[ctype]
        return [CatalogEntity(t, ctype) for t in src]

    def all(self) -> list[CatalogEntity]:
        return [e for ct in CATALOG_TYPES for e in self.typed(ct)]

    def __contains__(self, entity: CatalogEntity) -> bool:
        return entity in self.typed(entity.type)

    def to_json(self) -> dict:
        return {"ContactName": list(self.contacts), "DeviceName": list(self.device_names),
                "DeviceLocation": list(self.device_locations)}

    @classmethod
    def from_json(cls, obj: dict) -> "CatalogSet":
        return cls(list(obj["ContactName"]), list(obj["DeviceName"]), list(obj["DeviceLocation"]))


def select_catalogs(da: Optional[DialogAct], catalogs: CatalogSet, max_entities: Optional[int] = None,
                    required: Iterable[CatalogEntity] = (), enabled: bool = True) -> list[CatalogEntity]:
    """Pick the catalog matching the DA's slot, or all three otherwise.

    With ``enabled=False`` (the bypass ablation) every catalog is returned.
    Lists longer than ``max_entities`` drop non-required entries from the end.
    """
    ctype = SLOT_TO_TYPE.get(da.slot) if (enabled and da is not None) else None
    chosen = catalogs.typed(ctype) if ctype else catalogs.all()
    if max_entities is None or len(chosen) <= max_entities:
        return chosen
    keep = set(e for e in required if e in chosen)
    if len(keep) > max_entities:
        raise ContractError(f"{len(keep)} required entities exceed K={max_entities}")
    budget = max_entities - len(keep)
    out = []
    for e in chosen:
        if e in keep:
            keep.discard(e)   # a duplicated required entry is kept once
            out.append(e)
        elif budget > 0:
            out.append(e)
            budget -= 1
    return out


class CatalogEncoder(Module):
    """Token + type embeddings -> BiLSTM -> final states -> projection to D_c.

    The type embedding is added to every token embedding of the entity.
    """

    def __init__(self, embed: int, hidden: int, out_dim: int, rng: np.random.Generator, no_bias_row: bool = True):
        k = 1.0 / math.sqrt(embed)
        self.token_embedding = uniform_param("catalog_encoder.token_embedding", (text.VOCAB_SIZE, embed), k, rng)
        self.type_embedding = uniform_param("catalog_encoder.type_embedding", (len(CATALOG_TYPES), embed), k, rng)
        self.fwd = LstmLayer("catalog_encoder.fwd", embed, hidden, rng)
        self.bwd = LstmLayer("catalog_encoder.bwd", embed, hidden, rng)
        self.proj = Dense("catalog_encoder.proj", 2 * hidden, out_dim, rng)
        if no_bias_row:
            self.no_bias = uniform_param("catalog_encoder.no_bias", (out_dim,), 1.0 / math.sqrt(out_dim), rng)
        else:
            self.no_bias = None
        self.out_dim = out_dim

    def encode_entities(self, entities: Sequence[CatalogEntity]) -> Tensor:
        """One row per entity, ``[N, D_c]``, without the no-bias row."""
        if not entities:
            raise ContractError("encode_entities: no entities")
        seqs = [e.tokens for e in entities]
        if any(len(s) == 0 for s in seqs):
            raise ContractError("encode_entities: empty entity")
        N, L = len(seqs), max(len(s) for s in seqs)
        lens = np.array([len(s) for s in seqs])
        tok = np.zeros((N, L), dtype=np.int64)
        for n, s in enumerate(seqs):
            tok[n, : len(s)] = s
        types = np.array([CATALOG_TYPES.index(e.type) for e in entities])
        x = ad.add(ad.embedding_lookup(self.token_embedding.tensor, tok),
                   ad.embedding_lookup(self.type_embedding.tensor, np.repeat(types[:, None], L, axis=1)))
        rows = np.arange(N)
        h_f = ad.take(self.fwd(x), (rows, lens - 1))
        j = np.arange(L)[None, :]
        rev = np.where(j < lens[:, None], lens[:, None] - 1 - j, j)
        x_rev = ad.take(x, (np.repeat(rows[:, None], L, axis=1), rev))
        h_b = ad.take(self.bwd(x_rev), (rows, lens - 1))
        return self.proj(ad.concat(h_f, h_b, axis=-1))

    def __call__(self, entities: Sequence[CatalogEntity]) -> Tensor:
        return encode_catalog(entities, self)

    def encode_batch(self, entity_lists: Sequence[Sequence[CatalogEntity]]):
        """Pad per-utterance catalogs to ``[B, K', D_c]``; returns (C_e, mask).

        Entities shared between utterances of the batch are encoded once.
        """
        uniq: dict[CatalogEntity, int] = {}
        for ents in entity_lists:
            for e in ents:
                uniq.setdefault(e, len(uniq))
        extra = 1 if self.no_bias is not None else 0
        width = max(len(ents) for ents in entity_lists) + extra
        if width == 0:
            raise ContractError("encode_batch: no catalog rows and no no-bias row")
        parts = []
        if uniq:
            parts.append(self.encode_entities(list(uniq)))
        if self.no_bias is not None:
            parts.append(ad.reshape(self.no_bias.tensor, (1, self.out_dim)))
        table = parts[0] if len(parts) == 1 else ad.concat(parts[0], parts[1], axis=0)
        nb_row = len(uniq)
        idx = np.zeros((len(entity_lists), width), dtype=np.int64)
        mask = np.zeros((len(entity_lists), width), dtype=bool)
        for b, ents in enumerate(entity_lists):
            for k, e in enumerate(ents):
                idx[b, k] = uniq[e]
                mask[b, k] = True
            if extra:
                idx[b, len(ents)] = nb_row
                mask[b, len(ents)] = True
        return ad.take(table, idx), mask


def encode_catalog(entities: Sequence[CatalogEntity], enc: CatalogEncoder) -> Tensor:
    """``C^e`` for one utterance, ``[K', D_c]`` (no-bias row last when enabled)."""
    if not entities and enc.no_bias is None:
        raise ContractError("encode_catalog: empty catalog without a no-bias row")
    rows = enc.encode_entities(entities) if entities else None
    if enc.no_bias is None:
        return rows
    nb = ad.reshape(enc.no_bias.tensor, (1, enc.out_dim))
    return nb if rows is None else ad.concat(rows, nb, axis=0)


class BiasingNetwork(Module):
    """Single-head scaled dot-product cross-attention over catalog rows."""

    def __init__(self, query_dim: int, catalog_dim: int, att_dim: int, rng: np.random.Generator,
                 value_init: float = 0.0):
        self.w_q = uniform_param("biasing.w_q", (query_dim, att_dim), 1.0 / math.sqrt(query_dim), rng)
        self.w_k = uniform_param("biasing.w_k", (catalog_dim, att_dim), 1.0 / math.sqrt(catalog_dim), rng)
        # value_init=0 gives a fresh adapter that leaves the transducer output unchanged
        if value_init > 0:
            self.w_v = uniform_param("biasing.w_v", (catalog_dim, query_dim), value_init / math.sqrt(catalog_dim), rng)
        else:
            self.w_v = const_param("biasing.w_v", np.zeros((catalog_dim, query_dim)))
        self.query_dim, self.catalog_dim, self.att_dim = query_dim, catalog_dim, att_dim


def bias_attend(query, c_e, net: BiasingNetwork, mask: Optional[np.ndarray] = None):
    """Attention weights and biasing vector.

    Unbatched: ``query [D_a]``, ``c_e [K', D_c]`` -> ``alpha [K']``, ``b [D_a]``.
    Batched: ``query [B, T, D_a]``, ``c_e [B, K', D_c]``, ``mask [B, K']`` ->
    ``alpha [B, T, K']``, ``b [B, T, D_a]``.
    """
    query, c_e = ad.as_tensor(query), ad.as_tensor(c_e)
    if query.shape[-1] != net.query_dim or c_e.shape[-1] != net.catalog_dim:
        raise DimensionError(
            f"bias_attend: query {query.shape} / catalog {c_e.shape} do not fit "
            f"({net.query_dim}, {net.catalog_dim})"
        )
    if c_e.shape[-2] == 0:
        raise ContractError("bias_attend: empty catalog (K' = 0)")
    scale = 1.0 / math.sqrt(net.att_dim)
    keys = ad.linear(c_e, net.w_k.tensor)
    values = ad.linear(c_e, net.w_v.tensor)
    q = ad.linear(query, net.w_q.tensor)
    if query.data.ndim == 1:
        if c_e.data.ndim != 2:
            raise DimensionError(f"bias_attend: catalog must be [K', D_c], got {c_e.shape}")
        scores = ad.reshape(ad.matmul(keys, ad.reshape(q, (net.att_dim, 1))), (c_e.shape[0],))
        alpha = ad.softmax(ad.scale(scores, scale), mask)
        b = ad.reshape(ad.matmul(ad.reshape(alpha, (1, c_e.shape[0])), values), (net.query_dim,))
        return alpha, b
    if query.data.ndim != 3 or c_e.data.ndim != 3 or query.shape[0] != c_e.shape[0]:
        raise DimensionError(f"bias_attend: batched shapes {query.shape} and {c_e.shape} disagree")
    scores = ad.scale(ad.matmul(q, ad.transpose(keys)), scale)
    full_mask = None
    if mask is not None:
        full_mask = np.broadcast_to(mask[:, None, :], scores.shape)
    alpha = ad.softmax(scores, full_mask)
    return alpha, ad.matmul(alpha, values)


def combine(h, b) -> Tensor:
    """Biased encoder output: element-wise sum."""
    return ad.add(h, b)
