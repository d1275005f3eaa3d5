"""The DA-guided contextual transducer assembled from its parts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import rnnt
from .autodiff import Parameter, Tensor
from .catalog import BiasingNetwork, CatalogEncoder, CatalogEntity, bias_attend, combine
from .dialog_act import (
    DaEncoder,
    DaVocabulary,
    DialogAct,
    LateFusionNetwork,
    check_fusion_mode,
    early_fuse,
    encode_da_batch,
    repeat_over_time,
    uses_early,
    uses_late,
)
from .nn import Module
from .rnnt import ConfigurationError, EncoderNetwork, JointNetwork, PredictionNetwork
from .text import VOCAB_SIZE

TRANSDUCER_PREFIXES = ("encoder.", "prediction.", "joint.")
DA_PREFIXES = ("da_encoder.", "late_fusion.")
ADAPTER_PREFIXES = ("catalog_encoder.", "biasing.")


@dataclass
class ModelConfig:
    """Network sizes.  Defaults are desk scale; the full-scale values are
    in :data:`FULL_SCALE`."""

    feat_dim: int = 192
    vocab_size: int = VOCAB_SIZE
    enc_layers: int = 2
    enc_hidden: int = 64
    enc_out: int = 64
    pred_layers: int = 1
    pred_hidden: int = 64
    pred_embed: int = 32
    joint_hidden: int = 64
    fusion_mode: str = "none"
    da_embed: int = 16
    d_da: int = 16
    catalog_embed: int = 16
    catalog_hidden: int = 16
    catalog_dim: int = 16
    att_dim: int = 16
    no_bias_row: bool = True
    value_init: float = 0.0
    max_catalog: int = 64

    def __post_init__(self):
        check_fusion_mode(self.fusion_mode)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


FULL_SCALE = dict(
    enc_layers=5, enc_hidden=736, enc_out=512, pred_layers=2, pred_hidden=736,
    joint_hidden=512, da_embed=49, d_da=64, catalog_embed=64, catalog_hidden=128,
    catalog_dim=64, att_dim=64, max_catalog=500,
)


@dataclass
class Batch:
    features: np.ndarray               # [B, T, F], right padded
    frame_lengths: list[int]
    targets: list[list[int]]
    das: list[DialogAct]
    catalogs: Optional[list[list[CatalogEntity]]] = None   # already selected

    @property
    def padded_targets(self) -> np.ndarray:
        U = max((len(t) for t in self.targets), default=0)
        out = np.zeros((len(self.targets), U), dtype=np.int64)
        for b, t in enumerate(self.targets):
            out[b, : len(t)] = t
        return out


@dataclass
class EncoderOutput:
    output: Tensor        # what the joint network consumes
    query: Tensor         # the biasing query
    query_source: str     # "h_enc", "h_enc(early)" or "h_lf"
    alpha: Optional[Tensor] = None
    da_embedding: Optional[Tensor] = None


class ContextualTransducer(Module):
    def __init__(self, config: ModelConfig, da_vocab: DaVocabulary, seed: int = 0, with_adapter: bool = False):
        self.config = config
        self.da_vocab = da_vocab
        rng = np.random.default_rng(seed)
        c = config
        mode = c.fusion_mode
        enc_in = c.feat_dim + (c.d_da if uses_early(mode) else 0)
        self.encoder = EncoderNetwork(enc_in, c.enc_hidden, c.enc_layers, c.enc_out, rng)
        self.prediction = PredictionNetwork(c.vocab_size, c.pred_embed, c.pred_hidden, c.pred_layers, c.enc_out, rng)
        self.joint = JointNetwork(c.enc_out, c.joint_hidden, c.vocab_size, rng)
        self.da_encoder = DaEncoder(da_vocab.n_actions, da_vocab.n_slots, c.da_embed, c.d_da, rng) if mode != "none" else None
        self.late_fusion = LateFusionNetwork(c.enc_out, c.d_da, rng) if uses_late(mode) else None
        self.catalog_encoder: Optional[CatalogEncoder] = None
        self.biasing: Optional[BiasingNetwork] = None
        if with_adapter:
            self.attach_adapter(seed)

    def attach_adapter(self, seed: int) -> None:
        """Instantiate a fresh catalog encoder and biasing network."""
        c = self.config
        rng = np.random.default_rng([seed, 2])
        self.catalog_encoder = CatalogEncoder(c.catalog_embed, c.catalog_hidden, c.catalog_dim, rng, c.no_bias_row)
        self.biasing = BiasingNetwork(c.enc_out, c.catalog_dim, c.att_dim, rng, c.value_init)

    @property
    def has_adapter(self) -> bool:
        return self.biasing is not None

    def parameter_group(self, prefixes: Sequence[str]) -> list[Parameter]:
        return [p for p in self.parameters() if p.name.startswith(tuple(prefixes))]

    # -- forward ---------------------------------------------------------

    def encode(self, features, das: Sequence[DialogAct], catalogs: Optional[Sequence[Sequence[CatalogEntity]]] = None) -> EncoderOutput:
        x = ad.as_tensor(features)
        if x.data.ndim != 3:
            raise ad.DimensionError(f"features must be [B, T, F], got {x.shape}")
        mode = self.config.fusion_mode
        h_dae = None
        if mode != "none":
            if das is None or len(das) != x.shape[0]:
                raise ConfigurationError(f"fusion mode {mode!r} needs one dialog act per utterance")
            h_dae = encode_da_batch(das, self.da_encoder, self.da_vocab)
        if uses_early(mode):
            x = early_fuse(x, repeat_over_time(h_dae, x.shape[1]))
        h_enc = self.encoder(x)
        source = "h_enc(early)" if uses_early(mode) else "h_enc"
        if uses_late(mode):
            h_enc = self.late_fusion(h_enc, repeat_over_time(h_dae, x.shape[1]))
            source = "h_lf"
        out = EncoderOutput(output=h_enc, query=h_enc, query_source=source, da_embedding=h_dae)
        if self.has_adapter:
            if catalogs is None:
                raise ConfigurationError("model has a contextual adapter but no catalogs were given")
            c_e, mask = self.catalog_encoder.encode_batch(catalogs)
            alpha, b = bias_attend(h_enc, c_e, self.biasing, mask)
            out.output = combine(h_enc, b)
            out.alpha = alpha
        return out

    def lattice(self, batch: Batch) -> tuple[Tensor, EncoderOutput]:
        enc = self.encode(batch.features, batch.das, batch.catalogs)
        h_pre = self.prediction(batch.padded_targets)
        return rnnt.build_lattice(self.joint, enc.output, h_pre), enc

    def loss(self, batch: Batch) -> Tensor:
        lat, _ = self.lattice(batch)
        return rnnt.rnnt_loss_batch(lat, batch.targets, batch.frame_lengths, reduction="mean")

    def decode(self, features: np.ndarray, da: Optional[DialogAct] = None,
               catalog: Optional[Sequence[CatalogEntity]] = None,
               max_symbols: int = rnnt.MAX_SYMBOLS_PER_FRAME) -> list[int]:
        """Greedy hypothesis for one utterance ``[T, F]``."""
        with ad.no_tape():
            enc = self.encode(np.asarray(features)[None], [da] if da is not None else None,
                              [list(catalog or [])] if self.has_adapter else None)
        return rnnt.greedy_decode(enc.output.data[0], self.prediction, self.joint, max_symbols)
