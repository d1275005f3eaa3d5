"""Small models and corpora shared by the test modules."""

from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np

from da_bias.corpus import CorpusSpec, generate_corpus
from da_bias.dialog_act import DEFAULT_DA, DaVocabulary, DialogAct
from da_bias.model import ContextualTransducer, ModelConfig

ACTS = [DEFAULT_DA, DialogAct("SlotValueElicitation", "ProperName"),
        DialogAct("SlotValueElicitation", "DeviceName"), DialogAct("SlotConfirmation", "DeviceLocation")]


def tiny_config(**changes) -> ModelConfig:
    base = ModelConfig(feat_dim=6, enc_layers=1, enc_hidden=5, enc_out=4, pred_hidden=5, pred_embed=3,
                       joint_hidden=4, da_embed=3, d_da=3, catalog_embed=3, catalog_hidden=3,
                       catalog_dim=4, att_dim=3, max_catalog=10)
    return dataclasses.replace(base, **changes)


def tiny_model(fusion="none", adapter=False, seed=0, **changes) -> ContextualTransducer:
    return ContextualTransducer(tiny_config(fusion_mode=fusion, **changes), DaVocabulary.from_acts(ACTS),
                                seed=seed, with_adapter=adapter)


def small_spec(**changes) -> CorpusSpec:
    base = CorpusSpec(n_train=40, n_dev=10, n_test=20, catalog_size=4, f_raw=4)
    return dataclasses.replace(base, **changes)


@lru_cache(maxsize=None)
def small_corpus(**changes):
    return generate_corpus(small_spec(**changes))


def small_model_config(spec: CorpusSpec, **changes) -> ModelConfig:
    return tiny_config(feat_dim=spec.feat_dim, **changes)


def random_features(rng: np.random.Generator, B: int, T: int, F: int) -> np.ndarray:
    return rng.uniform(-1, 1, (B, T, F))
