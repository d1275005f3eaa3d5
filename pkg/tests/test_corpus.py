import dataclasses
import hashlib
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from da_bias import text
from da_bias.catalog import CATALOG_TYPES
from da_bias.corpus import (
    CorpusConfigError,
    CorpusSpec,
    Utterance,
    build_splits,
    generate_corpus,
    nearest_prototype,
    read_corpus,
    stack_downsample,
    synth_features,
    token_prototypes,
    write_corpus,
)

from helpers import small_corpus, small_spec

SCHEMA = {"id", "tokens", "frames_b64", "frames_shape", "da", "turn", "slots", "catalog", "tags"}


def _digest(d):
    h = hashlib.sha256()
    for p in sorted(d.iterdir()):
        h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_equal_seeds_give_identical_files(tmp_path):
    spec = small_spec()
    write_corpus(generate_corpus(spec), tmp_path / "a")
    write_corpus(generate_corpus(spec), tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    write_corpus(generate_corpus(dataclasses.replace(spec, seed=1)), tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_split_counts_and_file_round_trip(tmp_path):
    corpus = small_corpus()
    assert [len(corpus[s]) for s in ("train", "dev", "test")] == [40, 10, 20]
    write_corpus(corpus, tmp_path)
    line = json.loads((tmp_path / "test.jsonl").read_text().splitlines()[0])
    assert set(line) == SCHEMA
    back = read_corpus(tmp_path)
    for a in corpus["test"]:
        b = next(u for u in back["test"] if u.id == a.id)
        assert (a.tokens, a.da, a.turn, a.slots, a.tags) == (b.tokens, b.da, b.turn, b.slots, b.tags)
        np.testing.assert_array_equal(a.raw_frames, b.raw_frames)
        np.testing.assert_array_equal(a.frames, b.frames)


def test_generated_utterance_invariants():
    corpus = small_corpus()
    for u in corpus["train"] + corpus["test"]:
        assert u.turn in (1, 2, 3)
        assert (u.turn == 1) == u.da.is_default
        for s, e, t in u.slots:
            assert 0 <= s < e <= len(u.tokens) and t in CATALOG_TYPES
        if u.has("user_specific"):
            assert u.slots and all(ent in u.catalog for ent in u.entities)
            # span surface equals the catalog entry
            for (s, e, t), ent in zip(u.slots, u.entities):
                assert text.decode(u.tokens[s:e]) in [x.text for x in u.catalog.typed(t)]
        else:
            assert u.has("general") and not u.slots
        assert u.raw_frames.shape == (len(u.tokens) * small_spec().frames_per_token, small_spec().f_raw)


def test_follow_up_turns_are_non_default():
    utts = small_corpus()["train"]
    later = [u for u in utts if u.turn >= 2]
    assert later and all(u.has("non_default_da") for u in later)


def test_sessions_share_catalogs_and_chain_slots():
    utts = small_corpus()["train"]
    sessions = {}
    for u in utts:
        sessions.setdefault(u.id.rsplit("-", 1)[0], []).append(u)
    for turns in sessions.values():
        assert all(t.catalog == turns[0].catalog for t in turns)
        slots = {t.da.slot for t in turns if t.turn > 1}
        if turns[0].has("user_specific") and len(turns) > 1:
            assert len(slots) == 1


def test_small_catalog_is_rejected():
    with pytest.raises(CorpusConfigError):
        CorpusSpec(catalog_size=1)


def test_noiseless_frames_are_prototypes():
    spec = CorpusSpec(noise_sigma=0.0, frames_per_token=3, f_raw=8)
    P = token_prototypes(spec)
    assert np.allclose(np.linalg.norm(P, axis=1), 1.0)
    toks = text.encode("call bob")
    f = synth_features(toks, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(f, np.repeat(P[toks], 3, axis=0))
    assert list(nearest_prototype(f[::3], P)) == toks
    g = synth_features(toks, dataclasses.replace(spec, noise_sigma=0.2), np.random.default_rng(5))
    h = synth_features(toks, dataclasses.replace(spec, noise_sigma=0.2), np.random.default_rng(5))
    np.testing.assert_array_equal(g, h)


def test_token_learnability_floor():
    spec = CorpusSpec(n_train=300, n_dev=0, n_test=0, noise_sigma=0.1, frames_per_token=2)
    P = token_prototypes(spec)
    correct = total = 0
    for u in generate_corpus(spec)["train"]:
        per_token = u.raw_frames.reshape(len(u.tokens), spec.frames_per_token, -1).mean(1)
        correct += int((nearest_prototype(per_token, P) == np.array(u.tokens)).sum())
        total += len(u.tokens)
    assert correct / total >= 0.99


def test_confusable_letters_sit_at_the_configured_distance():
    spec = CorpusSpec(confusable_pairs="mn,csk", confusable_distance=0.4)
    P = token_prototypes(spec)
    for group in ("mn", "csk"):
        ids = text.encode(group)
        for i in ids:
            for j in ids:
                if i < j:
                    assert np.linalg.norm(P[i] - P[j]) == pytest.approx(0.4, abs=1e-12)


def test_stacking_nine_frames_to_three():
    raw = np.random.default_rng(0).normal(size=(9, 64))
    out = stack_downsample(raw)
    assert out.shape == (3, 192)
    np.testing.assert_array_equal(out[0], np.concatenate([np.zeros(128), raw[0]]))
    np.testing.assert_array_equal(out[1], np.concatenate([raw[1], raw[2], raw[3]]))
    np.testing.assert_array_equal(out[2], np.concatenate([raw[4], raw[5], raw[6]]))


def test_single_frame_is_zero_padded():
    raw = np.arange(4.0)[None]
    np.testing.assert_array_equal(stack_downsample(raw, 2, 3), [[0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2, 3]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(0, 3), st.integers(1, 4))
def test_stacking_shape_and_identity(T, left, ds):
    raw = np.random.default_rng(T).normal(size=(T, 3))
    out = stack_downsample(raw, left, ds)
    assert out.shape == (-(-T // ds), 3 * (left + 1))
    np.testing.assert_array_equal(stack_downsample(raw, 0, 1), raw)
    # current frame sits last
    np.testing.assert_array_equal(out[:, -3:], raw[::ds])


def test_build_splits(caplog):
    utts = small_corpus()["test"]
    with caplog.at_level(logging.WARNING):
        s = build_splits(utts)
    assert {u.id for u in s["user_specific"]} | {u.id for u in s["general"]} == {u.id for u in utts}
    assert not {u.id for u in s["default_da"]} & {u.id for u in s["non_default_da"]}
    for k in (1, 2, 3):
        for u in s[f"turn{k}"]:
            assert u.turn == k and not u.da.is_default and u.has("user_specific")
    # the first turn always carries the default act, so turn1 is empty
    assert s["turn1"] == [] and "turn1" in caplog.text
