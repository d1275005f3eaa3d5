"""Synthetic multi-turn dialog corpus with user catalogs and dialog acts.

Speech is replaced by prototype features: each character owns a fixed
unit-norm vector, every token emits ``frames_per_token`` noisy copies of it,
and the frames go through the usual left-stacking / downsampling transform.
"""

from __future__ import annotations

import base64
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import text
from .catalog import CATALOG_TYPES, CatalogEntity, CatalogSet
from .dialog_act import DEFAULT_DA, DialogAct, parse_da

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "dev", "test")
SLOT_OF_TYPE = {"ContactName": "ProperName", "DeviceName": "DeviceName", "DeviceLocation": "DeviceLocation"}

# carrier templates per turn; "{}" is the entity
FIRST_TURN = {
    "ContactName": ["call {}", "drop in on {}", "message {}", "phone {}"],
    "DeviceName": ["turn on {}", "switch off {}", "dim {}", "start {}"],
    "DeviceLocation": ["lights in {}", "turn off the {} lights", "music in {}", "heat the {}"],
}
ELICITED = ["{}", "i said {}", "it is {}", "{} please"]
CONFIRMED = ["yes {}", "no {}", "{}", "right {}"]
GENERAL_FIRST = [
    "what time is it", "what is the weather", "set a timer", "tell me a joke", "stop the music",
    "how tall is the tower", "play some jazz", "add milk to the list", "turn up the volume", "good morning",
]
GENERAL_FOLLOW = ["yes", "no thanks", "sure", "cancel that", "the next one", "not now"]

ELICIT_ACTION = "SlotValueElicitation"
CONFIRM_ACTION = "SlotConfirmation"
GENERAL_FOLLOW_DA = DialogAct("Confirmation", "None")

ONSETS = ["b", "c", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "br", "kr", "cl"]
VOWELS = ["a", "e", "i", "o", "u", "y", "ai", "ou"]
CODAS = ["", "", "", "n", "m", "r", "s", "z", "k", "c"]


class CorpusConfigError(ValueError):
    pass


@dataclass
class CorpusSpec:
    seed: int = 0
    n_train: int = 400
    n_dev: int = 100
    n_test: int = 300
    user_fraction: float = 0.6          # share of sessions that carry a catalog entity
    catalog_size: int = 20              # entities per catalog type
    entity_words_max: int = 2
    syllables_min: int = 2
    syllables_max: int = 3
    grammar: str = "iva"
    frames_per_token: int = 4
    noise_sigma: float = 0.3
    confusable_pairs: str = "ck,sz,iy,mn"   # letter groups with near-identical prototypes
    confusable_distance: float = 0.4        # prototype distance inside a group
    f_raw: int = 64
    stack_left: int = 2
    downsample: int = 3

    def __post_init__(self):
        if self.catalog_size < 2:
            raise CorpusConfigError("catalog_size must leave room for at least one distractor")
        if self.grammar != "iva":
            raise CorpusConfigError(f"unknown carrier grammar {self.grammar!r}")
        if self.noise_sigma < 0 or self.frames_per_token < 1:
            raise CorpusConfigError("noise_sigma must be >= 0 and frames_per_token >= 1")

    @property
    def feat_dim(self) -> int:
        return self.f_raw * (self.stack_left + 1)

    def count(self, split: str) -> int:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}[split]


@dataclass(eq=False)
class Utterance:
    id: str
    tokens: list[int]
    raw_frames: np.ndarray
    da: DialogAct
    turn: int
    slots: list[tuple[int, int, str]]
    catalog: CatalogSet
    tags: list[str]
    stack_left: int = 2
    downsample: int = 3

    @cached_property
    def frames(self) -> np.ndarray:
        return stack_downsample(self.raw_frames, self.stack_left, self.downsample)

    @property
    def transcript(self) -> str:
        return text.decode(self.tokens)

    @property
    def entities(self) -> list[CatalogEntity]:
        return [CatalogEntity(text.decode(self.tokens[s:e]), t) for s, e, t in self.slots]

    def has(self, tag: str) -> bool:
        return tag in self.tags

    def to_json(self) -> dict:
        raw = np.ascontiguousarray(self.raw_frames, dtype="<f8")
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "frames_b64": base64.b64encode(raw.tobytes()).decode("ascii"),
            "frames_shape": list(raw.shape),
            "da": str(self.da),
            "turn": self.turn,
            "slots": [[s, e, t] for s, e, t in self.slots],
            "catalog": self.catalog.to_json(),
            "tags": list(self.tags),
        }

    @classmethod
    def from_json(cls, obj: dict, stack_left: int = 2, downsample: int = 3) -> "Utterance":
        raw = np.frombuffer(base64.b64decode(obj["frames_b64"]), dtype="<f8").reshape(obj["frames_shape"])
        return cls(
            id=obj["id"], tokens=list(obj["tokens"]), raw_frames=raw.astype(np.float64),
            da=parse_da(obj["da"]), turn=int(obj["turn"]),
            slots=[(int(s), int(e), str(t)) for s, e, t in obj["slots"]],
            catalog=CatalogSet.from_json(obj["catalog"]), tags=list(obj["tags"]),
            stack_left=stack_left, downsample=downsample,
        )


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]

    def acts(self) -> set[DialogAct]:
        return {u.da for us in self.splits.values() for u in us}


# ---------------------------------------------------------------------------
# features


def token_prototypes(spec: CorpusSpec) -> np.ndarray:
    """``[VOCAB_SIZE, f_raw]`` unit-norm rows, fixed per seed.

    Letters of a confusable group share a base direction and differ by a
    small orthogonal component, so that their pairwise distance is
    ``confusable_distance`` -- the analogue of names that sound alike but are
    spelled differently.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    P = rng.normal(size=(text.VOCAB_SIZE, spec.f_raw))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    d = spec.confusable_distance
    delta = d / np.sqrt(2.0 - d * d)
    for group in filter(None, spec.confusable_pairs.split(",")):
        ids = text.encode(group)
        base = P[ids[0]].copy()
        basis = [base]
        for i in ids:
            u = rng.normal(size=spec.f_raw)
            for b in basis:
                u -= (u @ b) * b
            u /= np.linalg.norm(u)
            basis.append(u)
            v = base + delta * u
            P[i] = v / np.linalg.norm(v)
    return P


def synth_features(tokens: Sequence[int], spec: CorpusSpec, rng: np.random.Generator,
                   prototypes: Optional[np.ndarray] = None) -> np.ndarray:
    """Raw frames ``[len(tokens) * frames_per_token, f_raw]``."""
    if len(tokens) == 0:
        raise ValueError("synth_features: empty token sequence")
    P = token_prototypes(spec) if prototypes is None else prototypes
    frames = np.repeat(P[np.asarray(tokens)], spec.frames_per_token, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.normal(size=frames.shape)
    return frames


def stack_downsample(raw: np.ndarray, stack_left: int = 2, downsample: int = 3) -> np.ndarray:
    """Stack each frame with its ``stack_left`` predecessors (zero padded at the
    start, oldest first) and keep every ``downsample``-th frame from frame 0."""
    raw = np.asarray(raw, dtype=np.float64)
    T, F = raw.shape
    padded = np.concatenate([np.zeros((stack_left, F)), raw], axis=0)
    keep = np.arange(0, T, downsample)
    parts = [padded[keep + k] for k in range(stack_left + 1)]
    return np.concatenate(parts, axis=1)


def nearest_prototype(frames: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    d = ((frames[:, None, :] - prototypes[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


# ---------------------------------------------------------------------------
# generation


def _word(rng: np.random.Generator, spec: CorpusSpec) -> str:
    n = int(rng.integers(spec.syllables_min, spec.syllables_max + 1))
    return "".join(rng.choice(ONSETS) + rng.choice(VOWELS) + rng.choice(CODAS) for _ in range(n))


def _entity(rng: np.random.Generator, spec: CorpusSpec) -> str:
    n = int(rng.integers(1, spec.entity_words_max + 1))
    return " ".join(_word(rng, spec) for _ in range(n))


def make_catalog(rng: np.random.Generator, spec: CorpusSpec) -> CatalogSet:
    lists = []
    for _ in CATALOG_TYPES:
        seen: list[str] = []
        while len(seen) < spec.catalog_size:
            e = _entity(rng, spec)
            if e not in seen:
                seen.append(e)
        lists.append(seen)
    return CatalogSet(*lists)


def _fill(template: str, entity: str) -> tuple[str, tuple[int, int]]:
    start = template.index("{}")
    s = template.replace("{}", entity)
    return s, (start, start + len(entity))


def _utterance(uid, sentence, span, etype, da, turn, catalog, tags, spec, rng, protos) -> Utterance:
    tokens = text.encode(sentence)
    slots = [(span[0], span[1], etype)] if span else []
    return Utterance(
        id=uid, tokens=tokens, raw_frames=synth_features(tokens, spec, rng, protos), da=da,
        turn=turn, slots=slots, catalog=catalog,
        tags=sorted(tags | {"default_da" if da.is_default else "non_default_da", f"turn{turn}"}),
        stack_left=spec.stack_left, downsample=spec.downsample,
    )


def generate_session(spec: CorpusSpec, split: str, index: int, protos: np.ndarray) -> list[Utterance]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SPLIT_NAMES.index(split), index]))
    catalog = make_catalog(rng, spec)
    prefix = f"{split}-{index:05d}"
    if rng.random() < spec.user_fraction:
        etype = CATALOG_TYPES[int(rng.integers(len(CATALOG_TYPES)))]
        entity = catalog.typed(etype)[int(rng.integers(spec.catalog_size))].text
        slot = SLOT_OF_TYPE[etype]
        turns = [
            (rng.choice(FIRST_TURN[etype]), DEFAULT_DA),
            (rng.choice(ELICITED), DialogAct(ELICIT_ACTION, slot)),
            (rng.choice(CONFIRMED), DialogAct(CONFIRM_ACTION, slot)),
        ]
        out = []
        for k, (tpl, da) in enumerate(turns, start=1):
            sentence, span = _fill(str(tpl), entity)
            out.append(_utterance(f"{prefix}-t{k}", sentence, span, etype, da, k, catalog,
                                  {"user_specific"}, spec, rng, protos))
        return out
    first = str(rng.choice(GENERAL_FIRST))
    follow = str(rng.choice(GENERAL_FOLLOW))
    return [
        _utterance(f"{prefix}-t1", first, None, None, DEFAULT_DA, 1, catalog, {"general"}, spec, rng, protos),
        _utterance(f"{prefix}-t2", follow, None, None, GENERAL_FOLLOW_DA, 2, catalog, {"general"}, spec, rng, protos),
    ]


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic in ``spec``; each split holds exactly its configured count."""
    protos = token_prototypes(spec)
    corpus = Corpus(spec)
    for split in SPLIT_NAMES:
        utts: list[Utterance] = []
        index = 0
        while len(utts) < spec.count(split):
            utts.extend(generate_session(spec, split, index, protos))
            index += 1
        corpus.splits[split] = utts[: spec.count(split)]
    return corpus


# ---------------------------------------------------------------------------
# evaluation subsets

SUBSETS = ("user_specific", "general", "default_da", "non_default_da", "turn1", "turn2", "turn3")


def build_splits(utterances: Sequence[Utterance]) -> dict[str, list[Utterance]]:
    """Evaluation subsets.  Default/non-default DA sets partition the
    user-specific set; turn-wise sets are user-specific, non-default-DA
    utterances of one turn."""
    us = [u for u in utterances if u.has("user_specific")]
    out = {
        "user_specific": us,
        "general": [u for u in utterances if u.has("general")],
        "default_da": [u for u in us if u.da.is_default],
        "non_default_da": [u for u in us if not u.da.is_default],
    }
    for k in (1, 2, 3):
        out[f"turn{k}"] = [u for u in out["non_default_da"] if u.turn == k]
    for name, subset in out.items():
        if not subset:
            log.warning("evaluation subset %r is empty", name)
    return out


# ---------------------------------------------------------------------------
# files


def write_corpus(corpus: Corpus, out_dir: os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for split, utts in corpus.splits.items():
        p = out / f"{split}.jsonl"
        with open(p, "w", encoding="utf-8") as fh:
            for u in sorted(utts, key=lambda u: u.id):
                fh.write(json.dumps(u.to_json(), sort_keys=True) + "\n")
        paths.append(p)
    spec_path = out / "corpus_spec.json"
    spec_path.write_text(json.dumps(asdict(corpus.spec), sort_keys=True, indent=1) + "\n")
    paths.append(spec_path)
    return paths


def read_split(path: os.PathLike, spec: Optional[CorpusSpec] = None) -> list[Utterance]:
    sl, ds = (spec.stack_left, spec.downsample) if spec else (2, 3)
    with open(path, encoding="utf-8") as fh:
        return [Utterance.from_json(json.loads(line), sl, ds) for line in fh if line.strip()]


def read_corpus(in_dir: os.PathLike) -> Corpus:
    d = Path(in_dir)
    spec_obj = json.loads((d / "corpus_spec.json").read_text())
    names = {f.name for f in fields(CorpusSpec)}
    spec = CorpusSpec(**{k: v for k, v in spec_obj.items() if k in names})
    corpus = Corpus(spec)
    for split in SPLIT_NAMES:
        p = d / f"{split}.jsonl"
        if p.exists():
            corpus.splits[split] = read_split(p, spec)
    return corpus


def iter_entities(utts: Iterable[Utterance]) -> Iterable[CatalogEntity]:
    for u in utts:
        yield from u.entities
