"""Greedy decoding of test sets and WER/WERR reports against a baseline."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import text
from .catalog import select_catalogs
from .corpus import SUBSETS, Utterance, build_splits
from .metrics import UndefinedMetricError, WerStats, char_spans_to_words, slot_wer, wer, werr
from .model import ContextualTransducer

log = logging.getLogger(__name__)

CSV_COLUMNS = ("split", "metric", "model_wer", "baseline_wer", "werr_pct", "n_utterances", "n_ref_tokens")
TURN_SPLITS = ("turn1", "turn2", "turn3")


def eval_threads() -> int:
    """Decoding worker count from ``DA_BIAS_THREADS`` (default 1)."""
    raw = os.environ.get("DA_BIAS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DA_BIAS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"DA_BIAS_THREADS must be a positive integer, got {raw!r}")
    return n


def decode_utterances(model: ContextualTransducer, utts: Sequence[Utterance], selection: bool = True,
                      threads: Optional[int] = None) -> dict[str, list[int]]:
    """Greedy hypotheses keyed by utterance id.

    The catalog fed to an adapter-equipped model is chosen from the dialog
    act alone; the reference entity is never consulted.
    """
    def one(u: Utterance) -> list[int]:
        catalog = None
        if model.has_adapter:
            catalog = select_catalogs(u.da, u.catalog, model.config.max_catalog, enabled=selection)
        return model.decode(u.frames, u.da, catalog)

    n = threads or eval_threads()
    if n == 1:
        hyps = [one(u) for u in utts]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            hyps = list(pool.map(one, utts))
    return {u.id: h for u, h in zip(utts, hyps)}


def _word_spans(u: Utterance) -> list[tuple[int, int, str]]:
    return char_spans_to_words(u.transcript, u.slots)


def score(utts: Sequence[Utterance], hyps: dict[str, list[int]]) -> WerStats:
    total = WerStats()
    for u in utts:
        total = total + wer(text.words(u.tokens), text.words(hyps[u.id]))
    return total


def score_slots(utts: Sequence[Utterance], hyps: dict[str, list[int]]) -> dict[str, WerStats]:
    out: dict[str, WerStats] = {}
    for u in utts:
        for stype, st in slot_wer(text.words(u.tokens), text.words(hyps[u.id]), _word_spans(u)).items():
            out[stype] = out.get(stype, WerStats()) + st
    return out


@dataclass
class EvalRow:
    split: str
    metric: str
    model_wer: float
    baseline_wer: float
    werr_pct: Optional[float]
    n_utterances: int
    n_ref_tokens: int


def _werr_or_none(b: float, a: float, where: str) -> Optional[float]:
    try:
        return werr(b, a)
    except UndefinedMetricError:
        log.warning("WERR undefined for %s: baseline WER is zero", where)
        return None


@dataclass
class EvalReport:
    model: str
    baseline: str
    rows: list[EvalRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def row(self, split: str, metric: str = "wer") -> EvalRow:
        for r in self.rows:
            if r.split == split and r.metric == metric:
                return r
        raise KeyError(f"no row for split={split!r} metric={metric!r}")

    def werr(self, split: str, metric: str = "wer") -> Optional[float]:
        return self.row(split, metric).werr_pct

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"model": self.model, "baseline": self.baseline, "seed": self.seed,
                           "config": self.config, "rows": [asdict(r) for r in self.rows]},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, data: str) -> "EvalReport":
        obj = json.loads(data)
        return cls(obj["model"], obj["baseline"], [EvalRow(**r) for r in obj["rows"]], obj["config"], obj["seed"])

    def write(self, out_dir: os.PathLike, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json() + "\n")
        return csv_path, json_path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def build_report(utts: Sequence[Utterance], model_hyps: dict[str, list[int]], baseline_hyps: dict[str, list[int]],
                 model_name: str = "model", baseline_name: str = "baseline",
                 config: Optional[dict] = None, seed: Optional[int] = None) -> EvalReport:
    """WER per subset, slot type and turn, with WERR against the baseline."""
    rep = EvalReport(model_name, baseline_name, config=dict(config or {}), seed=seed)
    subsets = build_splits(utts)
    for name in SUBSETS:
        us = subsets[name]
        if not us:
            continue
        a, b = score(us, model_hyps), score(us, baseline_hyps)
        rep.rows.append(EvalRow(name, "wer", a.wer, b.wer, _werr_or_none(b.wer, a.wer, name),
                                len(us), a.reference_length))
    us = subsets["user_specific"]
    if us:
        sa, sb = score_slots(us, model_hyps), score_slots(us, baseline_hyps)
        for stype in sorted(sa):
            a, b = sa[stype], sb[stype]
            n = sum(1 for u in us if any(t == stype for _, _, t in u.slots))
            rep.rows.append(EvalRow("user_specific", f"slot:{stype}", a.wer, b.wer,
                                    _werr_or_none(b.wer, a.wer, f"slot {stype}"), n, a.reference_length))
    turns = [rep.row(t) for t in TURN_SPLITS if any(r.split == t for r in rep.rows)]
    turns = [r for r in turns if r.werr_pct is not None]
    if turns:
        rep.rows.append(EvalRow(
            "turn_avg", "werr_mean",
            sum(r.model_wer for r in turns) / len(turns),
            sum(r.baseline_wer for r in turns) / len(turns),
            sum(r.werr_pct for r in turns) / len(turns),
            sum(r.n_utterances for r in turns), sum(r.n_ref_tokens for r in turns),
        ))
    return rep


def report(model: ContextualTransducer, baseline: ContextualTransducer, utts: Sequence[Utterance],
           selection: bool = True, model_name: str = "model", baseline_name: str = "baseline",
           config: Optional[dict] = None, seed: Optional[int] = None,
           threads: Optional[int] = None) -> EvalReport:
    """Decode ``utts`` with both models and compare them."""
    mh = decode_utterances(model, utts, selection, threads)
    bh = mh if baseline is model else decode_utterances(baseline, utts, selection, threads)
    return build_report(utts, mh, bh, model_name, baseline_name, config, seed)


def mean_or_nan(values: Sequence[Optional[float]]) -> float:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else math.nan
