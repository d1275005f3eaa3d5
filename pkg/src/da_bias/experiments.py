"""Experiment drivers: the full fusion x policy matrix and the compact
per-seed trend run used for the desk-scale comparison."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import Corpus, CorpusSpec, build_splits, generate_corpus
from .evaluate import EvalReport, build_report, decode_utterances, score
from .metrics import werr
from .model import ModelConfig
from .trainer import TrainConfig, adapt_stage2, pretrain_stage1

log = logging.getLogger(__name__)

DA_FUSIONS = ("early", "late", "early_late")
POLICIES = ("freeze", "unfreeze")


@dataclass(frozen=True)
class MatrixRow:
    name: str
    fusion: str
    adapt: bool
    policy: str = "freeze"


def matrix_rows(da_only_fusion: str = "early_late") -> list[MatrixRow]:
    rows = [MatrixRow("no-context", "none", False),
            MatrixRow("DA-only", da_only_fusion, False),
            MatrixRow("CA", "none", True)]
    for fusion in DA_FUSIONS:
        for policy in POLICIES:
            rows.append(MatrixRow(f"DA-CA {fusion} {policy}", fusion, True, policy))
    return rows


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(stage="adapt", max_steps=600))
    seed: int = 0
    da_only_fusion: str = "early_late"
    test_limit: Optional[int] = None   # evaluate on the first N test utterances

    def to_json(self) -> dict:
        return {"corpus": dataclasses.asdict(self.corpus), "model": self.model.to_json(),
                "pretrain": dataclasses.asdict(self.pretrain), "adapt": dataclasses.asdict(self.adapt),
                "seed": self.seed, "da_only_fusion": self.da_only_fusion, "test_limit": self.test_limit}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


class Manifest:
    """JSON record of finished sub-runs, keyed by name with a config digest.
    A sub-run whose entry matches the current digest is skipped."""

    def __init__(self, path: Path):
        self.path = path
        self.entries: dict[str, dict] = json.loads(path.read_text())["runs"] if path.exists() else {}

    def done(self, name: str, digest: str) -> bool:
        e = self.entries.get(name)
        return e is not None and e.get("digest") == digest

    def record(self, name: str, digest: str, **info) -> None:
        self.entries[name] = {"digest": digest, **info}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"runs": self.entries}, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)


def _stage1(cfg: ExperimentConfig, corpus: Corpus, fusion: str) -> Checkpoint:
    tc = dataclasses.replace(cfg.pretrain, stage="pretrain", fusion_mode=fusion, seed=cfg.seed)
    return pretrain_stage1(tc, cfg.model, corpus)


def _stage2(cfg: ExperimentConfig, corpus: Corpus, stage1: Checkpoint, policy: str, selection: bool) -> Checkpoint:
    tc = dataclasses.replace(cfg.adapt, stage="adapt", fusion_mode=stage1.model.config.fusion_mode,
                             da_freeze_policy=policy, catalog_selection=selection, seed=cfg.seed)
    return adapt_stage2(tc, stage1, corpus)


def _test_set(cfg: ExperimentConfig, corpus: Corpus):
    test = corpus["test"]
    return test if cfg.test_limit is None else test[: cfg.test_limit]


def run_matrix(cfg: ExperimentConfig, out_dir, corpus: Optional[Corpus] = None,
               progress: Optional[Callable[[str], None]] = None) -> list[EvalReport]:
    """Train and score every matrix row; WERRs are against the no-context row.

    Checkpoints and per-row reports land under ``out_dir``; finished rows are
    reloaded instead of retrained.  A failing row raises after earlier rows
    have been written, so partial results survive.
    """
    out = Path(out_dir)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "matrix_manifest.json")
    corpus = corpus or generate_corpus(dataclasses.replace(cfg.corpus, seed=cfg.seed))
    test = _test_set(cfg, corpus)
    base_digest = _digest(cfg.to_json())
    say = progress or (lambda msg: log.info(msg))

    stage1: dict[str, Checkpoint] = {}

    def get_stage1(fusion: str) -> Checkpoint:
        if fusion not in stage1:
            name = f"stage1-{fusion}"
            path = out / "ckpt" / f"{name}.ckpt"
            if manifest.done(name, base_digest) and path.exists():
                stage1[fusion] = load_checkpoint(path)
            else:
                t0 = time.time()
                stage1[fusion] = _stage1(cfg, corpus, fusion)
                save_checkpoint(stage1[fusion], path)
                manifest.record(name, base_digest, seconds=round(time.time() - t0, 1))
                say(f"trained {name}")
        return stage1[fusion]

    models: dict[str, Checkpoint] = {}
    for row in matrix_rows(cfg.da_only_fusion):
        s1 = get_stage1(row.fusion)
        if not row.adapt:
            models[row.name] = s1
            continue
        slug = row.name.replace(" ", "_")
        path = out / "ckpt" / f"{slug}.ckpt"
        if manifest.done(slug, base_digest) and path.exists():
            models[row.name] = load_checkpoint(path)
            continue
        t0 = time.time()
        models[row.name] = _stage2(cfg, corpus, s1, row.policy, cfg.adapt.catalog_selection)
        save_checkpoint(models[row.name], path)
        manifest.record(slug, base_digest, seconds=round(time.time() - t0, 1))
        say(f"trained {row.name}")

    selection = cfg.adapt.catalog_selection
    hyps = {name: decode_utterances(ck.model, test, selection) for name, ck in models.items()}
    reports = []
    for name in models:
        rep = build_report(test, hyps[name], hyps["no-context"], name, "no-context",
                           config=cfg.to_json(), seed=cfg.seed)
        reports.append(rep)
    write_matrix_csv(reports, out / "matrix.csv")
    return reports


def write_matrix_csv(reports: list[EvalReport], path: Path) -> None:
    """One line per model with WERR columns per split."""
    splits = ["user_specific", "general", "non_default_da", "default_da", "turn1", "turn2", "turn3", "turn_avg"]
    lines = ["model," + ",".join(f"{s}_werr_pct" for s in splits) + ",user_specific_wer"]
    for rep in reports:
        cells = []
        for s in splits:
            metric = "werr_mean" if s == "turn_avg" else "wer"
            try:
                v = rep.werr(s, metric)
            except KeyError:
                v = None
            cells.append("" if v is None else f"{v:.4f}")
        lines.append(f"{rep.model}," + ",".join(cells) + f",{rep.row('user_specific').model_wer:.6f}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# compact trend run


@dataclass
class TrendResult:
    seed: int
    wer: dict[str, dict[str, float]]          # model -> subset -> WER
    seconds: float

    def werr(self, model: str, subset: str) -> float:
        return werr(self.wer["no-context"][subset], self.wer[model][subset])

    @property
    def ca_gain(self) -> float:
        return self.werr("CA", "user_specific")

    @property
    def da_vs_ca(self) -> tuple[float, float]:
        return self.werr("DA-CA", "non_default_da"), self.werr("CA", "non_default_da")

    @property
    def selection_vs_bypass(self) -> tuple[float, float]:
        return self.werr("DA-CA", "user_specific"), self.werr("DA-CA bypass", "user_specific")


def desk_trend_config(seed: int = 0, **corpus_changes) -> ExperimentConfig:
    """Calibrated desk-scale settings for the trend comparison.

    Stage 1 needs far more utterances than the default corpus to get past
    the blank-only plateau within ~1200 steps; stage 2 uses a larger step
    size than the nominal adapter rate because its budget is only 400 steps.
    """
    corpus = dataclasses.replace(CorpusSpec(n_train=6000, seed=seed), **corpus_changes)
    return ExperimentConfig(
        corpus=corpus,
        model=ModelConfig(feat_dim=corpus.feat_dim),
        pretrain=TrainConfig(batch_size=16, max_steps=1200),
        adapt=TrainConfig(stage="adapt", batch_size=8, max_steps=400, adapt_lr=1e-2),
        seed=seed,
    )


def trend_run(cfg: ExperimentConfig) -> TrendResult:
    """No-context vs CA vs DA-guided CA (early-late, unfreeze) with and
    without catalog selection, for one seed."""
    t0 = time.time()
    corpus = generate_corpus(dataclasses.replace(cfg.corpus, seed=cfg.seed))
    test = _test_set(cfg, corpus)
    base = _stage1(cfg, corpus, "none")
    da = _stage1(cfg, corpus, "early_late")
    models = {
        "no-context": (base, True),
        "CA": (_stage2(cfg, corpus, base, "freeze", False), False),
        "DA-CA": (_stage2(cfg, corpus, da, "unfreeze", True), True),
        "DA-CA bypass": (_stage2(cfg, corpus, da, "unfreeze", False), False),
    }
    subsets = build_splits(test)
    wers = {}
    for name, (ck, selection) in models.items():
        hyps = decode_utterances(ck.model, test, selection)
        wers[name] = {s: score(subsets[s], hyps).wer for s in ("user_specific", "non_default_da", "general")}
        log.info("seed %d %s %s", cfg.seed, name, wers[name])
    return TrendResult(cfg.seed, wers, time.time() - t0)
