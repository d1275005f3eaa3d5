"""Command-line entry point.

    da-bias datagen  --spec corpus.cfg --out data/
    da-bias pretrain --config run.cfg --data data/ --out runs/s1 [--fusion early_late]
    da-bias adapt    --config run.cfg --data data/ --ckpt runs/s1/model.ckpt --out runs/s2 [--da-policy unfreeze]
    da-bias decode   --data data/ --ckpt runs/s2/model.ckpt --out runs/s2/decode
    da-bias eval     --data data/ --ckpt runs/s2/model.ckpt --baseline-ckpt runs/s1/model.ckpt --out runs/s2/eval
    da-bias ablate   --config run.cfg --data data/ --ckpt runs/s1/model.ckpt --out runs/ablate [--no-catalog-selection]
    da-bias matrix   --config run.cfg --out runs/matrix

Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import Corpus, CorpusConfigError, generate_corpus, read_corpus, write_corpus
from .dialog_act import FUSION_MODES
from .evaluate import decode_utterances, report
from .experiments import ExperimentConfig, run_matrix
from .trainer import TrainingError, adapt_stage2, pretrain_stage1
from . import text

log = logging.getLogger("da_bias")

COMMANDS = ("datagen", "pretrain", "adapt", "decode", "eval", "ablate", "matrix")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def version_text() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="da-bias", description="Dialog-act guided contextual adapters for transducer ASR (toy scale).")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the seed key")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", default=[], help="config override (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("datagen", help="generate the synthetic corpus")
    sp.add_argument("--spec", help="corpus key=value file (alias of --config)")
    common(sp)

    sp = sub.add_parser("pretrain", help="stage 1: transducer (+ DA encoder and fusion)")
    common(sp)
    sp.add_argument("--data", help="corpus directory (generated from the config when omitted)")
    sp.add_argument("--fusion", choices=FUSION_MODES)

    sp = sub.add_parser("adapt", help="stage 2: catalog encoder + biasing network")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--ckpt", help="stage-1 checkpoint")
    sp.add_argument("--da-policy", choices=("freeze", "unfreeze"))
    sp.add_argument("--no-catalog-selection", action="store_true", help="feed all three catalogs")

    sp = sub.add_parser("decode", help="greedy decoding of the test split")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--ckpt")
    sp.add_argument("--no-catalog-selection", action="store_true")

    sp = sub.add_parser("eval", help="WER/WERR report against a baseline checkpoint")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--ckpt")
    sp.add_argument("--baseline-ckpt")
    sp.add_argument("--no-catalog-selection", action="store_true")

    sp = sub.add_parser("ablate", help="stage 2 with and without DA catalog selection")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--ckpt")
    sp.add_argument("--baseline-ckpt", help="defaults to --ckpt")
    sp.add_argument("--da-policy", choices=("freeze", "unfreeze"))
    sp.add_argument("--no-catalog-selection", action="store_true", help="run only the bypass variant")

    sp = sub.add_parser("matrix", help="the 9-row fusion x policy experiment")
    common(sp)
    sp.add_argument("--data")
    return p


def _need(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        flags = ", ".join(f"--{n}" for n in missing)
        raise UsageError(f"da-bias {args.command}: missing required {flags}\n\n{args._usage}")


def _run_config(args) -> cfgmod.RunConfig:
    overrides = cfgmod.parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "fusion", None):
        overrides["fusion_mode"] = args.fusion
    if getattr(args, "da_policy", None):
        overrides["da_freeze_policy"] = args.da_policy
    path = getattr(args, "spec", None) or args.config
    return cfgmod.load(path, overrides)


def _corpus(args, rc: cfgmod.RunConfig) -> Corpus:
    if getattr(args, "data", None):
        try:
            return read_corpus(args.data)
        except (OSError, KeyError, ValueError) as e:
            raise RuntimeError(f"cannot read corpus from {args.data}: {e}") from e
    return generate_corpus(rc.corpus)


def _test(corpus: Corpus, rc: cfgmod.RunConfig):
    test = corpus["test"]
    return test if rc.test_limit is None else test[: rc.test_limit]


def _write_manifest(out: Path, args, rc: cfgmod.RunConfig, artifacts: Sequence[Path], extra: Optional[dict] = None):
    man = {
        "command": args.command,
        "seed": rc.train.seed,
        "version": version_text(),
        "config": rc.echo(),
        "inputs": {k: getattr(args, k) for k in ("data", "ckpt", "baseline_ckpt") if getattr(args, k, None)},
        "artifacts": sorted(p.name for p in artifacts),
    }
    man.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def cmd_datagen(args, rc, out):
    corpus = generate_corpus(rc.corpus)
    paths = write_corpus(corpus, out)
    _write_manifest(out, args, rc, paths, {"counts": {k: len(v) for k, v in corpus.splits.items()}})


def cmd_pretrain(args, rc, out):
    corpus = _corpus(args, rc)
    tc = dataclasses.replace(rc.train, stage="pretrain")
    stats: dict = {}
    ck = pretrain_stage1(tc, rc.model, corpus, stats)
    path = out / "model.ckpt"
    save_checkpoint(ck, path)
    _write_manifest(out, args, rc, [path], {"steps": ck.step, "best_step": stats.get("best_step")})


def _load(path: str):
    return load_checkpoint(path)


def cmd_adapt(args, rc, out):
    stage1 = _load(args.ckpt)
    corpus = _corpus(args, rc)
    tc = rc.adapt_config(fusion_mode=stage1.model.config.fusion_mode,
                         catalog_selection=rc.train.catalog_selection and not args.no_catalog_selection)
    stats: dict = {}
    ck = adapt_stage2(tc, stage1, corpus, stats)
    path = out / "model.ckpt"
    save_checkpoint(ck, path)
    _write_manifest(out, args, rc, [path], {"steps": ck.step, "best_step": stats.get("best_step"),
                                            "catalog_selection": tc.catalog_selection})


def cmd_decode(args, rc, out):
    ck = _load(args.ckpt)
    test = _test(_corpus(args, rc), rc)
    hyps = decode_utterances(ck.model, test, not args.no_catalog_selection)
    path = out / "hypotheses.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for u in test:
            fh.write(json.dumps({"id": u.id, "reference": u.transcript, "hypothesis": text.decode(hyps[u.id])},
                                sort_keys=True) + "\n")
    _write_manifest(out, args, rc, [path])


def cmd_eval(args, rc, out):
    model, base = _load(args.ckpt), _load(args.baseline_ckpt)
    test = _test(_corpus(args, rc), rc)
    rep = report(model.model, base.model, test, selection=not args.no_catalog_selection,
                 model_name=Path(args.ckpt).name, baseline_name=Path(args.baseline_ckpt).name,
                 config=rc.echo(), seed=rc.train.seed)
    paths = rep.write(out)
    _write_manifest(out, args, rc, paths)


def cmd_ablate(args, rc, out):
    stage1 = _load(args.ckpt)
    base = _load(args.baseline_ckpt) if args.baseline_ckpt else stage1
    corpus = _corpus(args, rc)
    test = _test(corpus, rc)
    variants = [("bypass", False)] if args.no_catalog_selection else [("selection", True), ("bypass", False)]
    paths, lines = [], ["variant,user_specific_werr_pct,non_default_da_werr_pct,general_werr_pct"]
    for name, selection in variants:
        tc = rc.adapt_config(fusion_mode=stage1.model.config.fusion_mode, catalog_selection=selection)
        ck = adapt_stage2(tc, stage1, corpus)
        ck_path = out / f"{name}.ckpt"
        save_checkpoint(ck, ck_path)
        rep = report(ck.model, base.model, test, selection=selection, model_name=name,
                     baseline_name=Path(args.baseline_ckpt or args.ckpt).name, config=rc.echo(), seed=rc.train.seed)
        paths += [ck_path, *rep.write(out, stem=f"report_{name}")]
        cells = []
        for split in ("user_specific", "non_default_da", "general"):
            try:
                v = rep.werr(split)
            except KeyError:
                v = None
            cells.append("" if v is None else f"{v:.4f}")
        lines.append(f"{name}," + ",".join(cells))
    summary = out / "ablation.csv"
    summary.write_text("\n".join(lines) + "\n")
    _write_manifest(out, args, rc, paths + [summary])


def cmd_matrix(args, rc, out):
    ec = ExperimentConfig(corpus=rc.corpus, model=rc.model, pretrain=dataclasses.replace(rc.train, stage="pretrain"),
                          adapt=rc.adapt_config(), seed=rc.train.seed, da_only_fusion=rc.da_only_fusion,
                          test_limit=rc.test_limit)
    corpus = read_corpus(args.data) if args.data else None
    reports = run_matrix(ec, out, corpus, progress=lambda m: print(m, file=sys.stderr))
    _write_manifest(out, args, rc, [out / "matrix.csv", out / "matrix_manifest.json"],
                    {"rows": [r.model for r in reports]})


REQUIRED = {"adapt": ("ckpt",), "decode": ("ckpt",), "eval": ("ckpt", "baseline-ckpt"), "ablate": ("ckpt",)}

HANDLERS = {"datagen": cmd_datagen, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "decode": cmd_decode,
            "eval": cmd_eval, "ablate": cmd_ablate, "matrix": cmd_matrix}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "da-bias: error: a subcommand is required")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args._usage = sub.format_usage()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _need(args, *REQUIRED.get(args.command, ()))
        rc = _run_config(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (cfgmod.ConfigError, CorpusConfigError, ValueError) as e:
        print(f"da-bias: configuration error: {e}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, rc, out)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (cfgmod.ConfigError, CorpusConfigError) as e:
        print(f"da-bias: configuration error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, FloatingPointError, CheckpointError, RuntimeError, OSError, ValueError) as e:
        print(f"da-bias {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
