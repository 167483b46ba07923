"""Command-line entry point: ``sm3 <command> [options]``.

Every command takes ``--config FILE`` (YAML, see ``sm3 show-config``),
repeatable ``--set section.key=value`` overrides and ``--seed``; flags win
over the file.  Relative output paths are placed under ``$SM3_OUTPUT_ROOT``
when that variable is set.  Beside each output ``X.json`` the command writes
``X.config.yaml`` (the resolved configuration) and ``X.log``.

Exit codes: 0 success, 1 unexpected failure, 2 bad configuration or usage,
3 missing artifact, 4 version mismatch, 5 checksum failure, 6 malformed
artifact, 7 non-finite values during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from sm3 import __version__
from sm3.config import RunConfig, apply_overrides, load_config
from sm3.errors import ConfigError, SM3Error
from sm3.evaluation import evaluate_pair_matching, finetune, linear_probe
from sm3.models import ML_STRATEGIES, MM_STRATEGIES
from sm3.report import build_report, write_report
from sm3 import synthdata
from sm3.train import (ML_HISTORY_COLUMNS, MM_HISTORY_COLUMNS, Checkpoint, pretrain_ml, pretrain_mm,
                       write_history_csv)

log = logging.getLogger("sm3")
OUTPUT_ROOT_ENV = "SM3_OUTPUT_ROOT"


# -- paths -----------------------------------------------------------------------

def _output_path(raw: str) -> Path:
    p = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _input_path(raw: str) -> Path:
    # inputs resolve against the working directory, then the output root
    p = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not p.exists() and root and not p.is_absolute() and (Path(root) / p).exists():
        return Path(root) / p
    return p


def sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _prepare_output(out: Path, inputs: list[Path]) -> None:
    for inp in inputs:
        if inp.resolve() == out.resolve():
            raise ConfigError(f"output {out} would overwrite an input; commands never mutate inputs")
    out.parent.mkdir(parents=True, exist_ok=True)


class _Run:
    """Per-command logging to ``X.log`` plus the resolved config snapshot."""

    def __init__(self, out: Path, cfg: RunConfig | None, verbose: bool):
        self.out = out
        self.cfg = cfg
        self.handlers: list[logging.Handler] = []
        fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
        fh = logging.FileHandler(sidecar(out, ".log"), mode="w")
        fh.setFormatter(fmt)
        self.handlers.append(fh)
        if verbose:
            sh = logging.StreamHandler(sys.stderr)
            sh.setFormatter(fmt)
            self.handlers.append(sh)

    def __enter__(self):
        for h in self.handlers:
            log.addHandler(h)
        log.setLevel(logging.INFO)
        if self.cfg is not None:
            self.cfg.save(sidecar(self.out, ".config.yaml"))
        return self

    def __exit__(self, *exc):
        for h in self.handlers:
            log.removeHandler(h)
            h.close()
        return False


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    strategy = getattr(args, "strategy", None)
    if strategy is not None:
        key = {"pretrain-mm": "stage1.strategy", "pretrain-ml": "stage2.strategy"}.get(args.command, "eval.probe_head")
        overrides.append(f"{key}={strategy}")
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        key = {"pretrain-mm": "stage1.epochs", "pretrain-ml": "stage2.epochs", "probe": "eval.probe_epochs",
               "finetune": "eval.finetune_epochs"}[args.command]
        overrides.append(f"{key}={epochs}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _write_json(obj: dict, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------

def cmd_show_config(args) -> int:
    cfg = _resolve_config(args)
    text = cfg.to_yaml()
    if args.out:
        out = _output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_generate_data(args) -> int:
    cfg = _resolve_config(args)
    out = _output_path(args.out)
    _prepare_output(out, [])
    with _Run(out, cfg, args.verbose):
        ds = synthdata.generate(cfg.data)
        synthdata.save(ds, out)
        log.info("wrote %d samples (%s) to %s", len(ds),
                 ", ".join(f"{s}={len(ds.split(s))}" for s in synthdata.SPLITS), out.name)
    return 0


def cmd_pretrain_mm(args) -> int:
    cfg = _resolve_config(args)
    data, out = _input_path(args.data), _output_path(args.out)
    _prepare_output(out, [data])
    with _Run(out, cfg, args.verbose):
        ds = synthdata.load(data)
        ckpt = pretrain_mm(ds, cfg.train)
        ckpt.save(out)
        write_history_csv(ckpt.history, sidecar(out, ".history.csv"), MM_HISTORY_COLUMNS)
        log.info("stage-1 %s checkpoint after %d epochs written to %s", ckpt.mm_strategy, ckpt.epoch, out.name)
    return 0


def cmd_pretrain_ml(args) -> int:
    cfg = _resolve_config(args)
    data, stage1, out = _input_path(args.data), _input_path(args.stage1), _output_path(args.out)
    _prepare_output(out, [data, stage1])
    with _Run(out, cfg, args.verbose):
        ds = synthdata.load(data)
        s1 = Checkpoint.load(stage1)
        last = {}
        ckpt = pretrain_ml(ds, s1, cfg.train, on_pseudo=lambda p: last.update(final=p))
        ckpt.save(out)
        write_history_csv(ckpt.history, sidecar(out, ".history.csv"), ML_HISTORY_COLUMNS)
        if last:
            last["final"].to_csv(sidecar(out, ".pseudolabels.csv"), ds.split("train"))
        log.info("stage-2 %s checkpoint after %d epochs written to %s", ckpt.ml_strategy, ckpt.epoch, out.name)
    return 0


def _evaluate_classifier(args, protocol) -> int:
    cfg = _resolve_config(args)
    data, ck, out = _input_path(args.data), _input_path(args.ckpt), _output_path(args.out)
    _prepare_output(out, [data, ck])
    with _Run(out, cfg, args.verbose):
        ds = synthdata.load(data)
        ckpt = Checkpoint.load(ck)
        report = protocol(ckpt, ds, cfg.eval)
        if args.name:
            report.setting["name"] = args.name
        _write_json({"kind": "metrics", **report.to_dict()}, out)
        report.write_csv(sidecar(out, ".csv"))
        log.info("%s: macro AUC %.6f (designated classes %.6f)", report.setting["protocol"], report.macro["auc"],
                 report.macro_designated["auc"])
    return 0


def cmd_probe(args) -> int:
    return _evaluate_classifier(args, linear_probe)


def cmd_finetune(args) -> int:
    return _evaluate_classifier(args, finetune)


def cmd_eval_pairmatch(args) -> int:
    cfg = _resolve_config(args)
    data, ck, out = _input_path(args.data), _input_path(args.ckpt), _output_path(args.out)
    _prepare_output(out, [data, ck])
    with _Run(out, cfg, args.verbose):
        ds = synthdata.load(data)
        ckpt = Checkpoint.load(ck)
        rep = evaluate_pair_matching(ckpt, ds, cfg.eval)
        setting = {"mm_strategy": ckpt.mm_strategy, "stage": ckpt.stage, "pretrain_epochs": ckpt.epoch,
                   "split": cfg.eval.pair_split, "seed": cfg.seed}
        if args.name:
            setting["name"] = args.name
        _write_json({"kind": "pairmatch", "setting": setting, **rep.to_dict(), "ranks": rep.ranks}, out)
        log.info("pair matching over %d queries: avg_rank %.4f, Acc@1 %.4f, Acc@5 %.4f", rep.M, rep.avg_rank,
                 rep.acc_at_1, rep.acc_at_5)
    return 0


def cmd_report(args) -> int:
    out = _output_path(args.out)
    inputs = [_input_path(p) for p in args.inputs]
    out.mkdir(parents=True, exist_ok=True)
    with _Run(out / "report.json", None, args.verbose):
        report = build_report(inputs)
        written = write_report(report, out)
        log.info("merged %d inputs into %s", len(inputs), ", ".join(p.name for p in written))
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sm3", description="Two-stage multi-modal, multi-label "
                                     "self-supervised pretraining on synthetic paired data.")
    parser.add_argument("--version", action="version", version=f"sm3 {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output file"):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("-v", "--verbose", action="store_true", help="also log to stderr")

    p = sub.add_parser("show-config", help="print the resolved configuration as YAML")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_show_config)

    p = sub.add_parser("generate-data", help="write a synthetic paired dataset")
    common(p, "dataset manifest path (.json; the blob goes beside it as .bin)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain-mm", help="stage 1: multi-modal contrastive pretraining")
    common(p, "checkpoint manifest path (.json)")
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=MM_STRATEGIES)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain_mm)

    p = sub.add_parser("pretrain-ml", help="stage 2: pseudo-multi-label pretraining of the classifier")
    common(p, "checkpoint manifest path (.json)")
    p.add_argument("--data", required=True)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--strategy", choices=ML_STRATEGIES)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain_ml)

    for name, func, what in (("probe", cmd_probe, "linear probe on frozen encoders"),
                             ("finetune", cmd_finetune, "fine-tune every layer")):
        p = sub.add_parser(name, help=what)
        common(p, "metrics JSON path (a CSV goes beside it)")
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--strategy", choices=ML_STRATEGIES, help="classifier for stage-1 checkpoints")
        p.add_argument("--epochs", type=int)
        p.add_argument("--name", help="row name used by report")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-pairmatch", help="cross-modality pair matching on held-out pairs")
    common(p, "result JSON path")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--name", help="row name used by report")
    p.set_defaults(func=cmd_eval_pairmatch)

    p = sub.add_parser("report", help="merge result JSONs into tables and figures")
    p.add_argument("inputs", nargs="+", help="JSON files from eval-pairmatch, probe or finetune")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SM3Error as exc:
        print(f"sm3 {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sm3 {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
