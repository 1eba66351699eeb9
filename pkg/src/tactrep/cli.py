"""Command-line entry point: ``tactrep {gen,train,eval,export}``.

Exit codes: 0 ok, 2 bad arguments or stage order, 3 IO, 4 numerical
divergence, 5 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATIONS, RunConfig, load_run_config
from .data_model import load_manifest
from .errors import (IncompatibleCheckpoint, InvalidSpec, IOFailure, NumericalDivergence,
                     StageOrderError, TactileError, VersionMismatch)
from .evaluation import (extract_embeddings, linear_probe, matching_eval, silhouette_separation,
                         write_embeddings_csv, write_report)
from .synth import WorldSpec, generate_world
from .trainer import train_stage1, train_stage2

log = logging.getLogger("tactrep")

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5
DATA_ENV = "ANYTOUCH_DATA_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 too; keep it explicit
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def _data_dir(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise argparse.ArgumentTypeError(f"no data directory: pass --data or set {DATA_ENV}")
    return Path(root)


def _manifest(args):
    path = _data_dir(args) / "manifest.jsonl"
    if not path.exists():
        raise IOFailure(f"manifest not found: {path}")
    return load_manifest(path)


def _overrides(args) -> tuple[RunConfig, dict]:
    """Config precedence: CLI flag > config file > built-in default."""
    cfg = load_run_config(args.config)
    train_kw = {}
    if getattr(args, "seed", None) is not None:
        train_kw["seed"] = args.seed
    for name, attr in (("epochs", "epochs"), ("lr", "base_lr"), ("batch_size", "batch_size"),
                       ("match_weight", "match_weight")):
        if getattr(args, name, None) is not None:
            train_kw[attr] = getattr(args, name)
    if getattr(args, "unseen", None):
        train_kw["unseen_sensors"] = tuple(args.unseen)
    for flag in ABLATIONS + ("from_scratch",):
        if getattr(args, flag, False):
            train_kw[flag] = True
    if getattr(args, "stage", None) is not None:
        train_kw["stage"] = args.stage
    cfg = cfg.with_overrides("train", **train_kw)
    eval_kw = {}
    if getattr(args, "sensor_token_policy", None):
        eval_kw["sensor_token_policy"] = args.sensor_token_policy
    cfg = cfg.with_overrides("eval", **eval_kw)
    cli = {**{f"train.{k}": v for k, v in train_kw.items()}, **{f"eval.{k}": v for k, v in eval_kw.items()}}
    cfg.provenance = {**cfg.provenance, "cli_overrides": cli}
    log.info("config file: %s", args.config or "<built-in defaults>")
    log.info("cli overrides: %s", json.dumps(cli, default=list, sort_keys=True) if cli else "none")
    return cfg, cli


def cmd_gen(args) -> int:
    if args.config:
        try:
            spec = WorldSpec.load(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise IOFailure(f"cannot read world config {args.config}: {exc}") from exc
    else:
        spec = WorldSpec.default()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out) if args.out else _data_dir(args)
    manifest = generate_world(spec, out)
    log.info("wrote %d samples in %d groups to %s", len(manifest.samples), len(manifest.groups), out)
    return EXIT_OK


def _progress(msg: str) -> None:
    log.info(msg)


def cmd_train(args) -> int:
    cfg, _ = _overrides(args)
    manifest = _manifest(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == 1:
        ckpt = train_stage1(cfg, manifest, out_dir=out, progress=_progress)
    else:
        if args.init is None and not args.from_scratch:
            raise StageOrderError(
                "stage 2 needs --init <stage-1 checkpoint> or --from-scratch: the two-stage paradigm "
                "runs masked modeling first, then multi-modal alignment and cross-sensor matching")
        init = load_checkpoint(args.init) if args.init else None
        if init is not None and init.stage != 1:
            log.warning("--init checkpoint is from stage %d", init.stage)
        ckpt = train_stage2(cfg, manifest, init, out_dir=out, progress=_progress)
    path = out / f"stage{args.stage}.ckpt"
    save_checkpoint(ckpt, path)
    log.info("checkpoint %s (config_hash=%s)", path, ckpt.config_hash)
    return EXIT_OK


def _policy(name: str) -> str:
    # "specific" still routes unseen sensors to the universal set
    return "auto" if name == "specific" else "universal"


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    manifest = _manifest(args)
    ckpt.check_compatible(ckpt.config, None)
    policy = args.sensor_token_policy or ckpt.config.eval.sensor_token_policy
    sensors = args.sensor or None
    if args.task == "probe":
        data = manifest.subset(sensors=sensors) if sensors else manifest
        table = extract_embeddings(ckpt, data, _policy(policy), media_kind=args.media_kind)
        res = linear_probe(table, args.label, seed=args.seed or 0,
                           iters=ckpt.config.eval.probe_iters, lr=ckpt.config.eval.probe_lr)
        metrics = {"task": "probe", "label": args.label, "accuracy": res.accuracy,
                   "n_train": res.n_train, "n_test": res.n_test, "classes": res.class_count}
        n = res.n_test
    elif args.task == "cluster":
        data = manifest.subset(split=args.split, sensors=sensors or list(ckpt.sensors))
        table = extract_embeddings(ckpt, data, _policy(policy), media_kind=args.media_kind)
        s_obj, s_sen = silhouette_separation(table, "object_id", "sensor")
        metrics = {"task": "cluster", "s_object": s_obj, "s_sensor": s_sen, "margin": s_obj - s_sen}
        n = len(table.ids)
    else:
        data = manifest.subset(split=args.split, sensors=sensors) if sensors else manifest.subset(split=args.split)
        auc, acc = matching_eval(ckpt, data, seed=args.seed or 0, media_kind=args.media_kind,
                                 sensor_token_policy=_policy(policy))
        metrics = {"task": "match", "auc": auc, "accuracy_at_0.5": acc}
        n = len(data.groups)
    metrics["ckpt_config_hash"] = ckpt.config_hash
    report = write_report(metrics, args.out, n, ckpt.config_hash)
    log.info("report %s: %s", args.out, json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    manifest = _manifest(args)
    if args.split:
        manifest = manifest.subset(split=args.split)
    policy = args.sensor_token_policy or ckpt.config.eval.sensor_token_policy
    table = extract_embeddings(ckpt, manifest, _policy(policy), media_kind=args.media_kind)
    write_embeddings_csv(table, args.out, ckpt.config_hash)
    log.info("exported %d embeddings to %s", len(table.ids), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tactrep", description="Multi-sensor tactile representation learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run config (or bare world spec)")
        sp.add_argument("--data", help=f"dataset root holding manifest.jsonl (default ${DATA_ENV})")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate the synthetic multi-sensor world")
    common(g)
    g.add_argument("--out", help="output directory (default: --data)")

    t = sub.add_parser("train", help="run stage 1 or stage 2 training")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", required=True, help="run directory for checkpoint and loss CSV")
    t.add_argument("--init", help="stage-1 checkpoint to continue from")
    t.add_argument("--from-scratch", action="store_true")
    t.add_argument("--unseen", action="append", help="sensor withheld from training (repeatable)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--match-weight", type=float)
    for flag in ABLATIONS:
        t.add_argument("--" + flag.replace("_", "-"), action="store_true")

    e = sub.add_parser("eval", help="probe, cluster or match evaluation")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=("probe", "cluster", "match"), required=True)
    e.add_argument("--out", required=True, help="JSON report path")
    e.add_argument("--label", default="material")
    e.add_argument("--split", default="test")
    e.add_argument("--sensor", action="append", help="restrict to these sensors (repeatable)")
    e.add_argument("--media-kind", choices=("image", "video"), default="video")
    e.add_argument("--sensor-token-policy", choices=("specific", "universal"))

    x = sub.add_parser("export", help="write touch embeddings as CSV")
    common(x, seed=False)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split")
    x.add_argument("--media-kind", choices=("image", "video"), default="video")
    x.add_argument("--sensor-token-policy", choices=("specific", "universal"))
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (StageOrderError, InvalidSpec, argparse.ArgumentTypeError) as exc:
        log.error("%s", exc)
        return EXIT_ARGS
    except (IncompatibleCheckpoint, VersionMismatch) as exc:
        log.error("incompatible checkpoint: %s", exc)
        return EXIT_INCOMPATIBLE
    except NumericalDivergence as exc:
        log.error("numerical divergence: %s", exc)
        return EXIT_DIVERGED
    except (IOFailure, OSError) as exc:
        log.error("io error: %s", exc)
        return EXIT_IO
    except (TactileError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
