"""``pmvad`` command line: gen, train, eval, finetune, ablate.

Every command resolves a :class:`~pmvad.config.RunConfig`, refuses to write
into a non-empty output directory and leaves ``config.txt`` beside its
outputs. Failures print one JSON object on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, checkpoint
from .config import RunConfig, parse_overrides, resolve
from .errors import ConfigError, PmvadError
from .experiments import ABLATION_ROWS, lambda_sweep
from .lora import finetune, merge, save_adapter
from .memory import dump_trace_csv
from .model import VadModel, frames_to_float, predict_clips, clip_starts, train
from .presets import get_preset
from .scoring import build_report, evaluate, score_split
from .synthgen import SCHEMA_VERSION, build_scenario, read_dataset, write_dataset

log = logging.getLogger("pmvad")

EXIT_CODES = {"config": 2, "contract": 2}


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigError(f"output directory {out} exists and is not empty; refusing to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    for key in ("preset", "seed"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return resolve(args.config, overrides)


def _scenario_id(cfg: RunConfig, preset: str | None = None) -> str:
    return f"{preset or (cfg.preset if cfg.preset != 'none' else 'custom')}-s{cfg.seed}"


def _check_dataset(cfg: RunConfig, manifest):
    if manifest.t_max != cfg.t_max or manifest.spec.frame_size != cfg.frame_size:
        raise ConfigError(f"dataset (t_max={manifest.t_max}, frame_size={manifest.spec.frame_size}) does not match "
                          f"config (t_max={cfg.t_max}, frame_size={cfg.frame_size})")


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# -- commands ---------------------------------------------------------------


def cmd_gen(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args.out)
    cfg.write(out)
    written = []
    spec = cfg.scenario_spec()
    anomalies, nuisances = cfg.schedule()
    frames, man = build_scenario(spec, anomalies, nuisances, scenario_id=_scenario_id(cfg))
    written.append(str(write_dataset(frames, man, out / man.scenario_id)))
    if cfg.preset != "none" and get_preset(cfg.preset).twin:
        twin = get_preset(get_preset(cfg.preset).twin, cfg.seed)
        frames, man = build_scenario(twin.scenario, twin.anomalies, twin.nuisances,
                                     scenario_id=_scenario_id(cfg, twin.name))
        written.append(str(write_dataset(frames, man, out / man.scenario_id)))
    return {"datasets": written}


def cmd_train(args) -> dict:
    cfg = _config(args)
    frames, man = read_dataset(args.data)
    _check_dataset(cfg, man)
    out = _out_dir(args.out)
    cfg.write(out)
    model, logs = train(frames, man, cfg.train_config(), out_dir=out)
    if not logs:
        model.save(out / "model.ckpt", {"epoch": 0})
    return {"checkpoint": str(out / "model.ckpt"), "epochs": len(logs),
            "final_loss": logs[-1].total if logs else None}


def cmd_eval(args) -> dict:
    cfg = _config(args)
    frames, man = read_dataset(args.data)
    model = VadModel.load(args.model)
    if man.t_max != model.cfg.t_max or man.spec.frame_size != model.cfg.frame_size:
        raise ConfigError("checkpoint does not match the dataset (t_max / frame_size)")
    out = _out_dir(args.out)
    cfg.write(out)
    report = evaluate(model, frames, man, cfg.eval_config())
    report.write(out)
    if args.dump_trace:
        test = frames_to_float(frames[man.test_slice], model.cfg.dtype)
        starts = clip_starts(len(test), model.cfg.clip_len)
        traces = []
        for i in range(0, len(starts), cfg.eval_config().batch):
            predict_clips(model, test, starts[i : i + cfg.eval_config().batch], len(starts))
            if model.cfg.use_memory:
                traces.append(model.memory.trace)
        if traces:
            dump_trace_csv(traces, out / "memory_trace.csv")
    return {"auc": report.auc, "auc_per_family": report.auc_per_family, "report": str(out / "report.json")}


def cmd_finetune(args) -> dict:
    cfg = _config(args)
    frames, man = read_dataset(args.data)
    pretrained = VadModel.load(args.pretrained)
    out = _out_dir(args.out)
    cfg.write(out)
    ec = cfg.eval_config()
    steps = cfg.finetune_steps or None
    lr = cfg.finetune_lr or None
    rows = [{"mode": "pretrained", "seconds": 0.0, "steps": 0, "trainable_params": 0,
             "total_params": sum(p.size for p in pretrained.params()), "few_shot_fraction": 0.0,
             "auc": evaluate(pretrained, frames, man, ec).auc}]
    for mode in ("full", "peft"):
        model, res = finetune(pretrained, frames, man, mode, cfg.few_shot_fraction, epochs=cfg.finetune_epochs,
                              lr=lr, max_steps=steps, rank=cfg.adapter_rank, alpha=cfg.adapter_alpha,
                              policy=cfg.freeze_policy())
        report = evaluate(model, frames, man, ec)
        rows.append({**res.row(), "few_shot_fraction": cfg.few_shot_fraction, "auc": report.auc})
        if mode == "full":
            model.save(out / "full.ckpt")
        else:
            save_adapter(model, out / "adapter.ckpt")
            if args.merge:
                merge(model).save(out / "merged.ckpt", {"merged_from": "adapter"})
    _write_rows(out / "finetune.csv", rows)
    (out / "finetune.json").write_text(json.dumps(rows, indent=1) + "\n")
    return {"rows": rows}


def cmd_ablate(args) -> dict:
    cfg = _config(args)
    frames, man = read_dataset(args.data)
    _check_dataset(cfg, man)
    out = _out_dir(args.out)
    cfg.write(out)
    ec = cfg.eval_config()
    family = args.family
    reports = {}
    for use_memory in (True, False):
        tc = replace(cfg.train_config(), use_memory=use_memory)
        model, _ = train(frames, man, tc)
        series = score_split(model, frames_to_float(frames[man.test_slice], tc.dtype), man.t_max, man.period_len, ec)
        for window in (True, False):
            reports[use_memory, window] = build_report(series, man, ec if window else replace(ec, lambda_fuse=0.0))
    rows = []
    for use_memory, window in ABLATION_ROWS:
        r = reports[use_memory, window]
        rows.append({"memory": use_memory, "window": window, "auc": r.auc,
                     f"auc_{family}": r.auc_per_family.get(family, float("nan"))})
    _write_rows(out / "ablation.csv", rows)
    sweep = lambda_sweep(reports[True, True])
    _write_rows(out / "lambda_sweep.csv", sweep)
    return {"rows": rows, "lambda_sweep": sweep}


# -- entry point ------------------------------------------------------------


def _common(p: argparse.ArgumentParser, data: bool = True):
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--preset", help="named preset (oscillator-64, sorter-64, shift-pair, shift-pair-realish, none)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory (must be new or empty)")
    if data:
        p.add_argument("--data", required=True, help="dataset directory holding manifest.json")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pmvad", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version",
                    version=f"pmvad {__version__} (dataset schema {SCHEMA_VERSION}, "
                            f"checkpoint format {checkpoint.FORMAT_VERSION})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render scenario(s) to PGM frames + manifest")
    _common(p, data=False)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train one model on a dataset's train split")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a dataset's test split; writes report.json + scores.csv")
    _common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--dump-trace", action="store_true", help="also write memory_trace.csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("finetune", help="full vs adapter finetune of a pretrained checkpoint")
    _common(p)
    p.add_argument("--pretrained", required=True, help="pretrained model checkpoint")
    p.add_argument("--merge", action="store_true", help="also write the adapter folded into the base weights")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("ablate", help="memory on/off x window on/off table")
    _common(p)
    p.add_argument("--family", default="logic", help="anomaly family for the subset AUC column")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        result = args.fn(args)
    except PmvadError as exc:
        print(json.dumps({"error": exc.code, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(exc.code, 1)
    except OSError as exc:
        print(json.dumps({"error": "io", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
