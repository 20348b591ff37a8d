"""Experiment configuration, evaluation and the command-line entry point.

Run ``python -m fedrel <subcommand> --help`` for usage.  Configuration is a
JSON file with four optional sections; every key and its default is listed
in ``DEFAULTS`` below, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import diig, federation as fed, gradcheck
from . import synthdata as sd
from .metrics import MetricsWriter, RoundMetrics, classification_report
from .numerics import ParamSet

# Section -> key -> default.  Learning rate 1.5e-3, dropout 0.3, batch 8,
# 150 rounds and two message-passing layers are the reference settings;
# the rest are this implementation's choices.
DEFAULTS: dict[str, dict[str, Any]] = {
    "generator": {f.name: f.default for f in fields(sd.GeneratorConfig) if f.name != "couplings"},
    "model": diig.ModelConfig().to_dict(),
    "federation": {k: v for k, v in fed.FedConfig().to_dict().items() if k not in ("mode", "seed")},
    "data": {"dataset": None, "train_fraction": 0.8, "transform_epochs": 50},
}
TOP_LEVEL = {"seed", "mode", "out", *DEFAULTS}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    mode: str = "fedrel"
    out: str | None = None
    generator: sd.GeneratorConfig = field(default_factory=sd.GeneratorConfig)
    model: diig.ModelConfig = field(default_factory=diig.ModelConfig)
    fed: fed.FedConfig = field(default_factory=fed.FedConfig)
    dataset: str | None = None
    train_fraction: float = 0.8
    transform_epochs: int = 50

    def to_dict(self) -> dict:
        gen = self.generator.to_dict()
        fd = self.fed.to_dict()
        fd.pop("mode")
        fd.pop("seed")
        return {
            "seed": self.seed, "mode": self.mode, "out": self.out,
            "generator": gen, "model": self.model.to_dict(), "federation": fd,
            "data": {"dataset": self.dataset, "train_fraction": self.train_fraction,
                     "transform_epochs": self.transform_epochs},
        }

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = self.to_dict()
        for key, val in kw.items():
            if val is None:
                continue
            if key in ("seed", "mode", "out"):
                raw[key] = val
            elif key == "K":
                raw["federation"]["K"] = val
            elif key == "rounds":
                raw["federation"]["rounds"] = val
            elif key == "w":
                raw["model"]["w"] = val
            else:
                raise KeyError(key)
        return config_from_dict(raw)


def _check_type(where: str, value, default):
    """Coerce ``value`` to the type of ``default`` or raise naming ``where``."""
    def fail(expected: str):
        raise ConfigError(f"{where}: expected {expected}, got {type(value).__name__} {value!r}")

    if default is None:
        if value is not None and not isinstance(value, str):
            fail("a string or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            fail("a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail("a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            fail("a string")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            fail("a list of integers")
        return list(value)
    raise ConfigError(f"{where}: unsupported default type")


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    if "seed" not in raw:
        raise ConfigError("missing required key: seed")
    seed = _check_type("seed", raw["seed"], 0)
    mode = _check_type("mode", raw.get("mode", "fedrel"), "")
    if mode not in fed.MODES:
        raise ConfigError(f"mode: expected one of {fed.MODES}, got {mode!r}")
    out = _check_type("out", raw.get("out"), None)
    sections = {}
    for name, defaults in DEFAULTS.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{name}: expected an object")
        bad = sorted(set(given) - set(defaults))
        if bad:
            raise ConfigError(f"unknown key(s) in {name}: {', '.join(f'{name}.{b}' for b in bad)}")
        sec = dict(defaults)
        for key, val in given.items():
            sec[key] = _check_type(f"{name}.{key}", val, defaults[key])
        sections[name] = sec
    data = sections["data"]
    if data["dataset"] is not None and not Path(data["dataset"]).is_file():
        raise ConfigError(f"data.dataset: no such file {data['dataset']!r}")
    try:
        return ExperimentConfig(
            seed=seed, mode=mode, out=out,
            generator=sd.GeneratorConfig(**sections["generator"]),
            model=diig.ModelConfig(**sections["model"]),
            fed=fed.FedConfig(**sections["federation"], mode=mode, seed=seed),
            dataset=data["dataset"], train_fraction=data["train_fraction"],
            transform_epochs=data["transform_epochs"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- running

def evaluate(model: diig.ModelConfig, params: ParamSet, test: fed.Shard) -> tuple[float, float, float]:
    """``(accuracy, macro_f1, mean_loss)`` of ``params`` on every window of ``test``."""
    x, y = test.flat()
    if len(y) == 0:
        raise ValueError("empty test set")
    return classification_report(diig.predict_proba(model, params, x), y)


def load_dataset(cfg: ExperimentConfig) -> sd.Dataset:
    if cfg.dataset is not None:
        ds = sd.load_dataset(cfg.dataset)
    else:
        ds = sd.generate(cfg.generator, cfg.seed)
    if ds.num_classes != cfg.model.C:
        raise ConfigError(f"dataset has {ds.num_classes} classes but model.C = {cfg.model.C}")
    return ds


def build_data(cfg: ExperimentConfig, ds: sd.Dataset | None = None, transform: ParamSet | None = None) -> fed.FedData:
    ds = ds if ds is not None else load_dataset(cfg)
    return fed.prepare_data(ds, cfg.model, cfg.fed.K, cfg.fed.partition, cfg.fed.alpha, cfg.seed,
                            cfg.transform_epochs, cfg.train_fraction, transform=transform)


def run_experiment(cfg: ExperimentConfig, data: fed.FedData | None = None,
                   out_dir: Path | None = None) -> tuple[list[RoundMetrics], ParamSet]:
    """Train one mode; with ``out_dir`` stream metrics and save the final model."""
    data = data if data is not None else build_data(cfg)
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out_dir / "config.json")
        writer = MetricsWriter(out_dir / "metrics.jsonl", cfg.to_dict(), cfg.seed)
    servers: list = []
    recs = fed.run(cfg.fed, data, on_round=writer.write if writer else None, server_out=servers)
    params = servers[0].params
    if out_dir is not None:
        save_checkpoint(data.transform, params, out_dir / "model.frpm")
    return recs, params


def save_checkpoint(transform: ParamSet, params: ParamSet, path) -> None:
    merged = {f"transform/{k}": v for k, v in transform.items()}
    merged.update({f"diig/{k}": v for k, v in params.items()})
    diig.save_params(ParamSet.from_arrays(merged), path)


def load_checkpoint(path) -> tuple[ParamSet, ParamSet]:
    ps = diig.load_params(path)
    split = {"transform": {}, "diig": {}}
    for name, arr in ps.items():
        prefix, _, rest = name.partition("/")
        if prefix not in split or not rest:
            raise ValueError(f"{path}: unexpected tensor name {name!r}")
        split[prefix][rest] = arr
    return ParamSet.from_arrays(split["transform"]), ParamSet.from_arrays(split["diig"])


def summarise(recs: list[RoundMetrics]) -> dict:
    best = max(recs, key=lambda r: r.global_macro_f1)
    return {
        "best_f1": best.global_macro_f1, "best_round": best.round,
        "best_acc": max(r.global_acc for r in recs),
        "final_f1": recs[-1].global_macro_f1, "final_acc": recs[-1].global_acc,
        "final_loss": recs[-1].global_loss,
        "wall_s": sum(r.wall_ms for r in recs) / 1e3,
    }


def compare(cfg: ExperimentConfig, participants: list[int], modes=fed.MODES,
            out_dir: Path | None = None, log=print) -> list[dict]:
    """Every mode on one dataset and seed, for each participant count."""
    ds = load_dataset(cfg)
    rows = []
    central = None
    for K in participants:
        kcfg = cfg.with_overrides(K=K)
        data = build_data(kcfg, ds)
        for mode in modes:
            mcfg = kcfg.with_overrides(mode=mode)
            sub = out_dir / f"K{K}_{mode}" if out_dir is not None else None
            if mode == "central" and central is not None and sub is None:
                recs = central      # the pooled split does not depend on K
            else:
                recs, _ = run_experiment(mcfg, data, sub)
                if mode == "central":
                    central = recs
            row = {"K": K, "mode": mode, **summarise(recs)}
            rows.append(row)
            log(f"K={K} {mode:<7} best F1 {row['best_f1']:.4f} (round {row['best_round']}) "
                f"final F1 {row['final_f1']:.4f}")
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def rows_to_table(rows: list[dict]) -> str:
    lines = []
    for K in sorted({r["K"] for r in rows}):
        lines.append(f"participants K={K}")
        lines.append(f"  {'mode':<8}{'best F1':>9}{'best acc':>10}{'final F1':>10}{'final loss':>12}")
        for r in (r for r in rows if r["K"] == K):
            lines.append(f"  {r['mode']:<8}{r['best_f1']:>9.4f}{r['best_acc']:>10.4f}"
                         f"{r['final_f1']:>10.4f}{r['final_loss']:>12.4f}")
    return "\n".join(lines)


# --------------------------------------------------------------------- CLI

def _base_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else None
    if cfg is None:
        if args.seed is None:
            raise ConfigError("a seed is required: pass --seed or --config")
        cfg = config_from_dict({"seed": args.seed})
    K = None
    if getattr(args, "participants", None):
        if args.command != "compare" and len(args.participants) > 1:
            raise ConfigError(f"{args.command} takes a single participant count")
        K = args.participants[0]
    return cfg.with_overrides(seed=args.seed, mode=getattr(args, "mode", None), out=args.out,
                              K=K, rounds=getattr(args, "rounds", None), w=getattr(args, "window", None))


def _cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    if not cfg.out:
        raise ConfigError("gen-data needs --out PATH")
    ds = sd.generate(cfg.generator, cfg.seed)
    sd.save_dataset(ds, cfg.out)
    print(f"wrote {len(ds)} sequences (T={ds.T}, N={ds.N}, D={ds.D}, C={ds.num_classes}) to {cfg.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _base_config(args)
    out = Path(cfg.out) if cfg.out else None
    recs, _ = run_experiment(cfg, out_dir=out)
    s = summarise(recs)
    print(f"{cfg.mode} K={cfg.fed.K}: best F1 {s['best_f1']:.4f} at round {s['best_round']}, "
          f"final acc {s['final_acc']:.4f}, final loss {s['final_loss']:.4f}")
    if out:
        print(f"metrics: {out / 'metrics.jsonl'}  checkpoint: {out / 'model.frpm'}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed or 0)
    for name, err in results.items():
        print(f"{name:<22} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:.0e})")
    return 0 if worst < gradcheck.TOLERANCE else 1


def _cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = parse_config(run_dir / "config.json")
    transform, params = load_checkpoint(run_dir / "model.frpm")
    data = build_data(cfg, transform=transform)
    acc, f1, loss = evaluate(cfg.model, params, data.test)
    print(json.dumps({"accuracy": acc, "macro_f1": f1, "loss": loss}))
    return 0


def _cmd_compare(args) -> int:
    cfg = _base_config(args)
    participants = args.participants or [2, 3, 5]
    out = Path(cfg.out) if cfg.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = compare(cfg, participants, out_dir=out, log=lambda m: print(m, file=sys.stderr))
    print(rows_to_table(rows))
    if out:
        (out / "summary.csv").write_text(rows_to_csv(rows))
        print(f"summary: {out / 'summary.csv'}")
    else:
        print()
        print(rows_to_csv(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="python -m fedrel", description="Relevance-weighted federated DIIG.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *, mode=True, fedopts=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path")
        if mode:
            p.add_argument("--mode", choices=fed.MODES)
        if fedopts:
            p.add_argument("--participants", type=int, nargs="+", metavar="K")
            p.add_argument("--window", type=int, metavar="w")
            p.add_argument("--rounds", type=int)

    common(sub.add_parser("gen-data", help="write a synthetic dataset container"), mode=False, fedopts=False)
    common(sub.add_parser("train", help="run one training mode and stream metrics"))
    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    e = sub.add_parser("eval", help="evaluate a trained run directory on its test split")
    e.add_argument("run_dir")
    common(sub.add_parser("compare", help="all modes side by side"), mode=False)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"gen-data": _cmd_gen_data, "train": _cmd_train, "gradcheck": _cmd_gradcheck,
                "eval": _cmd_eval, "compare": _cmd_compare}
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError, OSError, fed.ParticipantFailure, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
