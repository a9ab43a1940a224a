"""Command-line entry point.

    tide build-dataset --config run.cfg --out data/
    tide train --config run.cfg --manifest data/manifest.jsonl --out run/
    tide sample | interpolate | eval --checkpoint run/checkpoint.ckpt --manifest ... --out ...
    tide verify

Config files hold one ``section.key = value`` assignment per line; values are
JSON literals (bare words are read as strings) and ``#`` starts a comment.
Flags override file values, and the fully resolved configuration is written to
``<out>/run.cfg`` so the run can be repeated exactly.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import numerics as nx
from .conditioning import ModelConfig
from .dataset import (
    DatasetConfig,
    EncoderSpec,
    IntegrityError,
    ManifestParseError,
    World,
    build_manifest,
    load_manifest,
    save_manifest,
)
from .preference import DSDConfig
from .schedule import ConfigError, WeightFn
from .training import (
    BaseConfig,
    DivergenceError,
    SchemaError,
    TrainConfig,
    build_model,
    evaluate,
    held_out_split,
    interpolate,
    load_checkpoint,
    sample,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_DIVERGED, EXIT_SCHEMA = 0, 1, 2, 3, 4, 5

_SECTIONS = {
    "dataset": DatasetConfig,
    "world": World,
    "scorer": EncoderSpec,
    "model": ModelConfig,
    "base": BaseConfig,
    "train": TrainConfig,
}
_SKIP = {"dataset": {"world", "scorer"}, "train": {"dsd"}, "world": {"SUBJECT", "ON", "AT", "COLOR0", "QUAD0"}}
_EXTRA = {
    "train.dsd.beta": 500.0,
    "train.dsd.T": 50,
    "train.dsd.omega": 1.0,
    "eval.n_draws": 64,
    "eval.seed": 0,
    "sample.gamma": 1.0,
    "sample.seed": 0,
    "sample.pair": -1,
    "interpolate.gammas": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "seed": None,
}


def defaults() -> dict:
    out = {}
    for sec, cls in _SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            if f.name in _SKIP.get(sec, ()):
                continue
            out[f"{sec}.{f.name}"] = getattr(inst, f.name)
    out.update(_EXTRA)
    return out


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config(text: str) -> dict:
    """``key.path = value`` lines to a flat dict; raises ConfigError on malformed lines."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {n}: empty key")
        out[key] = _parse_value(value)
    return out


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def resolve(file_values: dict, overrides: dict) -> dict:
    base = defaults()
    merged = dict(base)
    for src in (file_values, overrides):
        for k, v in src.items():
            if k not in base:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v, base[k])
    if merged["seed"] is not None:
        s = _coerce("seed", merged["seed"], 0)
        for k in ("dataset.seed", "train.seed", "sample.seed", "eval.seed"):
            if k not in file_values and k not in overrides:
                merged[k] = s
    return merged


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(cfg.items()))


def _section(cfg: dict, sec: str) -> dict:
    p = sec + "."
    return {k[len(p) :]: v for k, v in cfg.items() if k.startswith(p) and "." not in k[len(p) :]}


def _build(cls, cfg: dict, sec: str, **extra):
    try:
        return cls(**_section(cfg, sec), **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{sec}] {exc}") from None


def dataset_config(cfg: dict) -> DatasetConfig:
    return _build(
        DatasetConfig, cfg, "dataset", world=_build(World, cfg, "world"), scorer=_build(EncoderSpec, cfg, "scorer")
    )


def train_config(cfg: dict) -> TrainConfig:
    try:
        dsd = DSDConfig(cfg["train.dsd.beta"], cfg["train.dsd.T"], WeightFn("constant", cfg["train.dsd.omega"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[train.dsd] {exc}") from None
    return _build(TrainConfig, cfg, "train", dsd=dsd)


# ---------------------------------------------------------------- commands


def _prepare_out(args, cfg: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(dump_config(cfg))
    return out


def cmd_build_dataset(args, cfg: dict) -> int:
    dcfg = dataset_config(cfg)
    out = _prepare_out(args, cfg)
    m = build_manifest(dcfg)
    path = out / "manifest.jsonl"
    save_manifest(m, path)
    hist = m.level_histogram()
    for level in sorted(hist, reverse=True):
        print(f"level {level}: {hist[level]}")
    print(f"candidates: {len(m.candidates)}")
    print(f"pairs: {len(m.pairs)}")
    print(f"manifest: {path}")
    return EXIT_OK


def _load_manifest(path):
    if path is None:
        raise ConfigError("--manifest is required")
    return load_manifest(path)


def cmd_train(args, cfg: dict) -> int:
    tcfg = train_config(cfg)
    mcfg = _build(ModelConfig, cfg, "model")
    bcfg = _build(BaseConfig, cfg, "base")
    manifest = _load_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    model = build_model(mcfg, World(**manifest.config["world"]), bcfg, tcfg.schedule())
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = out / "loss.log"
    if resume is None:
        log_path.write_text("")
    with log_path.open("a") as log:
        ck = train(
            tcfg,
            manifest,
            model,
            resume=resume,
            max_steps=args.max_steps,
            log=lambda step, lr, loss: log.write(f"{step}\t{lr!r}\t{loss!r}\n"),
        )
    save_checkpoint(ck, out / "checkpoint.ckpt")
    print(f"steps: {ck.step}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _record(args, cfg: dict, ck, manifest):
    pid = cfg["sample.pair"]
    if pid < 0:
        held = held_out_split(manifest.pairs, ck.config.seed, ck.config.holdout_frac)[1]
        rec = (held or manifest.pairs)[0]
    else:
        by_id = {p.id: p for p in manifest.pairs}
        if pid not in by_id:
            raise ConfigError(f"no pair with id {pid}")
        rec = by_id[pid]
    return rec, manifest.candidate(rec.winner_id).candidate.reference_image


def cmd_sample(args, cfg: dict) -> int:
    ck = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    rec, ref = _record(args, cfg, ck, manifest)
    img = sample(ck.model, ck.adapter, rec.prompt_tokens, ref, cfg["sample.gamma"], ck.schedule, cfg["sample.seed"])
    nx.save_tensor(out / "sample.ten", img)
    print(f"sample: {out / 'sample.ten'} (pair {rec.id}, gamma {cfg['sample.gamma']})")
    return EXIT_OK


def cmd_interpolate(args, cfg: dict) -> int:
    ck = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    rec, ref = _record(args, cfg, ck, manifest)
    rows = interpolate(ck, rec.prompt_tokens, ref, cfg["interpolate.gammas"], cfg["sample.seed"])
    lines = []
    for i, (g, img) in enumerate(rows):
        name = f"interp_{i:02d}.ten"
        nx.save_tensor(out / name, img)
        lines.append(f"{g!r}\t{name}\n")
    (out / "interpolation.tsv").write_text("".join(lines))
    print("".join(lines), end="")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    ck = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    rep = evaluate(ck, manifest, n_draws=cfg["eval.n_draws"], seed=cfg["eval.seed"])
    (out / "eval.txt").write_text(rep.to_lines())
    (out / "eval.jsonl").write_text(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    print(rep.to_lines(), end="")
    return EXIT_OK


def cmd_verify(args, cfg: dict) -> int:
    from .verify import run_checks

    t0 = time.perf_counter()
    results = run_checks(corrupt=args.corrupt_primitive)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tide", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="key.path = value config file")
        p.add_argument("--seed", type=int, help="global seed (overrides per-stage seeds)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("build-dataset", help="synthesise, score, rank and pair candidates")
    common(p)
    p = sub.add_parser("train", help="train the adapter on a manifest")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")
    for name, helptext in (
        ("sample", "draw one conditioned sample"),
        ("interpolate", "sweep the fusion weight with a fixed seed"),
        ("eval", "alignment scores and preference accuracy"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest")
    p = sub.add_parser("verify", help="run the invariant checks")
    common(p, out=False)
    p.add_argument("--corrupt-primitive", help=argparse.SUPPRESS)
    return parser


_COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "eval": cmd_eval,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = parse_config(Path(args.config).read_text()) if args.config else {}
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = _parse_value(v)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = resolve(file_values, overrides)
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrityError, ManifestParseError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DivergenceError as exc:
        print(f"diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SchemaError as exc:
        print(f"checkpoint schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
