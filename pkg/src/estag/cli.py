"""Command line entry point: ``estag <command> ...``.

Every command accepts ``--config FILE`` holding ``key = value`` lines; flags
given on the command line win over the file.  Results go to stdout as JSON.
Exit status is 0 on success, 1 for invalid input and 2 for numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any

from . import fourier, harness
from .data import SimConfig, read_csv_trajectory, read_dataset, simulate, window, write_dataset
from .errors import NumericalError, ValidationError
from .model import ModelConfig, load_checkpoint, spectral_weights

log = logging.getLogger("estag")

_TRAIN_KEYS = [f.name for f in dataclasses.fields(harness.TrainConfig) if f.name != "model"]
_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig)]
_SIM_KEYS = [f.name for f in dataclasses.fields(SimConfig)]
# flags of ``generate`` that are spelled differently from the simulator fields
_SIM_ALIASES = {"n": "n_visible", "hidden": "n_hidden"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors count as invalid input
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _kind(field: dataclasses.Field) -> str:
    t = field.type
    return t if isinstance(t, str) else getattr(t, "__name__", str(t))


def _convert(field: dataclasses.Field, value: Any):
    if value is None or not isinstance(value, str):
        return value
    kind = _kind(field)
    if value.lower() == "none" and "None" in kind:
        return None
    try:
        if kind.startswith("bool"):
            return parse_bool(value)
        if kind.startswith("int"):
            return int(value)
        if kind.startswith("float"):
            return float(value)
        if kind.startswith("tuple"):
            return tuple(float(v) for v in value.replace(",", " ").split())
    except ValueError:
        raise ValidationError(f"{field.name}: cannot parse {value!r} as {kind}") from None
    return value


def _build(cls, settings: dict[str, Any]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    return cls(**{k: _convert(fields[k], v) for k, v in settings.items() if k in fields})


def _settings(args: argparse.Namespace, keys: list[str]) -> dict[str, Any]:
    """Config file values overridden by explicitly given flags."""
    merged: dict[str, Any] = {}
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _check_unknown(settings: dict[str, Any], allowed: list[str]) -> None:
    unknown = sorted(set(settings) - set(allowed))
    if unknown:
        raise ValidationError(f"unknown configuration keys: {', '.join(unknown)}")


def train_config(args) -> harness.TrainConfig:
    s = _settings(args, _TRAIN_KEYS + _MODEL_KEYS)
    _check_unknown(s, _TRAIN_KEYS + _MODEL_KEYS)
    model = _build(ModelConfig, {k: v for k, v in s.items() if k in _MODEL_KEYS})
    cfg = _build(harness.TrainConfig, {k: v for k, v in s.items() if k in _TRAIN_KEYS})
    return dataclasses.replace(cfg, model=model).validate()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=False))


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_fields(p: argparse.ArgumentParser, cls, skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name == "model":
            continue
        if _kind(f).startswith("bool"):
            p.add_argument(_flag(f.name), dest=f.name, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            p.add_argument(_flag(f.name), dest=f.name, default=None)


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.from_csv:
        traj = read_csv_trajectory(args.from_csv)
    else:
        s = _settings(args, _SIM_KEYS + list(_SIM_ALIASES) + ["seed"])
        for short, full in _SIM_ALIASES.items():
            if short in s:
                s[full] = s.pop(short)
        seed = int(s.pop("seed", 0))
        s.pop("out", None)
        _check_unknown(s, _SIM_KEYS)
        traj = simulate(_build(SimConfig, s), seed)
    if not args.out:
        raise ValidationError("generate needs --out")
    write_dataset(traj, args.out)
    _emit({"out": args.out, "frames": traj.frames, "nodes": traj.n_visible, "channels": traj.channels})
    return 0


def cmd_train(args) -> int:
    cfg = train_config(args)
    if cfg.metrics is None:
        # stream epochs to stdout when no metrics file is given
        res = harness.train(dataclasses.replace(cfg, metrics="/dev/stdout"))
    else:
        res = harness.train(cfg)
    summary = {"best_epoch": res.best_epoch, "best_val_mse": res.best_val, "checkpoint": cfg.checkpoint}
    print(json.dumps(summary), file=sys.stderr if cfg.metrics is None else sys.stdout)
    return 0


def _split(cfg: harness.TrainConfig, name: str):
    splits = harness.make_splits(harness.load_trajectory(cfg), cfg)
    if name not in ("train", "val", "test"):
        raise ValidationError(f"unknown split {name!r}")
    return splits, getattr(splits, name)


def _from_checkpoint(args) -> tuple[harness.TrainConfig, Any]:
    if not args.checkpoint:
        raise ValidationError("this command needs --checkpoint")
    mcfg, params = load_checkpoint(args.checkpoint)
    s = _settings(args, _TRAIN_KEYS)
    _check_unknown({k: v for k, v in s.items() if k not in _MODEL_KEYS}, _TRAIN_KEYS)
    cfg = _build(harness.TrainConfig, {k: v for k, v in s.items() if k in _TRAIN_KEYS})
    return dataclasses.replace(cfg, model=mcfg), params


def cmd_eval(args) -> int:
    cfg, params = _from_checkpoint(args)
    _, samples = _split(cfg, args.split)
    _emit({"split": args.split, "samples": len(samples), "mse": harness.evaluate(params, cfg.model, samples)})
    return 0


def cmd_baseline(args) -> int:
    cfg = train_config(args)
    splits = harness.make_splits(harness.load_trajectory(cfg), cfg)
    res = harness.baseline(cfg, args.which, splits)
    _emit({"baseline": args.which, "test_mse": res.test_mse})
    return 0


def cmd_ablate(args) -> int:
    cfg = train_config(args)
    splits = harness.make_splits(harness.load_trajectory(cfg), cfg)
    res = harness.ablate(cfg, args.variant, splits)
    _emit({"variant": args.variant, "test_mse": res.test_mse, "best_epoch": res.result.best_epoch})
    return 0


def cmd_rollout(args) -> int:
    cfg, params = _from_checkpoint(args)
    traj = harness.load_trajectory(cfg)
    m = cfg.model
    steps = int(args.steps)
    valid = len(range(traj.frames - (m.T + steps - 1) * m.dt))
    if valid <= 0:
        raise ValidationError(f"insufficient ground truth for {steps} steps")
    starts = list(range(0, valid, max(1, valid // int(args.samples))))[: int(args.samples)]
    mse = harness.rollout(params, m, traj, starts, steps, args.attention)
    _emit({"steps": steps, "attention": args.attention or m.attention, "mse": mse})
    return 0


def _model_for_check(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    s = _settings(args, _MODEL_KEYS)
    s = {k: v for k, v in s.items() if k in _MODEL_KEYS}
    mcfg = _build(ModelConfig, s).validate()
    params = harness.init_params(mcfg, int(args.seed or 0))
    return mcfg, params


def cmd_check(args) -> int:
    mcfg, params = _model_for_check(args)
    if params.get("pool.w") is not None and not params["pool.w"].any():
        # an all-zero pooling vector would only test the last frame
        params["pool.w"] = harness.make_rng(1).uniform(-0.5, 0.5, params["pool.w"].shape)
    batch = harness.random_batch(mcfg, seed=int(args.seed or 0))
    dev = harness.check_equivariance(params, mcfg, batch, int(args.trials), int(args.seed or 0))
    tol = float(args.tol)
    _emit({"trials": int(args.trials), "max_deviation": float(dev), "tol": tol, "pass": bool(dev <= tol)})
    if not dev <= tol:
        raise NumericalError(f"equivariance deviation {dev:.3e} exceeds tolerance {tol:.1e}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig(T=4, layers=1, hidden=8, filter_hidden=8)
    err = harness.gradcheck(float(args.eps), int(args.seed), cfg, int(args.nodes))
    tol = float(args.tol)
    _emit({"eps": float(args.eps), "max_rel_error": float(err), "tol": tol, "pass": bool(err <= tol)})
    if not err <= tol:
        raise NumericalError(f"gradient check error {err:.3e} exceeds tolerance {tol:.1e}")
    return 0


def cmd_spectra(args) -> int:
    if args.checkpoint:
        mcfg, params = load_checkpoint(args.checkpoint)
    else:
        s = {k: v for k, v in _settings(args, _MODEL_KEYS).items() if k in _MODEL_KEYS}
        mcfg, params = _build(ModelConfig, dict(s, no_wk=True)).validate(), {}
    if not args.data or not args.out:
        raise ValidationError("spectra needs --data and --out")
    traj = read_dataset(args.data)
    idx = int(args.sample)
    sample = window(traj, mcfg.T, mcfg.dt, mcfg.cutoff, mcfg.use_2hop, starts=[idx], ref_channel=mcfg.ref_channel)[0]

    W = spectral_weights(mcfg, params, sample.node_feats)
    A = fourier.spectral_features(sample.X[:, :, mcfg.ref_channel], W).A.data
    fourier.write_spectra(args.out, A)
    _emit({"out": args.out, "sample": idx, "nodes": int(A.shape[0]), "frequencies": int(A.shape[2])})
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="estag", description="Equivariant spatio-temporal attention for trajectory forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="file of 'key = value' lines")
        sp.set_defaults(func=fn)
        return sp

    g = command("generate", cmd_generate, "simulate a spring network with hidden particles")
    g.add_argument("--n", dest="n", default=None, help="visible particles")
    g.add_argument("--hidden", dest="hidden", default=None, help="hidden particles")
    g.add_argument("--seed", default=None)
    g.add_argument("--out")
    g.add_argument("--from-csv", dest="from_csv", help="ingest 'frame node x y z' rows instead of simulating")
    _add_fields(g, SimConfig, skip=("n_visible", "n_hidden"))

    for name, fn, help_ in (("train", cmd_train, "train a model"),
                            ("baseline", cmd_baseline, "run a reference method"),
                            ("ablate", cmd_ablate, "train an ablated model")):
        sp = command(name, fn, help_)
        _add_fields(sp, harness.TrainConfig)
        _add_fields(sp, ModelConfig)
        if name == "baseline":
            sp.add_argument("--which", required=True,
                            choices=["pt-s", "pt-m", "pt-t", "st-weighted", "egnn-s", "egnn-m", "egnn-t"])
        if name == "ablate":
            sp.add_argument("--variant", required=True)

    e = command("eval", cmd_eval, "evaluate a checkpoint on a split")
    _add_fields(e, harness.TrainConfig)
    e.add_argument("--split", default="test")

    r = command("rollout", cmd_rollout, "multi-step recurrent forecasting")
    _add_fields(r, harness.TrainConfig)
    r.add_argument("--steps", required=True)
    r.add_argument("--attention", choices=["forward", "full"], default=None)
    r.add_argument("--samples", default="20", help="number of evenly spaced start windows")

    c = command("check", cmd_check, "E(3) equivariance check on random inputs")
    c.add_argument("--checkpoint")
    c.add_argument("--trials", default="100")
    c.add_argument("--tol", default="1e-8")
    c.add_argument("--seed", default=None)
    _add_fields(c, ModelConfig)

    gc = command("gradcheck", cmd_gradcheck, "finite-difference check of the full loss")
    gc.add_argument("--eps", default="1e-5")
    gc.add_argument("--tol", default="1e-4")
    gc.add_argument("--seed", default="0")
    gc.add_argument("--nodes", default="3")

    s = command("spectra", cmd_spectra, "dump cross-correlation matrices of one sample")
    s.add_argument("--data")
    s.add_argument("--sample", default="0")
    s.add_argument("--out")
    s.add_argument("--checkpoint")
    _add_fields(s, ModelConfig)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"estag: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, OSError) as exc:
        print(f"estag: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
