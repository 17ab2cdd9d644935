"""Command-line driver: ``simulate``, ``preprocess``, ``train``, ``eval``, ``sweep``.

Run configuration is a JSON document::

    {
      "preset": "S",                       # optional; S, M or L
      "window": {"T": 64, "stride": 1},
      "model": {"kind": "MSTL", "K": 7, "M": 10, "hidden": 200},
      "train": {"learning_rate": 0.001, "batch_size": 64,
                "max_epochs": 200, "patience": 10},
      "train_factors": ["1"],              # speeds mixed into training data
      "data": {"traces": "traces/", "split": [0.7, 0.2, 0.1]},
      "eval": {"factors": ["1/8", "1", "8"], "stride": 1},
      "seed": 0
    }

``data`` may instead name ``train``/``validation``/``test`` locations
directly.  Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import warnings
from importlib import resources
from pathlib import Path

from . import evalsuite, magdata, simworld
from .neuralnet import ModelSpec, ReceptiveFieldWarning, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDivergedError, fit_output_scaling, train

ALGORITHMS = {"MSTL": "MSTL", "LSTM": "LSTM_ONLY", "TCN": "TCN_ONLY", "MSTT": "MSTT", "DTW": None}

DEFAULTS = {
    "window": {"T": 64, "stride": 1},
    "model": {"kind": "MSTL", "K": 7, "M": 10, "hidden": 200},
    "train": {},
    "train_factors": ["1"],
    "data": {"split": [0.7, 0.2, 0.1]},
    "eval": {"factors": ["1/8", "1/4", "1/2", "1", "2", "4", "8"], "stride": 1},
    "seed": 0,
}


class CommandError(Exception):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_preset(name: str) -> dict:
    try:
        text = resources.files("magloc").joinpath("presets", f"{name}.json").read_text("utf-8")
    except FileNotFoundError:
        raise CommandError(f"unknown preset {name!r}; valid: S, M, L") from None
    return json.loads(text)


def load_config(path=None, seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise CommandError(f"config file not found: {path}")
        user = json.loads(path.read_text(encoding="utf-8"))
        if "preset" in user:
            cfg = _merge(cfg, load_preset(user["preset"]))
        cfg = _merge(cfg, user)
        base = path.parent
    if seed is not None:
        cfg["seed"] = int(seed)
    for key in ("traces", "train", "validation", "test"):
        if key in cfg["data"]:
            p = Path(cfg["data"][key])
            cfg["data"][key] = str(p if p.is_absolute() else base / p)
    return cfg


def model_spec(cfg) -> ModelSpec:
    m = dict(cfg["model"])
    m.setdefault("T", cfg["window"]["T"])
    if m["T"] != cfg["window"]["T"]:
        raise CommandError(f"model.T={m['T']} disagrees with window.T={cfg['window']['T']}")
    return ModelSpec(**m)


def load_splits(cfg):
    data = cfg["data"]
    if "traces" in data:
        traces = magdata.load_traces(_existing(data["traces"]))
        return magdata.split(traces, data.get("split", (0.7, 0.2, 0.1)), cfg["seed"])
    missing = [k for k in ("train", "validation", "test") if k not in data]
    if missing:
        raise CommandError(f"config data section lacks {missing} (or a 'traces' entry)")
    return tuple(magdata.load_traces(_existing(data[k])) for k in ("train", "validation", "test"))


def _existing(path):
    if not Path(path).exists():
        raise CommandError(f"path not found: {path}")
    return path


def _augment(traces, factors):
    return [magdata.resample_speed(tr, f) for f in factors for tr in traces]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------- commands


def cmd_simulate(args, cfg):
    if not args.world or not args.walks:
        raise CommandError("simulate needs --world and --walks")
    for p in (args.world, args.walks):
        if not Path(p).exists():
            raise CommandError(f"file not found: {p}")
    world = simworld.FieldModel.load(args.world)
    out = _out(args)
    written = []
    for cfg_walk in simworld.load_walks(args.walks):
        trace = simworld.walk(world, cfg_walk)
        written.append(magdata.write_trace(trace, out / f"{trace.trace_id}.csv"))
    for p in written:
        print(p)
    return 0


def cmd_preprocess(args, cfg):
    tr, va, te = load_splits(cfg)
    stats = magdata.fit_normalizer(tr)
    T, stride = cfg["window"]["T"], cfg["window"].get("stride", 1)
    factors = cfg.get("train_factors", ["1"])
    out = _out(args)
    (out / "normalizer.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    for name, traces in (("train", _augment(tr, factors)), ("validation", _augment(va, factors)), ("test", te)):
        ds = magdata.windows_from_traces(traces, T, stats, stride)
        ds.save(out / f"{name}_windows.npz")
        print(f"{name}: {len(ds)} windows")
    return 0


def cmd_train(args, cfg):
    spec = model_spec(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ReceptiveFieldWarning)
        spec.check()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    tr, va, _ = load_splits(cfg)
    stats = magdata.fit_normalizer(tr)
    T, stride = spec.T, cfg["window"].get("stride", 1)
    factors = cfg.get("train_factors", ["1"])
    dtr = magdata.windows_from_traces(_augment(tr, factors), T, stats, stride)
    dva = magdata.windows_from_traces(_augment(va, factors), T, stats, stride)
    spec = fit_output_scaling(spec, dtr.labels)
    tcfg = TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
    try:
        params, history = train(spec, dtr, dva, tcfg)
    except TrainingDivergedError as exc:
        raise CommandError(str(exc)) from None
    out = _out(args)
    meta = {"normalizer": stats.to_dict(), "stride": stride, "train_factors": factors}
    save_checkpoint(out / "checkpoint.mstl", spec, params, meta)
    history.save(out / "history.json")
    if not history.best_epoch <= history.stopped_epoch:
        raise CommandError("history invariant violated: best_epoch > stopped_epoch")
    print(f"best epoch {history.best_epoch}, stopped at {history.stopped_epoch}")
    return 0


def _predictor(args, cfg):
    """Build ``(predictor, stats, window)`` for the requested algorithm."""
    alg = args.algorithm
    if alg not in ALGORITHMS:
        raise CommandError(f"unknown algorithm {alg!r}; valid: {', '.join(ALGORITHMS)}")
    if alg == "DTW":
        tr, _, _ = load_splits(cfg)
        stats = magdata.fit_normalizer(tr)
        T = cfg["window"]["T"]
        db = evalsuite.build_fingerprint_db(_augment(tr, cfg.get("train_factors", ["1"])), stats, T)
        return evalsuite.dtw_predictor(db), stats, T
    if not args.checkpoint:
        raise CommandError(f"algorithm {alg} needs --checkpoint")
    spec, params, meta = load_checkpoint(_existing(args.checkpoint))
    if spec.kind != ALGORITHMS[alg]:
        raise CommandError(f"checkpoint holds a {spec.kind} model, not {alg}")
    stats = magdata.NormalizationStats.from_dict(meta["normalizer"])
    return evalsuite.model_predictor(spec, params), stats, spec.T


def cmd_eval(args, cfg):
    predictor, stats, T = _predictor(args, cfg)
    _, _, te = load_splits(cfg)
    stride = cfg["eval"].get("stride", 1)
    report, pred, truth = evalsuite.evaluate(
        predictor, te, stats, T, stride, algorithm=args.algorithm, speed_factor="1"
    )
    out = _out(args)
    report.save(out / f"report_{args.algorithm}.json")
    evalsuite.export_trajectory(pred, truth, out / f"trajectory_{args.algorithm}.csv")
    print(f"{args.algorithm}: mean {report.mean:.3f} m, sd {report.sd:.3f} m")
    return 0


def cmd_sweep(args, cfg):
    if args.factors:
        factors = [f for f in args.factors.split(",") if f.strip()]
    else:
        factors = cfg["eval"]["factors"]
    try:
        factors = [magdata.parse_factor(f) for f in factors]
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    predictor, stats, T = _predictor(args, cfg)
    _, _, te = load_splits(cfg)
    sweep = evalsuite.speed_sweep(
        predictor, te, factors, stats, T, cfg["eval"].get("stride", 1), algorithm=args.algorithm
    )
    out = _out(args)
    (out / f"sweep_{args.algorithm}.json").write_text(evalsuite.sweep_to_json(sweep))
    for k, r in sweep.items():
        print(f"{k:>4}: mean {r.mean:.3f} m, sd {r.sd:.3f} m")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="magloc", parents=[common], description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="generate trace CSVs from a synthetic world")
    p.add_argument("--world", required=True)
    p.add_argument("--walks", required=True)
    sub.add_parser("preprocess", parents=[common], help="write normalizer and windowed datasets")
    sub.add_parser("train", parents=[common], help="train the configured model")
    for name in ("eval", "sweep"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--algorithm", default="MSTL", help=f"one of {', '.join(ALGORITHMS)}")
        p.add_argument("--checkpoint")
        if name == "sweep":
            p.add_argument("--factors", help='comma-separated, e.g. "1/2,1,2,4"')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.config = getattr(args, "config", None)
    args.seed = getattr(args, "seed", None)
    args.out = getattr(args, "out", None) or "."
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (CommandError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"magloc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
