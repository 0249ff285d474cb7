"""Command-line entry point: ``deeposets {train,eval,bench,predict,plot}``.

Every command accepts ``--config FILE`` (TOML; one table per command, keys
named like the long flags with underscores). Flags given on the command line
override the file. The fully resolved settings are written next to every
output as ``resolved_config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .bench import EvalGrid, ExperimentReport, LatencyReport, run_eval_grid, run_latency_bench
from .checkpoint import CheckpointError, load_checkpoint
from .model import Prompt, branch_features, build_paper_config, encode_prompt, predict
from .taskgen import TaskDistribution
from .trainer import PRESET_TRAIN_N, TrainConfig, TrainingDiverged, save_trained, train

PRESETS = {"d1": 1, "d5": 5}


class CliError(Exception):
    pass


# --- parsing helpers ----------------------------------------------------------

def parse_int_list(text):
    """``"1..5,10,20"`` -> [1, 2, 3, 4, 5, 10, 20]."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return out


def parse_float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(p) for p in str(text).split(",") if p.strip()]


def _numbers(text, where):
    try:
        return [float(tok) for tok in re.split(r"[\s,]+", text.strip()) if tok]
    except ValueError as exc:
        raise CliError(f"{where}: {exc}") from None


def read_prompt_file(path, d=None) -> Prompt:
    """One example per line: ``x_1 ... x_d y``. Blank lines and ``#`` comments are skipped."""
    xs, ys = [], []
    width = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            vals = _numbers(line, f"{path}:{lineno}")
            if width is None:
                width = len(vals)
                if d is not None and width != d + 1:
                    raise CliError(f"{path}:{lineno}: expected {d + 1} values (x_1..x_{d} y), "
                                   f"found {width}")
                if width < 2:
                    raise CliError(f"{path}:{lineno}: need at least one x value and a y value")
            elif len(vals) != width:
                raise CliError(f"{path}:{lineno}: expected {width} values, found {len(vals)}")
            xs.append(vals[:-1])
            ys.append(vals[-1])
    if not xs:
        raise CliError(f"{path}: no examples found")
    return Prompt(np.array(xs), np.array(ys))


def read_queries(strings, path, d):
    queries = []
    for i, s in enumerate(strings or [], 1):
        queries.append((_numbers(s, f"--query #{i}"), f"--query #{i}"))
    if path:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if line:
                    where = f"{path}:{lineno}"
                    queries.append((_numbers(line, where), where))
    for q, where in queries:
        if len(q) != d:
            raise CliError(f"{where}: query has {len(q)} values, model expects {d}")
    return np.array([q for q, _ in queries]).reshape(-1, d)


# --- config resolution --------------------------------------------------------

def _key_line(text, key):
    for lineno, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{re.escape(key)}\s*=", line):
            return lineno
    return None


def load_config_section(path, section, allowed):
    """The ``[section]`` table of a TOML file, checked against ``allowed`` keys."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"{path}: {exc}") from None
    table = doc.get(section, {})
    if not isinstance(table, dict):
        raise CliError(f"{path}: [{section}] must be a table")
    for key in table:
        if key not in allowed:
            line = _key_line(text, key)
            where = f"{path}:{line}" if line else path
            raise CliError(f"{where}: unknown setting {key!r} in [{section}]")
    return table, text


def resolve(args, section, defaults):
    """Defaults < config file < command-line flags."""
    resolved = dict(defaults)
    text = None
    if getattr(args, "config", None):
        table, text = load_config_section(args.config, section, set(defaults))
        resolved.update(table)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    return resolved, text


def _check_types(resolved, types, path, text):
    for key, typ in types.items():
        val = resolved.get(key)
        if val is None:
            continue
        try:
            resolved[key] = typ(val)
        except (TypeError, ValueError):
            line = _key_line(text, key) if text else None
            where = f"{path}:{line}: " if line else ""
            raise CliError(f"{where}invalid value for {key}: {val!r}") from None
    return resolved


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def _write_resolved(out, command, resolved, extra=None):
    """JSON echo with provenance, plus a TOML file that ``--config`` accepts as-is."""
    doc = {"command": command, "version": __version__, "settings": resolved, **(extra or {})}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")
    lines = [f"[{command}]"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in resolved.items() if v is not None]
    (out / "resolved_config.toml").write_text("\n".join(lines) + "\n")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------

TRAIN_DEFAULTS = {
    "preset": "d1", "iterations": 16_000, "seed": 0, "batch_size": 64, "n": None,
    "noise_var": 0.0, "base_lr": 1e-3, "log_every": 100, "checkpoint_every": 0,
    "out": "deeposets-out/train", "resume": None,
}
TRAIN_TYPES = {"iterations": int, "seed": int, "batch_size": int, "noise_var": float,
               "base_lr": float, "log_every": int, "checkpoint_every": int, "preset": str,
               "out": str}


def cmd_train(args):
    cfg, text = resolve(args, "train", TRAIN_DEFAULTS)
    cfg = _check_types(cfg, TRAIN_TYPES, args.config, text)
    if cfg["preset"] not in PRESETS:
        raise CliError(f"unknown preset {cfg['preset']!r}; choose from {sorted(PRESETS)}")
    d = PRESETS[cfg["preset"]]
    n = cfg["n"] if cfg["n"] is not None else PRESET_TRAIN_N[d]
    if isinstance(n, str) and ".." in n:
        lo, hi = n.split("..")
        n = (int(lo), int(hi))
    elif isinstance(n, (list, tuple)):
        n = (int(n[0]), int(n[1]))
    else:
        n = int(n)
    cfg["n"] = list(n) if isinstance(n, tuple) else n
    out = _out_dir(cfg["out"])
    try:
        tc = TrainConfig(
            model=build_paper_config(d),
            tasks=TaskDistribution(d=d, n=n, noise_var=cfg["noise_var"], queries=1,
                                   seed=cfg["seed"]),
            iterations=cfg["iterations"], seed=cfg["seed"], batch_size=cfg["batch_size"],
            base_lr=cfg["base_lr"], log_every=max(1, cfg["log_every"]),
            checkpoint_every=cfg["checkpoint_every"],
            checkpoint_dir=str(out / "checkpoints") if cfg["checkpoint_every"] else None,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    resume = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    model, tlog = train(tc, resume=resume)
    sha = save_trained(model, out / "model.json", tc, tlog)
    tlog.write_csv(out / "train_log.csv")
    summary = {"checkpoint_sha256": sha, "iterations": tc.iterations,
               "parameters": model.parameter_count}
    if tlog.losses:
        summary["smoothed_loss"] = tlog.smoothed(500)
    _write_resolved(out, "train", cfg, summary)
    print(json.dumps(summary))
    return 0


EVAL_DEFAULTS = {
    "checkpoint": None, "d": "1", "n": "10", "noise": "0,0.04,0.2,2.0", "tasks": 2000,
    "queries": 16, "seed": 0, "ols_only": False, "plots": False, "out": "deeposets-out/eval",
}


def cmd_eval(args):
    cfg, text = resolve(args, "eval", EVAL_DEFAULTS)
    cfg = _check_types(cfg, {"tasks": int, "queries": int, "seed": int, "out": str},
                       args.config, text)
    try:
        ds, ns = parse_int_list(cfg["d"]), parse_int_list(cfg["n"])
        noise = parse_float_list(cfg["noise"])
    except ValueError as exc:
        raise CliError(f"bad list: {exc}") from None
    if not ns or not ds or not noise:
        raise UsageError("eval needs non-empty --d, --n and --noise lists")
    if not cfg["ols_only"] and not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint (or --ols-only)")
    if cfg["checkpoint"] and not cfg["ols_only"] and not Path(cfg["checkpoint"]).exists():
        raise CliError(f"checkpoint not found: {cfg['checkpoint']}")
    grid = EvalGrid(ds=ds, ns=ns, noise_vars=noise, tasks_per_cell=cfg["tasks"],
                    queries_per_task=cfg["queries"], seed=cfg["seed"],
                    checkpoint=None if cfg["ols_only"] else cfg["checkpoint"],
                    ols_only=bool(cfg["ols_only"]))
    report = run_eval_grid(grid)
    report.metadata["resolved_config"] = cfg
    out = _out_dir(cfg["out"])
    report.write_json(out / "eval_report.json")
    report.write_csv(out / "eval_report.csv")
    _write_resolved(out, "eval", cfg, {"checkpoint_sha256": report.metadata["checkpoint_sha256"]})
    if cfg["plots"]:
        _eval_plots(report, out)
    for c in report.cells:
        print(f"{c['method']:>10} d={c['d']} n={c['n']:<3} noise={c['noise_var']:<5} "
              f"mse={c['mse']:.3e} +- {c['stderr']:.1e}")
    return 0


def _eval_plots(report, out):
    from .plots import plot_mse_vs_n, plot_mse_vs_noise

    for d in sorted({c["d"] for c in report.cells}):
        for n in sorted({c["n"] for c in report.rows(d=d)}):
            if len({c["noise_var"] for c in report.rows(d=d, n=n) if c["noise_var"] > 0}) > 1:
                plot_mse_vs_noise(report, out / f"mse_vs_noise_d{d}_n{n}.svg", d=d, n=n)
        if len({c["n"] for c in report.rows(d=d)}) > 1:
            for v in sorted({c["noise_var"] for c in report.rows(d=d)}):
                plot_mse_vs_n(report, out / f"mse_vs_n_d{d}_noise{v:g}.svg", d=d, noise_var=v)


BENCH_DEFAULTS = {"checkpoint": None, "n": "1..100", "repetitions": 200, "seed": 0,
                  "plots": False, "out": "deeposets-out/bench"}


def cmd_bench(args):
    cfg, text = resolve(args, "bench", BENCH_DEFAULTS)
    cfg = _check_types(cfg, {"repetitions": int, "seed": int, "out": str}, args.config, text)
    if not cfg["checkpoint"]:
        raise UsageError("bench needs --checkpoint")
    try:
        ns = parse_int_list(cfg["n"])
    except ValueError as exc:
        raise CliError(f"bad n list: {exc}") from None
    if not ns:
        raise UsageError("bench needs a non-empty --n list")
    if not Path(cfg["checkpoint"]).exists():
        raise CliError(f"checkpoint not found: {cfg['checkpoint']}")
    try:
        report = run_latency_bench(cfg["checkpoint"], ns, repetitions=cfg["repetitions"],
                                   seed=cfg["seed"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    report.metadata["resolved_config"] = cfg
    out = _out_dir(cfg["out"])
    report.write_json(out / "latency_report.json")
    report.write_csv(out / "latency_report.csv")
    _write_resolved(out, "bench", cfg, {"checkpoint_sha256": report.metadata["checkpoint_sha256"]})
    if cfg["plots"]:
        from .plots import plot_latency

        plot_latency(report, out / "latency_vs_n.svg")
    for r in report.rows:
        print(f"n={r['n']:<4} encode={r['encode']['median_ms']:.4f}ms "
              f"first={r['first_query']['median_ms']:.4f}ms "
              f"cached={r['cached_query']['median_ms']:.4f}ms")
    return 0


def cmd_predict(args):
    try:
        ck = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.checkpoint}") from None
    model = ck.model
    d = model.input_dim
    queries = read_queries(args.query, args.queries_file, d)
    if queries.shape[0] == 0:
        return 0
    prompt = read_prompt_file(args.prompt_file, d)
    cache = branch_features(model, encode_prompt(model, prompt))
    for q in queries:
        print(repr(predict(model, cache, q)))
    return 0


def cmd_plot(args):
    from .plots import plot_latency

    out = _out_dir(args.out)
    made = []
    if args.report:
        report = ExperimentReport.read_json(args.report)
        before = set(out.glob("*.svg"))
        _eval_plots(report, out)
        made += sorted(set(out.glob("*.svg")) - before)
    if args.latency:
        made.append(plot_latency(LatencyReport.read_json(args.latency), out / "latency_vs_n.svg"))
    if not made and not (args.report or args.latency):
        raise UsageError("plot needs --report and/or --latency")
    for p in made:
        print(p)
    return 0


class UsageError(CliError):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="deeposets", description="Train, evaluate, benchmark and query DeepOSets models.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--quiet", action="store_true", help="no progress messages on stderr")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS threads (1 gives bit-reproducible runs)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--n", help="prompt length, or LO..HI for a uniform range")
    t.add_argument("--noise-var", dest="noise_var", type=float)
    t.add_argument("--base-lr", dest="base_lr", type=float)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--resume", help="checkpoint with optimizer state to continue from")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MSE grid over d, n and noise for DeepOSets and OLS")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--d")
    e.add_argument("--n", help="comma list and/or ranges, e.g. 2..20,30")
    e.add_argument("--noise", help="comma list of noise variances")
    e.add_argument("--tasks", type=int)
    e.add_argument("--queries", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--ols-only", dest="ols_only", action="store_true", default=None)
    e.add_argument("--plots", action="store_true", default=None)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="inference latency against prompt length")
    b.add_argument("--config")
    b.add_argument("--checkpoint")
    b.add_argument("--n", help="e.g. 1..100 or 10,100")
    b.add_argument("--repetitions", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--plots", action="store_true", default=None)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("predict", help="predict query values from a prompt file")
    r.add_argument("checkpoint")
    r.add_argument("prompt_file")
    r.add_argument("--query", action="append", help="one query point; repeat for more")
    r.add_argument("--queries-file", dest="queries_file")
    r.set_defaults(func=cmd_predict, config=None)

    g = sub.add_parser("plot", help="render SVG figures from saved reports")
    g.add_argument("--report", help="eval_report.json")
    g.add_argument("--latency", help="latency_report.json")
    g.add_argument("--out", default="deeposets-out/plots")
    g.set_defaults(func=cmd_plot, config=None)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be at least 1")
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deeposets {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"deeposets {args.command}: error: {exc}; last state in {exc.checkpoint_path}",
              file=sys.stderr)
        return 1
    except (CliError, CheckpointError, FileNotFoundError) as exc:
        print(f"deeposets {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
