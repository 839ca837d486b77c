"""Command-line interface: simulate, correlate, fit, reproduce, validate-config.

Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O or stream format,
5 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .atomic import TWO_LEVEL
from .config import ConfigError, EnvelopeWarning, Run, load_config
from .correlator import NormalizationError, background_correct, correlate_channels, correlate_pooled
from .detection import config_hash, detect
from .fitting import FitError, fit_exponential, fit_power_law, fit_rabi
from .pipeline import detection_seed, simulate_batched
from .streamio import (ReportRecord, StreamFormatError, provenance, read_stream, read_table, write_stream,
                       write_table, write_truth)
from .trajectory import EmissionRecord

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _out(base: Path, name: str | None) -> Path | None:
    if name is None:
        return None
    p = Path(name)
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EnvelopeWarning)
        cfg = load_config(args.config)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    run = Run(cfg)
    outdir = Path(args.outdir) if args.outdir else Path(args.config).resolve().parent
    outdir.mkdir(parents=True, exist_ok=True)
    chash = cfg.digest()
    sim = cfg.simulation
    records, _ = simulate_batched(run.spec, run.env, run.motion, cfg.duration, cfg.n_atoms, cfg.seed,
                                  batch_size=sim.batch_size, dt=sim.dt, motion_update=sim.motion_update)
    merged = EmissionRecord.merge(records)
    stream = detect(merged, run.geometry, run.analyzer, detection_seed(cfg.seed), duration=cfg.duration)
    stream = replace(stream, config_hash=chash)

    paths = {"stream": _out(outdir, cfg.output.stream), "truth": _out(outdir, cfg.output.truth),
             "report": _out(outdir, cfg.output.report)}
    write_stream(paths["stream"], stream)
    if paths["truth"] is not None:
        write_truth(paths["truth"], merged, chash)
    rep = ReportRecord("simulate", cfg.model_dump(mode="json"), chash, provenance(cfg.seed))
    rep.results = {"emissions": int(len(merged.t)), "clicks": {l: int(len(t)) for l, t in
                                                               zip(stream.labels, stream.times)},
                   "emission_rate_hz": len(merged.t) / cfg.duration,
                   "click_rate_hz": stream.n_clicks / cfg.duration,
                   "files": {k: str(v) for k, v in paths.items() if v is not None}}
    rep.save(paths["report"])
    print(f"wrote {paths['stream']} ({stream.n_clicks} clicks, {len(merged.t)} emissions)")
    return EXIT_OK


# ---------------------------------------------------------------- correlate


def _channel_arg(s: str):
    return int(s) if s.isdigit() else s


def cmd_correlate(args) -> int:
    files = [read_stream(p) for p in args.streams]
    streams = [f.to_clickstream() for f in files]
    pair = tuple(_channel_arg(c) for c in args.pair)
    for st in streams:
        for c in pair:
            if c != "total" and (isinstance(c, str) and c not in st.labels or
                                 isinstance(c, int) and c >= len(st.labels)):
                raise CliError(f"unknown channel {c!r}; stream has {', '.join(st.labels)}", EXIT_IO)
    two_sided = not args.one_sided
    if len(streams) == 1 or args.single_stop:
        if len(streams) > 1:
            raise CliError("--single-stop takes one stream", EXIT_USAGE)
        hist = correlate_channels(streams[0], pair, args.bin_width, args.max_lag,
                                  two_sided=two_sided, single_stop=args.single_stop)
    else:
        if "total" in pair or pair[0] == pair[1]:
            raise CliError("pooling several streams supports cross pairs only", EXIT_USAGE)
        hist = correlate_pooled(streams, pair, args.bin_width, args.max_lag, two_sided=two_sided,
                                normalization=args.normalization)
    if args.signal_fraction is not None:
        hist = background_correct(hist, args.signal_fraction)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    table = outdir / f"{args.name}.tsv"
    comments = [f"pair {pair[0]} {pair[1]}", f"bin_width_s {args.bin_width}", f"max_lag_s {args.max_lag}",
                "lag_s is the left bin edge"]
    if hist.meta.get("biased"):
        comments.append("BIASED: single-stop histogram")
    write_table(table, ["lag_s", "counts", "g2", "err"], hist.to_table(), comments)
    conf = {"streams": [str(p) for p in args.streams], "pair": list(args.pair), "bin_width": args.bin_width,
            "max_lag": args.max_lag, "two_sided": two_sided, "single_stop": args.single_stop,
            "signal_fraction": args.signal_fraction, "normalization": args.normalization,
            "stream_hashes": [f.config_hash for f in files]}
    rep = ReportRecord("correlate", conf, config_hash(conf), provenance())
    meta = {k: v for k, v in hist.meta.items() if k != "segments"}
    rep.results = {"meta": meta, "g2_bin0": float(hist.g2[0]), "table": str(table),
                   "biased": bool(hist.meta.get("biased", False))}
    rep.save(outdir / f"{args.name}_report.json")
    flag = " [BIASED single-stop]" if hist.meta.get("biased") else ""
    print(f"wrote {table}: g2(0) = {hist.g2[0]:.4f}{flag}")
    return EXIT_OK


# ---------------------------------------------------------------- fit


FIT_DEFAULTS = {"exp": ("lag_s", "g2", "err"), "rabi": ("lag_s", "g2", "err"),
                "powerlaw": ("Lambda", "tau_r_s", "tau_r_err")}


def _column(header, data, name, path):
    if name not in header:
        raise CliError(f"{path}: no column {name!r} (have {', '.join(header)})", EXIT_IO)
    return data[:, header.index(name)]


def cmd_fit(args) -> int:
    header, data, _ = read_table(args.table)
    dx, dy, de = FIT_DEFAULTS[args.model]
    x = _column(header, data, args.x or dx, args.table)
    y = _column(header, data, args.y or dy, args.table)
    err_name = args.err or de
    err = _column(header, data, err_name, args.table) if err_name in header else None
    if (args.x or dx) == "lag_s" and args.model != "powerlaw" and len(x) > 1:
        # histogram tables list left bin edges; fit at bin centers
        x = x + 0.5 * (x[1] - x[0])
    ok = np.isfinite(y) & np.isfinite(x)
    if err is not None:
        ok &= np.isfinite(err)
    x, y = x[ok], y[ok]
    err = err[ok] if err is not None else None

    if args.model == "exp":
        baseline = None if args.free_baseline else 1.0
        fr = tuple(args.fit_range) if args.fit_range else None
        res = fit_exponential((x, y, err), fit_range=fr, baseline=baseline)
        results = res.to_dict()
        line = f"A = {res.A:.4f} +- {res.sigma_A:.4f}, tau_r = {res.tau_r:.4g} +- {res.sigma_tau:.2g} s"
    elif args.model == "rabi":
        if args.fit_range:
            sel = (x >= args.fit_range[0]) & (x <= args.fit_range[1])
            x, y, err = x[sel], y[sel], (err[sel] if err is not None else None)
        res = fit_rabi((x, y, err), args.gamma)
        results = res.to_dict()
        line = f"Omega/Gamma = {res.omega / args.gamma:.4f}, |delta|/Gamma = {res.delta / args.gamma:.4f}"
    else:
        res = fit_power_law(x, y, err)
        results = res.to_dict()
        line = f"alpha = {res.alpha:.4f} +- {res.alpha_err:.4f}"
    conf = {"table": str(args.table), "model": args.model, "x": args.x or dx, "y": args.y or dy,
            "err": err_name if err is not None else None, "fit_range": args.fit_range,
            "gamma": args.gamma, "free_baseline": args.free_baseline}
    rep = ReportRecord(f"fit:{args.model}", conf, config_hash(conf), provenance())
    rep.results = results
    out = Path(args.report) if args.report else Path(args.table).with_suffix(f".{args.model}.json")
    rep.save(out)
    print(line)
    return EXIT_OK


# ---------------------------------------------------------------- reproduce


def cmd_reproduce(args) -> int:
    from .studies import run_study

    kw = {"seed": args.seed} if args.seed is not None else {}
    result = run_study(args.figure, **kw)
    paths = result.write(args.outdir)
    for c in result.report.checks:
        tag = "PASS" if c["passed"] else "FAIL"
        if c.get("advisory"):
            tag += " (advisory)"
        print(f"{tag}  {c['name']}  value={c['value']}")
    print(f"wrote {len(paths)} files to {args.outdir}")
    return EXIT_OK if result.report.passed or not args.strict else EXIT_NUMERIC


# ---------------------------------------------------------------- validate-config


def cmd_validate(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EnvelopeWarning)
        cfg = load_config(args.config)
    Run(cfg)
    for w in caught:
        print(f"warning: {w.message}")
    print(f"ok: {args.config} (hash {cfg.digest()})")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .studies import STUDIES

    p = argparse.ArgumentParser(prog="motcorr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate atoms and write click/truth streams")
    s.add_argument("config")
    s.add_argument("--outdir", help="output directory (default: next to the config)")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("correlate", help="histogram a channel pair into g2")
    c.add_argument("streams", nargs="+", help="click stream file(s); several files are pooled")
    c.add_argument("--pair", nargs=2, default=["0", "1"], metavar=("START", "STOP"),
                   help="channel labels or indices; 'total' merges both channels")
    c.add_argument("--bin-width", type=float, default=100e-9, help="seconds")
    c.add_argument("--max-lag", type=float, default=20e-6, help="seconds")
    c.add_argument("--one-sided", action="store_true", help="count start->stop only")
    c.add_argument("--single-stop", action="store_true", help="first-stop histogram (biased)")
    c.add_argument("--normalization", choices=("segment", "pooled"), default="segment",
                   help="several streams: per-stream rates, or rates of all streams together")
    c.add_argument("--signal-fraction", type=float, help="background correction with p = S/(S+B)")
    c.add_argument("--outdir", default=".")
    c.add_argument("--name", default="g2")
    c.set_defaults(func=cmd_correlate)

    f = sub.add_parser("fit", help="fit a table with exp, rabi or powerlaw")
    f.add_argument("table")
    f.add_argument("--model", choices=sorted(FIT_DEFAULTS), required=True)
    f.add_argument("--x")
    f.add_argument("--y")
    f.add_argument("--err")
    f.add_argument("--fit-range", nargs=2, type=float, metavar=("LO", "HI"))
    f.add_argument("--gamma", type=float, default=TWO_LEVEL.gamma, help="rad/s, for the rabi model")
    f.add_argument("--free-baseline", action="store_true", help="exp model: fit the baseline too")
    f.add_argument("--report")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("reproduce", help="run a preset study and write its tables")
    r.add_argument("figure", choices=STUDIES)
    r.add_argument("--outdir", default="reproduce")
    r.add_argument("--seed", type=int)
    r.add_argument("--strict", action="store_true", help="exit 5 if any check fails")
    r.set_defaults(func=cmd_reproduce)

    v = sub.add_parser("validate-config", help="check a run config")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for loc, msg in exc.errors:
            print(f"config error: {loc}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (StreamFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FitError, NormalizationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
