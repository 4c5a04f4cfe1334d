"""Command-line interface: simulate, fit, summarize, check-id.

Exit codes: 0 success, 1 usage error, 2 runtime error.  ``fit`` writes one
draw store per chain plus a manifest JSON; ``summarize`` turns stores into
a text report and plot-ready CSV tables.  Pivot rows are printed 1-based
in human-readable output and stored 0-based in files.
"""

from __future__ import annotations

import argparse
import csv
import json
import signal
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, apply_overrides, config_to_dict, load_config_file
from .data import DataError, dedicated_block_delta, load_dataset, save_dataset, simulate_dataset
from .identification import counting_rule_check, is_uglt
from .model import ModelError
from .postprocess import PostprocessError, filter_variance_identified, summarize
from .sampler import Chain, ChainConfig
from .store import StoreWriter, data_fingerprint, merge_stores, read_store

__all__ = ["main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gltfa",
                     description="Sparse Bayesian factor analysis with an "
                                 "unknown number of factors")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset with known truth")
    p_sim.add_argument("--m", type=int, required=True, help="number of features")
    p_sim.add_argument("--T", type=int, required=True, help="number of time points")
    p_sim.add_argument("--true-r", type=int, help="factors in the default block support")
    p_sim.add_argument("--delta-file", help="CSV of a 0/1 support matrix instead")
    p_sim.add_argument("--loads-per-factor", type=int, default=0,
                       help="truncate the default support to this many loads")
    p_sim.add_argument("--loading-scale", type=float, default=1.0)
    p_sim.add_argument("--sigma2", type=float, default=0.3)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True, help="output CSV path")

    p_fit = sub.add_parser("fit", help="run the sampler on a dataset")
    p_fit.add_argument("--data", required=True, help="input CSV (rows = time points)")
    p_fit.add_argument("--config", help="flat key-value config file")
    p_fit.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--draws", type=int)
    p_fit.add_argument("--burnin", type=int)
    p_fit.add_argument("--thin", type=int)
    p_fit.add_argument("--chains", type=int, default=1)
    p_fit.add_argument("--k", type=int, help="maximum number of columns")
    p_fit.add_argument("--out", required=True, help="output stem for stores/manifest")
    p_fit.add_argument("--no-standardize", action="store_true",
                       help="keep the data on its original scale")
    p_fit.add_argument("--progress-every", type=int, default=0,
                       help="emit a diagnostics line every N sweeps")

    p_sum = sub.add_parser("summarize", help="post-process one or more draw stores")
    p_sum.add_argument("--store", required=True, nargs="+", help="draw store file(s)")
    p_sum.add_argument("--target-r", type=int,
                       help="condition pivot tallies on this dimension")
    p_sum.add_argument("--pivots", help="explicit 1-based pivot rows, comma separated")
    p_sum.add_argument("--pivot-choice", default="l_star",
                       choices=("l_star", "l_h", "explicit"))
    p_sum.add_argument("--out", required=True, help="output directory")
    p_sum.add_argument("--data", help="original CSV, to verify the fingerprint")

    p_chk = sub.add_parser("check-id", help="counting-rule verdict for a support matrix")
    p_chk.add_argument("--delta", required=True, help="CSV of 0/1 entries")
    return parser


def _read_delta_csv(path) -> np.ndarray:
    try:
        rows = []
        with open(path) as fh:
            for ln, line in enumerate(csv.reader(fh), start=1):
                if not line or (len(line) == 1 and not line[0].strip()):
                    continue
                try:
                    rows.append([int(float(c)) for c in line])
                except ValueError:
                    if ln == 1:   # tolerate a header row
                        continue
                    raise DataError(f"{path}:{ln}: non-numeric cell")
        delta = np.asarray(rows, dtype=np.int8)
    except OSError as exc:
        raise DataError(str(exc)) from None
    if delta.ndim != 2 or delta.size == 0:
        raise DataError(f"{path}: not a matrix")
    if not np.isin(delta, (0, 1)).all():
        raise DataError(f"{path}: entries must be 0 or 1")
    return delta


def _cmd_simulate(args) -> int:
    if (args.true_r is None) == (args.delta_file is None):
        raise UsageError("give exactly one of --true-r or --delta-file")
    if args.delta_file:
        delta = _read_delta_csv(args.delta_file)
        if delta.shape[0] != args.m:
            raise DataError("--delta-file row count must equal --m")
    else:
        delta = dedicated_block_delta(args.m, args.true_r, args.loads_per_factor)
    data, truth = simulate_dataset(args.m, args.T, delta, args.loading_scale,
                                   args.sigma2, args.seed)
    save_dataset(args.out, data)
    stem = args.out[:-4] if args.out.endswith(".csv") else args.out
    truth_path = stem + "_truth.json"
    with open(truth_path, "w") as fh:
        json.dump({
            "seed": truth.seed,
            "delta": truth.delta.tolist(),
            "lam": truth.lam.tolist(),
            "sigma2": truth.sigma2.tolist(),
            "factors": truth.factors.tolist(),
        }, fh)
    print(f"wrote {args.out} and {truth_path}")
    return 0


def _cmd_fit(args) -> int:
    data = load_dataset(args.data, standardize=not args.no_standardize)
    cfg = ChainConfig(n_draws=1000)
    if args.config:
        cfg = load_config_file(args.config, base=cfg)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val
    apply_overrides(cfg, overrides)
    if args.draws is not None:
        cfg.n_draws = args.draws
    if args.burnin is not None:
        cfg.n_burnin = args.burnin
    if args.thin is not None:
        cfg.thin = args.thin
    if args.seed is not None:
        cfg.seed = args.seed
    if args.k is not None:
        cfg.k = args.k
    cfg.resolved(data.m)

    stopping = {"flag": False}

    def _handler(signum, frame):
        stopping["flag"] = True

    old_int = signal.signal(signal.SIGINT, _handler)
    old_term = signal.signal(signal.SIGTERM, _handler)
    fingerprint = data_fingerprint(data.y)
    manifest_runs = []
    try:
        for cid in range(args.chains):
            store_path = f"{args.out}.chain{cid}.draws"
            header = {
                "format": "gltfa-store v1",
                "version": __version__,
                "chain_id": cid,
                "seed": cfg.seed,
                "data_fingerprint": fingerprint,
                "standardized": not args.no_standardize,
                "config": config_to_dict(cfg),
            }
            writer = StoreWriter(store_path, header)
            started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            chain = Chain(cfg, data, chain_id=cid)
            chain.run(store=writer,
                      progress_every=args.progress_every,
                      stop_flag=lambda: stopping["flag"])
            acc = {mv: {"accepted": a, "attempted": n}
                   for mv, (a, n) in chain.acc.items()}
            writer.close(end_info={"n_records": writer.n_records,
                                   "acceptance": acc})
            manifest_runs.append({
                "chain_id": cid,
                "store": store_path,
                "started_utc": started,
                "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "n_records": writer.n_records,
                "aborted": stopping["flag"],
                "acceptance": acc,
            })
            print(f"chain {cid}: {writer.n_records} records -> {store_path}")
            if stopping["flag"]:
                break
    finally:
        signal.signal(signal.SIGINT, old_int)
        signal.signal(signal.SIGTERM, old_term)
    manifest_path = f"{args.out}.manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump({
            "version": __version__,
            "data": args.data,
            "data_fingerprint": fingerprint,
            "standardized": not args.no_standardize,
            "seed": cfg.seed,
            "config": config_to_dict(cfg),
            "chains": manifest_runs,
        }, fh, indent=2, sort_keys=True)
    print(f"wrote {manifest_path}")
    return 0


def _write_matrix_csv(path, header, names, matrix):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name, row in zip(names, np.atleast_2d(matrix)):
            writer.writerow([name] + [repr(float(v)) for v in np.atleast_1d(row)])


def _cmd_summarize(args) -> int:
    import os

    stores = [read_store(path) for path in args.store]
    for st in stores:
        for w in st.warnings:
            print(f"warning: {w}", file=sys.stderr)
    records, warnings = merge_stores(stores)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.data:
        data = load_dataset(
            args.data, standardize=stores[0].manifest.get("standardized", True))
        fp = data_fingerprint(data.y)
        if any(st.manifest.get("data_fingerprint") not in (None, fp) for st in stores):
            print("warning: data fingerprint does not match the stores",
                  file=sys.stderr)
    if not records:
        raise PostprocessError("stores contain no records")
    m = records[0].sigma2.shape[0]
    kept, p_v = filter_variance_identified(records, m)
    explicit = None
    pivot_choice = args.pivot_choice
    if args.pivots:
        explicit = tuple(int(t) - 1 for t in args.pivots.split(","))
        pivot_choice = "explicit"
    report = summarize(kept, m, target_r=args.target_r,
                       pivot_choice=pivot_choice, explicit_pivots=explicit,
                       p_v=p_v, n_total=len(records))
    os.makedirs(args.out, exist_ok=True)
    _write_report_files(args.out, report)
    print(f"kept {report.n_kept}/{report.n_total} draws (p_V={report.p_v:.4f}); "
          f"posterior mode r={report.r_mode}")
    print(f"wrote summary files under {args.out}")
    return 0


def _write_report_files(outdir, rep):
    import os

    onebased = [i + 1 for i in rep.bma_pivots]
    factor_names = [f"factor{j + 1}" for j in range(len(rep.bma_pivots))]
    feat = [f"row{i + 1}" for i in range(rep.m)]
    with open(os.path.join(outdir, "r_posterior.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "probability"])
        for r, p in rep.r_posterior.items():
            writer.writerow([r, repr(p)])
    _write_matrix_csv(os.path.join(outdir, "inclusion.csv"),
                      ["feature"] + factor_names, feat, rep.inclusion_prob)
    _write_matrix_csv(os.path.join(outdir, "mean_loadings.csv"),
                      ["feature"] + factor_names, feat, rep.bma_mean_loadings)
    _write_matrix_csv(os.path.join(outdir, "communalities.csv"),
                      ["feature", "total"] + factor_names, feat,
                      np.column_stack([rep.mean_row_communality,
                                       rep.mean_communalities]))
    _write_matrix_csv(os.path.join(outdir, "pivot_posterior.csv"),
                      ["feature", "probability"], feat, rep.pivot_posterior)
    lines = [
        "Sparse factor analysis summary",
        "==============================",
        "(pivot rows are reported 1-based)",
        "",
        f"draws kept (variance identified): {rep.n_kept}/{rep.n_total} "
        f"(p_V = {rep.p_v:.4f})",
        "",
        "posterior of the number of factors:",
    ]
    lines += [f"  r = {r}: {p:.4f}" for r, p in rep.r_posterior.items()]
    lines += [
        f"posterior mode: r = {rep.r_mode}",
        f"model size d: mean {rep.d_mean:.2f}, quartiles {rep.d_quartiles}",
        "",
        f"highest probability model: r = {rep.hpm_r}, d = {rep.hpm_d}, "
        f"frequency {rep.hpm_freq:.4f}, pivots {tuple(i + 1 for i in rep.hpm_pivots)}",
        f"modal pivot sequence: {tuple(i + 1 for i in rep.l_star)} "
        f"(frequency {rep.l_star_freq:.4f}, r* = {rep.r_star})",
        "",
        f"model averaging over pivots {tuple(onebased)} "
        f"({rep.bma_n_draws} draws); median probability model size d_M = {rep.mpm_d}",
        f"posterior means: alpha = {rep.alpha_mean:.3f}, gamma = {rep.gamma_mean:.3f}",
        "",
        "P(row has no loading):",
    ]
    lines += [f"  row{i + 1}: {p:.3f}" for i, p in enumerate(rep.row_zero_prob)]
    with open(os.path.join(outdir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _cmd_check_id(args) -> int:
    delta = _read_delta_csv(args.delta)
    nonzero = delta[:, delta.sum(axis=0) > 0]
    if not is_uglt(delta):
        print("not UGLT: pivots of nonzero columns collide")
        return 0
    verdict = counting_rule_check(nonzero)
    if verdict:
        print("identified")
    else:
        witness = tuple(int(j) + 1 for j in verdict.violating_subset)
        print(f"not identified; witness columns {witness} (1-based, "
              f"among nonzero columns)")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        handler = {
            "simulate": _cmd_simulate,
            "fit": _cmd_fit,
            "summarize": _cmd_summarize,
            "check-id": _cmd_check_id,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ModelError, ConfigError, DataError, PostprocessError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
