"""Batch experiment harness: ``etfgcd {run,ablate,sweep-alpha,diag}``.

Exit codes: 0 success, 2 configuration or parse error, 3 runtime failure,
4 infeasible stream specification.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import InfeasibleSpecError, TableParseError, generate_stream, load_embeddings
from .estimator import load_checkpoint
from .etf import AllocationLedger, EtfFrame, build_etf, load_frame
from .metrics import hungarian_match, nc_diagnostics
from .session import embed, predict, run_protocol

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 2, 3, 4

STAGES_HEADER = ["t", "acc_all", "acc_old", "acc_new"]
NC_HEADER = ["stage", "epoch", "split", "nc1", "nc2", "nc3", "nc4"]
ABLATION_HEADER = ["sup_etf_align", "unsup_etf_align", "n_seeds", "acc_all", "acc_old", "acc_new"]
SWEEP_HEADER = ["alpha", "n_seeds", "acc_all", "acc_old", "acc_new"]


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return format(float(v), ".6f")


def _json_num(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return None
    return round(float(v), 6)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _stream(cfg: RunConfig, seed: int):
    if cfg["embeddings_path"]:
        return load_embeddings(cfg["embeddings_path"])
    return generate_stream(cfg.stream_spec(seed))


def _protocol(job):
    """One full pipeline; module-level so process workers can pickle it."""
    cfg, seed, overrides = job
    return run_protocol(cfg.train_config(**overrides), _stream(cfg, seed), seed=seed)


def _map(jobs, workers: int):
    if workers <= 1:
        return [_protocol(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_protocol, jobs))


def _inc_means(result) -> tuple[float, float, float]:
    inc = result.reports[1:] or result.reports
    return tuple(float(np.nanmean([getattr(r, k) for r in inc])) for k in ("acc_all", "acc_old", "acc_new"))


def cmd_run(cfg: RunConfig, workers: int = 1) -> int:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    res = _protocol((cfg, cfg["seed"], {}))
    wall = time.perf_counter() - start

    _write_csv(out / "stages.csv", STAGES_HEADER, [[r.t, _num(r.acc_all), _num(r.acc_old), _num(r.acc_new)] for r in res.reports])
    rows = []
    base = res.reports[0]
    for entry in base.nc_trace:
        rows.append([0, entry["epoch"], "train"] + [_num(entry.get(k)) for k in ("nc1", "nc2", "nc3", "nc4")])
    epochs = {0: res.state.cfg.base_epochs}
    for r in res.reports:
        if r.nc_diag is not None:
            rows.append([r.t, epochs.get(r.t, res.state.cfg.inc_epochs), "test"] + [_num(r.nc_diag[k]) for k in ("nc1", "nc2", "nc3", "nc4")])
    _write_csv(out / "nc_trace.csv", NC_HEADER, rows)

    summary = {
        "M_f": _json_num(res.m_f),
        "M_d": _json_num(res.m_d),
        "stages": len(res.reports),
        "seed": cfg["seed"],
        "config": cfg.echo(),
        "wall_time": round(wall, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"M_f={_num(res.m_f)} M_d={_num(res.m_d)} -> {out}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, workers: int = 1) -> int:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg["seed"] + i for i in range(cfg["n_seeds"])]
    cells = [(True, True), (True, False), (False, True), (False, False)]
    jobs = [(cfg, s, {"sup_etf_align": sup, "unsup_etf_align": uns}) for sup, uns in cells for s in seeds]
    results = _map(jobs, workers)
    rows = []
    for i, (sup, uns) in enumerate(cells):
        means = np.mean([_inc_means(r) for r in results[i * len(seeds):(i + 1) * len(seeds)]], axis=0)
        rows.append([str(sup).lower(), str(uns).lower(), len(seeds)] + [_num(m) for m in means])
    _write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    print(f"ablation over {len(seeds)} seeds -> {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_sweep_alpha(cfg: RunConfig, alphas=None, workers: int = 1) -> int:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    alphas = sorted(cfg["alphas"] if alphas is None else alphas)
    for a in alphas:
        if not 0 < a <= 1:
            raise ConfigError(f"alpha values must lie in (0, 1], got {a}")
    seeds = [cfg["seed"] + i for i in range(cfg["n_seeds"])]
    jobs = [(cfg, s, {"alpha": a}) for a in alphas for s in seeds]
    results = _map(jobs, workers)
    rows = []
    for i, a in enumerate(alphas):
        means = np.mean([_inc_means(r) for r in results[i * len(seeds):(i + 1) * len(seeds)]], axis=0)
        rows.append([_num(a), len(seeds)] + [_num(m) for m in means])
    _write_csv(out / "alpha_sweep.csv", SWEEP_HEADER, rows)
    print(f"alpha sweep over {len(alphas)} values -> {out / 'alpha_sweep.csv'}")
    return EXIT_OK


def frame_report(frame: EtfFrame) -> dict:
    return {
        "d": frame.d,
        "K": frame.K,
        "gram_deviation": frame.gram_deviation(),
        "column_sum_norm": float(np.linalg.norm(frame.P.sum(axis=1))),
    }


def _parse(loader, path):
    try:
        return loader(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def embedding_report(embeddings_path, frame_path=None, checkpoint_path=None, stage=None, split="test") -> dict:
    """NC diagnostics for a labelled embedding table.

    With a checkpoint the rows are first pushed through its encoder and true
    labels are mapped to model classes by Hungarian matching. Without one the
    rows are taken as embeddings, class ``i`` (in sorted label order) is bound
    to frame column ``i`` and the bound prototypes serve as the head.
    """
    stream = _parse(load_embeddings, embeddings_path)
    if stage is not None and not 0 <= stage < len(stream):
        raise ConfigError(f"{embeddings_path}: no stage {stage}")
    if stage is not None:
        parts = [stream[stage]]
    else:
        # test splits are cumulative, so the last stage already holds every class
        parts = stream if split == "train" else stream[-1:]
    X = np.concatenate([getattr(sd, split).X for sd in parts])
    y = np.concatenate([getattr(sd, split).y for sd in parts])
    if checkpoint_path is not None:
        state, _ = _parse(load_checkpoint, checkpoint_path)
        mapping = hungarian_match(predict(state, X), y)
        inverse = {v: k for k, v in mapping.items()}
        keep = np.array([int(c) in inverse for c in y], dtype=bool)
        ids = np.array([inverse[int(c)] for c in y[keep]])
        nc = nc_diagnostics(embed(state, X[keep]), ids, state.frame, state.ledger, state.W)
    else:
        classes = np.unique(y)
        frame = _parse(load_frame, frame_path) if frame_path else build_etf(X.shape[1], max(len(classes), 2))
        if frame.d != X.shape[1]:
            raise ConfigError(f"frame has d={frame.d} but embeddings have {X.shape[1]} features")
        if len(classes) > frame.K:
            raise ConfigError(f"{len(classes)} classes exceed the frame's {frame.K} columns")
        ledger = AllocationLedger(frame.K)
        for i in range(len(classes)):
            ledger.assign(i)
        pos = np.searchsorted(classes, y)
        nc = nc_diagnostics(X, pos, frame, ledger, frame.P[:, : len(classes)])
    return {"n": int(len(y)), **nc.as_dict()}


def cmd_diag(args) -> int:
    report = {}
    if args.frame:
        report["frame"] = frame_report(_parse(load_frame, args.frame))
    if args.embeddings:
        report["nc"] = embedding_report(args.embeddings, args.frame, args.checkpoint, args.stage, args.split)
    if not report:
        raise ConfigError("diag needs --frame and/or --embeddings")
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "diag.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat TOML config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="overrides output_dir")
    common.add_argument("--preset", choices=["paper", "desk"], help="training schedule preset")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for multi-run commands")

    p = argparse.ArgumentParser(prog="etfgcd", description="Continual category discovery experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the protocol once")
    sub.add_parser("ablate", parents=[common], help="alignment on/off grid over seeds")
    sw = sub.add_parser("sweep-alpha", parents=[common], help="confident-fraction sweep")
    sw.add_argument("--alphas", type=float, nargs="+", help="overrides the config alphas")
    dg = sub.add_parser("diag", help="frame geometry and collapse diagnostics")
    dg.add_argument("--frame", metavar="PATH", help="frame CSV to verify (also used as prototypes)")
    dg.add_argument("--embeddings", metavar="PATH", help="embedding table to diagnose")
    dg.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (.npz) applied to the table")
    dg.add_argument("--stage", type=int, help="restrict to one stage")
    dg.add_argument("--split", choices=["train", "test"], default="test")
    dg.add_argument("--out", metavar="DIR", help="also write diag.json here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "diag":
            return cmd_diag(args)
        cfg = load_config(args.config, {"seed": args.seed, "output_dir": args.out, "preset": args.preset})
        if args.command == "run":
            return cmd_run(cfg, args.jobs)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.jobs)
        return cmd_sweep_alpha(cfg, args.alphas, args.jobs)
    except (ConfigError, TableParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
