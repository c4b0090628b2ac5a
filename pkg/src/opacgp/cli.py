"""``opacgp`` command line: run, compare, report and fetch.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage error.
Set ``OPACGP_NUM_THREADS`` to cap torch's intra-op thread pool.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
import urllib.request
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import STOCK_URL, gen_synthetic, load_csv, make_stream, normalize, sha256_file, train_test_split
from .errors import InputError, OpacgpError
from .pacbayes import LossSpec
from .streaming import save_state
from .trainer import TRACE_COLUMNS, OnlineTrainer, TrainConfig, record_row

log = logging.getLogger("opacgp")

REPORT_COLUMNS = ("trace", "n_seen", "cumulative_empirical", "test_bound")
LOSS_NAMES = {"exp": "exp", "indicator": "indicator", "clip2": "clipped_square", "interval": "interval"}
OBJECTIVE_NAMES = {"pacbayes": "pacbayes", "baseline-nll": "baseline_nll"}


class UsageError(Exception):
    pass


def _configure_threads():
    n = os.environ.get("OPACGP_NUM_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            log.warning("ignoring OPACGP_NUM_THREADS=%r", n)


# -- flags ------------------------------------------------------------------------

def _add_experiment_flags(p: argparse.ArgumentParser, multi: bool = False):
    p.add_argument("--data", required=multi, help="sin | cos | csv:<path>")
    if multi:
        p.add_argument("--order", nargs="+", choices=["iid", "sequential"], default=["iid"])
        p.add_argument("--objective", nargs="+", choices=sorted(OBJECTIVE_NAMES), default=["pacbayes"])
    else:
        p.add_argument("--order", choices=["iid", "sequential"], default="sequential")
        p.add_argument("--objective", choices=sorted(OBJECTIVE_NAMES), default="pacbayes")
    p.add_argument("--inducing", type=int, default=20, metavar="M")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--epsilon2", type=float, default=0.01)
    p.add_argument("--lambda", dest="lam", default="1/m", help="1/m or a positive number")
    p.add_argument("--loss", choices=sorted(LOSS_NAMES), default="exp")
    p.add_argument("--lr-hyper", type=float, default=0.1)
    p.add_argument("--lr-var", type=float, default=0.01)
    p.add_argument("--inner-steps", type=int, default=1)
    p.add_argument("--pretrain-steps", type=int, default=200)
    p.add_argument("--pretrain-frac", type=float, default=0.05)
    p.add_argument("--test-frac", type=float, default=0.2, help="held-out fraction for test metrics")
    p.add_argument("--n", type=int, default=500, help="synthetic dataset size")
    p.add_argument("--noise-sd", type=float, default=0.1, help="synthetic noise level")
    p.add_argument("--target", default="-1", help="CSV target column (name or index)")
    p.add_argument("--features", default=None, help="comma-separated CSV feature columns")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--wall-time", action="store_true", help="record real step timings (traces are then not byte-stable)")


def _lambda_mode(text: str):
    if text in ("1/m", "one_over_m"):
        return "1/m"
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--lambda must be 1/m or a number, got {text!r}") from None


def _settings_from_args(a, objective: str, order: str, seed: int) -> dict:
    """Plain-JSON description of one run; the manifest stores exactly this."""
    return {
        "data": a.data,
        "order": order,
        "objective": objective,
        "inducing": a.inducing,
        "batch_size": a.batch_size,
        "delta": a.delta,
        "epsilon2": a.epsilon2,
        "lambda": a.lam,
        "loss": a.loss,
        "lr_hyper": a.lr_hyper,
        "lr_var": a.lr_var,
        "inner_steps": a.inner_steps,
        "pretrain_steps": a.pretrain_steps,
        "pretrain_frac": a.pretrain_frac,
        "test_frac": a.test_frac,
        "n": a.n,
        "noise_sd": a.noise_sd,
        "target": a.target,
        "features": a.features,
        "header": not a.no_header,
        "seed": seed,
        "wall_time": a.wall_time,
    }


def build_config(s: dict) -> TrainConfig:
    try:
        return TrainConfig(
            objective=OBJECTIVE_NAMES[s["objective"]],
            lr_hyper=s["lr_hyper"],
            lr_variational=s["lr_var"],
            inner_steps_online=s["inner_steps"],
            pretrain_steps=s["pretrain_steps"],
            delta=s["delta"],
            lambda_mode=_lambda_mode(s["lambda"]),
            loss=LossSpec.from_epsilon2(LOSS_NAMES[s["loss"]], s["epsilon2"]),
            num_inducing=s["inducing"],
            seed=s["seed"],
        )
    except (InputError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def load_data(s: dict):
    """Full normalized dataset plus a descriptor for the manifest."""
    src = s["data"]
    if src in ("sin", "cos"):
        ds = gen_synthetic(src, s["n"], s["noise_sd"], s["seed"])
        desc = {"kind": src, "n": s["n"], "noise_sd": s["noise_sd"], "seed": s["seed"]}
    elif src.startswith("csv:"):
        path = Path(src[4:])
        if not path.is_file():
            raise InputError(f"data file not found: {path}")
        features = s["features"].split(",") if s["features"] else None
        ds = load_csv(path, target=s["target"], features=features, header=s["header"])
        desc = {"kind": "csv", "path": str(path), "sha256": sha256_file(path), "rows": len(ds), "dropped": ds.dropped}
    else:
        raise UsageError(f"--data must be sin, cos or csv:<path>, got {src!r}")
    return normalize(ds), desc


def execute(s: dict):
    """Run one configuration; returns (config, records, trainer, data descriptor)."""
    cfg = build_config(s)
    if s["batch_size"] < 1:
        raise UsageError("--batch-size must be at least 1")
    if not 0 < s["pretrain_frac"] < 1 or not 0 <= s["test_frac"] < 1:
        raise UsageError("--pretrain-frac must lie in (0, 1) and --test-frac in [0, 1)")
    ds, desc = load_data(s)
    train, test = train_test_split(ds, s["test_frac"], seed=s["seed"])
    stream = make_stream(train, s["order"], s["batch_size"], s["pretrain_frac"], s["seed"])
    tr = OnlineTrainer(cfg, test_set=None if test is None else (test.X, test.y),
                       clock=time.perf_counter if s["wall_time"] else None)
    tr.pretrain(*stream.pretrain)
    records = tr.run(stream)
    return cfg, records, tr, desc


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def trace_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in records:
        w.writerow([_fmt(v) for v in record_row(r)])
    return buf.getvalue()


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------------

def cmd_run(a) -> int:
    if a.manifest:
        m = json.loads(Path(a.manifest).read_text())
        s = m["settings"]
        if a.wall_time:
            s["wall_time"] = True
    elif a.data is None:
        raise UsageError("run needs --data or --manifest")
    else:
        s = _settings_from_args(a, a.objective, a.order, a.seed)
    out = Path(a.out)
    cfg = build_config(s)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cfg, records, tr, desc = execute(s)
    elapsed = time.perf_counter() - t0
    (out / "trace.csv").write_text(trace_csv(records))
    state_bytes = save_state(tr.state, out / "state.bin")
    manifest = {
        "tool": "opacgp",
        "version": __version__,
        "settings": s,
        "config": cfg.to_dict(),
        "data": desc,
        "ordering": s["order"],
        "seed": s["seed"],
        "artifacts": {"trace": "trace.csv", "summary": "summary.json", "state": "state.bin"},
    }
    _write_json(out / "manifest.json", manifest)
    last = records[-1] if records else None
    summary = {
        "steps": len(records),
        "failures": [{"batch": k, "error": e} for k, e in tr.failures],
        "n_seen": tr.n_seen,
        "state_bytes": state_bytes,
        "final": None if last is None else dict(zip(TRACE_COLUMNS, record_row(last))),
    }
    if s["wall_time"]:
        summary["elapsed_s"] = elapsed
    _write_json(out / "summary.json", _json_safe(summary))
    if last is not None:
        print(f"{len(records)} steps, final train_mse={last.train_mse:.4g} test_mse={last.test_mse:.4g} "
              f"test_bound={last.test_bound:.4g} -> {out}")
    else:
        print(f"no online batches after pretraining -> {out}")
    return 0


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def _checkpoint_values(records, t: int):
    """(train_mse, test_mse, clamped) at step ``t``; past the end the last record is used."""
    if not records:
        return math.nan, math.nan, True
    clamped = t > len(records)
    r = records[min(t, len(records)) - 1]
    return r.train_mse, r.test_mse, clamped


def _run_for_compare(s: dict):
    _, records, _, _ = execute(s)
    return [(r.train_mse, r.test_mse) for r in records]


def compare_table(settings: list[dict], checkpoints: list[int], jobs: int = 1) -> str:
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_for_compare, settings))
    else:
        results = [_run_for_compare(s) for s in settings]
    groups: dict[tuple[str, str], list] = {}
    for s, res in zip(settings, results):
        groups.setdefault((s["objective"], s["order"]), []).append(res)
    header = ["objective", "ordering", "seeds"]
    for split in ("train", "test"):
        for t in checkpoints:
            header += [f"{split}_mse_t{t}_mean", f"{split}_mse_t{t}_sd"]
    header.append("clamped")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for (objective, order), runs in groups.items():
        row = [objective, order, len(runs)]
        clamped = set()
        cells = {"train": [], "test": []}
        for t in checkpoints:
            vals = {"train": [], "test": []}
            for res in runs:
                if not res:
                    clamped.add(t)
                    continue
                if t > len(res):
                    clamped.add(t)
                tr_mse, te_mse = res[min(t, len(res)) - 1]
                vals["train"].append(tr_mse)
                vals["test"].append(te_mse)
            for split in ("train", "test"):
                v = np.asarray(vals[split], dtype=np.float64)
                mean = float(v.mean()) if v.size else math.nan
                sd = float(v.std(ddof=1)) if v.size > 1 else 0.0 if v.size else math.nan
                cells[split] += [_fmt(mean), _fmt(sd)]
        row += cells["train"] + cells["test"]
        row.append(";".join(f"t{t}" for t in checkpoints if t in clamped))
        w.writerow(row)
    return buf.getvalue()


def cmd_compare(a) -> int:
    if not a.seeds:
        raise UsageError("--seeds needs at least one value")
    if any(t < 1 for t in a.checkpoints):
        raise UsageError("checkpoints are 1-based step indices")
    settings = [
        _settings_from_args(a, obj, order, seed)
        for obj in a.objective for order in a.order for seed in a.seeds
    ]
    for s in settings:
        build_config(s)
    table = compare_table(settings, a.checkpoints, a.jobs)
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(table)
    else:
        sys.stdout.write(table)
    return 0


def read_trace(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise InputError(f"{path}: header does not match the trace columns {','.join(TRACE_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(TRACE_COLUMNS):
            raise InputError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
        try:
            rec = {k: float(v) for k, v in zip(TRACE_COLUMNS, row)}
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
        out.append(rec)
    return out


def report_rows(paths) -> list[list]:
    rows = []
    for p in paths:
        for rec in read_trace(p):
            # test_bound = cumulative prequential loss + the same constant term
            cum = rec["test_bound"] - rec["constant_term"]
            if not rec["test_bound"] >= cum:
                raise InputError(f"{p}: test_bound below cumulative loss at n_seen={rec['n_seen']:g}")
            rows.append([str(p), int(rec["n_seen"]), _fmt(max(cum, 0.0)), _fmt(rec["test_bound"])])
    return rows


def cmd_report(a) -> int:
    if not a.traces:
        raise UsageError("report needs at least one trace file")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(report_rows(a.traces))
    if a.out:
        Path(a.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_fetch(a) -> int:
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with urllib.request.urlopen(a.url, timeout=a.timeout) as resp, tempfile.NamedTemporaryFile(
        dir=out.parent, delete=False
    ) as tmp:
        shutil.copyfileobj(resp, tmp)
    digest = sha256_file(tmp.name)
    if a.sha256 and digest != a.sha256.lower():
        os.unlink(tmp.name)
        raise InputError(f"checksum mismatch: expected {a.sha256}, got {digest}")
    os.replace(tmp.name, out)
    Path(str(out) + ".sha256").write_text(f"{digest}  {out.name}\n")
    print(f"{digest}  {out}")
    return 0


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opacgp", description="Online PAC-Bayes sparse GP experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train on one stream and write trace, manifest and summary")
    _add_experiment_flags(run)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--manifest", help="re-run the settings recorded in a manifest.json")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="train/test MSE table over objectives, orderings and seeds")
    _add_experiment_flags(cmp_, multi=True)
    cmp_.add_argument("--seeds", type=int, nargs="+", default=[0])
    cmp_.add_argument("--checkpoints", type=int, nargs="+", default=[10, 20, 30])
    cmp_.add_argument("--jobs", type=int, default=1)
    cmp_.add_argument("--out", help="CSV path (default stdout)")
    cmp_.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="cumulative loss vs test bound from trace files")
    rep.add_argument("traces", nargs="*")
    rep.add_argument("--out", help="CSV path (default stdout)")
    rep.set_defaults(func=cmd_report)

    fetch = sub.add_parser("fetch", help="download a dataset and record its checksum")
    fetch.add_argument("url", nargs="?", default=STOCK_URL)
    fetch.add_argument("--out", default="data/fx2007-processed.csv")
    fetch.add_argument("--sha256", help="expected checksum")
    fetch.add_argument("--timeout", type=float, default=60.0)
    fetch.set_defaults(func=cmd_fetch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _configure_threads()
    try:
        return a.func(a)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"opacgp: error: {exc}", file=sys.stderr)
        return 2
    except (OpacgpError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"opacgp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
