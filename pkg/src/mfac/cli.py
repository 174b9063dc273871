"""Command-line experiment runner.

    mfac run --mode mfg --preset lq1d-paper --steps 200000 --seed 0 --out runs/mfg
    mfac run --config configs/mfc.ini --rates.critic 1e-3
    mfac sweep configs/table3_mfg.ini --jobs 4
    mfac solve --preset lq1d-paper --tag MFC

Every output file starts with the config echo (``# config: {...}`` for CSV,
a ``config`` key for JSON), so each artifact reproduces from itself. No
timestamps or wall-clock values are written, which keeps reruns
byte-identical. Exit status: 0 success, 1 runtime abort or failed sweep
cell, 2 configuration error.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import analytic as an
from .agents import TrainingAborted, train
from .approximators import dumps_params
from .config import ConfigError, ExperimentConfig, MODES, RATE_NAMES, parse_config, parse_sweep
from .metrics import evaluate

log = logging.getLogger("mfac")

OUT_ENV = "MFAC_OUT"
TAGS = {"mfg": "MFG", "mfc": "MFC", "mfcg": "MFCG"}


# -- atomic output -------------------------------------------------------------

def atomic_write(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(config_json, header, rows):
    buf = io.StringIO()
    buf.write(f"# config: {config_json}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def json_text(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def default_out(config):
    root = os.environ.get(OUT_ENV, "mfac-out")
    return os.path.join(root, f"{config.mode}_{config.preset}_seed{config.seed}")


# -- curve exports ---------------------------------------------------------------

def _grid(dim, n1=201, n2=41, box=(-2.0, 2.0)):
    if dim == 1:
        return np.linspace(box[0], box[1], n1)[:, None]
    g = np.linspace(box[0], box[1], n2)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def _gauss_density(x, sol):
    cov = np.atleast_2d(sol.covariance)
    d = x - sol.mean_vector
    q = np.einsum("ni,ij,nj->n", d, np.linalg.inv(cov), d)
    return np.exp(-0.5 * q) / np.sqrt(np.linalg.det(2 * np.pi * cov))


def export_curves(trainer, sol, cfg_json):
    """Text of histogram, control, value, and measure CSVs."""
    d = trainer.d
    x = _grid(d)
    files = {}
    learned = trainer.policy.mean_action(x).reshape(len(x), -1)
    opt = sol.control(x).reshape(len(x), -1)
    xs = [f"x{i}" for i in range(d)]
    files["control.csv"] = csv_text(
        cfg_json, xs + [f"alpha{i}" for i in range(learned.shape[1])] + [f"alpha{i}_analytic" for i in range(opt.shape[1])],
        [[*p, *a, *b] for p, a, b in zip(x, learned, opt)])
    v = trainer.model.value_to_cost(trainer.value(x))
    files["value.csv"] = csv_text(cfg_json, xs + ["V", "V_analytic"],
                                  [[*p, a, b] for p, a, b in zip(x, v, sol.value(x))])
    pos, w = trainer.measure.atoms()
    if d == 1:
        edges = np.linspace(-2.0, 2.0, 81)
        h, _ = np.histogram(np.clip(pos[:, 0], -2, 2), bins=edges, weights=w, density=True)
        centers = 0.5 * (edges[1:] + edges[:-1])
        dens = _gauss_density(centers[:, None], sol)
        rows = [[lo, hi, a, b] for lo, hi, a, b in zip(edges[:-1], edges[1:], h, dens)]
        files["histogram.csv"] = csv_text(cfg_json, ["left", "right", "density", "density_analytic"], rows)
    else:
        edges = np.linspace(-2.0, 2.0, 31)
        clipped = np.clip(pos, -2, 2)
        h, _, _ = np.histogram2d(clipped[:, 0], clipped[:, 1], bins=[edges, edges], weights=w, density=True)
        c = 0.5 * (edges[1:] + edges[:-1])
        a, b = np.meshgrid(c, c, indexing="ij")
        pts = np.column_stack([a.ravel(), b.ravel()])
        dens = _gauss_density(pts, sol)
        files["histogram.csv"] = csv_text(cfg_json, ["x0", "x1", "density", "density_analytic"],
                                          [[*p, q, r] for p, q, r in zip(pts, h.ravel(), dens)])
    files["measure.csv"] = csv_text(cfg_json, xs + ["weight"], [[*p, wi] for p, wi in zip(pos, w)])
    return files


def export_checkpoint(trainer, cfg_json):
    """Parameter files in the text checkpoint format (see ``approximators``)."""
    echo = f"config: {cfg_json}"
    out = {"actor.params": dumps_params(trainer.policy, echo)}
    if hasattr(trainer, "bank"):
        out["critic_bank.params"] = dumps_params(trainer.bank, echo)
    else:
        out["critic.params"] = dumps_params(trainer.critic, echo)
    return out


def _save_snapshot(path, snapshot):
    arrays = {k: np.asarray(v) for k, v in snapshot.items() if not isinstance(v, str)}
    arrays["algorithm"] = np.array(snapshot.get("algorithm", ""))
    tmp = f"{path}.tmp{os.getpid()}.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


# -- pipelines -------------------------------------------------------------------

def run_training(cfg, out_dir=None):
    """Run one agent config; returns ``(status, summary dict)`` and writes artifacts."""
    cfg_json = cfg.to_json()
    trainer = cfg.build_trainer()
    tag = TAGS[cfg.mode]
    sol = an.solve(trainer.model, tag)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    every = cfg.checkpoint_every
    trace_rows = []
    status, error = 0, None
    try:
        done = 0
        while done < cfg.steps:
            chunk = min(every or cfg.steps, cfg.steps - done)
            train(trainer, chunk)
            done += chunk
            if every:
                r = evaluate(trainer, sol, cfg.trace_samples, cfg.seed)
                trace_rows.append([trainer.n, r.e_mu, r.e_alpha, r.e_V, *np.ravel(trainer.measure_mean())])
    except TrainingAborted as exc:
        status, error = 1, exc
    wall = time.perf_counter() - t0
    summary = {"config": cfg.to_dict(), "analytic": sol.to_dict(), "steps": trainer.n,
               "clip_count": trainer.clip_count, "learned_mean": trainer.measure_mean(),
               "aborted": status != 0}
    if status == 0:
        summary["report"] = evaluate(trainer, sol, cfg.eval_samples, cfg.seed).to_dict()
    else:
        summary["error"] = str(error)
    if out_dir:
        xs = [f"mean{i}" for i in range(trainer.d)]
        files = {"trace.csv": csv_text(cfg_json, ["step", "e_mu", "e_alpha", "e_V", *xs], trace_rows)}
        if status == 0:
            files.update(export_curves(trainer, sol, cfg_json))
            files.update(export_checkpoint(trainer, cfg_json))
        else:
            snap = os.path.join(out_dir, "abort_snapshot.npz")
            _save_snapshot(snap, error.snapshot)
            # relative in the file so the bytes do not depend on out_dir
            summary["snapshot"] = "abort_snapshot.npz"
        files["summary.json"] = json_text(summary)
        for name, text in files.items():
            atomic_write(os.path.join(out_dir, name), text)
        if status:
            error.snapshot_path = summary["snapshot"] = snap
    summary["wall_seconds"] = wall
    summary["trainer"] = trainer
    return status, summary


def run_idealized(cfg, out_dir=None):
    from . import idealized as ide
    model = cfg.build_model()
    mode = "MFG" if cfg.mode == "idealized-mfg" else "MFC"
    rates = cfg.build_rates()
    state = ide.initial_state(model, mode, seed=cfg.seed)
    status, error = 0, None
    every = max(cfg.checkpoint_every, 1)
    try:
        state, trace = ide.idealized_iterate(state, model, rates, mode, cfg.steps,
                                             record_every=every, tol=cfg.tol)
    except ide.IdealizedDivergence as exc:
        status, error, trace = 1, exc, exc.trace
    pi = ide.softmax_policy(state.psi)
    oracle = ide.policy_value(model, pi, state.mu)
    learned = state.theta if mode == "MFG" else ide.composite_value(state.theta)
    summary = {"config": cfg.to_dict(), "iterations": int(state.n), "mu": state.mu,
               "mean": model.mean(state.mu), "policy": pi, "value": learned, "value_oracle": oracle,
               "bellman_error": float(np.max(np.abs(learned - oracle))), "aborted": status != 0}
    if trace.n:
        summary.update(L_P_norm=trace.measure[-1], critic_grad_norm=trace.critic[-1], actor_grad_norm=trace.actor[-1])
    if error is not None:
        summary["error"] = str(error)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cfg_json = cfg.to_json()
        files = {
            "trace.csv": csv_text(cfg_json, ["n", "L_P_norm", "critic_grad_norm", "actor_grad_norm"],
                                  zip(trace.n, trace.measure, trace.critic, trace.actor)),
            "measure.csv": csv_text(cfg_json, ["state", "mu", "V", "V_oracle"],
                                    zip(model.states, state.mu, learned, oracle)),
            "summary.json": json_text(summary),
        }
        for name, text in files.items():
            atomic_write(os.path.join(out_dir, name), text)
    return status, summary


def run_config(cfg, out_dir=None):
    if cfg.mode.startswith("idealized"):
        return run_idealized(cfg, out_dir)
    return run_training(cfg, out_dir)


def _sweep_cell(args):
    name, cfg, out_dir = args
    try:
        status, summary = run_config(cfg, out_dir)
    except Exception as exc:  # recorded per cell, the sweep goes on
        return name, None, f"{type(exc).__name__}: {exc}"
    if status:
        return name, None, summary.get("error", "aborted")
    return name, summary.get("report"), None


def sweep(cases, out_root, jobs=1):
    """Run ``[(name, config)]`` and write ``table.csv`` (rows e_mu/e_alpha/e_V, one column per case)."""
    if not cases:
        raise ConfigError("empty sweep")
    work = [(name, cfg, os.path.join(out_root, name)) for name, cfg in cases]
    os.makedirs(out_root, exist_ok=True)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_cell, work))
    else:
        results = [_sweep_cell(w) for w in work]
    names = [r[0] for r in results]
    echo = json.dumps({n: c.to_dict() for n, c in cases}, sort_keys=True)
    rows = []
    for metric in ("e_mu", "e_alpha", "e_V"):
        rows.append([metric] + [(rep[metric] if rep else "failed") for _, rep, _ in results])
    rows.append(["error"] + [(err or "") for _, _, err in results])
    atomic_write(os.path.join(out_root, "table.csv"), csv_text(echo, ["metric", *names], rows))
    return results


# -- argument handling -----------------------------------------------------------

def _add_run_flags(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--preset")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--bins-state", type=int)
    p.add_argument("--bins-action", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<mode>_<preset>_seed<seed>)")
    for name in RATE_NAMES:
        p.add_argument(f"--rates.{name}", dest=f"rate_{name}", type=float, metavar="RATE")
    p.add_argument("--schedule", choices=("constant", "poly"))
    p.add_argument("--composite", choices=("best", "literal"))
    p.add_argument("--tol", type=float, help="idealized modes: stop once all residual norms fall below this")
    p.add_argument("--sweep", metavar="FILE", help="run a sweep file instead of a single config")
    p.add_argument("--jobs", type=int, default=1)


_SIMPLE = ("mode", "preset", "steps", "seed", "bins_state", "bins_action", "batch",
           "checkpoint_every", "schedule", "composite", "tol")


def config_from_args(args):
    overrides = {k: getattr(args, k) for k in _SIMPLE if getattr(args, k) is not None}
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    cfg = parse_config(text)
    rates = dict(cfg.rates)
    rates.update({n: getattr(args, f"rate_{n}") for n in RATE_NAMES if getattr(args, f"rate_{n}") is not None})
    values = cfg.to_dict()
    values.update(overrides, rates=rates)
    mode_changed = "mode" in overrides and "preset" not in overrides and not args.config
    if mode_changed and values["mode"].startswith("idealized"):
        values["preset"] = "random5x3"
    elif mode_changed and values["mode"] == "mfcg":
        values["preset"] = "mfcg1d-default"
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _report_line(summary):
    r = summary.get("report")
    if r:
        return f"e_mu={r['e_mu']:.4f} e_alpha={r['e_alpha']:.4f} e_V={r['e_V']:.4f} mean={np.ravel(summary['learned_mean'])}"
    if "bellman_error" in summary:
        return (f"iterations={summary['iterations']} L_P={summary.get('L_P_norm', float('nan')):.3g} "
                f"gV={summary.get('critic_grad_norm', float('nan')):.3g} gPi={summary.get('actor_grad_norm', float('nan')):.3g} "
                f"bellman={summary['bellman_error']:.3g}")
    return ""


def cmd_run(args):
    if args.sweep:
        args.file = args.sweep
        return cmd_sweep(args)
    cfg = config_from_args(args)
    out = args.out or cfg.out or default_out(cfg)
    status, summary = run_config(cfg, out)
    if status:
        print(f"aborted: {summary.get('error')}", file=sys.stderr)
        if summary.get("snapshot"):
            print(f"snapshot: {summary['snapshot']}", file=sys.stderr)
        return 1
    print(_report_line(summary))
    print(f"wrote {out}")
    return 0


def cmd_sweep(args):
    with open(args.file) as fh:
        cases = parse_sweep(fh.read())
    out = args.out or os.path.join(os.environ.get(OUT_ENV, "mfac-out"),
                                   os.path.splitext(os.path.basename(args.file))[0])
    results = sweep(cases, out, args.jobs)
    failed = 0
    for name, rep, err in results:
        if rep:
            print(f"{name}: e_mu={rep['e_mu']:.4f} e_alpha={rep['e_alpha']:.4f} e_V={rep['e_V']:.4f}")
        else:
            failed += 1
            print(f"{name}: failed ({err})")
    print(f"wrote {os.path.join(out, 'table.csv')}")
    return 1 if failed else 0


def cmd_solve(args):
    from .environment import make_model
    model = make_model(args.preset)
    sol = an.solve(model, args.tag)
    text = json_text({"preset": args.preset, "tag": args.tag.upper(), "solution": sol.to_dict()})
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mfac", description="Actor-critic learning for mean field games and control")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train one configuration")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="run every [case NAME] of a sweep file")
    p.add_argument("file")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("solve", help="print the closed-form solution of a preset")
    p.add_argument("--preset", default="lq1d-paper")
    p.add_argument("--tag", default="MFG", choices=("MFG", "MFC", "MFCG", "mfg", "mfc", "mfcg"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"mfac: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
