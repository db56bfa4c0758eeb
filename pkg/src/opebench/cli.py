"""Command-line entry points.

Every subcommand reads and writes plain JSON / JSONL / CSV files so the
stages can be chained from a shell script::

    opebench simulate --scenario ConfoundedNoTreat --n 2000 --seed 0 --out d.jsonl --truth-out gt.json
    opebench cluster --k 12 --seed 0 --in d.jsonl --out-model cm.json --out-bins bins.json
    opebench discretize --in d.jsonl --model cm.json --bins bins.json --out dd.jsonl
    opebench learn --in dd.jsonl --out-policy pi.json --out-model mdp.json
    opebench behavior --in dd.jsonl --out pib.json
    opebench evaluate --in dd.jsonl --policy pi.json --behavior pib.json --out est.json
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .core import DEFAULT_GAMMA, load_dataset, save_dataset
from .diagnostics import audit_weights, matched_sequences, u_curve, weight_series
from .estimators import Flag, run_estimators
from .harness import ExperimentSpec, emit_report, run_experiment
from .policies import (
    QFunction,
    TabularPolicy,
    estimate_behavior_policy,
    evaluate_policy_q,
    fit_mdp,
    greedy_policy,
    load_json,
    save_json,
    value_iteration,
)
from .representation import DoseBins, discretize, fit_dose_bins, fit_kmeans, load_model, save_model
from .simulator import SCENARIOS, SimConfig, build_ground_truth, sample_dataset, save_ground_truth, scenario

log = logging.getLogger("opebench")


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_typed(path: str, cls):
    obj = load_json(path)
    if not isinstance(obj, cls):
        raise SystemExit(f"{path}: expected a {cls.__name__} file")
    return obj


# --------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    if args.scenario in SCENARIOS:
        cfg = scenario(args.scenario)
    else:
        cfg = SimConfig.from_json(json.loads(Path(args.scenario).read_text()))
    gt = build_ground_truth(cfg)
    ds = sample_dataset(gt, args.n, args.seed)
    save_dataset(ds, args.out)
    if args.truth_out:
        save_ground_truth(gt, args.truth_out)
    log.info("wrote %d trajectories to %s", len(ds), args.out)
    return 0


def cmd_cluster(args) -> int:
    ds = load_dataset(args.inp)
    cm = fit_kmeans(ds.observations(), args.k, args.seed, args.tol, args.max_iter)
    save_model(cm, args.out_model)
    if args.out_bins:
        save_model(fit_dose_bins(ds, args.n_bins), args.out_bins)
    log.info("k-means: %d iterations, inertia %.6g", cm.n_iter, cm.inertia)
    return 0


def cmd_discretize(args) -> int:
    ds = load_dataset(args.inp)
    cm = load_model(args.model)
    db = load_model(args.bins) if args.bins else fit_dose_bins(ds, args.n_bins)
    if not isinstance(db, DoseBins):
        raise SystemExit(f"{args.bins}: not a dose-bin file")
    save_dataset(discretize(ds, cm, db), args.out)
    return 0


def cmd_learn(args) -> int:
    dd = load_dataset(args.inp)
    mdp = fit_mdp(dd, args.unvisited)
    q = value_iteration(mdp, args.gamma, args.tol, args.max_iter)
    save_json(greedy_policy(q), args.out_policy)
    if args.out_model:
        save_json(mdp, args.out_model)
    if args.out_q:
        save_json(q, args.out_q)
    log.info("value iteration converged after %d sweeps", len(q.residuals))
    return 0


def cmd_behavior(args) -> int:
    dd = load_dataset(args.inp)
    save_json(estimate_behavior_policy(dd, args.alpha), args.out)
    return 0


def cmd_critic(args) -> int:
    mdp = load_json(args.model)
    policy = _load_typed(args.policy, TabularPolicy)
    save_json(evaluate_policy_q(mdp, policy, args.gamma), args.out)
    return 0


def cmd_evaluate(args) -> int:
    dd = load_dataset(args.inp)
    pi_e = _load_typed(args.policy, TabularPolicy)
    pi_b = _load_typed(args.behavior, TabularPolicy)
    names = [e.strip() for e in args.estimators.split(",") if e.strip()]
    critic = _load_typed(args.critic, QFunction) if args.critic else None
    model = load_json(args.model) if args.model else None
    if critic is None and model is not None and {"dr", "wdr"} & set(names):
        critic = evaluate_policy_q(model, pi_e, args.gamma)
    results = run_estimators(dd, pi_e, pi_b, args.gamma, names, critic, model, args.ess_floor)
    out = {name: res.summary() for name, res in results.items()}
    _write_json(out, args.out)
    for name, res in results.items():
        if Flag.ALL_WEIGHTS_ZERO in res.flags:
            print(f"WARNING: {name}: every importance weight is zero; the reported value 0 carries "
                  "no information about the policy", file=sys.stderr)
        elif Flag.LOW_ESS in res.flags:
            print(f"warning: {name}: only {res.n_nonzero} trajectories carry weight", file=sys.stderr)
        if Flag.MODEL_BIAS_WARNING in res.flags:
            print(f"warning: {name}: the model was fit on trajectories it is evaluating", file=sys.stderr)
    return 0


def cmd_diagnose(args) -> int:
    dd = load_dataset(args.inp)
    pi_e = _load_typed(args.policy, TabularPolicy)
    pi_b = _load_typed(args.behavior, TabularPolicy)
    audit = audit_weights(weight_series(dd, pi_e, pi_b), dd.lengths, args.ess_floor)
    report = {"weights": audit.as_dict()}
    if pi_e.deterministic:
        ms = matched_sequences(dd, pi_e)
        report["matched"] = {
            "n_matching": ms.n_matching,
            "mean_length_matching": None if ms.n_matching == 0 else ms.mean_length_matching,
            "n_total": ms.n_total,
            "mean_length_total": ms.mean_length_total,
        }
    if args.report.endswith(".csv"):
        rows = [(k, v) for k, v in audit.as_dict().items() if not isinstance(v, list)]
        rows += [(f"matched_{k}", v) for k, v in report.get("matched", {}).items()]
        lines = ["metric,value"] + [f"{k},{'' if v is None else v}" for k, v in rows]
        Path(args.report).write_text("\n".join(lines) + "\n")
    else:
        _write_json(report, args.report)
    return 0


def cmd_ucurve(args) -> int:
    dd = load_dataset(args.inp)
    pi_e = _load_typed(args.policy, TabularPolicy)
    db = load_model(args.dose_bins) if args.dose_bins else fit_dose_bins(dd, args.n_dose_bins)
    curve = u_curve(dd, pi_e, db, args.axis, args.bins, per_step=args.per_step, seed=args.seed,
                    trim=args.trim)
    text = curve.to_csv()
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_json(json.loads(Path(args.spec).read_text()))
    report = run_experiment(spec)
    for path in emit_report(report, args.out_dir, args.format):
        log.info("wrote %s", path)
    if report.skipped:
        log.warning("%d replicate(s) skipped; see skipped.csv", len(report.skipped))
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opebench", description="Off-policy evaluation workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="sample a dataset from a simulator scenario")
    s.add_argument("--scenario", required=True, help=f"one of {', '.join(SCENARIOS)} or a config JSON file")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--truth-out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("cluster", help="fit k-means states (and optionally dose bins)")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iter", type=int, default=300)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out-model", required=True)
    s.add_argument("--out-bins")
    s.add_argument("--n-bins", type=int, default=5)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("discretize", help="attach state ids and dose bins to a dataset")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--bins")
    s.add_argument("--n-bins", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_discretize)

    s = sub.add_parser("learn", help="fit a tabular model and plan a greedy policy")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=100_000)
    s.add_argument("--out-policy", required=True)
    s.add_argument("--out-model")
    s.add_argument("--out-q")
    s.add_argument("--unvisited", choices=("alive", "dead"), default="alive")
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("behavior", help="estimate the clinician policy")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_behavior)

    s = sub.add_parser("critic", help="Q-function of a policy on a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_critic)

    s = sub.add_parser("evaluate", help="off-policy value estimates")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--behavior", required=True)
    s.add_argument("--critic")
    s.add_argument("--model", help="fitted model, needed for mb")
    s.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    s.add_argument("--estimators", default="is,pdis,wis,wpdis")
    s.add_argument("--ess-floor", type=float, default=30)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("diagnose", help="importance-weight and matched-sequence report")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--behavior", required=True)
    s.add_argument("--ess-floor", type=float, default=30)
    s.add_argument("--report", required=True, help="output path; .csv for a flat table, otherwise JSON")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("ucurve", help="mortality against recommended-minus-given dose")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--bins", type=int, default=9, help="number of deviation bins")
    s.add_argument("--trim", type=float, default=0.01,
                   help="quantile trimmed from each end when placing the bins")
    s.add_argument("--axis", choices=("fluid", "vaso"), default="vaso")
    s.add_argument("--dose-bins", help="dose-bin file; refit from the data when omitted")
    s.add_argument("--n-dose-bins", type=int, default=5)
    s.add_argument("--per-step", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ucurve)

    s = sub.add_parser("experiment", help="repeated train/test evaluation")
    s.add_argument("--spec", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
