"""Command-line interface.

Subcommands: plan (pure accounting), train / retrain / unlearn (single-seed
pipeline stages sharing an output directory), audit, calibrate-delta,
divergence-check, and run (the full experiment grid from a config file).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import accounting as acc
from . import audit
from . import datasets as ds
from . import divergence as dv
from . import engine as eng
from . import harness
from . import model as mdl
from . import subspace as sub
from .errors import UnlearnError


def _write_json(doc, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _add_plan_parser(sub_parsers) -> None:
    p = sub_parsers.add_parser("plan", help="compute a noise/step plan")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--c1", type=float, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--delta-rho", type=float, help="proximity bound; c0 = delta_rho/2")
    group.add_argument("--c0", type=float, help="worst-case model clipping radius")
    p.add_argument("--blocks", type=int, default=1)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--steps", type=int, help="fixed per-block step count")
    mode.add_argument("--min-noise", action="store_true", help="minimal-noise mode")
    p.add_argument("--q", type=float, default=None, help="Renyi order (default: optimize)")
    p.add_argument("--no-scale-c0", action="store_true",
                   help="keep the initial-distance radius global across blocks")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_plan)


def _cmd_plan(args) -> int:
    c0 = args.c0 if args.c0 is not None else args.delta_rho / 2.0
    spec = acc.BudgetSpec(
        epsilon=args.epsilon, delta=args.delta, gamma=args.gamma,
        lam=args.lam, c1=args.c1, c0=c0, q=args.q,
    )
    plan = acc.make_plan(
        spec, args.blocks,
        steps=None if args.min_noise else args.steps,
        scale_c0=not args.no_scale_c0,
    )
    _write_json(plan.to_dict(), args.out)
    return 0


def _stage_args(p, needs_seed=True) -> None:
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory override")
    if needs_seed:
        p.add_argument("--seed", type=int, default=0, help="seed index within the grid")


def _stage_setup(args):
    config = harness.load_config(args.config)
    out = harness.resolve_output_dir(config, args.out)
    os.makedirs(out, exist_ok=True)
    data, external_test = harness.load_dataset(config)
    return config, out, data, external_test


def _cmd_train(args) -> int:
    config, out, data, _ = _stage_setup(args)
    arch = harness.architecture(config, data)
    seeds = harness.cell_seeds(config, args.seed)
    request = harness.deletion_request(config)
    test_fraction = 0.0 if config.dataset.get("kind") == "mnist_idx" else config.test_fraction
    split = ds.make_split(data, request, seed=seeds.init, test_fraction=test_fraction)
    train_pool = data.subset(np.sort(np.concatenate([split.retain_idx, split.forget_idx])))
    params, _ = eng.train(arch, train_pool.pair(), seeds, harness.train_config(config))
    ds.save_split(split, os.path.join(out, f"split_seed{args.seed}.json"))
    path = os.path.join(out, f"model_full_seed{args.seed}.ckpt")
    mdl.save_params(params, path)
    print(path)
    return 0


def _cmd_retrain(args) -> int:
    config, out, data, _ = _stage_setup(args)
    arch = harness.architecture(config, data)
    seeds = harness.cell_seeds(config, args.seed)
    split_path = os.path.join(out, f"split_seed{args.seed}.json")
    if os.path.exists(split_path):
        split = ds.load_split(split_path)
    else:
        request = harness.deletion_request(config)
        test_fraction = 0.0 if config.dataset.get("kind") == "mnist_idx" else config.test_fraction
        split = ds.make_split(data, request, seed=seeds.init, test_fraction=test_fraction)
        ds.save_split(split, split_path)
    retain = data.subset(split.retain_idx)
    params = eng.coupled_retrain(arch, retain.pair(), seeds, harness.train_config(config))
    path = os.path.join(out, f"model_retrain_seed{args.seed}.ckpt")
    mdl.save_params(params, path)
    print(path)
    return 0


def _cmd_unlearn(args) -> int:
    config, out, data, external_test = _stage_setup(args)
    seeds = harness.cell_seeds(config, args.seed)
    ckpt = os.path.join(out, f"model_full_seed{args.seed}.ckpt")
    split_path = os.path.join(out, f"split_seed{args.seed}.json")
    if not (os.path.exists(ckpt) and os.path.exists(split_path)):
        _cmd_train(args)
    full_params = mdl.load_params(ckpt)
    split = ds.load_split(split_path)
    retain = data.subset(split.retain_idx)
    forget = data.subset(split.forget_idx)
    test_set = external_test if external_test is not None else data.subset(split.test_idx)

    epsilon, delta = config.budgets[0]
    if args.epsilon is not None:
        epsilon = args.epsilon
    if args.delta is not None:
        delta = args.delta
    k = args.blocks if args.method == harness.METHOD_BLOCKWISE else 1
    spec = harness.budget_spec(config, epsilon, delta)
    steps = config.unlearn.get("steps")
    plan = acc.make_plan(
        spec, k, steps=None if steps is None else int(steps),
        scale_c0=bool(config.unlearn.get("scale_c0", True)),
    )
    basis = None
    if k > 1:
        basis = sub.build_basis(
            harness._STRATEGY_NAMES[config.basis_strategy],
            full_params.layer_map, k, seed=harness.basis_seed(config, args.seed),
        )
        sub.save_basis(basis, os.path.join(out, f"basis_k{k}_seed{args.seed}.json"))
    eval_sets = eng.EvalSets(
        test=test_set.pair(), retain=retain.pair(), forget=forget.pair()
    )
    record, rte = harness._unlearn_cell(
        config, harness.architecture(config, data), plan, basis, seeds,
        full_params, retain, eval_sets,
    )
    key = harness.cell_key(args.method, epsilon, k, args.seed)
    record.write_csv(os.path.join(out, f"{key}.csv"))
    mdl.save_params(record.final_params, os.path.join(out, f"{key}.ckpt"))
    manifest = {
        "key": key,
        "method": args.method,
        "epsilon": epsilon,
        "delta": delta,
        "k": k,
        "plan": plan.to_dict(),
        "rte_minutes": rte,
        "checkpoint": f"{key}.ckpt",
        "csv": f"{key}.csv",
    }
    with open(os.path.join(out, f"{key}_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(os.path.join(out, f"{key}.ckpt"))
    return 0


def _cmd_audit(args) -> int:
    config = harness.load_config(args.config)
    data, external_test = harness.load_dataset(config)
    split = ds.load_split(args.splits)
    params = mdl.load_params(args.checkpoint)
    retrain_params = None
    if args.retrain_checkpoint:
        retrain_params = mdl.load_params(args.retrain_checkpoint)
    retain = data.subset(split.retain_idx)
    forget = data.subset(split.forget_idx)
    test_set = external_test if external_test is not None else data.subset(split.test_idx)
    report = audit.compute_metrics(
        params, retain.pair(), forget.pair(), test_set.pair(),
        retrain_params=retrain_params, mia_seed=split.seed,
    )
    _write_json(report.to_dict(), args.out)
    ua = "--" if report.ua is None else f"{report.ua:.2f}"
    mia = "--" if report.mia_efficacy is None else f"{report.mia_efficacy:.2f}"
    print(
        f"{'UA':>8s} {'RA':>8s} {'TA':>8s} {'MIA':>8s}\n"
        f"{ua:>8s} {report.ra:8.2f} {report.ta:8.2f} {mia:>8s}",
        file=sys.stderr,
    )
    return 0


def _cmd_calibrate_delta(args) -> int:
    config = harness.load_config(args.config)
    data, _ = harness.load_dataset(config)
    arch = harness.architecture(config, data)
    est = audit.estimate_delta(
        arch, data,
        perturbation_frac=args.frac,
        n_runs=args.runs,
        rho=args.rho,
        seeds=harness.cell_seeds(config, args.seed),
        train_config=harness.train_config(config),
    )
    _write_json(est.to_dict(), args.out)
    return 0


def _cmd_divergence_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    report: dict = {}

    shift_errors = []
    for _ in range(20):
        q = float(rng.uniform(1.2, 8.0))
        a = float(rng.uniform(-2.0, 2.0))
        s2 = float(rng.uniform(0.1, 4.0))
        mu, nu = dv.gaussian_pair(a, 0.0, s2, order=q)
        shift_errors.append(
            abs(dv.numeric_renyi(mu, nu, q) - dv.renyi_gaussian_shift(q, a, s2))
        )
    report["gaussian_shift_quadrature"] = {
        "max_abs_error": max(shift_errors),
        "tolerance": 1e-4,
        "passed": max(shift_errors) <= 1e-4,
    }

    layer_map = (("w", (8, 1), 0),)
    noise_checks = {}
    for strategy in (sub.RANDOM_ORTHONORMAL, sub.PERMUTATION):
        basis = sub.build_basis(strategy, layer_map, 4, seed=args.seed)
        rep = dv.check_block_noise_equivalence(
            basis, 1.0, 20_000, np.random.default_rng(args.seed + 1)
        )
        noise_checks[strategy] = {
            "max_cov_deviation": rep.max_cov_deviation,
            "cov_threshold": rep.cov_threshold,
            "min_ks_pvalue": min(rep.ks_pvalues),
            "passed": rep.passed,
        }
    report["block_noise_equivalence"] = noise_checks

    violations = 0
    worst_margin = -float("inf")
    for _ in range(args.specs):
        gamma = float(10.0 ** rng.uniform(-3, -0.5))
        lam = float(rng.uniform(5e-3, 0.8) / gamma)
        c1 = float(10.0 ** rng.uniform(-1, 1.5))
        c0 = float(rng.uniform(0.05, 0.9) * c1 / lam)
        q = float(rng.uniform(1.5, 30.0))
        er = float(10.0 ** rng.uniform(-1.2, 0.7))
        budget = acc.BlockBudget(gamma=gamma, lam=lam, c0=c0, c1=c1, q=q, eps_renyi=er)
        steps = int(rng.integers(1, 12))
        sigma2 = acc.noise_for_steps(steps, budget)
        rep = dv.check_budget_bound_on_trajectories(budget, sigma2, steps)
        worst_margin = max(worst_margin, rep.numeric - rep.certified)
        if not rep.passed:
            violations += 1
    report["trajectory_bounds"] = {
        "specs": args.specs,
        "violations": violations,
        "worst_margin": worst_margin,
        "tolerance": 1e-3,
        "passed": violations == 0,
    }
    report["passed"] = all(
        section["passed"]
        for section in (
            report["gaussian_shift_quadrature"],
            *noise_checks.values(),
            report["trajectory_bounds"],
        )
    )
    _write_json(report, args.out)
    return 0 if report["passed"] else 1


def _cmd_run(args) -> int:
    config = harness.load_config(args.config)
    result = harness.run_experiment(config, output_dir=args.out)
    out = harness.resolve_output_dir(config, args.out)
    print(harness.format_report(result), end="")
    print(f"artifacts: {out}")
    return 1 if result.errors else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockwise-unlearn",
        description="certified unlearning via block-wise noisy fine-tuning",
    )
    sub_parsers = parser.add_subparsers(dest="command", required=True)

    _add_plan_parser(sub_parsers)

    for name, fn in (("train", _cmd_train), ("retrain", _cmd_retrain)):
        p = sub_parsers.add_parser(name, help=f"{name} one seed of the pipeline")
        _stage_args(p)
        p.set_defaults(fn=fn)

    p = sub_parsers.add_parser("unlearn", help="unlearn from a trained checkpoint")
    _stage_args(p)
    p.add_argument("--method", choices=[harness.METHOD_NFT, harness.METHOD_BLOCKWISE],
                   default=harness.METHOD_BLOCKWISE)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=None, help="budget override")
    p.add_argument("--delta", type=float, default=None, help="budget override")
    p.set_defaults(fn=_cmd_unlearn)

    p = sub_parsers.add_parser("audit", help="evaluate a checkpoint against a split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--retrain-checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_audit)

    p = sub_parsers.add_parser("calibrate-delta", help="empirical proximity radius")
    p.add_argument("--config", required=True)
    p.add_argument("--runs", type=int, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--frac", type=float, default=0.1,
                   help="fraction of rows replaced per run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_calibrate_delta)

    p = sub_parsers.add_parser("divergence-check", help="numeric certificate checks")
    p.add_argument("--specs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_divergence_check)

    p = sub_parsers.add_parser("run", help="run the full experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_run)

    parser.set_defaults(fn=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UnlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
