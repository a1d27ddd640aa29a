"""Experiment orchestration: configs, cells, summaries, and reports.

A config describes one dataset, one deletion scenario, and a grid of
(budget, block count, seed) cells.  Each cell trains the full model, builds
the coupled retrain baseline, runs the selected unlearning method, audits the
result, and emits a per-step CSV plus a JSON manifest.  The summary JSON and
the per-run CSVs are byte-identical across reruns; wall-clock timings go to a
separate file so they never break determinism.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import accounting as acc
from . import audit
from . import datasets as ds
from . import engine as eng
from . import model as mdl
from . import subspace as sub
from .errors import DomainError, FormatError

ENV_OUTPUT_DIR = "BLOCKWISE_UNLEARN_OUTDIR"

METHOD_NFT = "nft"
METHOD_BLOCKWISE = "blockwise"
METHOD_RETRAIN = "retrain"
METHODS = (METHOD_NFT, METHOD_BLOCKWISE, METHOD_RETRAIN)

_STRATEGY_NAMES = {
    "random_orthonormal": sub.RANDOM_ORTHONORMAL,
    "permutation": sub.PERMUTATION,
    "layer_cyclic": sub.LAYER_CYCLIC,
    "head_body": sub.HEAD_BODY,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    deletion: dict
    model_hidden: tuple[int, ...]
    train: dict
    unlearn: dict
    finetune: dict
    budgets: tuple[tuple[float, float], ...]
    k_values: tuple[int, ...]
    method: str
    basis_strategy: str = "random_orthonormal"
    test_fraction: float = 0.2
    step_cap: int = 1000
    n_seeds: int = 5
    seed0: int = 0
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise DomainError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_seeds < 1:
            raise DomainError("n_seeds must be >= 1")
        if self.basis_strategy not in _STRATEGY_NAMES:
            raise DomainError(f"unknown basis strategy {self.basis_strategy!r}")
        if any(k < 1 for k in self.k_values):
            raise DomainError("block counts must be >= 1")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    try:
        budgets = tuple(
            (float(b["epsilon"]), float(b["delta"])) for b in doc["budgets"]
        )
        return ExperimentConfig(
            dataset=dict(doc["dataset"]),
            deletion=dict(doc["deletion"]),
            model_hidden=tuple(int(h) for h in doc["model"]["hidden"]),
            train=dict(doc["train"]),
            unlearn=dict(doc["unlearn"]),
            finetune=dict(doc.get("finetune", {})),
            budgets=budgets,
            k_values=tuple(int(k) for k in doc.get("k_values", [1])),
            method=doc.get("method", METHOD_BLOCKWISE),
            basis_strategy=doc.get("basis_strategy", "random_orthonormal"),
            test_fraction=float(doc.get("test_fraction", 0.2)),
            step_cap=int(doc.get("step_cap", 1000)),
            n_seeds=int(doc.get("n_seeds", 5)),
            seed0=int(doc.get("seed0", 0)),
            output_dir=str(doc.get("output_dir", "runs")),
        )
    except KeyError as exc:
        raise FormatError(f"config missing field {exc}") from exc


def resolve_output_dir(config: ExperimentConfig, override: str | None = None) -> str:
    if override:
        return override
    return os.environ.get(ENV_OUTPUT_DIR, config.output_dir)


def load_dataset(config: ExperimentConfig) -> tuple[ds.Dataset, ds.Dataset | None]:
    """Returns (train pool, external test set or None)."""
    spec = config.dataset
    kind = spec.get("kind")
    if kind == "blobs":
        data = ds.generate_blobs(
            n=int(spec["n"]),
            classes=int(spec["classes"]),
            dim=int(spec["dim"]),
            separation=float(spec["separation"]),
            seed=int(spec.get("seed", 0)),
        )
        return data, None
    if kind == "mnist_idx":
        train = ds.load_idx(spec["train_images"], spec["train_labels"])
        test = None
        if "test_images" in spec:
            test = ds.load_idx(spec["test_images"], spec["test_labels"])
        return train, test
    raise DomainError(f"unknown dataset kind {kind!r}")


def deletion_request(config: ExperimentConfig):
    spec = config.deletion
    kind = spec.get("kind")
    if kind == "random_fraction":
        return ds.RandomFraction(float(spec["fraction"]))
    if kind == "classwise":
        return ds.ClassWise(int(spec["class_id"]))
    raise DomainError(f"unknown deletion kind {kind!r}")


def architecture(config: ExperimentConfig, data: ds.Dataset) -> mdl.MlpSpec:
    return mdl.MlpSpec(
        (data.inputs.shape[1], *config.model_hidden, data.num_classes)
    )


def train_config(config: ExperimentConfig) -> eng.TrainConfig:
    t = config.train
    return eng.TrainConfig(
        steps=int(t["steps"]),
        lr=float(t.get("lr", 0.01)),
        momentum=float(t.get("momentum", 0.9)),
        weight_decay=float(t.get("weight_decay", 1e-5)),
        batch_size=int(t.get("batch_size", 64)),
    )


def budget_spec(config: ExperimentConfig, epsilon: float, delta: float) -> acc.BudgetSpec:
    u = config.unlearn
    if "c0" in u and "delta_rho" in u:
        raise DomainError("give either c0 or delta_rho, not both")
    if "c0" in u:
        c0 = float(u["c0"])
    elif "delta_rho" in u:
        c0 = float(u["delta_rho"]) / 2.0
    else:
        raise DomainError("unlearn config needs c0 or delta_rho")
    q = u.get("q")
    return acc.BudgetSpec(
        epsilon=epsilon,
        delta=delta,
        gamma=float(u["gamma"]),
        lam=float(u["lam"]),
        c1=float(u["c1"]),
        c0=c0,
        q=None if q is None else float(q),
    )


def cell_seeds(config: ExperimentConfig, seed_index: int) -> eng.Seeds:
    base = config.seed0 + seed_index
    return eng.Seeds(init=base, data_order=base + 10_000, noise=base + 20_000)


def basis_seed(config: ExperimentConfig, seed_index: int) -> int:
    return config.seed0 + seed_index + 30_000


def cell_key(method: str, epsilon: float, k: int, seed_index: int) -> str:
    return f"{method}_eps{epsilon:g}_k{k}_seed{seed_index}"


@dataclass
class CellResult:
    key: str
    method: str
    epsilon: float
    delta: float
    k: int
    seed_index: int
    report: audit.AuditReport
    final_test_acc: float
    min_unlearn_test_acc: float | None
    rte_minutes: float
    csv_path: str | None = None


@dataclass
class ExperimentResult:
    cells: list[CellResult] = field(default_factory=list)
    errors: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _prepare_seed_stage(config, data, external_test, seed_index):
    """Train the full model, split, and build the coupled retrain baseline."""
    seeds = cell_seeds(config, seed_index)
    request = deletion_request(config)
    if external_test is None:
        split = ds.make_split(
            data, request, seed=seeds.init, test_fraction=config.test_fraction
        )
        test_set = data.subset(split.test_idx)
    else:
        split = ds.make_split(data, request, seed=seeds.init, test_fraction=0.0)
        test_set = external_test
    retain = data.subset(split.retain_idx)
    forget = data.subset(split.forget_idx)
    arch = architecture(config, data)
    tcfg = train_config(config)
    full_params, _ = eng.train(arch, data.subset(np.sort(np.concatenate(
        [split.retain_idx, split.forget_idx]))).pair(), seeds, tcfg)
    retrain_params = eng.coupled_retrain(arch, retain.pair(), seeds, tcfg)
    return seeds, split, retain, forget, test_set, arch, full_params, retrain_params


def _unlearn_cell(
    config, arch, plan, basis, seeds, full_params, retain, eval_sets
) -> tuple[eng.RunRecord, float]:
    f = config.finetune
    run_cfg = eng.RunConfig(
        plan=plan,
        basis=basis,
        batch_size=int(config.unlearn.get("batch_size", 64)),
        fine_tune_steps=(None if f.get("steps") is None else int(f["steps"])),
        fine_tune_lr=float(f.get("lr", 0.01)),
        fine_tune_momentum=float(f.get("momentum", 0.9)),
        fine_tune_weight_decay=float(f.get("weight_decay", 0.0)),
        seeds=seeds,
        step_cap=config.step_cap,
    )
    start = time.perf_counter()
    record = eng.run_blockwise(full_params, run_cfg, retain.pair(), eval_sets)
    rte = (time.perf_counter() - start) / 60.0
    return record, rte


def run_experiment(
    config: ExperimentConfig, output_dir: str | None = None
) -> ExperimentResult:
    out = resolve_output_dir(config, output_dir)
    os.makedirs(out, exist_ok=True)
    data, external_test = load_dataset(config)
    result = ExperimentResult()
    timings: dict[str, float] = {}

    for seed_index in range(config.n_seeds):
        try:
            (seeds, split, retain, forget, test_set, arch,
             full_params, retrain_params) = _prepare_seed_stage(
                config, data, external_test, seed_index
            )
        except Exception as exc:  # noqa: BLE001 - recorded, other seeds proceed
            result.errors[f"seed{seed_index}"] = f"{type(exc).__name__}: {exc}"
            continue

        mdl.save_params(full_params, os.path.join(out, f"model_full_seed{seed_index}.ckpt"))
        mdl.save_params(
            retrain_params, os.path.join(out, f"model_retrain_seed{seed_index}.ckpt")
        )
        ds.save_split(split, os.path.join(out, f"split_seed{seed_index}.json"))

        eval_sets = eng.EvalSets(
            test=test_set.pair(), retain=retain.pair(), forget=forget.pair()
        )

        baseline_report = audit.compute_metrics(
            retrain_params, retain.pair(), forget.pair(), test_set.pair(),
            retrain_params=retrain_params, mia_seed=seeds.init,
        )
        base_key = cell_key(METHOD_RETRAIN, 0.0, 0, seed_index)
        result.cells.append(
            CellResult(
                key=base_key,
                method=METHOD_RETRAIN,
                epsilon=0.0,
                delta=0.0,
                k=0,
                seed_index=seed_index,
                report=baseline_report,
                final_test_acc=baseline_report.ta,
                min_unlearn_test_acc=None,
                rte_minutes=0.0,
            )
        )
        if config.method == METHOD_RETRAIN:
            continue

        k_values = config.k_values if config.method == METHOD_BLOCKWISE else (1,)
        for epsilon, delta in config.budgets:
            for k in k_values:
                key = cell_key(config.method, epsilon, k, seed_index)
                try:
                    spec = budget_spec(config, epsilon, delta)
                    steps = config.unlearn.get("steps")
                    plan = acc.make_plan(
                        spec, k,
                        steps=None if steps is None else int(steps),
                        scale_c0=bool(config.unlearn.get("scale_c0", True)),
                    )
                    basis = None
                    if k > 1:
                        basis = sub.build_basis(
                            _STRATEGY_NAMES[config.basis_strategy],
                            full_params.layer_map,
                            k,
                            seed=basis_seed(config, seed_index),
                        )
                    record, rte = _unlearn_cell(
                        config, arch, plan, basis, seeds, full_params, retain, eval_sets
                    )
                    touched_global = split.retain_idx[record.touched_rows]
                    if np.intersect1d(touched_global, split.forget_idx).size:
                        raise DomainError("forget rows fed a gradient")
                    report = audit.compute_metrics(
                        record.final_params, retain.pair(), forget.pair(),
                        test_set.pair(), retrain_params=retrain_params,
                        rte_minutes=rte, mia_seed=seeds.init,
                    )
                    csv_path = os.path.join(out, f"{key}.csv")
                    record.write_csv(csv_path)
                    mdl.save_params(
                        record.final_params, os.path.join(out, f"{key}.ckpt")
                    )
                    manifest = {
                        "key": key,
                        "method": config.method,
                        "epsilon": epsilon,
                        "delta": delta,
                        "k": k,
                        "seed_index": seed_index,
                        "seeds": {
                            "init": seeds.init,
                            "data_order": seeds.data_order,
                            "noise": seeds.noise,
                        },
                        "plan": plan.to_dict(),
                        "checkpoint": f"{key}.ckpt",
                        "csv": f"{key}.csv",
                        "basis_strategy": (
                            None if basis is None else config.basis_strategy
                        ),
                        "basis_seed": None if basis is None else basis.seed,
                    }
                    with open(os.path.join(out, f"{key}_manifest.json"), "w") as fh:
                        json.dump(manifest, fh, indent=2, sort_keys=True)
                    result.cells.append(
                        CellResult(
                            key=key,
                            method=config.method,
                            epsilon=epsilon,
                            delta=delta,
                            k=k,
                            seed_index=seed_index,
                            report=report,
                            final_test_acc=report.ta,
                            min_unlearn_test_acc=100.0
                            * record.min_accuracy("unlearn"),
                            rte_minutes=rte,
                            csv_path=csv_path,
                        )
                    )
                    timings[key] = rte
                except Exception as exc:  # noqa: BLE001
                    result.errors[key] = f"{type(exc).__name__}: {exc}"

    result.summary = summarize(result)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
    with open(os.path.join(out, "timings.json"), "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(format_report(result))
    return result


def _mean_std(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {
        "mean": float(np.mean(vals)),
        "std": float(np.std(vals)),
        "n": len(vals),
    }


def summarize(result: ExperimentResult) -> dict:
    """Mean/std over seeds for every (method, epsilon, k) group.

    Timing fields are deliberately absent so the summary is byte-stable.
    """
    groups: dict[tuple, list[CellResult]] = {}
    for cell in result.cells:
        groups.setdefault((cell.method, cell.epsilon, cell.k), []).append(cell)
    rows = {}
    for (method, epsilon, k), cells in sorted(groups.items()):
        label = f"{method}_eps{epsilon:g}_k{k}"
        rows[label] = {
            "method": method,
            "epsilon": epsilon,
            "k": k,
            "seeds": [c.seed_index for c in cells],
            "ua": _mean_std(c.report.ua for c in cells),
            "ra": _mean_std(c.report.ra for c in cells),
            "ta": _mean_std(c.report.ta for c in cells),
            "mia_efficacy": _mean_std(c.report.mia_efficacy for c in cells),
            "min_unlearn_test_acc": _mean_std(
                c.min_unlearn_test_acc for c in cells
            ),
            "ra_delta": _mean_std(c.report.ra_delta for c in cells),
            "ta_delta": _mean_std(c.report.ta_delta for c in cells),
        }
    return {"groups": rows, "errors": dict(sorted(result.errors.items()))}


def _cell_fmt(stats: dict) -> str:
    if stats["mean"] is None:
        return "    --    "
    return f"{stats['mean']:6.2f}±{stats['std']:4.2f}"


def format_report(result: ExperimentResult) -> str:
    """Text table in the UA / RA / TA / MIA / RTE column order."""
    lines = [
        f"{'Method':28s} {'UA':>12s} {'RA':>12s} {'TA':>12s} {'MIA':>12s} {'RTE(min)':>9s}"
    ]
    groups: dict[tuple, list[CellResult]] = {}
    for cell in result.cells:
        groups.setdefault((cell.method, cell.epsilon, cell.k), []).append(cell)
    for (method, epsilon, k), cells in sorted(groups.items()):
        if method == METHOD_RETRAIN:
            label = "retrain"
        else:
            label = f"{method} eps={epsilon:g} k={k}"
        ua = _cell_fmt(_mean_std(c.report.ua for c in cells))
        ra = _cell_fmt(_mean_std(c.report.ra for c in cells))
        ta = _cell_fmt(_mean_std(c.report.ta for c in cells))
        mia = _cell_fmt(_mean_std(c.report.mia_efficacy for c in cells))
        rte = float(np.mean([c.rte_minutes for c in cells]))
        lines.append(f"{label:28s} {ua:>12s} {ra:>12s} {ta:>12s} {mia:>12s} {rte:9.2f}")
    if result.errors:
        lines.append("")
        lines.append("errors:")
        for key, msg in sorted(result.errors.items()):
            lines.append(f"  {key}: {msg}")
    return "\n".join(lines) + "\n"
