"""Unlearning and training loops.

A run is a strict recurrence over a flat parameter vector: noisy clipped
updates restricted to one block at a time (the block schedule), followed by
plain momentum fine-tuning on the full vector.  Gradients are only ever taken
on the data handed to the run; every consumed row index is recorded so
callers can assert that forget-set rows never fed a gradient.

All randomness flows through three named seeds (init, data_order, noise), so
a rerun with equal seeds reproduces the trajectory bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from . import subspace as sub
from .accounting import NoisePlan
from .errors import DomainError

CSV_HEADER = (
    "step,phase,block,loss,test_acc,retain_acc,forget_acc,"
    "noise_norm,grad_norm_pre,grad_norm_post"
)

PHASE_TRAIN = "train"
PHASE_FINETUNE = "finetune"


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data_order: int = 0
    noise: int = 0


@dataclass(frozen=True)
class EvalSets:
    """Datasets evaluated after every step; any of them may be absent."""

    test: tuple[np.ndarray, np.ndarray] | None = None
    retain: tuple[np.ndarray, np.ndarray] | None = None
    forget: tuple[np.ndarray, np.ndarray] | None = None


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    plan: NoisePlan
    basis: sub.BlockBasis | None
    batch_size: int = 64
    fine_tune_steps: int | None = None  # None fills the step cap
    fine_tune_lr: float = 0.01
    fine_tune_momentum: float = 0.9
    fine_tune_weight_decay: float = 0.0
    seeds: Seeds = field(default_factory=Seeds)
    step_cap: int = 1000
    # optional per-block (gamma, lam) overrides, keyed by 0-based block index;
    # overriding the dynamics invalidates the plan's certificate unless the
    # plan was recomputed for those constants
    block_overrides: dict[int, tuple[float, float]] | None = None

    def block_dynamics(self, block: int) -> tuple[float, float]:
        if self.block_overrides and block in self.block_overrides:
            return self.block_overrides[block]
        return self.plan.gamma, self.plan.lam

    def resolved_fine_tune_steps(self) -> int:
        noisy = self.plan.total_steps
        if self.step_cap < noisy:
            raise DomainError(
                f"step cap {self.step_cap} below the {noisy} noisy steps of the plan"
            )
        if self.fine_tune_steps is None:
            return self.step_cap - noisy
        return self.fine_tune_steps


@dataclass(frozen=True)
class StepRow:
    step: int
    phase: str
    block: int | None
    loss: float
    test_acc: float | None
    retain_acc: float | None
    forget_acc: float | None
    noise_norm: float
    grad_norm_pre: float
    grad_norm_post: float


@dataclass
class RunRecord:
    rows: list[StepRow]
    final_params: mdl.ParamVector
    touched_rows: np.ndarray  # sorted unique indices that fed a gradient

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER.split(","))
            for r in self.rows:
                writer.writerow(
                    [
                        r.step,
                        r.phase,
                        "" if r.block is None else r.block,
                        _fmt(r.loss),
                        _fmt(r.test_acc),
                        _fmt(r.retain_acc),
                        _fmt(r.forget_acc),
                        _fmt(r.noise_norm),
                        _fmt(r.grad_norm_pre),
                        _fmt(r.grad_norm_post),
                    ]
                )

    def min_accuracy(self, phase_prefix: str, column: str = "test_acc") -> float:
        vals = [
            getattr(r, column)
            for r in self.rows
            if r.phase.startswith(phase_prefix) and getattr(r, column) is not None
        ]
        if not vals:
            raise DomainError(f"no rows with phase {phase_prefix!r}")
        return min(vals)


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


class _Batcher:
    """Epoch-shuffled minibatches with a deterministic order stream."""

    def __init__(self, inputs, labels, batch_size, rng):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.inputs) < 1:
            raise DomainError("empty dataset")
        self.batch_size = max(1, min(batch_size, len(self.inputs)))
        self.rng = rng
        self._order = None
        self._pos = 0
        self.touched = np.zeros(len(self.inputs), dtype=bool)

    def next(self) -> mdl.Batch:
        if self._order is None or self._pos >= len(self._order):
            self._order = self.rng.permutation(len(self.inputs))
            self._pos = 0
        ids = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        self.touched[ids] = True
        return mdl.Batch(self.inputs[ids], self.labels[ids])


def _evaluate(params, eval_sets: EvalSets):
    out = []
    for pair in (eval_sets.test, eval_sets.retain, eval_sets.forget):
        if pair is None or len(pair[1]) == 0:
            out.append(None)
        else:
            out.append(mdl.accuracy(params, pair[0], pair[1]))
    return tuple(out)


def nft_step(
    params: mdl.ParamVector,
    batch: mdl.Batch,
    gamma: float,
    lam: float,
    c1: float,
    sigma2: float,
    rng,
    basis: sub.BlockBasis | None = None,
    block: int | None = None,
):
    """One noisy fine-tuning update; returns (params', loss, diagnostics).

    Without a block: x' = x - gamma*(clip(g, c1) + lam*x) + xi with isotropic
    xi ~ N(0, sigma2 I).  With a block: the same update applied to the block
    coordinates (gradient projected, clipped at the per-block radius, decay on
    the block only, noise drawn in block coordinates); frozen coordinates are
    untouched.
    """
    loss, grad = mdl.loss_and_grad(params, batch)
    if block is None:
        g = grad.values
        b = params.values
    else:
        if basis is None:
            raise DomainError("block update requires a basis")
        g = sub.project_block(grad.values, basis, block)
        b = sub.project_block(params.values, basis, block)
    pre = float(np.linalg.norm(g))
    clipped = mdl.clip(g, c1)
    post = float(np.linalg.norm(clipped))
    if sigma2 > 0:
        noise = rng.standard_normal(b.shape[0]) * np.sqrt(sigma2)
    else:
        noise = np.zeros(b.shape[0])
    delta = -gamma * (clipped + lam * b) + noise
    if block is None:
        new_values = params.values + delta
    else:
        new_values = params.values + sub.lift_block(delta, basis, block)
    diag = {
        "noise_norm": float(np.linalg.norm(noise)),
        "grad_norm_pre": pre,
        "grad_norm_post": post,
    }
    return mdl.ParamVector(new_values, params.layer_map), loss, diag


def _momentum_step(params, velocity, batch, lr, momentum, weight_decay):
    loss, grad = mdl.loss_and_grad(params, batch)
    total = grad.values + weight_decay * params.values
    velocity = momentum * velocity + total
    new = mdl.ParamVector(params.values - lr * velocity, params.layer_map)
    gnorm = float(np.linalg.norm(grad.values))
    return new, velocity, loss, gnorm


def run_blockwise(
    params0: mdl.ParamVector,
    config: RunConfig,
    retain: tuple[np.ndarray, np.ndarray],
    eval_sets: EvalSets = EvalSets(),
) -> RunRecord:
    """Block schedule: T noisy steps per block in order, then fine-tuning.

    Only `retain` rows ever feed a gradient; accuracies in the record come
    from the read-only eval sets.
    """
    plan = config.plan
    basis = config.basis
    if basis is None:
        if plan.k != 1:
            raise DomainError("a basis is required when the plan has k > 1 blocks")
    elif basis.k != plan.k:
        raise DomainError(f"basis has {basis.k} blocks but plan has {plan.k}")
    if basis is not None and basis.d != params0.d:
        raise DomainError("basis dimension does not match the model")
    ft_steps = config.resolved_fine_tune_steps()

    order_rng = np.random.default_rng(config.seeds.data_order)
    noise_rng = np.random.default_rng(config.seeds.noise)
    batcher = _Batcher(retain[0], retain[1], config.batch_size, order_rng)

    params = params0.copy()
    rows: list[StepRow] = []
    step = 0
    for i in range(plan.k):
        gamma_i, lam_i = config.block_dynamics(i)
        for _ in range(plan.steps_per_block):
            batch = batcher.next()
            params, loss, diag = nft_step(
                params,
                batch,
                gamma=gamma_i,
                lam=lam_i,
                c1=plan.c1_per_block,
                sigma2=plan.sigma2,
                rng=noise_rng,
                basis=basis,
                block=None if basis is None else i,
            )
            step += 1
            test_acc, retain_acc, forget_acc = _evaluate(params, eval_sets)
            rows.append(
                StepRow(
                    step=step,
                    phase=f"unlearn_block_{i + 1}",
                    block=i + 1,
                    loss=loss,
                    test_acc=test_acc,
                    retain_acc=retain_acc,
                    forget_acc=forget_acc,
                    noise_norm=diag["noise_norm"],
                    grad_norm_pre=diag["grad_norm_pre"],
                    grad_norm_post=diag["grad_norm_post"],
                )
            )

    velocity = np.zeros_like(params.values)
    for _ in range(ft_steps):
        batch = batcher.next()
        params, velocity, loss, gnorm = _momentum_step(
            params,
            velocity,
            batch,
            config.fine_tune_lr,
            config.fine_tune_momentum,
            config.fine_tune_weight_decay,
        )
        step += 1
        test_acc, retain_acc, forget_acc = _evaluate(params, eval_sets)
        rows.append(
            StepRow(
                step=step,
                phase=PHASE_FINETUNE,
                block=None,
                loss=loss,
                test_acc=test_acc,
                retain_acc=retain_acc,
                forget_acc=forget_acc,
                noise_norm=0.0,
                grad_norm_pre=gnorm,
                grad_norm_post=gnorm,
            )
        )

    return RunRecord(
        rows=rows,
        final_params=params,
        touched_rows=np.flatnonzero(batcher.touched),
    )


def run_nft(
    params0: mdl.ParamVector,
    config: RunConfig,
    retain: tuple[np.ndarray, np.ndarray],
    eval_sets: EvalSets = EvalSets(),
) -> RunRecord:
    """Plain noisy fine-tuning: the k = 1 schedule with no basis.

    There is no initial model clipping; the starting point is used as is.
    """
    if config.plan.k != 1:
        raise DomainError("run_nft expects a single-block plan")
    if config.basis is not None:
        config = replace(config, basis=None)
    return run_blockwise(params0, config, retain, eval_sets)


def train(
    arch: mdl.MlpSpec,
    data: tuple[np.ndarray, np.ndarray],
    seeds: Seeds,
    config: TrainConfig,
    eval_sets: EvalSets | None = None,
    params0: mdl.ParamVector | None = None,
) -> tuple[mdl.ParamVector, RunRecord]:
    """SGD-with-momentum training, deterministic in the seeds."""
    params = params0.copy() if params0 is not None else mdl.init_params(arch, seeds.init)
    order_rng = np.random.default_rng(seeds.data_order)
    batcher = _Batcher(data[0], data[1], config.batch_size, order_rng)
    velocity = np.zeros_like(params.values)
    rows: list[StepRow] = []
    for step in range(1, config.steps + 1):
        batch = batcher.next()
        params, velocity, loss, gnorm = _momentum_step(
            params, velocity, batch, config.lr, config.momentum, config.weight_decay
        )
        if eval_sets is not None:
            test_acc, retain_acc, forget_acc = _evaluate(params, eval_sets)
        else:
            test_acc = retain_acc = forget_acc = None
        rows.append(
            StepRow(
                step=step,
                phase=PHASE_TRAIN,
                block=None,
                loss=loss,
                test_acc=test_acc,
                retain_acc=retain_acc,
                forget_acc=forget_acc,
                noise_norm=0.0,
                grad_norm_pre=gnorm,
                grad_norm_post=gnorm,
            )
        )
    record = RunRecord(
        rows=rows, final_params=params, touched_rows=np.flatnonzero(batcher.touched)
    )
    return params, record


def coupled_retrain(
    arch: mdl.MlpSpec,
    retain: tuple[np.ndarray, np.ndarray],
    seeds: Seeds,
    config: TrainConfig,
) -> mdl.ParamVector:
    """Retraining on the retained rows under the same coupled seeds.

    The initialization and batch-order streams reuse the full run's seeds, so
    with an empty forget set the result is bit-identical to full training.
    """
    params, _ = train(arch, retain, seeds, config)
    return params
