"""Central finite-difference verification of the analytic gradients in ``model``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from logging import getLogger
from typing import Callable, Iterable

import numpy as np

from . import constants, errors
from .data import Batch
from .model import (
    DropoutMasks,
    GradSet,
    Hyper,
    ModelParams,
    loss_and_grad,
    sample_dropout_masks,
    score_all_tails,
    total_loss,
)
from .utils import make_rng, sigmoid


__all__ = (
    "GradcheckInstance",
    "GradcheckReport",
    "InstanceResult",
    "check_instance",
    "finite_difference",
    "random_instance",
    "relative_error",
    "run_gradcheck",
    "stationary_instance",
)


logger = getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
ERROR_FLOOR = 1e-4
"""Denominator floor of the relative error, keeps entries whose true gradient is ~0 from dividing by ~0."""

GradCorruption = Callable[[GradSet], GradSet]


@dataclass
class GradcheckInstance:
    seed: int
    params: ModelParams
    batch: Batch
    hyper: Hyper
    masks: DropoutMasks | None = None


@dataclass
class InstanceResult:
    seed: int
    alpha: float
    beta: float
    max_rel_error: dict[str, float]
    max_abs_grad: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "alpha": self.alpha,
            "beta": self.beta,
            "max_rel_error": self.max_rel_error,
            "max_abs_grad": self.max_abs_grad,
        }


@dataclass
class GradcheckReport:
    tolerance: float
    results: list[InstanceResult] = field(default_factory=list)
    stationary_max_grad: float = 0.0

    @property
    def max_rel_error(self) -> dict[str, float]:
        """Worst relative error of each parameter over every instance."""
        return {
            name: max((result.max_rel_error[name] for result in self.results), default=0.0)
            for name in constants.PARAM_NAMES
        }

    @property
    def passed(self) -> bool:
        return all(error < self.tolerance for error in self.max_rel_error.values()) and (
            self.stationary_max_grad < 1e-8
        )

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "num_instances": len(self.results),
            "max_rel_error": self.max_rel_error,
            "stationary_max_grad": self.stationary_max_grad,
            "instances": [result.to_dict() for result in self.results],
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    return np.abs(analytic - numeric) / scale


def finite_difference(
    params: ModelParams,
    batch: Batch,
    hyper: Hyper,
    name: str,
    *,
    masks: DropoutMasks | None = None,
    step: float = STEP,
) -> np.ndarray:
    """Central-difference gradient of ``total_loss`` with respect to the parameter ``name``."""
    base = getattr(params, name)
    ret = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[index] = base[index] + step
        loss_plus = total_loss(params.replace(**{name: shifted}), batch, hyper, masks)
        shifted[index] = base[index] - step
        loss_minus = total_loss(params.replace(**{name: shifted}), batch, hyper, masks)
        ret[index] = (loss_plus - loss_minus) / (2 * step)
    return ret


def _random_params(rng: np.random.Generator, rank: int, num_entities: int, num_relations: int) -> ModelParams:
    # Far from orthogonal.
    arrays = {name: 0.5 * rng.standard_normal((rank, rank)) for name in constants.SHARED_PARAM_NAMES}
    arrays["e_loading"] = 0.5 * rng.standard_normal((rank, num_entities))
    arrays["r_loading"] = 0.5 * rng.standard_normal((rank, num_relations))
    return ModelParams(rank=rank, sparsity=float(rng.uniform(0.3, 0.9)), **arrays)


def random_instance(
    seed: int,
    alpha: float,
    beta: float,
    *,
    rank: int = 4,
    num_entities: int = 8,
    num_relations: int = 3,
    num_pairs: int = 5,
    dropout: float = 0.0,
) -> GradcheckInstance:
    rng = make_rng(seed)
    params = _random_params(rng, rank, num_entities, num_relations)
    pairs = np.stack(
        [rng.integers(0, num_entities, num_pairs), rng.integers(0, num_relations, num_pairs)], axis=1
    ).astype(np.int64)
    targets = (rng.random((num_pairs, num_entities)) < 0.3).astype(np.float64)
    hyper = Hyper(alpha=alpha, beta=beta, dropout_rate=dropout)
    masks = sample_dropout_masks(num_pairs, rank, num_entities, dropout, rng)
    return GradcheckInstance(
        seed=seed, params=params, batch=Batch(pairs=pairs, targets=targets), hyper=hyper, masks=masks
    )


def stationary_instance(seed: int) -> GradcheckInstance:
    """alpha = beta = 0 and every label equal to the model's own probability: the likelihood is stationary."""
    instance = random_instance(seed, 0.0, 0.0)
    params, batch = instance.params, instance.batch
    scores = np.stack([score_all_tails(params, int(head), int(rel)) for head, rel in batch.pairs])
    targets = params.sparsity * sigmoid(scores)
    instance.batch = Batch(pairs=batch.pairs, targets=targets)
    return instance


def check_instance(instance: GradcheckInstance, *, corrupt: GradCorruption | None = None) -> InstanceResult:
    """Compares every analytic gradient entry of ``instance`` with its central difference."""
    _, grads = loss_and_grad(instance.params, instance.batch, instance.hyper, instance.masks)
    if corrupt is not None:
        grads = corrupt(grads)

    max_rel_error = {}
    for name in constants.PARAM_NAMES:
        numeric = finite_difference(instance.params, instance.batch, instance.hyper, name, masks=instance.masks)
        max_rel_error[name] = float(np.max(relative_error(getattr(grads, name), numeric), initial=0.0))

    return InstanceResult(
        seed=instance.seed,
        alpha=instance.hyper.alpha,
        beta=instance.hyper.beta,
        max_rel_error=max_rel_error,
        max_abs_grad=grads.max_abs(),
    )


def run_gradcheck(
    seeds: Iterable[int] = range(5),
    alphas: Iterable[float] = (0.0, 0.1),
    betas: Iterable[float] = (0.0, 0.1),
    *,
    tolerance: float = TOLERANCE,
    corrupt: GradCorruption | None = None,
    strict: bool = False,
) -> GradcheckReport:
    """Checks every (seed, alpha, beta) instance of the grid plus one stationary instance.

    Odd seeds train under dropout, so the masked gradient paths are covered too.

    Parameters
    ----------
    corrupt: Callable
        Applied to every analytic gradient before comparison. Only meant for testing the checker itself.
    strict: bool
        Raise ``GradientCheckFailed`` instead of returning a failed report.
    """
    report = GradcheckReport(tolerance=tolerance)
    for seed, alpha, beta in itertools.product(list(seeds), list(alphas), list(betas)):
        instance = random_instance(seed, alpha, beta, dropout=0.3 if seed % 2 else 0.0)
        result = check_instance(instance, corrupt=corrupt)
        logger.debug(
            "Seed %s alpha %s beta %s: worst relative error %s.", seed, alpha, beta, max(result.max_rel_error.values())
        )
        report.results.append(result)

    stationary = stationary_instance(0)
    _, grads = loss_and_grad(stationary.params, stationary.batch, stationary.hyper)
    if corrupt is not None:
        grads = corrupt(grads)
    report.stationary_max_grad = grads.max_abs()

    if report.passed:
        logger.info("Gradient check passed on %s instances.", len(report.results))
    else:
        logger.error("Gradient check failed, worst relative errors: %s.", report.max_rel_error)
        if strict:
            raise errors.GradientCheckFailed(f"Worst relative errors {report.max_rel_error} exceed {tolerance}.")
    return report
