## segmentation/autodiff/gradcheck.py

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Union

import numpy as np

from segmentation.autodiff.tensor import Tape, Tensor, named_tensors
from segmentation.exceptions import GradientCheckError, PreconditionError

logger = logging.getLogger(__name__)

KINK_TOLERANCE = 1e-4
# Candidates scanned per requested coordinate before giving up on a tensor.
RESAMPLE_FACTOR = 10


@dataclass
class GradientCheckReport:
    """Outcome of a finite-difference check.

    ``checked`` and ``skipped`` count coordinates per tensor name. A
    coordinate is skipped when its forward and backward one-sided
    differences disagree, meaning the +-epsilon step crosses a ReLU or
    max-pool kink where the central difference is not a derivative.
    """

    worst: float = 0.0
    errors: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())


def _evaluate(f: Callable, params) -> float:
    value = f(params)
    return value.item() if isinstance(value, Tensor) else float(value)


def _relative(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_check_report(
    f: Callable,
    params: Union[Mapping[str, Tensor], object],
    epsilon: float = 1e-5,
    max_coords_per_tensor: Optional[int] = None,
    kink_tolerance: float = KINK_TOLERANCE,
) -> GradientCheckReport:
    """Compare analytic gradients against central differences.

    Args:
        f: Deterministic function of ``params`` returning a scalar Tensor.
        params: NetworkParams or a mapping of name -> Tensor.
        epsilon: Perturbation used for (f(t+e) - f(t-e)) / 2e.
        max_coords_per_tensor: Check this many coordinates per tensor,
            taken in order of decreasing analytic gradient magnitude;
            kinked coordinates are replaced by the next candidate. None
            checks every coordinate.
        kink_tolerance: Relative disagreement between the one-sided
            differences above which a coordinate is skipped.

    Raises:
        PreconditionError: If epsilon is not positive.
        GradientCheckError: If repeated evaluations of f disagree.
    """
    if not epsilon > 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")

    tensors = named_tensors(params)
    for tensor in tensors.values():
        tensor.zero_grad()

    with Tape() as tape:
        loss = f(params)
    tape.backward(loss)
    baseline = loss.item()
    analytic = {name: t.grad.reshape(-1).copy() for name, t in tensors.items()}

    repeat = _evaluate(f, params)
    if repeat != baseline:
        raise GradientCheckError(
            f"Objective is not deterministic: {baseline!r} then {repeat!r}"
        )

    report = GradientCheckReport()
    for name, tensor in tensors.items():
        flat = tensor.data.reshape(-1)
        grads = analytic[name]
        order = np.argsort(-np.abs(grads), kind="stable")
        if max_coords_per_tensor is None:
            wanted, candidates = flat.size, order
        else:
            wanted = min(max_coords_per_tensor, flat.size)
            candidates = order[: wanted * RESAMPLE_FACTOR]

        tensor_worst, checked, skipped = 0.0, 0, 0
        for coord in candidates:
            if checked == wanted:
                break
            original = flat[coord]
            flat[coord] = original + epsilon
            plus = _evaluate(f, params)
            flat[coord] = original - epsilon
            minus = _evaluate(f, params)
            flat[coord] = original

            forward_diff = (plus - baseline) / epsilon
            backward_diff = (baseline - minus) / epsilon
            if _relative(forward_diff, backward_diff) > kink_tolerance:
                skipped += 1
                continue

            numeric = (plus - minus) / (2.0 * epsilon)
            tensor_worst = max(tensor_worst, _relative(grads[coord], numeric))
            checked += 1

        if checked < wanted:
            logger.warning(f"gradcheck {name}: only {checked} of {wanted} coords away from kinks")
        logger.debug(
            f"gradcheck {name}: {checked} coords, {skipped} skipped, "
            f"max rel err {tensor_worst:.3e}"
        )
        report.errors[name] = tensor_worst
        report.checked[name] = checked
        report.skipped[name] = skipped
        report.worst = max(report.worst, tensor_worst)

    restored = _evaluate(f, params)
    if restored != baseline:
        raise GradientCheckError("Parameters were not restored after the check")
    if report.total_skipped:
        logger.info(f"gradcheck skipped {report.total_skipped} coords at kinks")
    return report


def finite_difference_check(
    f: Callable,
    params: Union[Mapping[str, Tensor], object],
    epsilon: float = 1e-5,
    max_coords_per_tensor: Optional[int] = None,
) -> float:
    """Maximum relative error |a - n| / max(|a|, |n|, 1e-8) over checked coordinates."""
    return gradient_check_report(f, params, epsilon, max_coords_per_tensor).worst
