## segmentation/trainer/fit.py

import logging
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from segmentation.autodiff import Tape, Tensor, add, sigmoid
from segmentation.exceptions import DivergenceError, PreconditionError, ShapeError
from segmentation.network import BackboneConfig, NetworkParams, build_network, forward
from segmentation.trainer.loss import cross_entropy_loss
from segmentation.trainer.optimizer import SgdConfig, TrainState, sgd_step

logger = logging.getLogger(__name__)

SUMMARY_EVERY = 50


@dataclass(eq=False)
class TrainSample:
    """One (image, truth) pair; image is (3, H, W) RGB in [0, 1], truth is (H, W)."""

    image: np.ndarray
    truth: np.ndarray
    stem: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError("image shape", "(3, H, W)", self.image.shape, "TrainSample")
        if self.truth.shape != self.image.shape[1:]:
            raise ShapeError("truth size", self.image.shape[1:], self.truth.shape, "TrainSample")
        if self.truth.min() < 0.0 or self.truth.max() > 1.0:
            raise PreconditionError(f"truth values of '{self.stem}' must lie in [0, 1]")

    def image_tensor(self) -> Tensor:
        return Tensor(self.image[None])


def _all_finite(params: NetworkParams) -> bool:
    return all(np.isfinite(t.data).all() for _, t in params.tensors())


def fit(
    samples: Sequence[TrainSample],
    config: SgdConfig,
    net_config: BackboneConfig,
    initial_params: Optional[NetworkParams] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
) -> TrainState:
    """Batch-1 SGD over ``samples`` visited cyclically in the given order.

    The loss is applied to the final fused probability; with
    ``config.aux_loss`` the cross-entropy of each sigmoid(fused map) is added.

    Raises:
        DivergenceError: loss or parameters stop being finite.
    """
    if not samples:
        raise PreconditionError("fit needs at least one sample")

    if initial_params is not None:
        params = initial_params.copy()
    else:
        params = build_network(net_config, config.seed)
    state = TrainState.start(params)

    log_file = None
    if log_path:
        directory = os.path.dirname(os.fspath(log_path))
        if directory:
            os.makedirs(directory, exist_ok=True)
        log_file = open(log_path, "w")

    logger.info(
        f"Training on {len(samples)} samples for {config.iterations} iterations, "
        f"lr={config.learning_rate}, momentum={config.momentum}, wd={config.weight_decay}"
    )

    try:
        for it in tqdm(range(config.iterations), desc="train", disable=not progress):
            sample = samples[it % len(samples)]
            params.zero_grad()

            with Tape() as tape:
                outputs = forward(params, sample.image_tensor())
                loss = cross_entropy_loss(outputs.probability, sample.truth)
                if config.aux_loss:
                    for fused in outputs.fused:
                        loss = add(loss, cross_entropy_loss(sigmoid(fused), sample.truth))

            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(it + 1, value)

            tape.backward(loss)
            sgd_step(state, {name: t.grad for name, t in params.tensors()}, config)
            state.loss_history.append(value)
            if not _all_finite(params):
                raise DivergenceError(it + 1, value)

            if log_file is not None:
                log_file.write(f"{it + 1}\t{value!r}\n")
            logger.debug(f"iter {it + 1} loss {value:.6f}")
            if (it + 1) % SUMMARY_EVERY == 0:
                logger.info(f"iter {it + 1}/{config.iterations} loss {value:.4f}")
    finally:
        if log_file is not None:
            log_file.close()

    if state.loss_history:
        logger.info(
            f"Training finished: loss {state.loss_history[0]:.4f} -> {state.loss_history[-1]:.4f}"
        )
    return state
