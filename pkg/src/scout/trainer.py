"""Minibatch score maximization: shuffle, sample masks, backprop with
Adam, then project both mechanisms back to the Lipschitz ball.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import spline
from .autodiff import Adam, Tape
from .metrics import graph_recovery, target_recovery
from .rng import Rng
from .simulator import Dataset, rescale_to_lipschitz

__all__ = ["TrainConfig", "TrainResult", "TrainingDiverged", "train", "rescale_model"]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite checkpoint."""

    def __init__(self, message: str, last_good_state: mdl.ModelState, epoch: int):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.epoch = epoch


@dataclass
class TrainConfig:
    lambda_g: float = 0.001
    lambda_i: float = 0.01
    lr: float = 0.01
    batch_size: int = 512
    epochs: int = 200
    tau_g: float = 1.0
    tau_i: float = 0.5
    poisson_mean: float = 4.0
    lipschitz: float = 0.9
    logdet_mode: str = "series"
    seed: int = 0
    n_bins: int = spline.N_BINS
    tail_bound: float = spline.TAIL_BOUND
    use_preconditioner: bool = False
    # debug mode: per-op finiteness checks plus a post-step spectral-norm
    # assertion on both mechanisms
    check_finite: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if min(self.lr, self.tau_g, self.tau_i, self.poisson_mean) <= 0:
            raise ValueError("rates, temperatures and the Poisson mean must be positive")
        if self.lambda_g < 0 or self.lambda_i < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.logdet_mode not in ("series", "exact"):
            raise ValueError(f"unknown logdet mode {self.logdet_mode!r}")
        if not 0 < self.lipschitz < 1:
            raise ValueError("lipschitz bound must lie in (0, 1)")


@dataclass
class TrainResult:
    state: mdl.ModelState
    metrics: list[dict] = field(default_factory=list)

    def metrics_csv(self) -> str:
        header = "epoch,mean_loss,graph_auprc,target_auprc,wallclock_s"
        rows = [header]
        for row in self.metrics:
            rows.append(
                f"{row['epoch']},{row['mean_loss']:.17g},"
                f"{_fmt_metric(row['graph_auprc'])},{_fmt_metric(row['target_auprc'])},"
                f"{row['wallclock_s']:.3f}"
            )
        return "\n".join(rows) + "\n"


def _fmt_metric(v) -> str:
    return "nan" if v is None else f"{v:.17g}"


def rescale_model(state: mdl.ModelState, lipschitz: float = 0.9) -> None:
    """Project the raw weight matrices of both mechanisms in place."""
    state.theta.value = rescale_to_lipschitz(state.theta.value, lipschitz)
    state.theta_tilde.value = rescale_to_lipschitz(state.theta_tilde.value, lipschitz)


def _assert_contractive(state: mdl.ModelState, lipschitz: float) -> None:
    worst = max(
        np.linalg.svd(state.theta.value, compute_uv=False)[0],
        np.linalg.svd(state.theta_tilde.value, compute_uv=False)[0],
    )
    if worst > lipschitz * (1 + 1e-5):
        raise FloatingPointError(
            f"post-step spectral norm {worst} exceeds the Lipschitz bound {lipschitz}"
        )


def train(
    dataset: Dataset,
    config: TrainConfig,
    known_targets: np.ndarray | None = None,
    init_state: mdl.ModelState | None = None,
    step_callback=None,
    epoch_callback=None,
) -> TrainResult:
    """Run the training loop; deterministic for a fixed config seed.

    When the dataset carries ground truth, per-epoch AUPRC numbers are
    logged next to the mean loss. ``step_callback(state)`` fires after
    every optimizer step (used by the contractivity property test);
    ``epoch_callback(state, epoch)`` after every epoch (checkpoint
    cadence).
    """
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    rng = Rng(config.seed)
    if init_state is None:
        frozen = None if known_targets is None else mdl.known_target_psi(known_targets)
        state = mdl.init_state(
            dataset.d,
            dataset.n_experiments,
            rng.substream("init"),
            n_bins=config.n_bins,
            tail_bound=config.tail_bound,
            lipschitz=config.lipschitz,
            use_preconditioner=config.use_preconditioner,
            frozen_psi=frozen,
        )
    else:
        state = init_state
    mask_rng = rng.substream("mask-sampling")
    est_rng = rng.substream("estimator")
    shuffle_rng = rng.substream("shuffle")

    params = state.params()
    opt = Adam(params, lr=config.lr)
    n_batches = dataset.n // config.batch_size
    if config.epochs > 0 and n_batches == 0:
        raise ValueError(
            f"batch size {config.batch_size} exceeds dataset size {dataset.n}; "
            "no full batch to train on (partial batches are dropped)"
        )

    result = TrainResult(state=state)
    last_good = state.copy()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(dataset.n)
        losses = []
        try:
            for b in range(n_batches):
                rows = perm[b * config.batch_size : (b + 1) * config.batch_size]
                with Tape(check_finite=config.check_finite) as tape:
                    masks = mdl.sample_masks(state, mask_rng, config.tau_g, config.tau_i)
                    loss = mdl.loss_fn(
                        state,
                        dataset.x[rows],
                        dataset.experiment[rows],
                        masks,
                        lambda_g=config.lambda_g,
                        lambda_i=config.lambda_i,
                        mode=config.logdet_mode,
                        est_rng=est_rng,
                        poisson_mean=config.poisson_mean,
                    )
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, batch {b}"
                    )
                grads = tape.gradients(loss, params)
                opt.step(grads)
                rescale_model(state, config.lipschitz)
                if config.check_finite:
                    _assert_contractive(state, config.lipschitz)
                losses.append(loss_value)
                if step_callback is not None:
                    step_callback(state)
        except FloatingPointError as err:
            raise TrainingDiverged(str(err), last_good, epoch) from err

        row = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "graph_auprc": None,
            "target_auprc": None,
            "wallclock_s": time.perf_counter() - t0,
        }
        if dataset.truth_graph is not None:
            row["graph_auprc"] = graph_recovery(
                mdl.edge_probabilities(state), dataset.truth_graph
            )
        if dataset.truth_targets is not None:
            row["target_auprc"] = target_recovery(
                mdl.intervention_probabilities(state), dataset.truth_targets
            )
        result.metrics.append(row)
        last_good = state.copy()
        if epoch_callback is not None:
            epoch_callback(state, epoch)
    return result
