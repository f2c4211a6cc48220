"""Ground-truth SEM construction, interventions, equilibration, datasets.

Observations are equilibria of x = f(x) + noise for a contractive f.
Weight layout matches the adjacency convention: ``W[j, i]`` is the weight
of edge j -> i, so a mechanism evaluates column-wise as ``f(X) = act(X @ W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .graphs import DirectedGraph
from .rng import NoiseFamily, Rng, sample_noise

__all__ = [
    "MechanismKind",
    "InterventionKind",
    "InterventionSpec",
    "GroundTruthSem",
    "Dataset",
    "LinearMechanism",
    "TanhMechanism",
    "ScaledMechanism",
    "ZeroMechanism",
    "CombinedMechanism",
    "PreconditionedMechanism",
    "spectral_norm",
    "rescale_to_lipschitz",
    "sample_edge_weights",
    "make_sem",
    "apply_intervention",
    "solve_fixed_point",
    "generate_dataset",
    "precondition",
    "single_node_design",
    "FixedPointError",
]


class FixedPointError(RuntimeError):
    """Equilibration failed to converge (contractivity likely violated)."""


class MechanismKind(str, Enum):
    LINEAR = "linear"
    TANH = "nonlinear"


class InterventionKind(str, Enum):
    SHIFT = "shift"
    SCALE = "scale"
    NOISY = "noisy"
    HARD = "hard"
    NONE = "none"


# --- mechanisms -----------------------------------------------------------


class LinearMechanism:
    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        return np.broadcast_to(self.weights.T, (n, *self.weights.shape)).copy()


class TanhMechanism:
    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.weights)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        f = np.tanh(x @ self.weights)
        return (1.0 - f * f)[:, :, None] * self.weights.T[None, :, :]


class ScaledMechanism:
    """alpha * f; with |alpha| <= 1 the combined intervened map stays contractive."""

    def __init__(self, inner, alpha: float):
        self.inner = inner
        self.alpha = float(alpha)

    def __call__(self, x):
        return self.alpha * self.inner(x)

    def jacobian(self, x):
        return self.alpha * self.inner.jacobian(x)


class ZeroMechanism:
    def __init__(self, d: int):
        self.d = d

    def __call__(self, x):
        return np.zeros_like(x)

    def jacobian(self, x):
        return np.zeros((x.shape[0], self.d, self.d))


class CombinedMechanism:
    """Row-mix of the observational and intervened mechanisms.

    ``observed`` is the diagonal of U_k: 1 where the coordinate keeps the
    observational mechanism, 0 where the intervened one applies.
    """

    def __init__(self, base, tilde, observed: np.ndarray):
        self.base = base
        self.tilde = tilde
        self.observed = np.asarray(observed, dtype=np.float64)

    def __call__(self, x):
        return self.observed * self.base(x) + (1.0 - self.observed) * self.tilde(x)

    def jacobian(self, x):
        u = self.observed[None, :, None]
        return u * self.base.jacobian(x) + (1.0 - u) * self.tilde.jacobian(x)


class PreconditionedMechanism:
    """Diagonal similarity transform: lam^-1 o f o lam."""

    def __init__(self, inner, lam: np.ndarray):
        lam = np.asarray(lam, dtype=np.float64)
        if np.any(lam <= 0):
            raise ValueError("preconditioner diagonal must be positive")
        self.inner = inner
        self.lam = lam

    def __call__(self, x):
        return self.inner(x * self.lam) / self.lam

    def jacobian(self, x):
        j = self.inner.jacobian(x * self.lam)
        return j * (self.lam[None, None, :] / self.lam[None, :, None])


def precondition(mechanism, lam: np.ndarray) -> PreconditionedMechanism:
    return PreconditionedMechanism(mechanism, lam)


# --- spectral rescaling ----------------------------------------------------


def spectral_norm(w: np.ndarray, rtol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on W^T W."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite entries in weight matrix")
    d = w.shape[1]
    # fixed pseudo-random start vector: deterministic across calls and
    # almost surely not orthogonal to the top singular direction
    v = np.random.Generator(np.random.PCG64(202406)).standard_normal(d)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v_new = w.T @ (u / nu)
        sigma_new = np.linalg.norm(v_new)
        if sigma_new == 0.0:
            return 0.0
        v = v_new / sigma_new
        if abs(sigma_new - sigma) <= rtol * sigma_new:
            return float(sigma_new)
        sigma = sigma_new
    return float(sigma)


def rescale_to_lipschitz(w: np.ndarray, lipschitz: float) -> np.ndarray:
    """Project W onto {spectral norm <= lipschitz}; no-op when already inside."""
    if not 0.0 < lipschitz < 1.0:
        raise ValueError(f"Lipschitz bound must lie in (0, 1), got {lipschitz}")
    w = np.asarray(w, dtype=np.float64)
    # a second pass absorbs power-iteration estimation error
    for _ in range(4):
        sigma = spectral_norm(w, rtol=1e-7)
        if sigma <= lipschitz * (1.0 + 1e-9):
            break
        w = w * (lipschitz / sigma)
    return w


# --- ground truth ----------------------------------------------------------


def sample_edge_weights(graph: DirectedGraph, rng: Rng) -> np.ndarray:
    """Signed magnitudes Unif((-0.9,-0.2) U (0.2,0.9)) on graph edges."""
    d = graph.d
    mag = rng.uniform(0.2, 0.9, (d, d))
    sign = rng.choice_sign((d, d))
    return mag * sign * graph.adjacency


@dataclass(frozen=True)
class GroundTruthSem:
    graph: DirectedGraph
    kind: MechanismKind
    weights: np.ndarray
    lipschitz: float
    noise: NoiseFamily

    def __post_init__(self):
        if np.any((self.weights != 0) & (self.graph.adjacency == 0)):
            raise ValueError("weights present outside graph edges")
        if not 0.0 < self.lipschitz < 1.0:
            raise ValueError("lipschitz bound must lie in (0, 1)")

    @property
    def d(self) -> int:
        return self.graph.d

    def mechanism(self):
        if self.kind is MechanismKind.LINEAR:
            return LinearMechanism(self.weights)
        return TanhMechanism(self.weights)


def make_sem(
    graph: DirectedGraph,
    kind: MechanismKind | str,
    noise: NoiseFamily,
    rng: Rng,
    lipschitz: float = 0.9,
) -> GroundTruthSem:
    w = sample_edge_weights(graph, rng.substream("edge-weights"))
    w = rescale_to_lipschitz(w, lipschitz)
    return GroundTruthSem(graph, MechanismKind(kind), w, lipschitz, noise)


# --- interventions ----------------------------------------------------------


def single_node_design(d: int) -> tuple[tuple[int, ...], ...]:
    """One experiment per node, each intervening on exactly that node."""
    return tuple((i,) for i in range(d))


@dataclass(frozen=True)
class InterventionSpec:
    kind: InterventionKind
    targets: tuple[tuple[int, ...], ...]
    shift: float = 2.0
    scale: float = 2.0
    alpha: float = -1.0
    hard_shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", InterventionKind(self.kind))
        object.__setattr__(
            self, "targets", tuple(tuple(int(t) for t in ts) for ts in self.targets)
        )
        if self.kind is InterventionKind.NOISY and abs(self.alpha) > 1.0:
            raise ValueError(
                f"|alpha| <= 1 required for noisy-function interventions, got {self.alpha}"
            )

    @property
    def n_experiments(self) -> int:
        return len(self.targets)

    def target_matrix(self, d: int) -> np.ndarray:
        """(K, d) binary, 1 = intervened."""
        t = np.zeros((len(self.targets), d), dtype=np.int8)
        for k, ts in enumerate(self.targets):
            for i in ts:
                if not 0 <= i < d:
                    raise ValueError(f"target {i} outside node range")
                t[k, i] = 1
        return t


def apply_intervention(sem: GroundTruthSem, spec: InterventionSpec, k: int):
    """Mechanism f^(I_k) and the experiment's noise generator.

    The noise generator draws one exogenous vector per sample and applies
    the configured transform on the target coordinates (shift adds, scale
    multiplies the draw, hard adds its own shift; noisy-function leaves
    the noise alone and alters the mechanism instead).
    """
    d = sem.d
    targets = spec.targets[k]
    observed = np.ones(d)
    observed[list(targets)] = 0.0

    base = sem.mechanism()
    if spec.kind is InterventionKind.NOISY:
        tilde = ScaledMechanism(base, spec.alpha)
    elif spec.kind is InterventionKind.HARD:
        tilde = ZeroMechanism(d)
    else:
        tilde = base
    mech = CombinedMechanism(base, tilde, observed) if targets else base

    def draw_noise(n: int, rng: Rng) -> np.ndarray:
        eps = sample_noise(sem.noise, (n, d), rng)
        if targets and spec.kind is not InterventionKind.NONE:
            idx = list(targets)
            if spec.kind is InterventionKind.SHIFT:
                eps[:, idx] += spec.shift
            elif spec.kind is InterventionKind.SCALE:
                eps[:, idx] *= spec.scale
            elif spec.kind is InterventionKind.HARD:
                eps[:, idx] += spec.hard_shift
        return eps

    return mech, draw_noise


# --- equilibration -----------------------------------------------------------


def solve_fixed_point(
    mechanism, eta: np.ndarray, tol: float = 1e-10, max_iter: int = 1000
) -> np.ndarray:
    """Banach iteration x <- f(x) + eta from x = 0, batched over rows."""
    x = np.zeros_like(eta)
    for _ in range(max_iter):
        x_next = mechanism(x) + eta
        if np.max(np.abs(x_next - x)) <= tol:
            return x_next
        x = x_next
    raise FixedPointError(
        f"no fixed point within {max_iter} iterations (tol={tol}); "
        "mechanism may not be contractive"
    )


# --- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray  # (N, d)
    experiment: np.ndarray  # (N,) int
    n_experiments: int
    truth_graph: DirectedGraph | None = None
    truth_targets: np.ndarray | None = None  # (K, d), 1 = intervened

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.experiment = np.asarray(self.experiment, dtype=np.int64)
        if self.x.shape[0] != self.experiment.shape[0]:
            raise ValueError("row count mismatch between x and experiment tags")
        if self.x.shape[0] and (
            self.experiment.min() < 0 or self.experiment.max() >= self.n_experiments
        ):
            raise ValueError("experiment tag outside [0, K)")
        if self.truth_targets is not None:
            self.truth_targets = np.asarray(self.truth_targets, dtype=np.int8)
            if self.truth_targets.shape[0] != self.n_experiments:
                raise ValueError("target matrix must have K rows")

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n(self) -> int:
        return self.x.shape[0]


def generate_dataset(
    sem: GroundTruthSem,
    spec: InterventionSpec,
    n_per_experiment: int,
    rng: Rng,
    tol: float = 1e-10,
    max_iter: int = 1000,
    workers: int = 1,
) -> Dataset:
    """Equilibrium samples for every experiment, tagged with its index.

    Each experiment consumes its own named substream, so results are
    independent of generation order (and of ``workers``).
    """
    k_count = spec.n_experiments
    targets = spec.target_matrix(sem.d)

    def one_experiment(k: int) -> np.ndarray:
        mech, draw_noise = apply_intervention(sem, spec, k)
        eta = draw_noise(n_per_experiment, rng.substream(f"data-gen/{k}"))
        return solve_fixed_point(mech, eta, tol=tol, max_iter=max_iter)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(one_experiment, range(k_count)))
    else:
        blocks = [one_experiment(k) for k in range(k_count)]

    x = np.concatenate(blocks, axis=0)
    tags = np.repeat(np.arange(k_count), n_per_experiment)
    return Dataset(
        x=x,
        experiment=tags,
        n_experiments=k_count,
        truth_graph=sem.graph,
        truth_targets=targets,
    )
