"""The interventional likelihood: masked tanh mechanisms, spline noise
transforms, Gumbel-sigmoid masks, and the Jacobian log-determinant.

Per sample x from experiment k the log-density is

    sum_i log N(z_i; 0, 1) + sum_i log|g'(e_i)| + log|det(I - J_f(x))|

with residual e = x - f^(k)(x), f^(k) mixing the observational and
intervened mechanisms by the experiment's target row, z the
spline-transformed residual (observational spline on observed
coordinates, intervened spline on targeted ones), and the log-det term
either an unbiased Hutchinson/power-series estimate with a Poisson
russian-roulette cutoff or an exact dense evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import spline
from .autodiff import Tensor
from .rng import Rng, sample_logistic, sample_poisson
from .simulator import rescale_to_lipschitz

__all__ = [
    "ModelState",
    "MaskSample",
    "init_state",
    "sample_masks",
    "threshold_masks",
    "known_target_psi",
    "masked_mechanism",
    "log_density_rows",
    "loss_fn",
    "logdet_series_estimate",
    "logdet_series_batch",
    "exact_logdet",
    "edge_probabilities",
    "intervention_probabilities",
    "state_to_arrays",
    "state_from_arrays",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_FROZEN_LOGIT = 30.0


@dataclass
class ModelState:
    """All learnable quantities; psi may be frozen in known-target mode."""

    theta: Tensor
    theta_tilde: Tensor
    sw_w: Tensor
    sw_h: Tensor
    sw_d: Tensor
    si_w: Tensor
    si_h: Tensor
    si_d: Tensor
    phi: Tensor
    psi: Tensor
    log_lam: Tensor | None
    n_bins: int = spline.N_BINS
    tail_bound: float = spline.TAIL_BOUND

    @property
    def d(self) -> int:
        return self.theta.value.shape[0]

    @property
    def n_experiments(self) -> int:
        return self.psi.value.shape[0]

    def params(self) -> list[Tensor]:
        named = [
            self.theta,
            self.theta_tilde,
            self.sw_w,
            self.sw_h,
            self.sw_d,
            self.si_w,
            self.si_h,
            self.si_d,
            self.phi,
            self.psi,
        ]
        if self.log_lam is not None:
            named.append(self.log_lam)
        return [p for p in named if p.requires_grad]

    def copy(self) -> "ModelState":
        def dup(t: Tensor | None):
            if t is None:
                return None
            c = Tensor(t.value.copy(), requires_grad=t.requires_grad)
            return c

        return ModelState(
            dup(self.theta),
            dup(self.theta_tilde),
            dup(self.sw_w),
            dup(self.sw_h),
            dup(self.sw_d),
            dup(self.si_w),
            dup(self.si_h),
            dup(self.si_d),
            dup(self.phi),
            dup(self.psi),
            dup(self.log_lam),
            self.n_bins,
            self.tail_bound,
        )


def known_target_psi(truth_targets: np.ndarray) -> np.ndarray:
    """Frozen target logits from a (K, d) matrix with 1 = intervened."""
    t = np.asarray(truth_targets)
    return np.where(t > 0, -_FROZEN_LOGIT, _FROZEN_LOGIT).astype(np.float64)


def init_state(
    d: int,
    n_experiments: int,
    rng: Rng,
    n_bins: int = spline.N_BINS,
    tail_bound: float = spline.TAIL_BOUND,
    lipschitz: float = 0.9,
    use_preconditioner: bool = False,
    frozen_psi: np.ndarray | None = None,
) -> ModelState:
    """Symmetric small init: weights ~ U(-0.1, 0.1) rescaled, logits 0,
    identity splines, unit preconditioner."""
    w = rescale_to_lipschitz(rng.uniform(-0.1, 0.1, (d, d)), lipschitz)
    wt = rescale_to_lipschitz(rng.uniform(-0.1, 0.1, (d, d)), lipschitz)
    raw = spline.identity_raw_params(d, n_bins)
    tw, th, td = spline.split_raw(raw, n_bins)

    def param(x):
        return Tensor(np.array(x, dtype=np.float64), requires_grad=True)

    if frozen_psi is not None:
        if frozen_psi.shape != (n_experiments, d):
            raise ValueError("frozen psi must be (K, d)")
        psi = Tensor(frozen_psi.astype(np.float64), requires_grad=False)
    else:
        psi = param(np.zeros((n_experiments, d)))

    return ModelState(
        theta=param(w),
        theta_tilde=param(wt),
        sw_w=param(tw),
        sw_h=param(th),
        sw_d=param(td),
        si_w=param(tw),
        si_h=param(th),
        si_d=param(td),
        phi=param(np.zeros((d, d))),
        psi=psi,
        log_lam=param(np.zeros(d)) if use_preconditioner else None,
        n_bins=n_bins,
        tail_bound=tail_bound,
    )


# --- binary masks -----------------------------------------------------------


@dataclass
class MaskSample:
    """Hard binary masks (forward) paired with their soft relaxations."""

    m: Tensor  # (d, d) straight-through adjacency sample, zero diagonal
    t: Tensor  # (K, d) straight-through target sample, 1 = observed
    m_soft: Tensor
    t_soft: Tensor
    m_hard: np.ndarray
    t_hard: np.ndarray


def _offdiag(d: int) -> np.ndarray:
    return 1.0 - np.eye(d)


def sample_masks(
    state: ModelState, rng: Rng, tau_g: float = 1.0, tau_i: float = 0.5
) -> MaskSample:
    """Gumbel-sigmoid sampling with straight-through pairing.

    Per entry: soft = sigmoid((logit + logistic noise) / tau),
    hard = 1[soft > 0.5]. The adjacency diagonal is forced to zero
    (self-loops excluded).
    """
    if tau_g <= 0 or tau_i <= 0:
        raise ValueError("temperatures must be positive")
    d = state.d
    k = state.n_experiments
    lg = sample_logistic(rng, (d, d))
    lt = sample_logistic(rng, (k, d))
    m_soft = ad.sigmoid((state.phi + lg) * (1.0 / tau_g)) * _offdiag(d)
    t_soft = ad.sigmoid((state.psi + lt) * (1.0 / tau_i))
    m_hard = (m_soft.value > 0.5).astype(np.float64)
    t_hard = (t_soft.value > 0.5).astype(np.float64)
    return MaskSample(
        m=ad.straight_through(m_soft, m_hard),
        t=ad.straight_through(t_soft, t_hard),
        m_soft=m_soft,
        t_soft=t_soft,
        m_hard=m_hard,
        t_hard=t_hard,
    )


def threshold_masks(state: ModelState) -> MaskSample:
    """Deterministic masks at probability 0.5 (evaluation mode)."""
    m_hard = (ad._sigmoid_np(state.phi.value) > 0.5).astype(np.float64) * _offdiag(
        state.d
    )
    t_hard = (ad._sigmoid_np(state.psi.value) > 0.5).astype(np.float64)
    m = ad.constant(m_hard)
    t = ad.constant(t_hard)
    return MaskSample(m=m, t=t, m_soft=m, t_soft=t, m_hard=m_hard, t_hard=t_hard)


# --- mechanisms on the tape ---------------------------------------------------


def masked_mechanism(x: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """tanh((M ⊙ W)^T x) per row; output i depends only on column i of M."""
    a = np.asarray(mask, dtype=np.float64) * np.asarray(weights, dtype=np.float64)
    return np.tanh(np.asarray(x, dtype=np.float64) @ a)


def _tanh_layer(x_const: np.ndarray, a: Tensor, lam: Tensor | None, inv_lam: Tensor | None):
    """Returns (f(x), jvp, dense_jacobian) for f = lam^-1 tanh(A^T (lam x))."""
    xt = ad.constant(x_const)
    act = (xt * lam) @ a if lam is not None else xt @ a
    f = ad.tanh(act)
    tp = 1.0 - f * f  # tanh' at the activations
    out = f * inv_lam if lam is not None else f

    def jvp(v: Tensor) -> Tensor:
        u = v * lam if lam is not None else v
        r = tp * (u @ a)
        return r * inv_lam if lam is not None else r

    def dense_jac() -> Tensor:
        b, d = x_const.shape
        j = ad.reshape(tp, (b, d, 1)) * ad.reshape(ad.transpose_last2(a), (1, d, d))
        if lam is not None:
            j = j * (ad.reshape(inv_lam, (1, d, 1)) * ad.reshape(lam, (1, 1, d)))
        return j

    return out, jvp, dense_jac


def _poisson_survival(n_max: int, mean: float) -> np.ndarray:
    """Inclusion probability of series term m = 1..n_max (index m-1).

    The cutoff is max(N, 1) with N ~ Poisson(mean), so term 1 is always
    included (probability 1) and term m >= 2 with probability P(N >= m).
    Reweighting by anything else would bias the estimator by the guard's
    excess mass on term 1.
    """
    surv = stats.poisson.sf(np.arange(n_max), mean)
    if n_max >= 1:
        surv[0] = 1.0
    return surv


# --- log-density ---------------------------------------------------------------


def log_density_rows(
    state: ModelState,
    x: np.ndarray,
    experiments: np.ndarray,
    masks: MaskSample,
    mode: str = "series",
    est_rng: Rng | None = None,
    poisson_mean: float = 4.0,
    est_draws: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Per-row interventional log-density, shape (B,). Differentiable.

    ``est_draws`` optionally injects frozen series randomness as
    ``(w, cutoffs)`` with shapes (B, d) and (B,); used by gradient checks.
    """
    x = np.asarray(x, dtype=np.float64)
    kvec = np.asarray(experiments, dtype=np.int64)
    b, d = x.shape

    lam = inv_lam = None
    if state.log_lam is not None:
        lam = ad.exp(state.log_lam)
        inv_lam = ad.exp(-state.log_lam)

    a_obs = masks.m * state.theta
    a_int = masks.m * state.theta_tilde
    f_obs, jvp_obs, dj_obs = _tanh_layer(x, a_obs, lam, inv_lam)
    f_int, jvp_int, dj_int = _tanh_layer(x, a_int, lam, inv_lam)

    u = ad.gather(masks.t, kvec)  # (B, d); 1 = observed mechanism/spline
    one_m_u = 1.0 - u
    f_k = u * f_obs + one_m_u * f_int
    resid = ad.constant(x) - f_k

    z_o, ld_o = spline.rq_forward(
        resid, state.sw_w, state.sw_h, state.sw_d, state.n_bins, state.tail_bound
    )
    z_i, ld_i = spline.rq_forward(
        resid, state.si_w, state.si_h, state.si_d, state.n_bins, state.tail_bound
    )
    z = u * z_o + one_m_u * z_i
    ld_spline = ad.tsum(u * ld_o + one_m_u * ld_i, axis=1)
    base = ad.tsum(-0.5 * (z * z), axis=1) - 0.5 * d * _LOG_2PI

    if mode == "exact":
        j = ad.reshape(u, (b, d, 1)) * dj_obs() + ad.reshape(one_m_u, (b, d, 1)) * dj_int()
        ld_jac = ad.logdet(ad.constant(np.eye(d)) - j)
    elif mode == "series":
        if est_draws is not None:
            w, cuts = est_draws
            cuts = np.maximum(np.asarray(cuts, dtype=np.int64), 1)
        elif est_rng is not None:
            w = est_rng.normal(size=(b, d))
            cuts = np.maximum(sample_poisson(poisson_mean, est_rng, b), 1)
        else:
            raise ValueError("series mode needs an estimator rng or frozen draws")
        n_max = int(cuts.max())
        survival = _poisson_survival(n_max, poisson_mean)
        w_const = ad.constant(w)
        v = w_const
        ld_jac = None
        for m in range(1, n_max + 1):
            v = u * jvp_obs(v) + one_m_u * jvp_int(v)
            s_m = ad.tsum(w_const * v, axis=1)
            coeff = -(cuts >= m).astype(np.float64) / (m * survival[m - 1])
            term = s_m * coeff
            ld_jac = term if ld_jac is None else ld_jac + term
    else:
        raise ValueError(f"unknown logdet mode {mode!r}")

    return base + ld_spline + ld_jac


def loss_fn(
    state: ModelState,
    x: np.ndarray,
    experiments: np.ndarray,
    masks: MaskSample,
    lambda_g: float,
    lambda_i: float,
    mode: str = "series",
    est_rng: Rng | None = None,
    poisson_mean: float = 4.0,
) -> Tensor:
    """Mean negative log-density plus closed-form sparsity penalties.

    The graph penalty is the expected number of edges, sum of
    sigmoid(phi) off the diagonal; the target penalty is the expected
    number of intervened entries, sum of 1 - sigmoid(psi).
    """
    ld = log_density_rows(
        state, x, experiments, masks, mode=mode, est_rng=est_rng, poisson_mean=poisson_mean
    )
    nll = -ad.tmean(ld)
    graph_pen = ad.tsum(ad.sigmoid(state.phi) * _offdiag(state.d))
    target_pen = ad.tsum(1.0 - ad.sigmoid(state.psi))
    return nll + lambda_g * graph_pen + lambda_i * target_pen


# --- log-determinant estimators -------------------------------------------------


def _as_jvp(j):
    if callable(j):
        return j
    j = np.asarray(j, dtype=np.float64)
    return lambda v: j @ v


def logdet_series_estimate(jvp, d: int, poisson_mean: float, rng: Rng) -> float:
    """One unbiased draw of log|det(I - J)| via the reweighted power series.

    Draws w ~ N(0, I) and a Poisson cutoff n (guarded to >= 1), then
    returns -sum_{m<=n} w^T J^m w / (m * P(N >= m)).
    """
    apply_j = _as_jvp(jvp)
    w = rng.normal(size=d)
    n = max(int(sample_poisson(poisson_mean, rng)), 1)
    survival = _poisson_survival(n, poisson_mean)
    v = w
    acc = 0.0
    for m in range(1, n + 1):
        v = apply_j(v)
        acc += float(w @ v) / (m * survival[m - 1])
    return -acc


def logdet_series_batch(
    j: np.ndarray, n_draws: int, poisson_mean: float, rng: Rng
) -> np.ndarray:
    """Vectorized draws of the series estimator for a constant Jacobian."""
    j = np.asarray(j, dtype=np.float64)
    d = j.shape[0]
    w = rng.normal(size=(n_draws, d))
    cuts = np.maximum(sample_poisson(poisson_mean, rng, n_draws), 1)
    n_max = int(cuts.max())
    survival = _poisson_survival(n_max, poisson_mean)
    v = w
    acc = np.zeros(n_draws)
    for m in range(1, n_max + 1):
        v = v @ j.T
        s_m = np.einsum("ij,ij->i", w, v)
        acc += np.where(cuts >= m, s_m / (m * survival[m - 1]), 0.0)
    return -acc


def exact_logdet(j: np.ndarray) -> float:
    """log|det(I - J)| by pivoted LU; oracle for the series estimator."""
    j = np.asarray(j, dtype=np.float64)
    if j.shape[0] > 64:
        raise ValueError("exact log-det oracle is limited to d <= 64")
    sign, ld = np.linalg.slogdet(np.eye(j.shape[0]) - j)
    if sign == 0 or not np.isfinite(ld):
        raise np.linalg.LinAlgError("singular matrix in exact_logdet")
    return float(ld)


# --- read-outs --------------------------------------------------------------------


def edge_probabilities(state: ModelState) -> np.ndarray:
    return ad._sigmoid_np(state.phi.value) * _offdiag(state.d)


def intervention_probabilities(state: ModelState) -> np.ndarray:
    return 1.0 - ad._sigmoid_np(state.psi.value)


# --- checkpoint arrays --------------------------------------------------------------


def state_to_arrays(state: ModelState) -> dict:
    return {
        "theta": state.theta.value,
        "theta_tilde": state.theta_tilde.value,
        "spline_obs": spline.merge_raw(
            state.sw_w.value, state.sw_h.value, state.sw_d.value
        ),
        "spline_int": spline.merge_raw(
            state.si_w.value, state.si_h.value, state.si_d.value
        ),
        "phi": state.phi.value,
        "psi": state.psi.value,
        "lambda_diag": None
        if state.log_lam is None
        else np.exp(state.log_lam.value),
    }


def state_from_arrays(
    arrays: dict,
    n_bins: int = spline.N_BINS,
    tail_bound: float = spline.TAIL_BOUND,
    psi_frozen: bool = False,
) -> ModelState:
    tw, th, td = spline.split_raw(np.asarray(arrays["spline_obs"]), n_bins)
    iw, ih, idr = spline.split_raw(np.asarray(arrays["spline_int"]), n_bins)

    def param(v, trainable=True):
        return Tensor(np.asarray(v, dtype=np.float64), requires_grad=trainable)

    lam = arrays.get("lambda_diag")
    return ModelState(
        theta=param(arrays["theta"]),
        theta_tilde=param(arrays["theta_tilde"]),
        sw_w=param(tw),
        sw_h=param(th),
        sw_d=param(td),
        si_w=param(iw),
        si_h=param(ih),
        si_d=param(idr),
        phi=param(arrays["phi"]),
        psi=param(arrays["psi"], trainable=not psi_frozen),
        log_lam=None if lam is None else param(np.log(np.asarray(lam))),
        n_bins=n_bins,
        tail_bound=tail_bound,
    )
