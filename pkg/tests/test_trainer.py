import numpy as np
import pytest

from scout import autodiff as ad
from scout import model as mdl
from scout import trainer
from scout.graphs import DirectedGraph
from scout.rng import NoiseFamily, NoiseKind, Rng
from scout.simulator import (
    Dataset,
    InterventionKind,
    InterventionSpec,
    MechanismKind,
    generate_dataset,
    make_sem,
    single_node_design,
)

GAUSS = NoiseFamily(NoiseKind.GAUSSIAN, 0.0, 0.25)


def chain_dataset(d=3, n=1000, seed=42):
    adj = np.zeros((d, d))
    for i in range(d - 1):
        adj[i, i + 1] = 1
    g = DirectedGraph(adj)
    rng = Rng(seed)
    sem = make_sem(g, MechanismKind.TANH, GAUSS, rng.substream("sem"))
    spec = InterventionSpec(InterventionKind.SHIFT, single_node_design(d), shift=2.0)
    return generate_dataset(sem, spec, n, rng.substream("data"))


# --- config validation ------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(batch_size=0),
        dict(lr=0.0),
        dict(tau_g=-1.0),
        dict(poisson_mean=0.0),
        dict(lambda_g=-0.1),
        dict(logdet_mode="magic"),
        dict(lipschitz=1.0),
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        trainer.TrainConfig(**kwargs)


# --- loss oracle --------------------------------------------------------------------


def naive_rq_spline(raw, e, n_bins=8, bound=5.0):
    """Scalar rational-quadratic spline, written independently."""
    tw, th, td = raw[:n_bins], raw[n_bins : 2 * n_bins], raw[2 * n_bins :]

    def norm_bins(t):
        ex = np.exp(t - t.max())
        frac = ex / ex.sum() * (1 - 1e-3 * n_bins) + 1e-3
        return frac * 2 * bound

    w = norm_bins(tw)
    h = norm_bins(th)
    xk = -bound + np.concatenate([[0.0], np.cumsum(w)])
    yk = -bound + np.concatenate([[0.0], np.cumsum(h)])
    der = np.concatenate([[1.0], np.log1p(np.exp(-np.abs(td))) + np.maximum(td, 0), [1.0]])
    if abs(e) > bound:
        return e, 0.0
    b = min(max(int(np.searchsorted(xk, e, side="right")) - 1, 0), n_bins - 1)
    xi = (e - xk[b]) / w[b]
    s = h[b] / w[b]
    q = xi * (1 - xi)
    den = s + (der[b + 1] + der[b] - 2 * s) * q
    z = yk[b] + h[b] * (s * xi**2 + der[b] * q) / den
    deriv = s**2 * (der[b + 1] * xi**2 + 2 * s * q + der[b] * (1 - xi) ** 2) / den**2
    return z, np.log(deriv)


def naive_loss(state, x, kvec, m, t, lam_g, lam_i):
    """Straightforward per-row evaluation of the finite-sample score."""
    d = x.shape[1]
    a = m * state.theta.value
    at = m * state.theta_tilde.value
    obs_raw = np.concatenate(
        [state.sw_w.value, state.sw_h.value, state.sw_d.value], axis=1
    )
    int_raw = np.concatenate(
        [state.si_w.value, state.si_h.value, state.si_d.value], axis=1
    )
    total = 0.0
    for row, k in zip(x, kvec):
        u = t[k]
        f = np.tanh(row @ a)
        ft = np.tanh(row @ at)
        e = row - (u * f + (1 - u) * ft)
        logp = 0.0
        for i in range(d):
            raw = obs_raw[i] if u[i] == 1 else int_raw[i]
            z, ld = naive_rq_spline(raw, e[i])
            logp += -0.5 * z * z - 0.5 * np.log(2 * np.pi) + ld
        jac = u[:, None] * ((1 - f * f)[:, None] * a.T) + (1 - u)[:, None] * (
            (1 - ft * ft)[:, None] * at.T
        )
        logp += np.linalg.slogdet(np.eye(d) - jac)[1]
        total += logp
    sig = lambda v: 1 / (1 + np.exp(-v))
    pen_g = lam_g * np.sum(sig(state.phi.value) * (1 - np.eye(d)))
    pen_i = lam_i * np.sum(1 - sig(state.psi.value))
    return -total / len(x) + pen_g + pen_i


def test_loss_matches_naive_evaluation():
    d, k = 4, 3
    state = mdl.init_state(d, k, Rng(0))
    prng = np.random.default_rng(1)
    state.theta.value = prng.normal(0, 0.3, (d, d))
    state.theta_tilde.value = prng.normal(0, 0.3, (d, d))
    for p in [state.sw_w, state.sw_h, state.sw_d, state.si_w, state.si_h, state.si_d]:
        p.value = p.value + prng.normal(0, 0.5, p.value.shape)
    state.phi.value = prng.normal(0, 1, (d, d))
    state.psi.value = prng.normal(0, 1, (k, d))
    m = prng.integers(0, 2, (d, d)).astype(float) * (1 - np.eye(d))
    t = prng.integers(0, 2, (k, d)).astype(float)
    x = prng.normal(0, 2, (12, d))
    kvec = prng.integers(0, k, 12)
    masks = mdl.MaskSample(
        m=ad.constant(m), t=ad.constant(t), m_soft=ad.constant(m),
        t_soft=ad.constant(t), m_hard=m, t_hard=t,
    )
    ours = mdl.loss_fn(
        state, x, kvec, masks, lambda_g=0.001, lambda_i=0.01, mode="exact"
    ).item()
    theirs = naive_loss(state, x, kvec, m, t, 0.001, 0.01)
    assert ours == pytest.approx(theirs, abs=1e-10)


def test_loss_single_row_no_penalty_is_negative_log_density():
    d, k = 3, 2
    state = mdl.init_state(d, k, Rng(2))
    prng = np.random.default_rng(3)
    m = prng.integers(0, 2, (d, d)).astype(float) * (1 - np.eye(d))
    t = prng.integers(0, 2, (k, d)).astype(float)
    masks = mdl.MaskSample(
        m=ad.constant(m), t=ad.constant(t), m_soft=ad.constant(m),
        t_soft=ad.constant(t), m_hard=m, t_hard=t,
    )
    x = prng.normal(0, 1, (1, d))
    kvec = np.array([1])
    loss = mdl.loss_fn(state, x, kvec, masks, lambda_g=0.0, lambda_i=0.0, mode="exact")
    ld = mdl.log_density_rows(state, x, kvec, masks, mode="exact")
    assert loss.item() == pytest.approx(-ld.value[0], abs=1e-12)


def test_graph_penalty_vanishes_for_negative_infinity_logits():
    d = 3
    state = mdl.init_state(d, 2, Rng(4))
    state.phi.value = np.full((d, d), -np.inf)
    pen = ad.tsum(ad.sigmoid(state.phi) * (1 - np.eye(d))).item()
    assert pen == 0.0


# --- rescale --------------------------------------------------------------------------


def test_rescale_model_zero_weights_unchanged():
    state = mdl.init_state(3, 2, Rng(5))
    state.theta.value = np.zeros((3, 3))
    state.theta_tilde.value = np.zeros((3, 3))
    trainer.rescale_model(state, 0.9)
    np.testing.assert_array_equal(state.theta.value, np.zeros((3, 3)))


def test_rescale_model_projects_to_bound():
    state = mdl.init_state(4, 2, Rng(6))
    w = np.random.default_rng(7).normal(size=(4, 4))
    w *= 1.8 / np.linalg.svd(w, compute_uv=False)[0]
    state.theta.value = w.copy()
    trainer.rescale_model(state, 0.9)
    assert np.linalg.svd(state.theta.value, compute_uv=False)[0] == pytest.approx(
        0.9, abs=1e-5
    )


def test_rescale_model_idempotent():
    state = mdl.init_state(4, 2, Rng(8))
    state.theta.value = np.random.default_rng(9).normal(size=(4, 4))
    trainer.rescale_model(state, 0.9)
    once = state.theta.value.copy()
    trainer.rescale_model(state, 0.9)
    np.testing.assert_allclose(state.theta.value, once, rtol=1e-6)


# --- training loop ---------------------------------------------------------------------


def test_zero_epochs_returns_initialization():
    ds = chain_dataset()
    cfg = trainer.TrainConfig(epochs=0, seed=3)
    res = trainer.train(ds, cfg)
    expected = mdl.init_state(ds.d, ds.n_experiments, Rng(3).substream("init"))
    np.testing.assert_array_equal(res.state.theta.value, expected.theta.value)
    np.testing.assert_array_equal(res.state.phi.value, expected.phi.value)
    assert res.metrics == []


def test_seed_determinism_of_training():
    ds = chain_dataset(n=300)
    cfg = trainer.TrainConfig(epochs=3, batch_size=128, seed=11)
    a = trainer.train(ds, cfg)
    b = trainer.train(ds, cfg)
    assert [r["mean_loss"] for r in a.metrics] == [r["mean_loss"] for r in b.metrics]
    np.testing.assert_array_equal(a.state.theta.value, b.state.theta.value)
    np.testing.assert_array_equal(a.state.psi.value, b.state.psi.value)
    c = trainer.train(ds, trainer.TrainConfig(epochs=3, batch_size=128, seed=12))
    assert not np.array_equal(a.state.theta.value, c.state.theta.value)


def test_debug_mode_runs_clean():
    ds = chain_dataset(n=300)
    cfg = trainer.TrainConfig(epochs=2, batch_size=128, seed=21, check_finite=True)
    res = trainer.train(ds, cfg)  # per-op finiteness + contractivity assertions on
    assert len(res.metrics) == 2


def test_post_step_contractivity_throughout_training():
    ds = chain_dataset(n=600)
    seen = []

    def check(state):
        seen.append(
            max(
                np.linalg.svd(state.theta.value, compute_uv=False)[0],
                np.linalg.svd(state.theta_tilde.value, compute_uv=False)[0],
            )
        )

    cfg = trainer.TrainConfig(epochs=3, batch_size=128, seed=13)
    trainer.train(ds, cfg, step_callback=check)
    assert len(seen) > 0
    assert max(seen) <= 0.9 + 1e-5


def test_known_targets_freeze_psi():
    ds = chain_dataset(n=500)
    cfg = trainer.TrainConfig(epochs=2, batch_size=128, seed=14)
    res = trainer.train(ds, cfg, known_targets=ds.truth_targets)
    expected = mdl.known_target_psi(ds.truth_targets)
    np.testing.assert_array_equal(res.state.psi.value, expected)
    assert res.metrics[-1]["target_auprc"] == 1.0


def test_divergence_aborts_with_last_good_state():
    ds = chain_dataset(n=500)
    bad = Dataset(
        x=np.where(np.arange(500 * 3).reshape(500, 3) == 0, 1e300, ds.x[:500]),
        experiment=ds.experiment[:500],
        n_experiments=ds.n_experiments,
    )
    cfg = trainer.TrainConfig(epochs=2, batch_size=256, seed=15)
    with np.errstate(all="ignore"):
        with pytest.raises(trainer.TrainingDiverged) as info:
            trainer.train(bad, cfg)
    assert info.value.last_good_state is not None
    assert np.all(np.isfinite(info.value.last_good_state.theta.value))


def test_metrics_csv_shape():
    ds = chain_dataset(n=300)
    cfg = trainer.TrainConfig(epochs=2, batch_size=128, seed=16)
    res = trainer.train(ds, cfg)
    csv = res.metrics_csv()
    lines = csv.strip().splitlines()
    assert lines[0] == "epoch,mean_loss,graph_auprc,target_auprc,wallclock_s"
    assert len(lines) == 3
    assert lines[1].startswith("1,")


def test_loss_decreases_and_chain_graph_recovered():
    ds = chain_dataset(seed=42)
    cfg = trainer.TrainConfig(epochs=200, batch_size=128, seed=7)
    res = trainer.train(ds, cfg)
    assert res.metrics[-1]["mean_loss"] < res.metrics[0]["mean_loss"]
    assert res.metrics[-1]["graph_auprc"] == 1.0
