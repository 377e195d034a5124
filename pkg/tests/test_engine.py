import numpy as np
import pytest

from mirror_gossip import (ConfigurationError, DeviceState, IntegrityError, MirrorMap,
                           MirrorRangeError, ProtocolError, QuadraticLoss, RunConfig,
                           aggregate_row, forward, generate_schedule, gossip_round, inverse,
                           metropolis_weights, mirror_gradient_step, pairwise_gossip_round, run,
                           unrolled_state_check)
from mirror_gossip.engine import (CSV_COLUMNS, Problem, build_problem, build_schedule,
                                  load_trace, save_trace)


def states_from(W, mmap=None):
    return [DeviceState(i, np.asarray(w, dtype=float), None, None) for i, w in enumerate(W)]


# --- aggregate_row ------------------------------------------------------------

def test_aggregate_linear_example():
    out = aggregate_row([0.4, 0.6], [[3.0], [11.0]], MirrorMap(1))
    assert out[0] == pytest.approx(7.8, abs=1e-12)


def test_aggregate_power_mean_example():
    mm = MirrorMap(5)
    a = aggregate_row([0.4, 0.6], [[3.0], [11.0]], mm)[0]
    b = aggregate_row([0.6, 0.4], [[3.0], [11.0]], mm)[0]
    # weighted power means evaluated directly
    assert a == pytest.approx((0.4 * 3 ** 5 + 0.6 * 11 ** 5) ** 0.2, rel=1e-13)
    assert b == pytest.approx((0.6 * 3 ** 5 + 0.4 * 11 ** 5) ** 0.2, rel=1e-13)
    assert a == pytest.approx(9.9337, abs=5e-5)
    assert b == pytest.approx(9.1622, abs=5e-5)
    assert a - b == pytest.approx(0.7705, abs=5e-3)


@pytest.mark.parametrize("p", [1, 2, 3, 7, 15])
def test_aggregate_fixed_point(p, rng):
    v = rng.standard_normal(6) * 3
    w = rng.dirichlet(np.ones(5))
    np.testing.assert_allclose(aggregate_row(w, [v] * 5, MirrorMap(p)), v, rtol=1e-12)


def test_aggregate_bad_weights():
    with pytest.raises(ProtocolError):
        aggregate_row([0.5, 0.6], [[1.0], [2.0]], MirrorMap(3))
    with pytest.raises(ProtocolError):
        aggregate_row([1.2, -0.2], [[1.0], [2.0]], MirrorMap(3))


# --- gossip_round -------------------------------------------------------------

def test_gossip_identity_keeps_models(rng):
    W = rng.standard_normal((4, 3))
    ys = gossip_round(states_from(W), np.eye(4), MirrorMap(3))
    np.testing.assert_allclose(np.array(ys), W, rtol=1e-13)


def test_gossip_two_device_example():
    P = np.array([[0.6, 0.4], [0.4, 0.6]])
    ys = gossip_round(states_from([[3.0], [11.0]]), P, MirrorMap(5))
    assert ys[0][0] == pytest.approx(9.1622, abs=5e-5)
    assert ys[1][0] == pytest.approx(9.9337, abs=5e-5)


@pytest.mark.parametrize("p", [1, 3, 5])
def test_gossip_preserves_mirror_mean(p, rng):
    mm = MirrorMap(p)
    sched = generate_schedule(6, 5, 0.4, seed=int(rng.integers(1000)))
    for P in sched.matrices:
        W = rng.uniform(-3, 3, size=(6, 4))
        ys = np.array(gossip_round(states_from(W), P, mm))
        before = forward(mm, W).mean(axis=0)
        after = forward(mm, ys).mean(axis=0)
        np.testing.assert_allclose(after, before, rtol=1e-9, atol=1e-9 * np.abs(before).max())


# --- mirror_gradient_step -----------------------------------------------------

def test_step_examples(rng):
    assert mirror_gradient_step([2.0], [1.0], 7.0, MirrorMap(3))[0] == pytest.approx(1.0, rel=1e-14)
    y, g = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_array_equal(mirror_gradient_step(y, g, 0.3, MirrorMap(1)), y - 0.3 * g)
    for p in (2, 5, 15):
        np.testing.assert_allclose(mirror_gradient_step(y, np.zeros(5), 0.3, MirrorMap(p)), y,
                                   rtol=1e-13)


def test_step_range_error_names_round():
    with pytest.raises(MirrorRangeError, match="round 17"):
        mirror_gradient_step([1e30], [0.0], 1.0, MirrorMap(15), round_index=17)


# --- run ----------------------------------------------------------------------

def test_run_records_every_iteration():
    met = run(RunConfig(m=3, T=12, p=3, seed=1))
    assert len(met.t) == 13
    lines = met.csv_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 14
    # F sums per-device mean losses, each ln 2 at the zero model
    assert met.loss[0] == pytest.approx(3 * np.log(2), rel=1e-12)


def test_run_is_deterministic():
    cfg = RunConfig(m=4, T=30, p=3, density=0.5, alpha=0.3, seed=11, batch_size=8)
    assert run(cfg).csv_text() == run(cfg).csv_text()


def test_threads_do_not_change_results():
    cfg = RunConfig(m=6, T=25, p=5, density=0.4, alpha=0.5, seed=3, batch_size=10)
    assert run(cfg, threads=1).csv_text() == run(cfg, threads=4).csv_text()


@pytest.mark.parametrize("p", [1, 3, 8])
def test_single_device_is_mirror_descent(p):
    cfg = RunConfig(m=1, T=60, p=p, eta=0.5, seed=4, classes=3, dim=3)
    met = run(cfg)
    prob = build_problem(cfg)
    mm = MirrorMap(p)
    z = np.zeros(prob.dim)
    losses = []
    for _ in range(cfg.T + 1):
        w = np.sign(z) * np.abs(z) ** (1.0 / p)
        losses.append(prob.losses[0].value(prob.shards[0], w))
        z = z - cfg.eta * prob.losses[0].gradient(prob.shards[0], w)
    np.testing.assert_allclose(met.loss, losses, rtol=1e-9, atol=1e-12)
    assert np.all(met.consensus_mirror == 0)


def dgd_oracle(cfg):
    """Plain linear-averaging decentralized gradient descent."""
    prob = build_problem(cfg)
    sched = build_schedule(cfg)
    W = np.zeros((cfg.m, prob.dim))
    out = [prob.global_loss(W.mean(axis=0))]
    for t in range(cfg.T):
        G = np.array([l.gradient(s, W[i]) for i, (l, s) in enumerate(zip(prob.losses, prob.shards))])
        P = metropolis_weights(sched.edge_sets[t], cfg.m).entries
        W = P @ W - cfg.eta * G
        out.append(prob.global_loss(W.mean(axis=0)))
    return np.array(out), W


@pytest.mark.parametrize("loss", ["logistic", "quadratic"])
def test_linear_case_matches_dgd(loss):
    cfg = RunConfig(m=5, T=80, p=1, eta=0.2, density=0.5, alpha=0.5, seed=2, loss=loss, dim=3)
    met = run(cfg)
    ref_loss, ref_W = dgd_oracle(cfg)
    np.testing.assert_allclose(met.loss, ref_loss, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(met.final_models, ref_W, rtol=1e-9, atol=1e-12)


def test_full_graph_iid_quadratic_is_monotone(rng):
    d, m = 4, 5
    A = rng.standard_normal((6, d))
    loss = QuadraticLoss(A, rng.standard_normal(6), grad_clip=1e12)
    L = np.linalg.eigvalsh(A.T @ A).max()
    prob = Problem([loss] * m, [None] * m, None, None, d)
    cfg = RunConfig(m=m, T=200, p=1, eta=0.95 / L, density=1.0, loss="quadratic", grad_clip=1e12)
    met = run(cfg, problem=prob)
    assert np.all(np.diff(met.loss) <= 1e-12 * met.loss[0])
    assert met.loss[-1] < met.loss[0]


def test_consensus_respects_recorded_bound():
    met = run(RunConfig(m=6, T=60, p=3, density=0.3, alpha=0.2, seed=5))
    assert np.all(met.consensus_mirror <= met.lemma1_bound)


def test_run_overflow_names_iteration(rng):
    d = 2
    loss = QuadraticLoss(np.eye(d), [5.0, 5.0], grad_clip=1e12)
    prob = Problem([loss] * 2, [None] * 2, None, None, d)
    cfg = RunConfig(m=2, T=5, p=3, eta=1e308, loss="quadratic", grad_clip=1e12)
    with pytest.raises(MirrorRangeError, match="iteration 1"):
        run(cfg, problem=prob)
    with pytest.raises(MirrorRangeError, match="iteration 0"):
        run(RunConfig(m=2, T=5, p=15), init=np.full((2, 6), 1e30))


def test_config_errors_surface_before_running():
    with pytest.raises(ConfigurationError):
        RunConfig(density=0)
    with pytest.raises(ConfigurationError):
        RunConfig(strategy="flood")
    with pytest.raises(ConfigurationError):
        run(RunConfig(m=4, T=10), schedule=generate_schedule(3, 10, 1.0))


# --- unrolled check -------------------------------------------------------------

@pytest.fixture(scope="module")
def traced():
    return run(RunConfig(m=4, T=20, p=3, density=0.5, alpha=0.5, seed=8, record_trace=True)).trace


def test_unrolled_single_step(traced):
    for t in range(20):
        assert unrolled_state_check(traced, t, t)


def test_unrolled_from_start(traced):
    rep = unrolled_state_check(traced, 10, 0)
    assert rep.ok and rep.device_deviation <= rep.tolerance


def test_unrolled_detects_corrupted_gradient(traced):
    G = traced.gradients.copy()
    G[5, 1, 0] += 1e-3
    bad = type(traced)(traced.mirror_states, G, traced.matrices, traced.eta, traced.p)
    assert not unrolled_state_check(bad, 10, 0)
    assert unrolled_state_check(bad, 10, 6)


def test_unrolled_index_range(traced):
    with pytest.raises(ConfigurationError):
        unrolled_state_check(traced, 20, 0)


def test_trace_roundtrip_and_tamper(traced, tmp_path):
    path = tmp_path / "trace.npz"
    save_trace(traced, path)
    back = load_trace(path)
    np.testing.assert_array_equal(back.mirror_states, traced.mirror_states)
    assert back.eta == traced.eta and back.p == traced.p

    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    arrays["gradients"] = arrays["gradients"] * 1.0001
    np.savez(tmp_path / "edited.npz", **arrays)
    with pytest.raises(IntegrityError, match="digest"):
        load_trace(tmp_path / "edited.npz")

    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "flipped.npz").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_trace(tmp_path / "flipped.npz")


# --- pairwise baseline ----------------------------------------------------------

def test_pairwise_two_devices_agree(rng):
    W = rng.standard_normal((2, 3))
    out = pairwise_gossip_round(W, {(0, 1)}, 0.1, lambda W, dev: np.ones((len(dev), 3)), rng)
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_allclose(out[0], W.mean(axis=0) - 0.1)


def test_pairwise_idle_devices_unchanged(rng):
    W = rng.standard_normal((5, 2))
    out = pairwise_gossip_round(W, {(1, 3)}, 0.1, lambda W, dev: np.zeros((len(dev), 2)), rng)
    for k in (0, 2, 4):
        np.testing.assert_array_equal(out[k], W[k])
    np.testing.assert_array_equal(pairwise_gossip_round(W, set(), 0.1, None, rng), W)


def test_pairwise_run_reduces_loss():
    met = run(RunConfig(m=6, T=300, strategy="pairwise", eta=0.5, alpha=100.0, seed=0))
    assert met.loss[-1] < met.loss[0]
    assert np.all(np.isnan(met.lemma1_bound))
