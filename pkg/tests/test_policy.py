import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from mixtraffic import policy as P
from mixtraffic.env.core import AgentAction
from mixtraffic.sim.params import ContractViolation

GAUSS = P.PolicySpec(3, (P.Head("gaussian", 1),))
CAT = P.PolicySpec(6, (P.Head("categorical", 3),))
MULTI = P.PolicySpec(10, (P.Head("gaussian", 1), P.Head("categorical", 2)))


def random_params(spec, rng, scale=0.5):
    return P.unflatten(spec, scale * rng.standard_normal(spec.n_params))


def random_actions(spec, rng, n):
    cols = []
    for h in spec.heads:
        if h.kind == "gaussian":
            cols.append(rng.normal(0, 1.5, (n, h.size)))
        else:
            cols.append(rng.integers(0, h.size, (n, 1)).astype(float))
    return np.hstack(cols)


def fd_check(spec, rng, n_coords=60, eps=1e-6):
    """Relative error between the analytic gradient of log pi(a|o) and
    central differences over random coordinates and random directions."""
    params = random_params(spec, rng)
    obs = rng.normal(0, 1, (1, spec.in_dim))
    act = random_actions(spec, rng, 1)
    theta = P.flatten(params)
    g = P.grad_log_prob(params, obs, act)

    def f(t):
        return P.log_prob(P.forward(P.unflatten(spec, t), obs), act)[0]

    coords = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    dirs = []
    for c in coords:
        e = np.zeros(theta.size)
        e[c] = 1.0
        dirs.append(e)
    dirs += [rng.standard_normal(theta.size) for _ in range(3)]
    got = np.array([g @ d for d in dirs])
    fd = np.array([(f(theta + eps * d) - f(theta - eps * d)) / (2 * eps) for d in dirs])
    return np.linalg.norm(got - fd) / max(np.linalg.norm(fd), np.linalg.norm(got), 1e-12)


# ---------------------------------------------------------------- layout
def test_single_ring_parameter_count():
    spec = P.policy_spec_for("single_ring", 3, 0)
    # (3*64+64) + (64*64+64) + (64*1+1) + 1 log-std
    assert spec.n_params == (3 * 64 + 64) + (64 * 64 + 64) + (64 * 1 + 1) + 1 == 4482


@pytest.mark.parametrize("spec", [GAUSS, CAT, MULTI])
def test_flatten_round_trip(spec, rng):
    p = random_params(spec, rng)
    v = P.flatten(p)
    assert np.array_equal(P.flatten(P.unflatten(spec, v)), v)
    q = P.unflatten(spec, v)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays, q.arrays))


def test_unflatten_length_mismatch():
    with pytest.raises(ContractViolation):
        P.unflatten(GAUSS, np.zeros(GAUSS.n_params + 1))


def test_heads_per_system():
    kinds = lambda s: [(h.kind, h.size) for h in P.policy_spec_for(s, 5, 0).heads]
    assert kinds("single_ring") == [("gaussian", 1)]
    assert kinds("figure_eight") == [("gaussian", 1)]
    assert kinds("double_ring") == [("gaussian", 1), ("categorical", 2)]
    for s in ("bottleneck", "ramp", "intersection"):
        assert kinds(s) == [("categorical", 3)]


def test_init_scales(rng):
    p = P.init_params(GAUSS, rng, c_accel=2.6)
    assert p.log_std[0] == pytest.approx(math.log(1.3))
    assert np.abs(p.W3).max() <= 0.01 + 1e-12
    w1 = p.W1
    assert np.allclose(w1 @ w1.T, 2.0 * np.eye(3), atol=1e-9)


def test_to_agent_action():
    assert P.to_agent_action(GAUSS, [0.7]) == AgentAction(0.7)
    assert P.to_agent_action(MULTI, [0.7, 1.0]) == AgentAction(0.7, 1)
    assert P.to_agent_action(CAT, [2.0]) == AgentAction(2)


# ----------------------------------------------------------------- forward
def test_zero_weights_give_uniform_logits():
    d = P.forward(P.zero_params(CAT), np.ones((4, 6)))
    assert np.array_equal(d.outputs, np.zeros((4, 3)))
    assert np.allclose(d.probs(0), 1 / 3)


def test_forward_is_pure(rng):
    p = random_params(MULTI, rng)
    obs = rng.normal(size=(5, 10))
    a, b = P.forward(p, obs), P.forward(p, obs)
    assert np.array_equal(a.outputs, b.outputs)


def test_forward_dimension_mismatch(rng):
    with pytest.raises(ContractViolation):
        P.forward(P.zero_params(GAUSS), np.zeros((2, 4)))


def test_first_layer_sensitivity_matches_finite_difference(rng):
    p = random_params(GAUSS, rng)
    obs = rng.normal(size=(1, 3))
    eps = 1e-6
    base = P.flatten(p)
    k = 5  # one first-layer weight
    plus, minus = base.copy(), base.copy()
    plus[k] += eps
    minus[k] -= eps
    fd = (P.forward(P.unflatten(GAUSS, plus), obs).outputs
          - P.forward(P.unflatten(GAUSS, minus), obs).outputs) / (2 * eps)
    assert fd[0, 0] != 0.0
    # d mean / d theta_k through log_prob with unit std at action = mean + 1
    q = P.unflatten(GAUSS, base)
    q.arrays[6][:] = 0.0
    act = P.forward(q, obs).outputs + 1.0
    g = P.grad_log_prob(q, obs, act)
    assert g[k] == pytest.approx(fd[0, 0], rel=1e-4)


# ----------------------------------------------------------------- sampling
def test_one_hot_logits_sample_the_hot_index(rng):
    p = P.zero_params(CAT)
    p.arrays[5][:] = [0.0, 0.0, 1e9]
    d = P.forward(p, np.zeros((50, 6)))
    assert np.all(P.sample(d, rng)[:, 0] == 2)


def test_degenerate_gaussian_samples_the_mean(rng):
    p = random_params(GAUSS, rng)
    p.arrays[6][:] = -np.inf
    d = P.forward(p, rng.normal(size=(20, 3)))
    assert np.array_equal(P.sample(d, rng), d.outputs)


def test_categorical_frequencies_within_three_sigma():
    rng = np.random.default_rng(7)
    p = P.zero_params(CAT)
    p.arrays[5][:] = [0.3, -1.0, 1.2]
    n = 100_000
    d = P.forward(p, np.zeros((n, 6)))
    probs = d.probs(0)[0]
    counts = np.bincount(P.sample(d, rng)[:, 0].astype(int), minlength=3)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 3 * sigma)


def test_gaussian_sample_moments():
    rng = np.random.default_rng(8)
    p = P.zero_params(GAUSS)
    p.arrays[5][:] = 0.4
    p.arrays[6][:] = math.log(0.7)
    n = 100_000
    s = P.sample(P.forward(p, np.zeros((n, 3))), rng)[:, 0]
    assert abs(s.mean() - 0.4) <= 3 * 0.7 / math.sqrt(n)
    assert s.std() == pytest.approx(0.7, rel=0.01)


def test_sampling_is_seed_deterministic():
    p = random_params(MULTI, np.random.default_rng(0))
    d = P.forward(p, np.random.default_rng(1).normal(size=(30, 10)))
    a = P.sample(d, np.random.default_rng(9))
    b = P.sample(d, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_mode(rng):
    p = random_params(MULTI, rng)
    d = P.forward(p, rng.normal(size=(8, 10)))
    m = P.mode(d)
    assert np.array_equal(m[:, 0], d.outputs[:, 0])
    assert np.array_equal(m[:, 1], np.argmax(d.outputs[:, 1:3], axis=1))


# --------------------------------------------------------------- log prob
def test_uniform_categorical_log_prob():
    d = P.forward(P.zero_params(CAT), np.zeros((3, 6)))
    assert np.allclose(P.log_prob(d, [[0], [1], [2]]), math.log(1 / 3))


def test_gaussian_log_prob_at_mean():
    p = P.zero_params(GAUSS)
    d = P.forward(p, np.zeros((1, 3)))
    assert P.log_prob(d, [[0.0]])[0] == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_out_of_support_action(rng):
    d = P.forward(P.zero_params(CAT), np.zeros((1, 6)))
    for bad in ([3.0], [-1.0], [0.5]):
        with pytest.raises(ContractViolation):
            P.log_prob(d, [bad])


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_joint_log_prob_is_sum_of_agent_and_head_terms(seed, n_agents):
    rng = np.random.default_rng(seed)
    p = random_params(MULTI, rng)
    obs = rng.normal(size=(n_agents, 10))
    act = random_actions(MULTI, rng, n_agents)
    joint = P.log_prob(P.forward(p, obs), act).sum()
    parts = 0.0
    for i in range(n_agents):
        hl = P.head_log_probs(P.forward(p, obs[i:i + 1]), act[i:i + 1])
        parts += hl.sum()
    assert joint == pytest.approx(parts, rel=1e-13, abs=1e-13)


# --------------------------------------------------------------------- KL
def _cat_dist(probs):
    spec = P.PolicySpec(1, (P.Head("categorical", len(probs)),))
    p = P.zero_params(spec)
    p.arrays[5][:] = np.log(probs)
    return P.forward(p, np.zeros((1, 1)))


def _gauss_dist(mean, std):
    spec = P.PolicySpec(1, (P.Head("gaussian", 1),))
    p = P.zero_params(spec)
    p.arrays[5][:] = mean
    p.arrays[6][:] = math.log(std)
    return P.forward(p, np.zeros((1, 1)))


def test_kl_of_identical_is_zero(rng):
    p = random_params(MULTI, rng)
    d = P.forward(p, rng.normal(size=(4, 10)))
    assert np.allclose(P.kl(d, d), 0.0, atol=1e-15)


def test_categorical_kl_example():
    got = P.kl(_cat_dist([0.5, 0.5]), _cat_dist([0.25, 0.75]))[0]
    oracle = sum(p * math.log(p / q) for p, q in ((0.5, 0.25), (0.5, 0.75)))
    assert got == pytest.approx(oracle, abs=1e-12)
    assert round(got, 4) == 0.1438


def test_gaussian_kl_example_against_numeric_integration():
    got = P.kl(_gauss_dist(0.0, 1.0), _gauss_dist(0.0, 2.0))[0]
    def integrand(x):
        lp = -0.5 * x**2 - 0.5 * math.log(2 * math.pi)
        lq = -0.5 * (x / 2) ** 2 - math.log(2) - 0.5 * math.log(2 * math.pi)
        return math.exp(lp) * (lp - lq)

    numeric, _ = quad(integrand, -np.inf, np.inf)
    assert got == pytest.approx(math.log(2) + 1 / 8 - 1 / 2, abs=1e-12)
    assert got == pytest.approx(numeric, abs=1e-8)
    assert round(got, 4) == 0.3181


def test_kl_structure_mismatch():
    with pytest.raises(ContractViolation):
        P.kl(_cat_dist([0.5, 0.5]), _gauss_dist(0, 1))


@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(5, 10))
    a = P.forward(random_params(MULTI, rng), obs)
    b = P.forward(random_params(MULTI, rng), obs)
    assert np.all(P.kl(a, b) >= -1e-12)


def test_kl_is_locally_quadratic(rng):
    p = random_params(MULTI, rng)
    obs = rng.normal(size=(20, 10))
    d = rng.standard_normal(MULTI.n_params)
    base = P.forward(p, obs)
    theta = P.flatten(p)
    ratios = []
    for eps in (1e-2, 1e-3, 1e-4):
        q = P.forward(P.unflatten(MULTI, theta + eps * d), obs)
        ratios.append(P.kl(base, q).mean() / eps**2)
    assert ratios[2] == pytest.approx(ratios[1], rel=1e-2)
    assert 0 < ratios[2] < np.inf


@given(st.floats(-50, 50))
def test_logit_shift_leaves_probabilities_unchanged(c):
    rng = np.random.default_rng(0)
    p = random_params(CAT, rng)
    obs = rng.normal(size=(6, 6))
    a = P.forward(p, obs).probs(0)
    p.arrays[5] = p.arrays[5] + c
    b = P.forward(p, obs).probs(0)
    assert np.allclose(a, b, atol=1e-12, rtol=0)
    assert np.allclose(a.sum(axis=1), 1.0)


def test_entropy_examples():
    d = P.forward(P.zero_params(CAT), np.zeros((1, 6)))
    assert P.entropy(d)[0] == pytest.approx(math.log(3))
    g = _gauss_dist(0.0, 2.0)
    assert P.entropy(g)[0] == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 4))


# -------------------------------------------------------------- gradients
@pytest.mark.parametrize("spec", [GAUSS, CAT, MULTI])
def test_gradients_match_finite_differences(spec):
    rng = np.random.default_rng(11)
    errs = [fd_check(spec, rng, n_coords=20) for _ in range(10)]
    assert max(errs) < 1e-4


def test_weighted_gradient_is_weighted_sum(rng):
    p = random_params(MULTI, rng)
    obs = rng.normal(size=(7, 10))
    act = random_actions(MULTI, rng, 7)
    w = rng.normal(size=7)
    g = P.grad_log_prob(p, obs, act, w)
    parts = sum(w[i] * P.grad_log_prob(p, obs[i:i + 1], act[i:i + 1]) for i in range(7))
    assert np.allclose(g, parts, rtol=1e-10, atol=1e-12)


def dense_kl_hessian(spec, params, obs, eps=1e-4):
    """Second-order central differences of the mean KL at the current parameters."""
    theta = P.flatten(params)
    base = P.forward(params, obs)
    n = theta.size

    def f(t):
        return P.kl(base, P.forward(P.unflatten(spec, t), obs)).mean()

    H = np.empty((n, n))
    E = np.eye(n) * eps
    for i in range(n):
        for j in range(i, n):
            H[i, j] = H[j, i] = (f(theta + E[i] + E[j]) - f(theta + E[i] - E[j])
                                 - f(theta - E[i] + E[j]) + f(theta - E[i] - E[j])) / (4 * eps**2)
    return H


@pytest.mark.parametrize("heads", [(P.Head("gaussian", 1),), (P.Head("categorical", 3),),
                                   (P.Head("gaussian", 1), P.Head("categorical", 2))])
def test_fvp_matches_dense_kl_hessian(heads):
    rng = np.random.default_rng(5)
    spec = P.PolicySpec(2, heads, hidden=3)
    assert spec.n_params <= 50
    params = random_params(spec, rng, scale=0.8)
    obs = rng.normal(size=(9, 2))
    H = dense_kl_hessian(spec, params, obs)
    for _ in range(3):
        v = rng.standard_normal(spec.n_params)
        got = P.fisher_vector_product(params, obs, v)
        assert np.linalg.norm(got - H @ v) / np.linalg.norm(H @ v) < 1e-5


def test_fvp_damping_adds_identity(rng):
    spec = P.PolicySpec(2, (P.Head("gaussian", 1),), hidden=3)
    p = random_params(spec, rng)
    obs = rng.normal(size=(4, 2))
    v = rng.standard_normal(spec.n_params)
    a = P.fisher_vector_product(p, obs, v)
    b = P.fisher_vector_product(p, obs, v, damping=0.1)
    assert np.allclose(b, a + 0.1 * v, rtol=1e-12, atol=1e-14)


# ------------------------------------------------------------ checkpoints
def test_checkpoint_round_trip(tmp_path, rng):
    p = random_params(MULTI, rng)
    scale = rng.uniform(1, 10, MULTI.in_dim)
    path = tmp_path / "c.npz"
    P.save_checkpoint(path, p, scale, {"iteration": 3})
    q, s, meta = P.load_checkpoint(path)
    assert q.spec == MULTI
    assert np.array_equal(P.flatten(q), P.flatten(p))
    assert np.array_equal(s, scale) and meta["iteration"] == 3
