import numpy as np
import pytest

from stablerepr.errors import ValidationError
from stablerepr.linalg import WeightedSpace
from stablerepr.mdp import build_policy_matrix, compute_value_function
from stablerepr.representations import Method, RepresentationFactory
from stablerepr.stability import iteration_matrix, stability_report, td_fixed_point
from stablerepr.td import (CONVERGED, DIVERGED, UNDECIDED, Tolerances, XiSampler,
                           decaying_schedule, default_eta0, expected_td0, stochastic_td0)

from conftest import random_instance, random_mdp, stationary_of
from test_stability import tsitsiklis


def test_tabular_on_policy_converges(rng):
    mdp = random_mdp(rng, 3, 2)
    pm = build_policy_matrix(mdp, rng.dirichlet(np.ones(2), size=3))
    space = WeightedSpace(stationary_of(pm.p_pi))
    res = expected_td0(np.eye(6), pm, space, mdp.reward, 0.9, eta=1.0, max_steps=10 ** 6)
    assert res.converged
    q = compute_value_function(pm, mdp.reward, 0.9)
    assert np.abs(res.final_theta - q).max() < 1e-6


@pytest.mark.parametrize("eta", [1e-3, 0.1, 1.0, 10.0])
def test_tsitsiklis_diverges(eta):
    pm, space, rep = tsitsiklis()
    res = expected_td0(rep, pm, space, np.zeros(2), 0.99, eta, theta0=np.ones(1),
                       max_steps=10 ** 7)
    assert res.diverged
    assert res.theta_norms[-1] > 1e6 * (1 + 1)


def test_zero_step_is_undecided(rng):
    pm, space = random_instance(rng, 4)
    theta0 = rng.standard_normal(2)
    res = expected_td0(rng.standard_normal((4, 2)), pm, space, np.ones(4), 0.9, 0.0,
                       theta0=theta0)
    assert res.outcome == UNDECIDED and np.array_equal(res.final_theta, theta0)
    with pytest.raises(ValidationError):
        expected_td0(np.eye(4), pm, space, np.ones(4), 0.9, -1.0)


def test_block_iteration_matches_plain_loop(rng):
    pm, space = random_instance(rng, 6)
    phi = rng.standard_normal((6, 3))
    r = rng.standard_normal(6)
    a = iteration_matrix(phi, pm, space, 0.9).a_phi
    b = phi.T @ (space.xi * r)
    eta = 0.05
    theta = np.zeros(3)
    for _ in range(350):
        theta = theta - eta * (a @ theta - b)
    res = expected_td0(phi, pm, space, r, 0.9, eta, max_steps=350,
                       tolerances=Tolerances(rtol=1e-300, log_every=100))
    assert res.steps_taken == 350
    assert np.allclose(res.final_theta, theta, rtol=1e-10, atol=1e-12)
    assert list(res.log_steps) == [0, 100, 200, 300, 350]


def test_monotone_decay_for_pd(rng):
    pm, _ = random_instance(rng, 8)
    space = WeightedSpace(stationary_of(pm.p_pi))
    phi = rng.standard_normal((8, 3))
    report = stability_report(iteration_matrix(phi, pm, space, 0.9))
    res = expected_td0(phi, pm, space, rng.standard_normal(8), 0.9,
                       0.1 * report.max_step_size, theta0=np.full(3, 5.0),
                       tolerances=Tolerances(log_every=10), max_steps=20000)
    traj = res.theta_trajectory
    assert np.all(np.diff(traj) <= 1e-12)


def test_run_log_csv(tmp_path, rng):
    pm, space = random_instance(rng, 4)
    res = expected_td0(np.eye(4), pm, space, np.ones(4), 0.5, 0.5, max_steps=1000)
    path = tmp_path / "run.csv"
    res.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,residual_norm,theta_norm"
    assert len(lines) == len(res.log_steps) + 1


def test_tolerances_validation():
    with pytest.raises(ValidationError):
        Tolerances(rtol=0, atol=0)
    with pytest.raises(ValidationError):
        Tolerances(log_every=0)


def test_schedule():
    s = decaying_schedule(1.0, 10.0)
    assert s(0) == 1.0 and s(10) == 0.5
    with pytest.raises(ValidationError):
        decaying_schedule(0.0)


def test_stochastic_reproducible(task):
    space = WeightedSpace(task.xi)
    rep = RepresentationFactory(task.pm, space, task.mdp.reward, 0.99).build(Method.SCHUR, 5)
    sampler = XiSampler(task.xi, 4)
    kw = dict(steps=3000, theta0=np.ones(5))
    a = stochastic_td0(task.mdp, task.policy, sampler, rep, rng_seed=7, **kw)
    b = stochastic_td0(task.mdp, task.policy, sampler, rep, rng_seed=7, **kw)
    assert np.array_equal(a.final_theta, b.final_theta)
    assert np.array_equal(a.theta_trajectory, b.theta_trajectory)
    c = stochastic_td0(task.mdp, task.policy, sampler, rep, rng_seed=8, **kw)
    assert not np.array_equal(a.final_theta, c.final_theta)


def test_sampler_frequencies():
    xi = np.array([0.1, 0.2, 0.3, 0.4])
    s, a = XiSampler(xi, 2)(np.random.default_rng(0), 200_000)
    freq = np.bincount(s * 2 + a, minlength=4) / 200_000
    assert np.abs(freq - xi).max() < 5e-3


def test_stochastic_matches_single_update():
    # one transition on the deterministic two-state chain, by hand
    from stablerepr.io import fixture_path, load_mdp
    mdp = load_mdp(fixture_path("tsitsiklis") / "mdp.json")
    sampler = XiSampler(np.array([1.0 - 1e-12, 1e-12]), 1)
    res = stochastic_td0(mdp, [[1.0], [1.0]], sampler, np.array([[1.0], [2.0]]),
                         eta_schedule=0.1, steps=1, theta0=np.ones(1),
                         tolerances=Tolerances(log_every=1))
    # delta = 1 - 0 - 0.99 * 2 from state 0 to state 1
    assert res.final_theta[0] == pytest.approx(1.0 - 0.1 * (1.0 - 0.99 * 2.0))


@pytest.mark.slow
def test_stochastic_schur_converges(task):
    space = WeightedSpace(task.xi)
    rep = RepresentationFactory(task.pm, space, task.mdp.reward, 0.99).build(Method.SCHUR, 10)
    theta_star = td_fixed_point(rep, task.pm, space, task.mdp.reward, 0.99)
    res = stochastic_td0(task.mdp, task.policy, XiSampler(task.xi, 4), rep, steps=200_000,
                         rng_seed=0, theta0=np.ones(10),
                         tolerances=Tolerances(log_every=1000))
    assert np.allclose(res.theta_star, theta_star)
    assert res.theta_trajectory[-1] < 1e-2
    assert res.outcome in (CONVERGED, UNDECIDED)


def test_unstable_successor_cell_diverges(task):
    # the unstable successor cells sit about 1e-7 left of the axis, so the
    # divergence is only observable through the expected dynamics
    space = WeightedSpace(task.xi)
    factory = RepresentationFactory(task.pm, space, task.mdp.reward, 0.99)
    unstable = [d for d in range(1, 41)
                if stability_report(iteration_matrix(factory.build(Method.SVD_SR, d), task.pm,
                                                     space, 0.99)).min_real_part < -1e-9]
    assert unstable
    d = unstable[-1]
    rep = factory.build(Method.SVD_SR, d)
    a = iteration_matrix(rep, task.pm, space, 0.99).a_phi
    res = expected_td0(rep, task.pm, space, task.mdp.reward, 0.99, 1 / np.linalg.norm(a, 2),
                       theta0=np.ones(d), max_steps=10 ** 10,
                       tolerances=Tolerances(log_every=10 ** 5))
    assert res.outcome == DIVERGED


@pytest.mark.parametrize("d", [10, 20])
def test_stochastic_unstable_krylov_cell_diverges(task, d):
    space = WeightedSpace(task.xi)
    rep = RepresentationFactory(task.pm, space, task.mdp.reward, 0.99).build(Method.KRYLOV, d)
    assert not stability_report(iteration_matrix(rep, task.pm, space, 0.99)).stable
    eta0 = default_eta0(rep, task.pm, space, 0.99)
    res = stochastic_td0(task.mdp, task.policy, XiSampler(task.xi, 4), rep,
                         eta_schedule=eta0, steps=2_000_000, rng_seed=0,
                         theta0=np.ones(d), tolerances=Tolerances(log_every=1000))
    assert res.outcome == DIVERGED
    assert res.theta_norms[-1] > 1e6 * (1 + np.sqrt(d))
