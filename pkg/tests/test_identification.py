import math

import numpy as np
import pytest

from pushident.dynamics import Table, World, WorldConfig, breakaway_force, world_rollout
from pushident.errors import WorkspaceExceeded
from pushident.geometry import BodyState, GridObject, ParamMap, PushAction
from pushident.identification import (IdentConfig, ModelEnsemble, infer_models, loss_gradient,
                                      projected_update, run_identification_session,
                                      softmax_probabilities, trajectory_loss)

from conftest import graded_params, rect_object

CFG = WorldConfig()
REST = BodyState(np.zeros(2))


def pushes():
    return [PushAction(1, [0.0, 0.3]), PushAction(4, [0.25, 0.05]), PushAction(0, [0.02, 0.35])]


@pytest.fixture
def observed(bar):
    hidden = graded_params(bar)
    return hidden, world_rollout(bar, REST, pushes(), hidden, CFG)


def central_difference(f, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (f(x + e) - f(x - e)) / (2 * h[i])
    return g


def test_loss_vanishes_at_truth(bar, observed):
    hidden, traj = observed
    assert trajectory_loss(bar, traj, hidden, CFG) < 1e-6


def test_uniform_guess_is_worse(bar, observed):
    hidden, traj = observed
    uniform = ParamMap.uniform(bar.n, hidden.mass.mean(), hidden.products.mean() / hidden.mass.mean())
    assert trajectory_loss(bar, traj, uniform) > trajectory_loss(bar, traj, hidden) + 1e-6


def test_loss_scaling_degeneracy(bar, observed, rng):
    _, traj = observed
    guess = ParamMap(rng.uniform(0.005, 0.02, bar.n), rng.uniform(0.2, 0.6, bar.n))
    base = trajectory_loss(bar, traj, guess)
    for c in (0.5, 2.0, 10.0):
        scaled = ParamMap(c * guess.mass, guess.friction / c)
        assert trajectory_loss(bar, traj, scaled) == pytest.approx(base, rel=1e-2)


def test_gradient_zero_at_truth(bar, observed):
    hidden, traj = observed
    gm, gf = loss_gradient(bar, traj, hidden)
    assert np.linalg.norm(np.r_[gm, gf]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    obj = rect_object(int(rng.integers(1, 5)), int(rng.integers(1, 4)), 0.03)
    hidden = ParamMap(rng.uniform(0.005, 0.03, obj.n), rng.uniform(0.2, 0.8, obj.n))
    cell = obj.contour[int(rng.integers(len(obj.contour)))][0]
    f = rng.uniform(0.5, 1.5) * breakaway_force(hidden) * np.array([math.cos(a := rng.uniform(0, 6.3)), math.sin(a)])
    traj = world_rollout(obj, REST, [PushAction(cell, f)], hidden, CFG)
    guess = ParamMap(rng.uniform(0.005, 0.03, obj.n), rng.uniform(0.2, 0.8, obj.n))
    gm, gf = loss_gradient(obj, traj, guess)
    x = np.r_[guess.mass, guess.friction]
    loss = lambda v: trajectory_loss(obj, traj, ParamMap(v[:obj.n], v[obj.n:]))
    fd = central_difference(loss, x, 1e-6 * x)
    an = np.r_[gm, gf]
    mask = np.abs(fd) > 1e-10
    assert np.all(np.abs(an[mask] - fd[mask]) <= 1e-4 * np.abs(fd[mask]))


def test_gradient_finite_with_zero_friction_cells(bar, observed):
    _, traj = observed
    mu = np.full(bar.n, 0.4)
    mu[::2] = 0.0
    gm, gf = loss_gradient(bar, traj, ParamMap(np.full(bar.n, 0.01), mu))
    assert np.all(np.isfinite(gm)) and np.all(np.isfinite(gf))


def test_projected_update_examples():
    p = ParamMap([0.01, 0.02], [0.2, 0.5])
    same = projected_update(p, (np.zeros(2), np.zeros(2)), 0.1, (0.05, 1.0))
    assert np.array_equal(same.mass, p.mass) and np.array_equal(same.friction, p.friction)
    low = projected_update(p, (np.zeros(2), np.array([5.0, 0.0])), 0.1, (0.05, 1.0))
    assert low.friction[0] == 0.0  # 0.2 - 0.5 clamps to zero
    high = projected_update(p, (np.array([-0.9, 0.0]), np.zeros(2)), 0.1, (0.05, 1.0))
    assert high.mass[0] == 0.05
    tiny = projected_update(p, (np.array([1.0, 0.0]), np.zeros(2)), 1.0, (0.05, 1.0))
    assert tiny.mass[0] == 1e-6


def test_softmax_properties(rng):
    losses = rng.uniform(0, 2, 9)
    p = softmax_probabilities(losses)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    order = np.argsort(losses)
    assert np.all(np.diff(p[order]) < 0)
    assert np.allclose(softmax_probabilities(losses + 3.0, 0.7), softmax_probabilities(losses, 0.7))
    assert np.allclose(softmax_probabilities(np.full(4, 0.3)), 0.25)
    assert np.allclose(softmax_probabilities([0.1, 5.0], math.inf), [0.5, 0.5])


def test_ensemble_validation():
    with pytest.raises(ValueError):
        ModelEnsemble((ParamMap([0.01], [0.4]),), [0.0], [0.7])
    with pytest.raises(ValueError):
        IdentConfig(K=3)
    with pytest.raises(ValueError):
        IdentConfig(learning_rate=0.0)


def test_sweep_bounds():
    b = IdentConfig(K=4, mass_max=0.1, friction_max=2.0).sweep_bounds()
    assert np.allclose(b, [[1.0, 0.1], [2.0, 0.1], [2.0, 0.05], [2.0, 0.1]])


def test_high_temperature_gives_uniform_weights(bar, observed):
    _, traj = observed
    ens = infer_models(bar, traj, IdentConfig(K=2, temperature=math.inf, epochs=5))
    assert np.allclose(ens.probabilities, 0.5)


def test_ensemble_invariants(bar, observed):
    _, traj = observed
    ens = infer_models(bar, traj, IdentConfig(K=6, epochs=20))
    assert ens.probabilities.sum() == pytest.approx(1.0, abs=1e-9)
    order = np.argsort(ens.losses)
    assert np.all(np.diff(ens.probabilities[order]) <= 1e-15)
    for m, (fmax, mmax) in zip(ens.models, ens.bounds):
        assert np.all((m.mass >= 1e-6) & (m.mass <= mmax))
        assert np.all((m.friction >= 0) & (m.friction <= fmax))


def test_more_epochs_never_hurt(bar, observed):
    _, traj = observed
    losses = [infer_models(bar, traj, IdentConfig(K=4, epochs=e)).losses for e in (1, 2, 5, 10, 20)]
    assert np.all(np.diff(np.array(losses), axis=0) <= 1e-12)


def test_single_cell_product_recovered():
    obj = GridObject(0.05, ((0, 0),))
    hidden = ParamMap([0.02], [0.45])
    world = World(obj, hidden, CFG, seed=1)
    session = run_identification_session(obj, world, IdentConfig(nb_actions=1), rng=2)
    best = session.ensemble.models[int(np.argmax(session.ensemble.probabilities))]
    assert abs(best.products[0] / hidden.products[0] - 1) < 0.05


def test_session_runs_five_pushes_deterministically(bar):
    hidden = graded_params(bar)
    def run():
        world = World(bar, hidden, WorldConfig(force_noise_sigma=0.05), seed=4, table=Table(0.5))
        return run_identification_session(bar, world, IdentConfig(K=6, epochs=15), rng=9)
    a, b = run(), run()
    assert len(a.actions) == 5 and a.ensemble.K == 6 and len(a.history) == 5
    assert np.array_equal(a.ensemble.masses, b.ensemble.masses)
    assert np.array_equal(a.ensemble.probabilities, b.ensemble.probabilities)


def test_leaving_the_table_raises_with_partial_result(bar):
    world = World(bar, graded_params(bar), CFG, seed=0, table=Table(0.09))
    with pytest.raises(WorkspaceExceeded) as info:
        run_identification_session(bar, world, IdentConfig(K=2, epochs=3, nb_actions=20), rng=0)
    assert info.value.result is not None
    assert len(info.value.result.actions) >= 1
