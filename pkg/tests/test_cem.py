import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvq import cem, qnet
from mvq.cem import CemConfig, OptimizerError, cem_maximize
from mvq.qnet import Arch, ArchConfig
from mvq.world import MAX_STEP_DISPLACEMENT, ActionCommand

SMALL = ArchConfig(resolution=16)


def quadratic(target):
    target = np.asarray(target)

    def q(a):
        a = np.asarray(a)
        return -((a[..., :3] - target) ** 2).sum(-1) - 10.0 * a[..., 3:].sum(-1)
    return q


def _valid(cmd: ActionCommand):
    d = np.asarray(cmd.displacement)
    return (np.abs(d) <= MAX_STEP_DISPLACEMENT + 1e-15).all() and not (cmd.gripper_open and cmd.gripper_close) \
        and all(b in (0, 1) for b in (cmd.gripper_open, cmd.gripper_close, cmd.terminate))


def test_config_validation():
    for bad in (dict(n_elites=0), dict(n_elites=65), dict(n_iterations=0), dict(epsilon_exploration=1.5),
                dict(initial_std=(0.0, 0.01, 0.01)), dict(std_floor=0.0)):
        with pytest.raises(ValueError):
            CemConfig(**bad)


def test_quadratic_optimum_found():
    target = np.array([0.008, -0.005, 0.003])
    hits = 0
    for seed in range(100):
        a, best = cem_maximize(quadratic(target), seed=seed)
        hits += np.abs(np.asarray(a.displacement) - target).max() < 1e-2
        assert (a.gripper_open, a.gripper_close, a.terminate) == (0, 0, 0)
    assert hits >= 95


def test_degenerate_config_returns_the_single_sample():
    cfg = CemConfig(n_samples=1, n_elites=1, n_iterations=1)
    seen = []

    def q(a):
        seen.append(np.array(a))
        return np.zeros(len(a))
    a, _ = cem_maximize(q, cfg, seed=3)
    assert np.array_equal(a.to_vector(), seen[0][0])


def test_constant_landscape():
    a, best = cem_maximize(lambda a: np.full(len(a), 2.5), seed=0)
    assert best == 2.5 and _valid(a)


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), arrays_w := st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_best_q_is_reevaluated_and_action_valid(seed, w):
    w = np.array(w)

    def q(a):
        return np.tanh(np.asarray(a) @ w * 40)
    a, best = cem_maximize(q, seed=seed)
    assert best == q(a.to_vector()[None, :])[0]
    assert _valid(a)


def test_linear_refit_moves_toward_gradient():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.normal(size=3)
        cfg = CemConfig()
        dist = cem.ActionDistribution.initial(1, cfg)
        cand = dist.sample(cfg.n_samples, rng, cfg.max_step_displacement)
        scores = cand[0, :, :3] @ w
        elites = cand[:, np.argsort(-scores)[:cfg.n_elites]]
        new = dist.refit(elites, cfg.std_floor)
        assert new.mean[0] @ w > 0
        assert (new.std >= cfg.std_floor).all() and ((0 <= new.probs) & (new.probs <= 1)).all()


@pytest.mark.parametrize("scale", [1e-3, 1.0, 7.0, 1e4])
def test_argmax_invariant_to_positive_scaling(scale):
    q = quadratic([0.01, 0.0, -0.01])
    a, _ = cem_maximize(q, seed=11)
    b, _ = cem_maximize(lambda x: scale * q(x), seed=11)
    assert a == b


def test_all_non_finite_raises():
    with pytest.raises(OptimizerError):
        cem_maximize(lambda a: np.full(len(a), np.nan), seed=0)


def test_partially_non_finite_ignored():
    def q(a):
        out = quadratic([0, 0, 0])(a)
        return np.where(np.asarray(a)[..., 5] > 0, np.nan, out)
    a, best = cem_maximize(q, seed=0)
    assert np.isfinite(best) and a.terminate == 0


def test_more_samples_never_worse_in_expectation():
    # E[max of n draws] is nondecreasing in n; Monte Carlo over 100 seeds on a fixed landscape
    q = quadratic([0.02, -0.01, 0.015])
    means = []
    for n in (4, 16, 64, 256):
        cfg = CemConfig(n_samples=n, n_elites=min(6, n))
        means.append(np.mean([cem_maximize(q, cfg, seed=s)[1] for s in range(100)]))
    assert all(b >= a for a, b in zip(means, means[1:])), means


# ---------------------------------------------------------------- policy


def _obs(rng, n=1):
    return (rng.uniform(0, 1, (n, 3, 16, 16, 4)).astype(np.float32), rng.integers(0, 2, n).astype(np.float32))


def test_select_action_greedy_equals_cem(rng):
    p = qnet.init_params(Arch.MV_Towers, 0, SMALL)
    images, grip = _obs(rng)
    q = cem.q_evaluator(Arch.MV_Towers, p, images, grip)
    want, _ = cem_maximize(lambda a: q(a[None])[0], seed=5)
    for mode, cfg in ((cem.Mode.greedy, CemConfig()), (cem.Mode.epsilon_greedy, CemConfig(epsilon_exploration=0.0))):
        got = cem.select_actions(Arch.MV_Towers, p, (images, grip), cfg, mode, seed=5)[0]
        assert np.array_equal(got, want.to_vector())


def test_select_action_is_deterministic(rng):
    p = qnet.init_params(Arch.MV_Dropout, 0, SMALL)
    obs = _obs(rng, 4)
    cfg = CemConfig(epsilon_exploration=0.3)
    a = cem.select_actions(Arch.MV_Dropout, p, obs, cfg, "epsilon_greedy", seed=9)
    b = cem.select_actions(Arch.MV_Dropout, p, obs, cfg, "epsilon_greedy", seed=9)
    assert np.array_equal(a, b)


def test_pure_exploration_is_uniform(rng):
    p = qnet.init_params(Arch.SV_Shoulder, 0, SMALL)
    images, grip = _obs(rng, 4000)
    cfg = CemConfig(epsilon_exploration=1.0, n_samples=4, n_elites=1, n_iterations=1)
    acts = cem.select_actions(Arch.SV_Shoulder, p, (images, grip), cfg, "epsilon_greedy", seed=0)
    d = acts[:, :3] / MAX_STEP_DISPLACEMENT
    # U(-1, 1): mean 0, variance 1/3
    assert np.abs(d.mean(0)).max() < 0.05 and np.abs(d.var(0) - 1 / 3).max() < 0.03
    grip_cmd = acts[:, 3] + 2 * acts[:, 4]
    assert np.allclose(np.bincount(grip_cmd.astype(int), minlength=3) / len(acts), 1 / 3, atol=0.03)
    assert abs(acts[:, 5].mean() - 0.5) < 0.03
    assert not (acts[:, 3] * acts[:, 4]).any()


def test_max_q_next_of_zero_network(rng):
    p = qnet.init_params(Arch.MV_Dropout, 0, SMALL)
    p = p.__class__(p.arch, {k: np.zeros_like(v) for k, v in p.tensors.items()}, p.meta)
    images, grip = _obs(rng, 3)
    assert np.array_equal(cem.max_q_next_batch(Arch.MV_Dropout, p, images, grip, seed=0), np.zeros(3))


def test_max_q_next_on_synthetic_quadratic(monkeypatch, rng):
    target = np.array([0.01, 0.005, -0.012])
    qq = quadratic(target)
    monkeypatch.setattr(cem, "q_evaluator", lambda *a, **k: lambda cand: qq(cand))
    p = qnet.init_params(Arch.MV_Towers, 0, SMALL)
    images, grip = _obs(rng, 1)
    best = cem.max_q_next(Arch.MV_Towers, p, (images, grip), seed=2)
    assert best == pytest.approx(0.0, abs=1e-2)


def test_wrong_arch_rejected(rng):
    p = qnet.init_params(Arch.MV_Towers, 0, SMALL)
    with pytest.raises(qnet.ContractViolation):
        cem.select_actions(Arch.MV_Siamese, p, _obs(rng))
