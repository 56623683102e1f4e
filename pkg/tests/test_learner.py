import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trd import oracle
from trd.envs import make_gridworld_two_paths, make_periodic_chain
from trd.estimators import Adam, NeuralTrd, TabularTrd, apply_update, scalar_q
from trd.learner import (
    Batch,
    LambdaSchedule,
    NStepAccumulator,
    ReplayBuffer,
    TrainConfig,
    TrainingDivergedError,
    TransitionRecord,
    dqn_bellman_residual,
    dqn_target,
    evaluate,
    qdagger_loss,
    retrain_trd,
    softmax,
    train_teacher,
    trd_bellman_residual,
    trd_loss,
    trd_target,
    update_lambda,
)

from conftest import GAMMA, all_specs

JUNCTION, UP, DOWN = 0, 0, 1


def single(reward, next_state=0, terminated=False, state=0, action=0):
    return Batch(obs=None, state=np.array([state]), action=np.array([action]), reward=np.array([float(reward)]),
                 next_obs=None, next_state=np.array([next_state]), terminated=np.array([float(terminated)]))


def table_net(vectors, n, w=1, gamma=GAMMA):
    return TabularTrd(np.asarray(vectors, dtype=float), n, w, gamma)


# --- targets ---------------------------------------------------------------

def test_dqn_target_terminal_and_zero_discount():
    net = table_net(np.full((1, 2, 1), 5.0), 0)
    assert dqn_target(single(1.0, terminated=True), net, GAMMA)[0] == 1.0
    assert dqn_target(single(0.7), net, 0.0)[0] == 0.7


def test_trd_target_terminal_masks_bootstrap():
    net = table_net(np.ones((1, 2, 5)), 4)
    np.testing.assert_array_equal(trd_target(single(1.0, terminated=True), net, GAMMA, 1)[0], [1, 0, 0, 0, 0])


def test_trd_target_symbolic_shift():
    a, b, c, d, e, r = 2.0, 3.0, 5.0, 7.0, 11.0, 13.0
    vecs = np.array([[[a, b, c, d, e], [0, 0, 0, 0, 0]]])
    tgt = trd_target(single(r), table_net(vecs, 4, gamma=1.0), 1.0, 1)[0]
    assert tgt.tolist() == [r, a, b, c, d + e]


def test_trd_target_uses_summed_argmax():
    # action 1 has the larger sum even though action 0 has the larger first element
    vecs = np.array([[[4.0, 0.0, 0.0], [1.0, 1.0, 3.0]]])
    tgt = trd_target(single(0.0), table_net(vecs, 2, gamma=1.0), 1.0, 1)[0]
    assert tgt.tolist() == [0.0, 1.0, 4.0]


def test_non_finite_target_raises():
    with pytest.raises(TrainingDivergedError):
        trd_target(single(np.nan), table_net(np.zeros((1, 2, 3)), 2), GAMMA, 1)


def test_sampled_targets_reproduce_oracle_on_gridworld(grid):
    vt = oracle.exact_trd_q(grid, oracle.optimal_policy(grid, GAMMA), GAMMA, 4, 1)
    net = TabularTrd.from_value_table(vt)
    s, a = np.nonzero(~grid.terminal[:, None] & np.ones((1, grid.num_actions), bool))
    nxt = grid.transition[s, a].argmax(axis=1)
    batch = Batch(obs=None, state=s, action=a, reward=grid.reward[s, a], next_obs=None, next_state=nxt,
                  terminated=grid.terminal[nxt].astype(float))
    assert np.max(np.abs(trd_target(batch, net, GAMMA, 1) - vt.vectors[s, a])) < 1e-9
    assert np.max(np.abs(dqn_target(batch, net, GAMMA) - vt.scalar[s, a])) < 1e-9


@pytest.mark.parametrize("spec", all_specs(), ids=lambda s: s.name)
@pytest.mark.parametrize("n,w", [(1, 1), (4, 1), (8, 1), (2, 2), (3, 3), (2, 4)])
def test_oracle_is_fixed_point(spec, n, w):
    pol = oracle.optimal_policy(spec, GAMMA)
    vt = oracle.exact_trd_q(spec, pol, GAMMA, n, w)
    assert trd_bellman_residual(vt.vectors, spec, pol, GAMMA, w) < 1e-9
    assert dqn_bellman_residual(oracle.optimal_q(spec, GAMMA), spec, GAMMA) < 1e-9


# --- losses ----------------------------------------------------------------

def test_trd_loss_values():
    p = np.arange(6.0).reshape(2, 3)
    loss, g = trd_loss(p, p)
    assert loss == 0 and np.all(g == 0)
    loss, _ = trd_loss(p + 0.5, p)
    assert loss == pytest.approx(0.25)
    with pytest.raises(ValueError):
        trd_loss(p, p[:, :2])


def test_overfit_one_batch():
    rng = np.random.default_rng(0)
    est = NeuralTrd(4, 2, 3, 1, GAMMA, hidden=(32, 32), seed=0)
    x = rng.normal(size=(8, 4))
    actions = rng.integers(0, 2, size=8)
    target = rng.normal(size=(8, 4))
    opt = Adam(lr=3e-3)
    idx = np.arange(8)
    for _ in range(500):
        out = est.predict(x)
        loss, g = trd_loss(out[idx, actions], target)
        up = np.zeros_like(out)
        up[idx, actions] = g
        _, grads = est.forward_backward(x, up)
        apply_update(est, grads, opt)
    assert trd_loss(est.predict(x)[idx, actions], target)[0] < 1e-4


def _reference_kl(teacher_q, student_q, temperature):
    p = [np.exp(q / temperature) for q in teacher_q]
    p = [v / sum(p) for v in p]
    s = [np.exp(q / temperature) for q in student_q]
    s = [v / sum(s) for v in s]
    return sum(pi * np.log(pi / si) for pi, si in zip(p, s))


def test_distillation_closed_form():
    term = qdagger_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0, 1.0)
    assert term.kl == pytest.approx(_reference_kl([1.0, 0.0], [0.0, 1.0], 1.0), abs=1e-12)
    assert term.kl == pytest.approx(np.tanh(0.5), abs=1e-12)


def test_distillation_identical_policies():
    q = np.array([[0.3, -1.2, 2.0]])
    term = qdagger_loss(q, q, 1.0, 1.0)
    p = softmax(q)
    assert term.kl == pytest.approx(0.0, abs=1e-12)
    assert term.cross_entropy == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)
    assert np.allclose(term.grad, 0)


def test_zero_lambda_removes_distillation():
    term = qdagger_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0, 0.0)
    assert term.loss == 0.0 and np.all(term.grad == 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), temperature=st.floats(0.2, 5.0))
def test_distillation_gradient(seed, temperature):
    rng = np.random.default_rng(seed)
    sq, tq = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    lam = 0.7
    term = qdagger_loss(sq, tq, temperature, lam)
    eps = 1e-6
    num = np.zeros_like(sq)
    for i in np.ndindex(sq.shape):
        hi, lo = sq.copy(), sq.copy()
        hi[i] += eps
        lo[i] -= eps
        num[i] = (qdagger_loss(hi, tq, temperature, lam).loss - qdagger_loss(lo, tq, temperature, lam).loss) / (2 * eps)
    np.testing.assert_allclose(term.grad, num, atol=1e-7)


@pytest.mark.parametrize("student,want", [(10.0, 0.0), (0.0, 1.0), (5.0, 0.5), (-3.0, 1.0), (12.0, 0.0)])
def test_lambda_rule(student, want):
    assert update_lambda(LambdaSchedule(10.0), student, 10.0).value == want


def test_lambda_needs_nonzero_teacher():
    with pytest.raises(ValueError):
        update_lambda(LambdaSchedule(0.0), 1.0, 0.0)


# --- experience ------------------------------------------------------------

def test_accumulator_discounts_within_group():
    acc = NStepAccumulator(3, 0.5)
    out = []
    for t, r in enumerate([1.0, 2.0, 4.0, 8.0]):
        out += acc.push(None, t, 0, r, None, t + 1, False)
    assert [rec.grouped_reward for rec in out] == [1 + 1 + 1, 2 + 2 + 2]
    assert [(rec.state, rec.next_state) for rec in out] == [(0, 3), (1, 4)]


def test_accumulator_flushes_on_termination():
    acc = NStepAccumulator(3, 1.0)
    out = acc.push(None, 0, 0, 1.0, None, 1, False)
    out += acc.push(None, 1, 0, 2.0, None, 2, True)
    assert [(rec.state, rec.grouped_reward, rec.terminated) for rec in out] == [(0, 3.0, True), (1, 2.0, True)]


def test_accumulator_drops_truncated_groups():
    acc = NStepAccumulator(3, 1.0)
    acc.push(None, 0, 0, 1.0, None, 1, False)
    assert acc.push(None, 1, 0, 1.0, None, 2, False, truncated=True) == []


def _collect(spec, w, steps=300, seed=0):
    rng = np.random.default_rng(seed)
    from trd.envs import reset, step

    buf = ReplayBuffer(10_000, spec.obs_dim, w=w, gamma=GAMMA)
    acc = NStepAccumulator(w, GAMMA)
    env, obs = reset(spec, seed)
    for _ in range(steps):
        s = env.current_state
        a = int(rng.integers(spec.num_actions))
        nxt, r, term = step(env, a)
        buf.extend(acc.push(obs, s, a, r, nxt, env.current_state, term, env.truncated))
        obs = nxt
        if env.done:
            acc.reset()
            env, obs = reset(spec, int(rng.integers(1 << 30)))
    return buf


@pytest.mark.parametrize("w", [2, 3])
def test_regroup_matches_direct_grouping(slip_chain, w):
    direct = _collect(slip_chain, w)
    regrouped = _collect(slip_chain, 1).regroup(w, GAMMA)
    k = len(direct)
    assert len(regrouped) == k
    for name in ("state", "action", "next_state", "terminated"):
        np.testing.assert_array_equal(getattr(direct, name)[:k], getattr(regrouped, name)[:k])
    np.testing.assert_allclose(direct.reward[:k], regrouped.reward[:k], atol=1e-12)


def test_buffer_ring_and_roundtrip(tmp_path, grid):
    src = _collect(grid, 1, steps=120)
    idx = src.chronological()
    buf = ReplayBuffer(50, grid.obs_dim)
    for i in idx:
        b = src.take([i])
        buf.add(TransitionRecord(b.obs[0], b.state[0], b.action[0], b.reward[0], b.next_obs[0],
                                 b.next_state[0], bool(b.terminated[0])))
    assert len(buf) == 50
    np.testing.assert_array_equal(buf.state[buf.chronological()], src.state[idx[-50:]])
    back = ReplayBuffer.load(buf.save(tmp_path / "b.npz"))
    np.testing.assert_array_equal(back.state[:50], buf.state[buf.chronological()])
    np.testing.assert_array_equal(back.obs[:50], buf.obs[buf.chronological()])


# --- acting, teacher and retraining ---------------------------------------

def test_evaluate_oracle_greedy_gridworld(grid):
    est = TabularTrd.from_value_table(oracle.exact_trd_q(grid, oracle.optimal_policy(grid, GAMMA), GAMMA, 4, 1))
    res = evaluate(est, grid, seeds=range(10), epsilon=0.0)
    assert res.returns == [4.0] * 10
    rand = evaluate(TabularTrd.zeros(grid, 4, 1, GAMMA), grid, seeds=range(10), epsilon=1.0)
    assert rand.mean_return <= res.mean_return
    assert evaluate(est, grid, seeds=range(10)).returns == evaluate(est, grid, seeds=range(10)).returns


@pytest.fixture(scope="module")
def grid_teacher():
    spec = make_gridworld_two_paths()
    cfg = TrainConfig(gamma=GAMMA, n=4, w=1, teacher_steps=6000, offline_steps=2000, online_steps=4000)
    return spec, cfg, train_teacher(spec, cfg)


def test_teacher_prefers_down(grid_teacher):
    spec, _, teacher = grid_teacher
    assert int(np.argmax(teacher.net.q_values(spec.observation(JUNCTION)[None])[0])) == DOWN


def test_teacher_is_deterministic(grid_teacher):
    spec, cfg, teacher = grid_teacher
    again = train_teacher(spec, cfg)
    assert again.trace == teacher.trace
    assert all(np.array_equal(a, b) for a, b in zip(again.net.net.params, teacher.net.net.params))


def test_chain_teacher_reaches_optimal_return():
    spec = make_periodic_chain()
    teacher = train_teacher(spec, TrainConfig(gamma=0.99, teacher_steps=8000))
    best = TabularTrd.from_value_table(oracle.exact_trd_q(spec, oracle.optimal_policy(spec, 0.99), 0.99, 1, 1))
    assert evaluate(teacher.net, spec, epsilon=0.0).mean_return == evaluate(best, spec, epsilon=0.0).mean_return


def test_retrain_gridworld(grid_teacher):
    spec, cfg, teacher = grid_teacher
    res = retrain_trd(teacher, spec, cfg)
    phases = [r["phase"] for r in res.curves]
    assert phases[0] == "offline" and phases[-1] == "online"
    assert res.curves[-1]["normalized_return"] >= 0.95
    obs = spec.observation(JUNCTION)[None]
    np.testing.assert_allclose(scalar_q(res.estimator, obs)[0], teacher.net.q_values(obs)[0], atol=0.05)
    # lambda never rises again once the student has matched the teacher
    lams = [r["lambda"] for r in res.curves]
    matched = next(i for i, r in enumerate(res.curves) if r["normalized_return"] >= 1.0)
    assert all(b <= a for a, b in zip(lams[matched + 1:], lams[matched + 2:]))
    # summed vectors track the exact values of the learned greedy policy on visited states
    pol = oracle.optimal_policy(spec, GAMMA)
    q = oracle.exact_q(spec, pol, GAMMA)
    for s in spec.reachable_states():
        a = int(pol[s].argmax())
        assert abs(scalar_q(res.estimator, spec.observation(s)[None])[0, a] - q[s, a]) < 0.1


def test_retrain_grouped_keeps_horizon(grid_teacher):
    spec, cfg, teacher = grid_teacher
    from dataclasses import replace

    res = retrain_trd(teacher, spec, replace(cfg, n=2, w=2, offline_steps=500, online_steps=500))
    assert res.estimator.n * res.estimator.w == 4
    assert res.estimator.predict(spec.observation(JUNCTION)).shape == (1, 2, 3)


def test_retrain_rejects_mismatched_teacher(grid_teacher):
    _, cfg, teacher = grid_teacher
    with pytest.raises(ValueError):
        retrain_trd(teacher, make_periodic_chain(), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(n=0)
    assert TrainConfig.atari_defaults().learning_rate == 1e-4
