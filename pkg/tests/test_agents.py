import copy
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfac.agents import (BinnedTrainer, CriticBank, MfcgTrainer, MfcTrainer, MfgTrainer, Rates,
                         Schedule, TrainingAborted, td_error, train)
from mfac.environment import LqModel1D, make_model
from mfac import analytic as an


class ZeroNormal:
    """Generator stand-in whose normal draws are all zero."""

    def standard_normal(self, size=None):
        return np.zeros(size)

    def uniform(self, lo, hi, size=None):
        return np.asarray(lo) + np.zeros(size if size is not None else np.shape(lo))


def small(trainer_cls, model=None, **kw):
    kw.setdefault("critic_hidden", (8,))
    kw.setdefault("actor_trunk", (6,))
    kw.setdefault("actor_head", (5,))
    kw.setdefault("seed", 3)
    return trainer_cls(model or make_model("lq1d-paper"), kw.pop("rates", None), **kw)


def test_td_error_examples():
    assert td_error(0.0, 0.0, 0.0, 0.9) == 0.0
    assert td_error(1.0, 2.0, 3.0, 0.99) == pytest.approx(-0.02, abs=1e-15)


def test_schedule_modes():
    s = Schedule(1e-3, "polynomial", 0.7, 100.0)
    assert s(0) == 1e-3 and s(100) == pytest.approx(1e-3 * 2 ** -0.7)
    assert s.robbins_monro and not Schedule(1e-3).robbins_monro
    assert not Schedule(1e-3, "polynomial", 0.5, 1.0).robbins_monro
    with pytest.raises(ValueError):
        Schedule(-1.0)


def test_schedule_partial_sums():
    s = Schedule(1.0, "polynomial", 0.8, 10.0)
    n = np.arange(10 ** 6)
    r = 1.0 * (1 + n / 10.0) ** -0.8
    # divergent sum keeps growing, squared sum has converged
    assert r[: 10 ** 6].sum() > 1.5 * r[: 10 ** 5].sum()
    sq = np.cumsum(r * r)
    assert sq[-1] - sq[10 ** 5] < 0.01 * sq[-1]
    assert s(10 ** 6 - 1) == pytest.approx(r[-1])


def test_theory_schedule_ordering():
    r = Rates.theory("mfg")
    ratio = lambda a, b, k: (a(k) / b(k)) / (a(0) / b(0))
    # both ratios decay exactly like (1 + n / offset) ** -(exponent gap)
    for n in (10 ** 3, 10 ** 6, 10 ** 9):
        assert ratio(r.measure, r.actor, n) == pytest.approx((1 + n / 1e4) ** -0.2, rel=1e-12)
        assert ratio(r.actor, r.critic, n) == pytest.approx((1 + n / 1e4) ** -0.15, rel=1e-12)
    seq = [ratio(r.actor, r.critic, 10 ** k) for k in range(18)]
    assert all(b < a for a, b in zip(seq, seq[1:])) and seq[-1] < 0.02
    # the smaller gap (0.15) reaches 2% of its start only after offset * 50 ** (1 / 0.15) steps
    n_star = 1e4 * (50 ** (1 / 0.15) - 1)
    assert ratio(r.actor, r.critic, 1.01 * n_star) < 0.02 < ratio(r.actor, r.critic, 0.99 * n_star)


def test_table1_rates_and_warnings():
    r = Rates.table1("mfg")
    assert (r.actor(0), r.critic(0), r.measure(0)) == (5e-5, 1e-4, 1e-5)
    assert Rates.table1("mfc").measure(0) == 1e-3
    assert r.ordering_warnings("mfg") == [] and Rates.table1("mfc").ordering_warnings("mfc") == []
    assert Rates.table1("mfc").ordering_warnings("mfg")
    with pytest.warns(UserWarning):
        small(MfgTrainer, rates=Rates.table1("mfc"))
    assert Rates.from_dict(r.to_dict()) == r


def test_zero_rates_only_move_states():
    zero = Rates(Schedule(0.0), Schedule(0.0), Schedule(0.0))
    t = small(MfgTrainer, rates=zero)
    a, c, m = t.policy.params.copy(), t.critic.params.copy(), t.measure_mean()
    for _ in range(50):
        t.step()
    assert np.array_equal(a, t.policy.params) and np.array_equal(c, t.critic.params)
    assert np.array_equal(m, t.measure_mean()) and t.n == 50


@pytest.mark.filterwarnings("ignore:game rates")
def test_measure_only_updates():
    rates = Rates(Schedule(0.0), Schedule(0.0), Schedule(0.1))
    t = small(MfgTrainer, rates=rates)
    m = t.measure_mean()[0]
    t.step()
    assert t.measure_mean()[0] == pytest.approx(0.9 * m + 0.1 * t.x[0], abs=1e-15)


def test_zero_reward_no_change():
    model = LqModel1D(0.0, 0.0, 0.0, 0.0, 0.0, 0.3, reward_scaling="dt")
    # no quadratic penalty at all: make the reward exactly zero by zeroing actions too
    t = small(MfgTrainer, model, initial_state=[0.0])
    t.critic.params[:] = 0.0
    t.policy.mean_head.params[:] = 0.0
    t.policy.std_head.params[:] = 0.0
    t.rng = ZeroNormal()
    a, c = t.policy.params.copy(), t.critic.params.copy()
    delta = t.step()
    assert np.all(delta == 0.0)
    assert np.array_equal(a, t.policy.params) and np.array_equal(c, t.critic.params)


def test_single_step_by_hand():
    model = make_model("lq1d-paper", reward_scaling="dt")
    t = small(MfgTrainer, model, batch=1, initial_state=[0.0])
    t.critic.params[:] = 0.0
    t.policy.mean_head.params[:] = 0.0
    t.policy.std_head.params[:] = 0.0
    t.rng = ZeroNormal()
    critic0, actor0 = t.critic.params.copy(), t.policy.params.copy()
    t.step()
    r = -0.18 * 0.01  # x = 0, a = 0, m = 0
    delta = r
    expected_critic = critic0.copy()
    expected_critic[-1] -= 1e-4 * (-2.0 * delta)  # only the output bias has a nonzero gradient
    assert np.max(np.abs(t.critic.params - expected_critic)) < 1e-12
    std = 1.0 + 1e-5
    expected_actor = actor0.copy()
    # d log p / d (std-head output bias) at a = mean is -exp(0) / std, weighted by -delta
    expected_actor[-1] -= 5e-5 * (-delta) * (-1.0 / std)
    assert np.max(np.abs(t.policy.params - expected_actor)) < 1e-12
    assert t.x[0] == 0.0 and t.measure_mean()[0] == 0.0


def test_frozen_target_direction():
    t = small(MfgTrainer, batch=1, initial_state=[0.3])
    rng_copy = copy.deepcopy(t.rng)
    before = t.critic.copy()
    mean, std = t.policy.mean_std(t.x)
    a = mean + std * rng_copy.standard_normal((1, 1))
    nxt = t.model.step(t.x[None], a, rng_copy)
    r = t.model.reward(t.x[None], a, t.measure_mean())
    delta = r[0] + t.gamma * before.value(nxt)[0] - before.value(t.x)
    t.step()
    step = t.critic.params - before.params
    frozen = 1e-4 * 2 * delta * before.gradient(t.x[None] * 0 + np.array([[0.3]]))
    both = 1e-4 * 2 * delta * (before.gradient(np.array([[0.3]])) - t.gamma * before.gradient(nxt))
    np.testing.assert_allclose(step, frozen, rtol=1e-10, atol=1e-18)
    assert np.max(np.abs(step - both)) > 1e-3 * np.max(np.abs(step))


def test_n_zero_and_determinism():
    t = small(MfgTrainer)
    p = t.policy.params.copy()
    trace = train(t, 0)
    assert trace.step == [] and np.array_equal(p, t.policy.params)
    runs = []
    for _ in range(2):
        t = small(BinnedTrainer, state_cells=2, action_cells=3)
        tr = train(t, 60, an.solve(t.model, "MFC"), every=20, trace_samples=50)
        runs.append((t.policy.params.tobytes(), t.bank.params.tobytes(), t.x.tobytes(), tr.rows()))
    assert runs[0] == runs[1]
    assert runs[0][3][0][0] < runs[0][3][1][0] < runs[0][3][2][0]


def test_bank_matches_members(rng):
    bank = CriticBank(5, 2, (7,), rng=rng)
    x = rng.normal(size=(5, 2))
    idx = np.arange(5)
    vals = bank.values(idx, x)
    grads = bank.pair_gradients(idx, x, np.full(5, 0.5))
    for i in range(5):
        assert vals[i] == pytest.approx(bank.member(i).value(x[i]), abs=1e-13)
        np.testing.assert_allclose(grads[i], 0.5 * bank.member(i).gradient(x[i]), atol=1e-13)


def test_single_bin_composite():
    t = small(BinnedTrainer, state_cells=1, action_cells=1)
    assert t.bank.n_critics == 1
    x = np.linspace(-3, 3, 7)[:, None]
    np.testing.assert_allclose(t.value(x), t.bank.values(np.zeros(7, int), x), atol=1e-13)
    t.step()
    assert np.array_equal(t.last_bin_actions[t.last_own], t.bin_actions[t.last_own])


def test_identical_bank_composite_is_common_value():
    t = small(BinnedTrainer)
    t.bank.params[:] = t.bank.params[0]
    x = np.linspace(-2, 2, 11)[:, None]
    np.testing.assert_allclose(t.value(x), t.bank.member(0).value(x), atol=1e-13)
    np.testing.assert_allclose(t.bank.composite(t.partition, x, literal=True), t.value(x), atol=1e-13)


def test_composite_orientation(rng):
    t = small(BinnedTrainer, state_cells=2, action_cells=3)
    x = rng.uniform(-2, 2, size=(20, 1))
    cells = t.partition.state_cell(x)
    vals = np.array([[t.bank.member(c * 3 + k).value(xi) for k in range(3)] for xi, c in zip(x, cells)])
    # critics hold reward values, so the cheapest action is the largest one
    np.testing.assert_allclose(t.value(x), vals.max(axis=1), atol=1e-13)
    np.testing.assert_allclose(t.bank.composite(t.partition, x, literal=True), vals.min(axis=1), atol=1e-13)


def test_forced_midpoint_actions():
    t = small(BinnedTrainer)
    for _ in range(30):
        t.step()
        own = t.last_own
        assert np.array_equal(t.last_bin_actions[own], t.bin_actions[own])
    assert t.bank.n_critics == 42


def test_batched_critic_delta_equals_loop():
    t = small(BinnedTrainer, batch=8, state_cells=3, action_cells=2)
    ref = copy.deepcopy(t)
    g = copy.deepcopy(t.rng)
    B, k, d, M = ref.partition.n_bins, 1, 1, 8
    g.standard_normal((B, k))
    g.standard_normal((M, k))
    noise = g.standard_normal((B, M, d))
    own = ref.partition.state_cell(ref.bin_x) == ref.bin_cells
    local = ref.bin_measures.mean()
    expected = ref.bank.params.copy()
    for i in np.flatnonzero(own):
        x, a = ref.bin_x[i], ref.bin_actions[i]
        deltas = []
        for s in range(M):
            nxt = ref.model.step(x[None], a[None], noise=noise[i, s][None])
            r = ref.model.reward(x[None], a[None], local[i][None])[0]
            deltas.append(r + ref.gamma * ref.value(nxt)[0] - ref.bank.member(i).value(x))
        expected[i] -= 1e-4 * (-2.0 * np.mean(deltas)) * ref.bank.member(i).gradient(x)
    t.step()
    assert np.max(np.abs(t.bank.params - expected)) < 1e-12


def test_mfcg_measure_rates():
    model = make_model("mfcg1d-default")
    same = Rates(Schedule(5e-5), Schedule(1e-4), Schedule(1e-3), Schedule(1e-3))
    t = small(MfcgTrainer, model, rates=same)
    for _ in range(40):
        t.step()
    np.testing.assert_allclose(t.global_measure.mean(0), t.measure.mean(0), atol=1e-15)
    frozen = Rates(Schedule(5e-5), Schedule(1e-4), Schedule(1e-3), Schedule(0.0))
    t = small(MfcgTrainer, model, rates=frozen)
    g0 = t.global_measure.mean(0)
    for _ in range(40):
        t.step()
    assert np.array_equal(t.global_measure.mean(0), g0)
    assert not np.array_equal(t.measure.mean(0), g0)
    with pytest.raises(ValueError):
        small(MfcgTrainer, make_model("lq1d-paper"))


def test_mfcg_without_global_coupling_equals_mfc():
    model = make_model("mfcg1d-default", c1=0.0, c5=0.0)
    g = small(MfcgTrainer, model, rates=Rates.table1("mfcg"))
    c = small(MfcTrainer, model.local_model(), rates=Rates.table1("mfc"))
    for _ in range(100):
        g.step()
        c.step()
    assert g.bank.params.tobytes() == c.bank.params.tobytes()
    assert g.policy.params.tobytes() == c.policy.params.tobytes()
    assert g.x.tobytes() == c.x.tobytes() and g.bin_x.tobytes() == c.bin_x.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_abort_snapshot():
    t = small(MfgTrainer)
    t.critic.params[:] = np.inf
    with pytest.raises(TrainingAborted) as err:
        t.step()
    assert err.value.step == 0 and "critic" in err.value.snapshot


def test_measures_stay_normalized():
    t = small(BinnedTrainer, state_cells=2, action_cells=2)
    for _ in range(100):
        t.step()
    for mu in (t.measure, t.bin_measures):
        assert abs(mu.weights().sum() - 1) < 1e-9


def test_two_dimensional_trainers():
    m = make_model("lq2d-paper")
    t = small(MfgTrainer, m)
    b = small(BinnedTrainer, m, state_cells=3, action_cells=2)
    assert b.bank.n_critics == 36
    for _ in range(5):
        t.step()
        b.step()
    assert t.x.shape == (2,) and b.value(np.zeros((3, 2))).shape == (3,)
