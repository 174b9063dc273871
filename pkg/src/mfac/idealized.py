"""Exact-expectation three-timescale iterations on finite state/action grids.

Everything here is deterministic: expectations over the transition kernel are
full sums over the grid. Values are reward values (``r = -f``) so that the
actor loss ``-delta log pi`` has the same sign as in the sampled trainers; the
control-mode composite value therefore takes the best bin, i.e. the smallest
cost.

The policy is a softmax table ``pi(a|x) ~ exp(psi[x, a])``. The game-mode
critic is linear, ``V(x) = features[x] @ theta``. In control mode every
(state, action) pair is a bin whose critic is only ever read at its own state,
so the bank collapses to a table ``theta[x, a]``.
"""

from dataclasses import dataclass, field
import csv
import logging
import math

import numpy as np

log = logging.getLogger(__name__)


class IdealizedDivergence(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class FiniteModel:
    """Grid model with mean-dependent kernel and cost.

    ``kernel(m)`` returns ``p[x, a, x']`` and ``cost(m)`` returns ``f[x, a]``,
    where ``m = mu @ states`` is the mean of the state measure. ``gamma``
    plays the role of ``exp(-beta)``.
    """

    states: np.ndarray
    n_actions: int
    kernel: object
    cost: object
    gamma: float
    name: str = "grid"
    mean_dependent_kernel: bool = True

    @property
    def n_states(self):
        return len(self.states)

    def mean(self, mu):
        return float(np.asarray(mu) @ self.states)

    def transitions(self, mu):
        p = np.asarray(self.kernel(self.mean(mu)), dtype=float)
        if np.abs(p.sum(axis=-1) - 1.0).max() > 1e-12 or p.min() < 0:
            raise ValueError("transition rows must be probability vectors")
        return p

    def rewards(self, mu):
        f = np.asarray(self.cost(self.mean(mu)), dtype=float)
        if not np.all(np.isfinite(f)):
            raise ValueError("cost table must be finite")
        return -f


class _Frozen:
    """The model with kernel and rewards evaluated once at a fixed measure."""

    def __init__(self, model, mu):
        self.gamma, self.n_states, self.n_actions = model.gamma, model.n_states, model.n_actions
        self._p, self._r = model.transitions(mu), model.rewards(mu)

    def transitions(self, mu):
        return self._p

    def rewards(self, mu):
        return self._r


def random_model(n_states=5, n_actions=3, seed=7, coupling=0.5, gamma=math.exp(-1.0)):
    """Random stochastic kernel (mean-independent) with a mean-tracking cost."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 1.0, size=(n_states, n_actions, n_states))
    p /= p.sum(axis=-1, keepdims=True)
    base = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    states = np.linspace(-1.0, 1.0, n_states)
    kernel = lambda m: p
    cost = lambda m: base + coupling * (states[:, None] - m) ** 2
    return FiniteModel(states, n_actions, kernel, cost, gamma, "random5x3", False)


def ou_chain(n_states=6, actions=(-1.0, 0.0, 1.0), dt=0.5, sigma=0.5, shift=0.5,
             c3=0.5, c4=0.6, c1=0.25, c2=1.5, gamma=math.exp(-1.0)):
    """Discretized controlled OU-type chain; the measure mean shifts the drift."""
    states = np.linspace(-1.5, 1.5, n_states)
    acts = np.asarray(actions, dtype=float)

    def kernel(m):
        centre = states[:, None] + (acts[None, :] - states[:, None] + shift * m) * dt
        logits = -((states[None, None, :] - centre[:, :, None]) ** 2) / (2 * sigma * sigma * dt)
        w = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return w / w.sum(axis=-1, keepdims=True)

    def cost(m):
        x = states[:, None]
        return 0.5 * acts[None, :] ** 2 + c1 * (x - c2 * m) ** 2 + c3 * (x - c4) ** 2

    return FiniteModel(states, len(acts), kernel, cost, gamma, "ou6", True)


def softmax_policy(psi):
    z = psi - psi.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def policy_kernel(pi, p):
    return np.einsum("xa,xay->xy", pi, p)


def stationary(P):
    """Left Perron eigenvector of a row-stochastic matrix."""
    S = P.shape[0]
    A = np.vstack([P.T - np.eye(S), np.ones(S)])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def policy_value(model, pi, mu):
    """Oracle ``V = (I - gamma P_pi)^-1 r_pi`` for a frozen measure."""
    p, r = model.transitions(mu), model.rewards(mu)
    P = policy_kernel(pi, p)
    return np.linalg.solve(np.eye(model.n_states) - model.gamma * P, (pi * r).sum(axis=1))


def dobrushin_alpha(P):
    """``1 - max_{x,y} TV(P[x], P[y])``, the contraction margin of ``mu -> mu P``."""
    tv = 0.5 * np.abs(P[:, None, :] - P[None, :, :]).sum(axis=-1)
    return 1.0 - tv.max()


@dataclass
class IdealizedState:
    mu: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    bin_mu: np.ndarray = None
    n: int = 0

    def copy(self):
        return IdealizedState(self.mu.copy(), self.theta.copy(), self.psi.copy(),
                              None if self.bin_mu is None else self.bin_mu.copy(), self.n)


def initial_state(model, mode="MFG", features=None, seed=0):
    rng = np.random.default_rng(seed)
    S, A = model.n_states, model.n_actions
    mu = np.full(S, 1.0 / S)
    psi = 0.1 * rng.standard_normal((S, A))
    if mode.upper() == "MFG":
        F = np.eye(S) if features is None else features
        return IdealizedState(mu, np.zeros(F.shape[1]), psi)
    # one bin per (state, action); each bin measure starts uniform
    return IdealizedState(mu, np.zeros((S, A)), psi, np.full((S * A, S), 1.0 / S))


def loss_measure(psi, theta, mu, model, pi=None):
    """``mu - mu P`` under the policy and the kernel frozen at ``mu``."""
    pi = softmax_policy(psi) if pi is None else pi
    return mu - mu @ policy_kernel(pi, model.transitions(mu))


def _td(model, mu, v_next, v_cur):
    """``delta[x, a] = r + gamma sum_x' p v_next(x') - v_cur(x)``."""
    p, r = model.transitions(mu), model.rewards(mu)
    return r + model.gamma * p @ v_next - v_cur[:, None]


def critic_loss(theta, psi, mu, model, features=None):
    """Game mode: ``sum_x mu(x) delta_pi(x)^2`` with ``V = features @ theta``."""
    F = np.eye(model.n_states) if features is None else features
    pi = softmax_policy(psi)
    v = F @ theta
    d = (pi * _td(model, mu, v, v)).sum(axis=1)
    return float(mu @ d ** 2)


def loss_critic_grad(psi, theta, mu, model, features=None):
    F = np.eye(model.n_states) if features is None else features
    pi = softmax_policy(psi)
    p = model.transitions(mu)
    v = F @ theta
    d = (pi * _td(model, mu, v, v)).sum(axis=1)
    jac = model.gamma * policy_kernel(pi, p) @ F - F
    return 2.0 * jac.T @ (mu * d)


def actor_loss(psi, psi_frozen, theta, mu, model, features=None, v=None):
    """``-sum_x mu(x) sum_a pi_frozen(a|x) delta(x, a) log pi_psi(a|x)``."""
    if v is None:
        F = np.eye(model.n_states) if features is None else features
        v = F @ theta
    pi0 = softmax_policy(psi_frozen)
    d = _td(model, mu, v, v)
    logp = np.log(softmax_policy(psi))
    return float(-(mu[:, None] * pi0 * d * logp).sum())


def _actor_grad_from_delta(pi, mu, d):
    w = mu[:, None] * pi * d
    # d/dpsi[x,b] of sum_a w[x,a] log pi(a|x) = w[x,b] - pi(b|x) sum_a w[x,a]
    return -(w - pi * w.sum(axis=1, keepdims=True))


def loss_actor_grad(psi, theta, mu, model, features=None, v=None):
    if v is None:
        F = np.eye(model.n_states) if features is None else features
        v = F @ theta
    pi = softmax_policy(psi)
    return _actor_grad_from_delta(pi, mu, _td(model, mu, v, v))


# control mode -------------------------------------------------------------

def composite_value(theta):
    """Best-bin value per state (smallest cost) from the table ``theta[x, a]``."""
    return theta.max(axis=1)


def bin_policy(pi, i, n_actions):
    """Policy of bin ``i``: its own action at its own state, the actor elsewhere."""
    x, a = divmod(i, n_actions)
    q = pi.copy()
    q[x] = 0.0
    q[x, a] = 1.0
    return q


def control_critic_loss(theta, psi, bin_mu, model):
    S, A = model.n_states, model.n_actions
    v = composite_value(theta)
    total = 0.0
    for i in range(S * A):
        x, a = divmod(i, A)
        d = _td(model, bin_mu[i], v, theta[:, a])[x, a]
        total += bin_mu[i][x] * d * d
    return float(total)


def loss_critic_grad_control(psi, theta, bin_mu, model):
    """Per-bin gradients ``d/dtheta^i L^i_V``, differentiating through the composite."""
    S, A = model.n_states, model.n_actions
    v = composite_value(theta)
    best = theta.argmax(axis=1)
    grad = np.zeros_like(theta)
    for i in range(S * A):
        x, a = divmod(i, A)
        mu_i = bin_mu[i]
        p = model.transitions(mu_i)
        d = model.rewards(mu_i)[x, a] + model.gamma * p[x, a] @ v - theta[x, a]
        g = np.zeros_like(theta)
        g[x, a] -= 1.0
        # the target reads bin (y, best[y]) at each next state y
        np.add.at(g, (np.arange(S), best), model.gamma * p[x, a])
        grad[x, a] += 2.0 * mu_i[x] * d * g[x, a]
    return grad


def loss_actor_grad_control(psi, theta, mu, model):
    v = composite_value(theta)
    return _actor_grad_from_delta(softmax_policy(psi), mu, _td(model, mu, v, v))


def loss_measure_bins(psi, bin_mu, model):
    pi = softmax_policy(psi)
    out = np.empty_like(bin_mu)
    for i in range(len(bin_mu)):
        q = bin_policy(pi, i, model.n_actions)
        out[i] = bin_mu[i] - bin_mu[i] @ policy_kernel(q, model.transitions(bin_mu[i]))
    return out


# iteration ----------------------------------------------------------------

def _measure_step(mu, L, rho):
    new = mu - rho * L
    if np.any(new < 0):
        log.warning("measure update left the simplex; projecting")
        new = np.clip(new, 0.0, None)
        new /= new.sum()
    return new


@dataclass
class IdealizedTrace:
    n: list = field(default_factory=list)
    measure: list = field(default_factory=list)
    critic: list = field(default_factory=list)
    actor: list = field(default_factory=list)

    def append(self, n, lp, lv, la):
        self.n.append(n)
        self.measure.append(lp)
        self.critic.append(lv)
        self.actor.append(la)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "L_P_norm", "critic_grad_norm", "actor_grad_norm"])
            for row in zip(self.n, self.measure, self.critic, self.actor):
                w.writerow([row[0], *map(repr, row[1:])])


def _rate(r, n):
    return r(n) if callable(r) else float(r)


def idealized_iterate(state, model, rates, mode="MFG", n_steps=1000, features=None,
                      record_every=1, tol=None, divergence=1e6):
    """Run the deterministic coupled recursion.

    ``rates`` maps ``measure``, ``critic``, ``actor`` to constants or callables
    of ``n``. With ``tol`` the loop stops once all three residual norms are
    below it. Returns ``(state, trace)``.
    """
    mode = mode.upper()
    if mode not in ("MFG", "MFC"):
        raise ValueError(f"unknown mode {mode!r}")
    r_mu, r_v, r_pi = rates["measure"], rates["critic"], rates["actor"]
    m0, v0, a0 = _rate(r_mu, 0), _rate(r_v, 0), _rate(r_pi, 0)
    if mode == "MFG" and not (m0 <= a0 <= v0):
        log.warning("game mode expects measure <= actor <= critic rates")
    if mode == "MFC" and not (a0 <= v0 <= m0):
        log.warning("control mode expects actor <= critic <= measure rates")
    s = state.copy()
    trace = IdealizedTrace()
    for _ in range(n_steps):
        n = s.n
        frozen = _Frozen(model, s.mu)
        if mode == "MFG":
            pi = softmax_policy(s.psi)
            Lp = loss_measure(s.psi, s.theta, s.mu, frozen, pi)
            gv = loss_critic_grad(s.psi, s.theta, s.mu, frozen, features)
            ga = loss_actor_grad(s.psi, s.theta, s.mu, frozen, features)
            lp = float(np.linalg.norm(Lp))
        else:
            Lp = loss_measure(s.psi, s.theta, s.mu, frozen)
            Lb = loss_measure_bins(s.psi, s.bin_mu, model)
            gv = loss_critic_grad_control(s.psi, s.theta, s.bin_mu, model)
            ga = loss_actor_grad_control(s.psi, s.theta, s.mu, frozen)
            lp = float(math.sqrt(np.sum(Lp ** 2) + np.sum(Lb ** 2)))
        lv, la = float(np.linalg.norm(gv)), float(np.linalg.norm(ga))
        if n % record_every == 0:
            trace.append(n, lp, lv, la)
        if not all(math.isfinite(v) and v <= divergence for v in (lp, lv, la)):
            trace.append(n, lp, lv, la)
            raise IdealizedDivergence(f"residual norm exceeded {divergence} at iteration {n}", trace)
        if tol is not None and max(lp, lv, la) < tol:
            if trace.n[-1] != n:
                trace.append(n, lp, lv, la)
            break
        s.mu = _measure_step(s.mu, Lp, _rate(r_mu, n))
        if mode == "MFC":
            rho = _rate(r_mu, n)
            s.bin_mu = np.stack([_measure_step(m, L, rho) for m, L in zip(s.bin_mu, Lb)])
        s.theta = s.theta - _rate(r_v, n) * gv
        s.psi = s.psi - _rate(r_pi, n) * ga
        s.n = n + 1
    return s, trace
