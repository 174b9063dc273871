"""Actor-critic training loops for mean field games, control, and control games.

``MfgTrainer`` follows the single-path game algorithm. ``BinnedTrainer``
runs one path per state x action bin, each with its own critic and
measure, plus an individual path that trains the actor against the
min-critic; given a :class:`~mfac.environment.MfcgModel` it also keeps a
slow global measure and solves the control game.
"""

from dataclasses import dataclass, field, asdict
import logging
import warnings

import numpy as np

from .approximators import GaussianPolicy, MlpCritic
from .measures import BinPartition, EmpiricalMeasure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Step size ``base`` (constant) or ``base * (1 + n / offset) ** -exponent``."""

    base: float
    mode: str = "constant"
    exponent: float = 0.0
    offset: float = 1.0

    def __post_init__(self):
        if self.mode not in ("constant", "polynomial"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.base < 0:
            raise ValueError("rates must be non-negative")
        if self.mode == "polynomial" and self.offset <= 0:
            raise ValueError("polynomial offset must be positive")

    def __call__(self, n):
        if self.mode == "constant":
            return self.base
        return self.base * (1.0 + n / self.offset) ** -self.exponent

    @property
    def robbins_monro(self):
        """Divergent sum and square-summable, decided from the mode and exponent."""
        return self.mode == "polynomial" and 0.5 < self.exponent <= 1.0


@dataclass(frozen=True)
class Rates:
    actor: Schedule
    critic: Schedule
    measure: Schedule
    global_measure: Schedule = None

    @classmethod
    def table1(cls, algorithm):
        """Constant base rates used for the published 1D experiments."""
        measure = {"mfg": 1e-5, "mfc": 1e-3, "mfcg": 1e-3}[algorithm]
        glob = Schedule(1e-5) if algorithm == "mfcg" else None
        return cls(Schedule(5e-5), Schedule(1e-4), Schedule(measure), glob)

    @classmethod
    def theory(cls, algorithm, offset=1e4):
        """Decaying schedules with separated exponents (slowest decays fastest)."""
        poly = lambda base, k: Schedule(base, "polynomial", k, offset)
        if algorithm == "mfg":
            return cls(poly(5e-5, 0.7), poly(1e-4, 0.55), poly(1e-5, 0.9))
        fast = poly(1e-3, 0.55)
        glob = poly(1e-5, 0.95) if algorithm == "mfcg" else None
        return cls(poly(5e-5, 0.9), poly(1e-4, 0.7), fast, glob)

    def ordering_warnings(self, algorithm):
        a, c, m = self.actor(0), self.critic(0), self.measure(0)
        out = []
        if algorithm == "mfg" and not (m <= a <= c):
            out.append(f"game rates should satisfy measure <= actor <= critic, got {m}, {a}, {c}")
        if algorithm in ("mfc", "mfcg") and not (a <= c <= m):
            out.append(f"control rates should satisfy actor <= critic <= measure, got {a}, {c}, {m}")
        if algorithm == "mfcg" and self.global_measure is not None and self.global_measure(0) > m:
            out.append("global measure should move slower than the local measure")
        return out

    def to_dict(self):
        return {k: (asdict(v) if v is not None else None) for k, v in
                (("actor", self.actor), ("critic", self.critic),
                 ("measure", self.measure), ("global_measure", self.global_measure))}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (Schedule(**v) if v is not None else None) for k, v in d.items()})


def td_error(r, v_next, v_cur, gamma):
    return r + gamma * v_next - v_cur


class CriticBank:
    """``n`` independent tanh MLP critics with stacked parameters.

    Row ``i`` of ``params`` uses exactly the flat layout of :class:`MlpCritic`.
    """

    def __init__(self, n_critics, n_inputs=1, hidden=(128,), rng=None, params=None):
        self.sizes = (int(n_inputs), *map(int, hidden), 1)
        self.n_critics = int(n_critics)
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = np.stack([MlpCritic(n_inputs, hidden, rng=rng).params for _ in range(n_critics)])
        self.params = np.array(params, dtype=float)
        self.n_params = self.params.shape[1]
        self.layers = []
        pos = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.params[:, pos:pos + n_in * n_out].reshape(self.n_critics, n_out, n_in)
            pos += n_in * n_out
            b = self.params[:, pos:pos + n_out]
            pos += n_out
            self.layers.append((W, b))
        assert pos == self.n_params

    def member(self, i):
        return MlpCritic(self.sizes[0], self.sizes[1:-1], params=self.params[i].copy())

    def _forward(self, idx, x):
        h = x
        cache = [h]
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            z = np.einsum("noi,ni->no", W[idx], h) + b[idx]
            h = z if k == last else np.tanh(z)
            cache.append(h)
        return h[:, 0], cache

    def values(self, idx, x):
        """``V_{idx[n]}(x[n])`` for paired arrays ``idx (n,)`` and ``x (n, d)``."""
        return self._forward(np.asarray(idx), np.asarray(x, dtype=float))[0]

    def pair_gradients(self, idx, x, weights):
        """Rows ``weights[n] * grad V_{idx[n]}(x[n])`` in the flat critic layout."""
        idx = np.asarray(idx)
        _, cache = self._forward(idx, np.asarray(x, dtype=float))
        n = len(idx)
        rows = np.empty((n, self.n_params))
        pos = self.n_params
        delta = np.asarray(weights, dtype=float).reshape(n, 1)
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            h_in = cache[k]
            n_out, n_in = W.shape[1], W.shape[2]
            pos -= n_out
            rows[:, pos:pos + n_out] = delta
            pos -= n_out * n_in
            rows[:, pos:pos + n_out * n_in] = (delta[:, :, None] * h_in[:, None, :]).reshape(n, -1)
            if k > 0:
                delta = np.einsum("no,noi->ni", delta, W[idx]) * (1.0 - h_in * h_in)
        return rows

    def composite(self, partition, x, literal=False):
        """Min-critic value of ``x`` over the critics whose state cell holds ``x``.

        The minimum is taken in cost units; the critics store reward values
        (negated costs), so this is the largest stored value. ``literal=True``
        takes the smallest stored value instead.
        """
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        cells = partition.state_cell(flat)
        l = partition.l
        out = np.empty(len(flat))
        last = len(self.layers) - 1
        # points sharing a cell are evaluated against that cell's l critics at once
        for c in np.unique(cells):
            sel = cells == c
            group = slice(c * l, (c + 1) * l)
            W, b = self.layers[0]
            n_hidden = W.shape[1]
            z = flat[sel] @ W[group].reshape(l * n_hidden, -1).T + b[group].reshape(-1)
            h = (z if last == 0 else np.tanh(z)).reshape(-1, l, n_hidden)
            for k in range(1, len(self.layers)):
                W, b = self.layers[k]
                z = np.einsum("nli,loi->nlo", h, W[group]) + b[group]
                h = z if k == last else np.tanh(z)
            out[sel] = h[..., 0].min(axis=1) if literal else h[..., 0].max(axis=1)
        return out.reshape(x.shape[:-1])


@dataclass
class Trace:
    step: list = field(default_factory=list)
    e_mu: list = field(default_factory=list)
    e_alpha: list = field(default_factory=list)
    e_V: list = field(default_factory=list)
    mean: list = field(default_factory=list)

    def append(self, step, report, mean):
        self.step.append(int(step))
        self.e_mu.append(report["e_mu"])
        self.e_alpha.append(report["e_alpha"])
        self.e_V.append(report["e_V"])
        self.mean.append([float(v) for v in np.ravel(mean)])

    def rows(self):
        return list(zip(self.step, self.e_mu, self.e_alpha, self.e_V))


class TrainingAborted(RuntimeError):
    def __init__(self, message, step, snapshot):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.snapshot = snapshot
        self.snapshot_path = None


def _initial_state(spec, dim, box, rng):
    if isinstance(spec, str):
        if spec != "uniform":
            raise ValueError(f"unknown initial state {spec!r}")
        return rng.uniform(box[0], box[1], size=dim)
    x = np.asarray(spec, dtype=float).reshape(-1)
    return np.broadcast_to(x, (dim,)).copy()


class _TrainerBase:
    algorithm = None

    def __init__(self, model, rates=None, n_actions=None, batch=16, seed=0,
                 critic_hidden=(128,), actor_trunk=(64,), actor_head=(64,), std_floor=1e-5,
                 initial_state="uniform", state_box=(-2.0, 2.0)):
        self.model = model
        self.rates = Rates.table1(self.algorithm) if rates is None else rates
        for msg in self.rates.ordering_warnings(self.algorithm):
            warnings.warn(msg)
            log.warning(msg)
        self.d = model.dim_state
        self.k = model.dim_action if n_actions is None else n_actions
        if batch < 1:
            raise ValueError("group batch size must be >= 1")
        self.batch = int(batch)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.gamma = model.gamma
        self.state_box = state_box
        self.policy = GaussianPolicy(self.d, self.k, actor_trunk, actor_head, std_floor, rng=self.rng)
        self.n = 0
        self.clip_count = 0
        self.initial_state = initial_state

    def _check(self, *arrays):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise TrainingAborted("non-finite update", self.n, self.snapshot())

    def _note_clips(self, x):
        self.clip_count += int(np.sum(np.abs(x) >= self.model.state_bound))

    def snapshot(self):
        return {"algorithm": self.algorithm, "step": self.n, "seed": self.seed,
                "actor": self.policy.params.copy(), "x": np.array(self.x, copy=True)}


class MfgTrainer(_TrainerBase):
    """Single trajectory; the measure is the exponentially-forgotten empirical law."""

    algorithm = "mfg"

    def __init__(self, model, rates=None, **kw):
        super().__init__(model, rates, **kw)
        hidden = kw.get("critic_hidden", (128,))
        self.critic = MlpCritic(self.d, hidden, rng=self.rng)
        self.x = _initial_state(self.initial_state, self.d, self.state_box, self.rng)
        self.measure = EmpiricalMeasure(self.x)

    def step(self):
        n, M = self.n, self.batch
        rho_v, rho_pi, rho_mu = self.rates.critic(n), self.rates.actor(n), self.rates.measure(n)
        x = self.x
        m = self.measure.mean(0)
        X = np.repeat(x[None], M, axis=0)
        mean, std = self.policy.mean_std(x)
        actions = mean + std * self.rng.standard_normal((M, self.k))
        r = self.model.reward(X, actions, m)
        nxt = self.model.step(X, actions, self.rng)
        v_next = self.critic.value(nxt)
        v_cur = self.critic.value(x)
        delta = td_error(r, v_next, v_cur, self.gamma)
        g_critic = self.critic.gradient(x) * (-2.0 * delta.mean())
        g_actor = self.policy.log_prob_grad(X, actions, -delta / M)
        self._check(g_critic, g_actor)
        if rho_v:
            self.critic.params -= rho_v * g_critic
        if rho_pi:
            self.policy.params -= rho_pi * g_actor
        self.x = nxt[0]
        self._note_clips(self.x)
        self.measure.update(self.x, rho_mu)
        self.n += 1
        return delta

    def value(self, x):
        return self.critic.value(np.asarray(x, dtype=float).reshape(-1, self.d))

    def measure_mean(self):
        return self.measure.mean(0)

    def snapshot(self):
        s = super().snapshot()
        s["critic"] = self.critic.params.copy()
        s["measure_mean"] = self.measure.mean(0)
        return s


class BinnedTrainer(_TrainerBase):
    """Per-bin critic paths plus an individual actor path.

    Bin path ``i`` plays the midpoint action of its bin whenever its state is
    in the bin's state cell (and then trains critic ``i`` toward the frozen
    min-critic target), otherwise it follows the actor. All reads of the
    critic bank within a step use the bank as it was at the start of the step.
    """

    algorithm = "mfc"

    def __init__(self, model, rates=None, state_cells=6, action_cells=7,
                 action_box=(-4.0, 4.0), composite="best", **kw):
        if composite not in ("best", "literal"):
            raise ValueError("composite must be 'best' or 'literal'")
        self.literal = composite == "literal"
        self.control_game = getattr(model, "kind", "") == "mfcg1d"
        if self.control_game:
            self.algorithm = "mfcg"
        super().__init__(model, rates, **kw)
        self.partition = BinPartition.uniform(self.d, self.k, state_cells, action_cells,
                                              self.state_box, action_box)
        P = self.partition
        hidden = kw.get("critic_hidden", (128,))
        self.bank = CriticBank(P.n_bins, self.d, hidden, rng=self.rng)
        self.bin_cells = P.state_cell_of_bin(np.arange(P.n_bins))
        self.bin_actions = P.midpoint_action(np.arange(P.n_bins))
        self.bin_x = np.stack([P.sample_state_in_cell(j, self.rng) for j in self.bin_cells])
        self.bin_measures = EmpiricalMeasure(self.bin_x, n_members=P.n_bins)
        self.x = _initial_state(self.initial_state, self.d, self.state_box, self.rng)
        self.measure = EmpiricalMeasure(self.x)
        self.global_measure = EmpiricalMeasure(self.x) if self.control_game else None
        if self.control_game and self.rates.global_measure is None:
            raise ValueError("the control game needs a global measure schedule")
        self.own_visits = np.zeros(P.n_bins, dtype=np.int64)

    def _cost_args(self, local_means):
        if self.control_game:
            return local_means, self.global_measure.mean(0)
        return local_means, None

    def step(self):
        n, M, P = self.n, self.batch, self.partition
        B, d, k = P.n_bins, self.d, self.k
        rho_v, rho_pi, rho_mu = self.rates.critic(n), self.rates.actor(n), self.rates.measure(n)
        model, rng, gamma = self.model, self.rng, self.gamma

        # one actor forward for all bin paths and the individual path
        states = np.vstack([self.bin_x, self.x[None]])
        mean, std = self.policy.mean_std(states)
        z_bins = rng.standard_normal((B, k))
        z_ind = rng.standard_normal((M, k))
        noise_bins = rng.standard_normal((B, M, d))
        noise_ind = rng.standard_normal((M, d))

        own = P.state_cell(self.bin_x) == self.bin_cells
        bin_a = np.where(own[:, None], self.bin_actions, mean[:B] + std[:B] * z_bins)
        self.last_bin_actions, self.last_own = bin_a, own
        local = self.bin_measures.mean()
        glob = self.global_measure.mean(0) if self.control_game else None

        # bin paths: M next states from (x_i, a_i); only own-cell bins need all M
        xs = np.broadcast_to(self.bin_x[:, None, :], (B, M, d))
        acts = np.broadcast_to(bin_a[:, None, :], (B, M, k))
        nxt_bins = model.step(xs, acts, noise=noise_bins)
        owners = np.flatnonzero(own)
        g_bank = None
        if owners.size:
            r_own = model.reward(self.bin_x[owners], bin_a[owners], local[owners], glob)
            v_next = self.bank.composite(P, nxt_bins[owners], self.literal)
            v_cur = self.bank.values(owners, self.bin_x[owners])
            delta_bins = (r_own[:, None] + gamma * v_next - v_cur[:, None]).mean(axis=1)
            g_bank = self.bank.pair_gradients(owners, self.bin_x[owners], -2.0 * delta_bins)
            self._check(g_bank)
            self.own_visits[owners] += 1

        # individual path
        x = self.x
        X = np.repeat(x[None], M, axis=0)
        actions = mean[B] + std[B] * z_ind
        r = model.reward(X, actions, self.measure.mean(0), glob)
        nxt = model.step(X, actions, noise=noise_ind)
        v_cur = self.bank.composite(P, x[None], self.literal)[0]
        v_next = self.bank.composite(P, nxt, self.literal)
        delta = td_error(r, v_next, v_cur, gamma)
        g_actor = self.policy.log_prob_grad(X, actions, -delta / M)
        self._check(g_actor)

        if g_bank is not None and rho_v:
            self.bank.params[owners] -= rho_v * g_bank
        if rho_pi:
            self.policy.params -= rho_pi * g_actor
        self.bin_x = nxt_bins[:, 0, :]
        self.x = nxt[0]
        self._note_clips(self.bin_x)
        self._note_clips(self.x)
        self.bin_measures.update(self.bin_x, rho_mu)
        self.measure.update(self.x, rho_mu)
        if self.control_game:
            self.global_measure.update(self.x, self.rates.global_measure(n))
        self.n += 1
        return delta

    def value(self, x):
        return self.bank.composite(self.partition, np.asarray(x, dtype=float).reshape(-1, self.d), self.literal)

    def measure_mean(self):
        return self.measure.mean(0)

    def snapshot(self):
        s = super().snapshot()
        s["critic_bank"] = self.bank.params.copy()
        s["bin_x"] = self.bin_x.copy()
        s["measure_mean"] = self.measure.mean(0)
        return s


def MfcTrainer(model, rates=None, **kw):
    return BinnedTrainer(model, rates, **kw)


def MfcgTrainer(model, rates=None, **kw):
    if getattr(model, "kind", "") != "mfcg1d":
        raise ValueError("the control-game trainer needs an MfcgModel")
    return BinnedTrainer(model, rates, **kw)


def train(trainer, n_steps, analytic=None, every=1000, trace_samples=1000, seed=0):
    """Advance ``trainer`` by ``n_steps``; with ``analytic`` record metrics every ``every`` steps.

    Metric sampling uses its own generator so traces never perturb training.
    """
    from .metrics import evaluate
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    trace = Trace()
    for _ in range(int(n_steps)):
        trainer.step()
        if analytic is not None and every and trainer.n % every == 0:
            report = evaluate(trainer, analytic, trace_samples, seed)
            trace.append(trainer.n, report.to_dict(), trainer.measure_mean())
            log.debug("step %d: %s", trainer.n, report)
    return trace
