"""Linear-quadratic mean-field environments discretized with Euler-Maruyama.

States and actions are arrays whose last axis is the state / action
dimension; leading axes are batch axes. The mean-field argument enters only
through the population mean, which every benchmark here depends on.
"""

from dataclasses import dataclass, field, asdict
import math

import numpy as np

REWARD_SCALINGS = ("per_step", "dt")


@dataclass(frozen=True)
class Transition:
    next_state: np.ndarray
    reward: float
    step: int


def _mean1(mean):
    """Scalar mean, or one mean per leading row when ``mean`` has shape (n, 1)."""
    m = np.asarray(mean, dtype=float)
    return m[..., 0] if m.ndim else m


class _LqBase:
    """Shared dynamics ``x' = x + a dt + sigma sqrt(dt) z`` and reward plumbing."""

    @property
    def gamma(self):
        return math.exp(-self.beta * self.dt)

    def _validate_common(self):
        if self.dt <= 0 or self.beta <= 0:
            raise ValueError("dt and beta must be positive")
        if self.reward_scaling not in REWARD_SCALINGS:
            raise ValueError(f"reward_scaling must be one of {REWARD_SCALINGS}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount factor must lie in (0, 1)")

    @property
    def reward_scale(self):
        return 1.0 if self.reward_scaling == "per_step" else self.dt

    def reward(self, x, a, mean, global_mean=None):
        return -self.cost(x, a, mean, global_mean) * self.reward_scale

    def value_to_cost(self, v):
        """Map a learned reward-value to the continuous-time cost value ``v(x)``."""
        return -np.asarray(v) * (self.dt / self.reward_scale)

    def cost_to_value(self, v):
        return -np.asarray(v) * (self.reward_scale / self.dt)

    def noise_matrix(self):
        return np.atleast_2d(self.sigma_matrix)

    def step(self, x, a, rng=None, noise=None):
        """Euler-Maruyama step; ``noise`` overrides the standard normal draw."""
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        drift = x + a * self.dt
        if noise is None:
            noise = rng.standard_normal(drift.shape)
        sig = self.noise_matrix()
        shock = np.asarray(noise, dtype=float) @ sig.T if sig.shape[0] > 1 else sig[0, 0] * np.asarray(noise)
        out = drift + math.sqrt(self.dt) * shock
        return np.clip(out, -self.state_bound, self.state_bound)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind
        return {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


@dataclass(frozen=True)
class LqModel1D(_LqBase):
    """Running cost ``a^2/2 + c1 (x - c2 m)^2 + c3 (x - c4)^2 + c5 m^2``."""

    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    sigma: float
    beta: float = 1.0
    dt: float = 0.01
    reward_scaling: str = "per_step"
    state_bound: float = 10.0
    kind = "lq1d"
    dim_state = 1
    dim_action = 1

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        self._validate_common()

    @property
    def sigma_matrix(self):
        return np.array([[self.sigma]])

    def cost(self, x, a, mean, global_mean=None):
        x = np.asarray(x, dtype=float)[..., 0]
        a = np.asarray(a, dtype=float)[..., 0]
        m = _mean1(mean)
        return (0.5 * a * a + self.c1 * (x - self.c2 * m) ** 2
                + self.c3 * (x - self.c4) ** 2 + self.c5 * m * m)


@dataclass(frozen=True)
class MfcgModel(_LqBase):
    """1D control-game cost with a global mean ``m`` and a local mean ``ml``.

    ``a^2/2 + c1 (x - c2 m)^2 + ct1 (x - ct2 ml)^2 + c3 (x - c4)^2 + c5 m^2 + ct5 ml^2``.
    The terms are summed in this order so that ``c1 = c5 = 0`` reproduces
    :class:`LqModel1D` with ``(ct1, ct2, ct5)`` bit for bit, and
    ``ct1 = ct5 = 0`` reproduces it with ``(c1, c2, c5)``.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    ct1: float
    ct2: float
    ct5: float
    sigma: float
    beta: float = 1.0
    dt: float = 0.01
    reward_scaling: str = "per_step"
    state_bound: float = 10.0
    kind = "mfcg1d"
    dim_state = 1
    dim_action = 1

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        self._validate_common()

    @property
    def sigma_matrix(self):
        return np.array([[self.sigma]])

    def cost(self, x, a, mean, global_mean=None):
        if global_mean is None:
            raise ValueError("the control-game cost needs both local and global means")
        x = np.asarray(x, dtype=float)[..., 0]
        a = np.asarray(a, dtype=float)[..., 0]
        ml = _mean1(mean)
        mg = _mean1(global_mean)
        f = 0.5 * a * a
        if self.c1:
            f = f + self.c1 * (x - self.c2 * mg) ** 2
        f = f + self.ct1 * (x - self.ct2 * ml) ** 2
        f = f + self.c3 * (x - self.c4) ** 2
        if self.c5:
            f = f + self.c5 * mg * mg
        return f + self.ct5 * ml * ml

    def local_model(self):
        """The single-mean model seen when the global coupling is switched off."""
        return LqModel1D(self.ct1, self.ct2, self.c3, self.c4, self.ct5, self.sigma,
                         self.beta, self.dt, self.reward_scaling, self.state_bound)

    def global_model(self):
        return LqModel1D(self.c1, self.c2, self.c3, self.c4, self.c5, self.sigma,
                         self.beta, self.dt, self.reward_scaling, self.state_bound)


def _spd(name, m):
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() <= 0:
        raise ValueError(f"{name} must be positive definite")


@dataclass(frozen=True, eq=False)
class LqModel2D(_LqBase):
    """``a.a/2 + (x - C2 m)' C1 (x - C2 m) + (x - c4)' C3 (x - c4) + m' C5 m``."""

    C1: np.ndarray
    C2: np.ndarray
    C3: np.ndarray
    c4: np.ndarray
    C5: np.ndarray
    sigma: np.ndarray
    beta: float = 1.0
    dt: float = 0.01
    reward_scaling: str = "per_step"
    state_bound: float = 10.0
    kind = "lq2d"

    def __post_init__(self):
        for name in ("C1", "C2", "C3", "c4", "C5", "sigma"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        for name in ("C1", "C3", "C5"):
            _spd(name, getattr(self, name))
        if abs(np.linalg.det(self.sigma)) < 1e-14:
            raise ValueError("sigma must be nonsingular")
        self._validate_common()

    @property
    def dim_state(self):
        return self.C1.shape[0]

    @property
    def dim_action(self):
        return self.C1.shape[0]

    @property
    def sigma_matrix(self):
        return self.sigma

    def cost(self, x, a, mean, global_mean=None):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        m = np.asarray(mean, dtype=float)
        u = x - m @ self.C2.T
        v = x - self.c4
        return (0.5 * np.sum(a * a, axis=-1)
                + np.einsum("...i,ij,...j->...", u, self.C1, u)
                + np.einsum("...i,ij,...j->...", v, self.C3, v)
                + np.einsum("...i,ij,...j->...", m, self.C5, m))


def lq_cost(model, x, a, mean, global_mean=None):
    """Running cost ``f(x, a, mu)`` (continuous-time rate, not multiplied by dt)."""
    return model.cost(x, a, mean, global_mean)


def lq_step(model, x, a, rng=None, noise=None):
    return model.step(x, a, rng, noise)


def env_step(model, x, a, mean, rng=None, global_mean=None, step=0, noise=None):
    x = np.asarray(x, dtype=float)
    r = float(model.reward(x, a, mean, global_mean))
    return Transition(model.step(x, a, rng, noise), r, step)


def env_step_group(model, x, actions, mean, rng=None, global_mean=None, noise=None):
    """Rewards and next states for ``M`` actions from the same state ``x``.

    Pass the same action ``M`` times to draw ``M`` next states of one (x, a).
    Returns ``(next_states (M, d), rewards (M,))``.
    """
    actions = np.asarray(actions, dtype=float)
    xs = np.broadcast_to(np.asarray(x, dtype=float), actions.shape[:-1] + (model.dim_state,))
    r = model.reward(xs, actions, mean, global_mean)
    return model.step(xs, actions, rng, noise), r


TABLE2 = dict(c1=0.25, c2=1.5, c3=0.5, c4=0.6, c5=1.0, sigma=0.3)

TABLE_2D = dict(
    C1=[[0.964, 0.236], [0.236, 0.076]],
    C2=[[0.677, 0.937], [0.937, 1.357]],
    C3=[[0.988, 1.118], [1.118, 1.483]],
    c4=[0.810, 0.872],
    C5=[[1.511, 0.072], [0.072, 1.520]],
    sigma=[[0.3, 0.0], [0.0, 0.3]],
)

PRESETS = {
    "lq1d-paper": lambda **kw: LqModel1D(**{**TABLE2, "beta": 1.0, "dt": 0.01, **kw}),
    "lq2d-paper": lambda **kw: LqModel2D(**{**TABLE_2D, "beta": 1.0, "dt": 0.01, **kw}),
    # local coefficients are repository defaults, not taken from a published table
    "mfcg1d-default": lambda **kw: MfcgModel(**{**TABLE2, "ct1": 0.3, "ct2": 1.25, "ct5": 0.25,
                                                "beta": 1.0, "dt": 0.01, **kw}),
}


def make_model(preset, **overrides):
    try:
        factory = PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    return factory(**overrides)


def model_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "lq1d")
    cls = {"lq1d": LqModel1D, "lq2d": LqModel2D, "mfcg1d": MfcgModel}[kind]
    return cls(**d)
