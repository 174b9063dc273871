"""Error metrics against the closed-form solutions, plus fixed-point and coverage checks."""

from dataclasses import dataclass, asdict
import json
import math

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    e_mu: float
    e_alpha: float
    e_V: float
    l: int
    seed: int
    tag: str

    def __post_init__(self):
        for name in ("e_mu", "e_alpha", "e_V"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def error_mu(learned_mean, analytic_mean):
    a = np.atleast_1d(np.asarray(learned_mean, dtype=float))
    b = np.atleast_1d(np.asarray(analytic_mean, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def _control(actor, x):
    if hasattr(actor, "mean_action"):
        return np.asarray(actor.mean_action(x), dtype=float)
    if hasattr(actor, "control"):
        return np.asarray(actor.control(x), dtype=float)
    return np.asarray(actor(x), dtype=float)


def error_alpha(actor, analytic, l=10000, rng=None, return_se=False):
    """Mean Euclidean gap between the actor's mean action and the optimal control.

    States are drawn from the analytic limiting law. With ``return_se`` the
    Monte Carlo standard error of the mean is returned as well.
    """
    if l < 1:
        raise ValueError("l must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    x = analytic.sample(l, rng)
    diff = _control(actor, x).reshape(l, -1) - analytic.control(x).reshape(l, -1)
    err = np.linalg.norm(diff, axis=1)
    if not return_se:
        return float(err.mean())
    se = float(err.std(ddof=1) / math.sqrt(l)) if l > 1 else float("nan")
    return float(err.mean()), se


def error_value(critic, analytic, l=10000, rng=None, model=None):
    """Mean absolute gap between the learned and analytic cost-value functions.

    ``critic`` is anything with ``value(x)`` or a callable. With ``model`` the
    outputs are read as learned reward values and mapped to cost units by
    ``model.value_to_cost``; without it they are taken as costs already.
    """
    if l < 1:
        raise ValueError("l must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    x = analytic.sample(l, rng)
    v = critic.value(x) if hasattr(critic, "value") else critic(x)
    v = np.asarray(v, dtype=float).reshape(l)
    if model is not None:
        v = model.value_to_cost(v)
    return float(np.mean(np.abs(v - analytic.value(x).reshape(l))))


def _policy_action(policy, x, rng):
    if hasattr(policy, "sample") and hasattr(policy, "log_prob"):
        return policy.sample(x, rng)
    return _control(policy, x)


def fixed_point_residual(policy, model, claimed_mean, horizon=100_000, burn_in=None, rng=None,
                         n_paths=16, return_se=False):
    """Fixed-point defect ``|time-averaged mean - claimed mean|`` of the measure map.

    The environment runs under ``policy`` with the mean-field argument frozen at
    ``claimed_mean``; ``n_paths`` independent paths start at the claimed mean and
    their post-burn-in time averages are pooled. With ``return_se`` the Monte Carlo
    standard error of the pooled average is returned too.
    """
    burn_in = int(0.2 * horizon) if burn_in is None else int(burn_in)
    if horizon <= burn_in:
        raise ValueError("horizon must exceed burn_in")
    rng = np.random.default_rng(0) if rng is None else rng
    claimed = np.atleast_1d(np.asarray(claimed_mean, dtype=float))
    x = np.tile(claimed, (n_paths, 1))
    acc = np.zeros_like(x)
    for n in range(horizon):
        a = _policy_action(policy, x, rng)
        x = model.step(x, np.asarray(a).reshape(n_paths, -1), rng)
        if n >= burn_in:
            acc += x
    avg = acc / (horizon - burn_in)
    residual = float(np.linalg.norm(avg.mean(axis=0) - claimed))
    if not return_se:
        return residual
    se = float(np.linalg.norm(avg.std(axis=0, ddof=1))) / math.sqrt(n_paths) if n_paths > 1 else float("nan")
    return residual, se


def mahalanobis_coverage(samples, analytic, radius=3.0):
    """Fraction of samples within Mahalanobis distance ``radius`` of the analytic mean."""
    cov = np.atleast_2d(analytic.covariance)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("analytic covariance must be positive definite")
    x = np.asarray(samples, dtype=float).reshape(-1, cov.shape[0])
    d = x - analytic.mean_vector
    d2 = np.einsum("ni,ij,nj->n", d, np.linalg.inv(cov), d)
    return float(np.mean(d2 <= radius * radius))


def evaluate(trainer, analytic, l=10000, seed=0):
    """Full report for a trainer: learned mean, actor mean-head, value read-out."""
    rng = np.random.default_rng(seed)
    e_mu = error_mu(trainer.measure_mean(), analytic.mean_vector)
    e_alpha = error_alpha(trainer.policy, analytic, l, rng)
    e_v = error_value(trainer.value, analytic, l, rng, model=trainer.model)
    return MetricReport(e_mu, e_alpha, e_v, int(l), int(seed), analytic.tag)
