"""scikit-learn style wrappers around the trainers.

    est = MeanFieldActorCritic(mode="mfg", n_steps=200_000).fit()
    est.predict(x)          # mean action of the learned policy
    est.predict_value(x)    # learned value, in cost units
    est.score(x)            # minus the mean control error against the closed form
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import analytic as an
from .config import ExperimentConfig
from .metrics import evaluate


class MeanFieldActorCritic(BaseEstimator):
    """Fit = run one of the three learning algorithms on an LQ preset.

    ``X`` passed to :meth:`fit` is optional; when given, its first row is
    the starting state of the individual path.
    """

    def __init__(self, mode="mfg", preset=None, n_steps=200_000, seed=0, actor_rate=None,
                 critic_rate=None, measure_rate=None, global_measure_rate=None, batch=16,
                 bins_state=None, bins_action=None, schedule="constant", model_params=None):
        self.mode = mode
        self.preset = preset
        self.n_steps = n_steps
        self.seed = seed
        self.actor_rate = actor_rate
        self.critic_rate = critic_rate
        self.measure_rate = measure_rate
        self.global_measure_rate = global_measure_rate
        self.batch = batch
        self.bins_state = bins_state
        self.bins_action = bins_action
        self.schedule = schedule
        self.model_params = model_params

    def _config(self, initial_state):
        preset = self.preset or ("mfcg1d-default" if self.mode == "mfcg" else "lq1d-paper")
        rates = {k: v for k, v in (("actor", self.actor_rate), ("critic", self.critic_rate),
                                   ("measure", self.measure_rate),
                                   ("global_measure", self.global_measure_rate)) if v is not None}
        return ExperimentConfig(mode=self.mode, preset=preset, steps=int(self.n_steps), seed=int(self.seed),
                                batch=int(self.batch), bins_state=self.bins_state,
                                bins_action=self.bins_action, rates=rates, schedule=self.schedule,
                                model=dict(self.model_params or {}), initial_state=initial_state,
                                checkpoint_every=0)

    def fit(self, X=None, y=None):
        if self.mode not in ("mfg", "mfc", "mfcg"):
            raise ValueError("the estimator wraps the sampled algorithms: mode must be mfg, mfc, or mfcg")
        start = "uniform"
        if X is not None:
            X = check_array(X)
            start = [float(v) for v in X[0]]
        cfg = self._config(start)
        trainer = cfg.build_trainer()
        if start != "uniform" and len(start) != trainer.d:
            raise ValueError(f"X has {len(start)} features, the model state has {trainer.d}")
        for _ in range(cfg.steps):
            trainer.step()
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.solution_ = an.solve(trainer.model, self.mode.upper())
        self.n_features_in_ = trainer.d
        return self

    def _x(self, X):
        check_is_fitted(self, "trainer_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict(self, X):
        X = self._x(X)
        out = self.trainer_.policy.mean_action(X)
        return out[:, 0] if out.shape[1] == 1 else out

    def predict_value(self, X):
        X = self._x(X)
        return self.model_.value_to_cost(self.trainer_.value(X))

    def score(self, X, y=None):
        """Negative mean Euclidean distance to the optimal control (higher is better).

        ``y`` defaults to the closed-form control at ``X``.
        """
        X = self._x(X)
        a = self.trainer_.policy.mean_action(X).reshape(len(X), -1)
        target = self.solution_.control(X) if y is None else np.asarray(y, dtype=float)
        return -float(np.mean(np.linalg.norm(a - target.reshape(len(X), -1), axis=1)))

    def report(self, l=10000, seed=0):
        check_is_fitted(self, "trainer_")
        return evaluate(self.trainer_, self.solution_, l, seed)
