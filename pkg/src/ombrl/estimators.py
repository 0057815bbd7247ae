"""scikit-learn style wrappers around the dynamics model and the training loop.

The online loop itself does not fit the fit/predict mould (data is generated
by the learner), so ``TrackingController.fit`` runs the episodes and
``predict`` rolls the learned policy out on given references.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import ReplayBuffer, make_model, model_update
from .nn import AdamState


class DynamicsModelRegressor(RegressorMixin, BaseEstimator):
    """One-step dynamics model: rows of X are [x, u], targets are x_next."""

    def __init__(self, state_dim=1, hidden=(64, 64), activation="tanh", mode="delta", dt=0.01,
                 lr=1e-3, n_steps=2000, batch_size=256, random_state=0):
        self.state_dim = state_dim
        self.hidden = hidden
        self.activation = activation
        self.mode = mode
        self.dt = dt
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _split(self, X):
        n = self.state_dim
        if X.shape[1] <= n:
            raise ValueError(f"X needs state_dim={n} state columns plus at least one action column")
        return X[:, :n], X[:, n:]

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        S, U = self._split(X)
        if y.shape[1] != self.state_dim:
            raise ValueError(f"y must have {self.state_dim} columns")
        rng = np.random.default_rng(self.random_state)
        model = make_model(self.state_dim, U.shape[1], rng, tuple(self.hidden), self.activation,
                           dt=self.dt if self.mode == "delta" else 1.0, mode=self.mode)
        model.update_stats(S, U, y)
        buf = ReplayBuffer(self.state_dim, U.shape[1])
        buf.push(S, U, y)
        model, _, faults = model_update(model, buf, AdamState.fresh(model.params.size), self.lr,
                                        self.batch_size, self.n_steps, rng)
        self.model_ = model
        self.n_faults_ = faults
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        return self.model_.predict(*self._split(X))


class TrackingController(BaseEstimator):
    """Runs online model-based training on a simulated plant.

    ``config`` is a TrainerConfig; ``episodes`` and ``random_state`` override
    the matching config fields when not None.
    """

    def __init__(self, config=None, episodes=None, random_state=None):
        self.config = config
        self.episodes = episodes
        self.random_state = random_state

    def _resolved_config(self):
        from .config import ConfigError, TrainerConfig
        from .plants import default_plant
        cfg = self.config if self.config is not None else TrainerConfig(plant=default_plant("pendulum"))
        if not isinstance(cfg, TrainerConfig):
            raise ConfigError("config must be a TrainerConfig")
        over = {}
        if self.episodes is not None:
            over["episodes"] = int(self.episodes)
        if self.random_state is not None:
            over["seed"] = int(self.random_state)
        return cfg.replace(**over) if over else cfg

    def fit(self, X=None, y=None):
        from .trainer import Trainer
        trainer = Trainer(self._resolved_config())
        trainer.run()
        self.trainer_ = trainer
        self.policy_ = trainer.policy
        self.log_ = trainer.log
        return self

    def predict(self, references):
        """Closed-loop state trajectories of the learned policy, one per reference."""
        from .policy import rollout
        check_is_fitted(self, "policy_")
        return [rollout(self.policy_, self.trainer_.plant, r).states for r in references]

    def score(self, references):
        """Negative mean episode cost over ``references`` (higher is better)."""
        from .diagnostics import evaluation_cost
        check_is_fitted(self, "policy_")
        return -evaluation_cost(self.policy_, self.trainer_.plant, references)
