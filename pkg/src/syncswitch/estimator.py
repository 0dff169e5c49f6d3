"""scikit-learn estimator that trains through the simulated cluster."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .kernel import Hyperparams, Model, SyntheticDataset
from .policies import STRAGGLER_POLICIES, make_plan
from .simulator import KernelConfig, Simulation, SwitchOverheadModel, homogeneous_cluster


class SyncSwitchClassifier(BaseEstimator, ClassifierMixin):
    """MLP classifier trained by simulated parameter-server SGD.

    Training starts under BSP for ``bsp_fraction`` of the sample budget and
    finishes under ASP. ``epochs`` sets the budget in passes over the
    training split. A ``validation_fraction`` of the data is held out and
    evaluated during training; the trace is kept on ``trace_``.
    """

    def __init__(
        self,
        n_workers: int = 4,
        bsp_fraction: float = 0.25,
        batch_size: int = 32,
        learning_rate: float = 0.05,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        epochs: int = 20,
        hidden: int = 32,
        linear: bool = False,
        straggler_policy: str = "none",
        step_time: float = 0.05,
        net_latency: float = 0.001,
        jitter: float = 0.0,
        switch_overhead: float = 0.0,
        validation_fraction: float = 0.1,
        random_state: int | None = None,
    ):
        self.n_workers = n_workers
        self.bsp_fraction = bsp_fraction
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.hidden = hidden
        self.linear = linear
        self.straggler_policy = straggler_policy
        self.step_time = step_time
        self.net_latency = net_latency
        self.jitter = jitter
        self.switch_overhead = switch_overhead
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _check_params(self) -> None:
        if int(self.n_workers) < 1:
            raise ValueError("n_workers must be >= 1")
        if not 0.0 <= self.bsp_fraction <= 1.0:
            raise ValueError("bsp_fraction must lie in [0, 1]")
        if int(self.batch_size) < 1 or int(self.epochs) < 1 or int(self.hidden) < 1:
            raise ValueError("batch_size, epochs and hidden must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.straggler_policy not in STRAGGLER_POLICIES:
            raise ValueError(f"straggler_policy must be one of {STRAGGLER_POLICIES}")

    def fit(self, X, y):
        self._check_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1]
        seed = 0 if self.random_state is None else int(self.random_state)

        X_tr, X_val, y_tr, y_val = train_test_split(
            X, y_enc, test_size=self.validation_fraction, random_state=seed,
        )
        dataset = SyntheticDataset(seed, X_tr, y_tr.astype(np.int64), X_val, y_val.astype(np.int64))
        model = Model(X.shape[1], len(self.classes_), int(self.hidden), bool(self.linear))

        B, n = int(self.batch_size), int(self.n_workers)
        steps = max(1, (int(self.epochs) * len(y_tr)) // B)
        user = Hyperparams(
            batch_size=B,
            learning_rate=float(self.learning_rate),
            momentum=float(self.momentum),
            weight_decay=float(self.weight_decay),
            total_workload=steps * B,
            lr_boundaries=(),
            lr_factors=(),
        )
        bsp_samples = int(round(self.bsp_fraction * steps)) * B
        plan = make_plan(user, n, bsp_samples / user.total_workload, straggler_policy=self.straggler_policy)
        cluster = homogeneous_cluster(n, self.step_time, self.net_latency, self.jitter)
        kernel = KernelConfig(hidden=int(self.hidden), linear=bool(self.linear), eval_every=max(B, user.total_workload // 20))
        overhead = SwitchOverheadModel(self.switch_overhead, 0.0)

        sim = Simulation(cluster, plan, kernel, (), seed, overhead, dataset=dataset, model=model)
        self.trace_ = sim.run()
        if self.trace_.diverged:
            raise ArithmeticError("training diverged; lower learning_rate")
        self.model_ = model
        self.params_ = self.trace_.final_params.values
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.model_.logits(self.params_, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
