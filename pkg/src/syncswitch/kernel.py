"""Small deterministic SGD training kernel.

A Gaussian-mixture classification workload, a 2-layer tanh MLP (or a
linear softmax model), cross-entropy loss with analytic gradients,
accumulator-style momentum SGD and a piecewise learning-rate schedule.
Everything is seeded and pure so that runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DivergenceError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def split(self) -> tuple[int, int]:
        return len(self.y_train), len(self.y_test)


def _balanced_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def make_dataset(
    seed: int,
    n_train: int,
    n_test: int,
    d: int,
    C: int,
    separation: float = 0.75,
) -> SyntheticDataset:
    """Gaussian mixture with one unit-variance component per class.

    Class means are drawn once from ``N(0, separation**2 I)``; labels are
    balanced (round robin, then shuffled), so every class appears in both
    partitions.
    """
    for name, value in (("n_train", n_train), ("n_test", n_test), ("d", d), ("C", C)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if C > n_train:
        raise ValueError(f"C={C} exceeds n_train={n_train}: a class would be empty")
    if C > n_test:
        raise ValueError(f"C={C} exceeds n_test={n_test}: a class would be empty")

    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(C, d))
    y_train = _balanced_labels(rng, n_train, C)
    y_test = _balanced_labels(rng, n_test, C)
    X_train = means[y_train] + rng.standard_normal((n_train, d))
    X_test = means[y_test] + rng.standard_normal((n_test, d))
    return SyntheticDataset(seed, X_train, y_train, X_test, y_test)


class BatchSampler:
    """Sequential passes over a seeded permutation, reshuffled every epoch."""

    def __init__(self, n_samples: int, seed: int):
        self.n_samples = n_samples
        self._rng = np.random.default_rng(seed)
        self._perm = self._rng.permutation(n_samples)
        self._pos = 0
        self.epoch = 0
        self.samples_drawn = 0

    def next_indices(self, batch_size: int) -> np.ndarray:
        out = []
        need = batch_size
        while need > 0:
            take = min(need, self.n_samples - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
            if self._pos == self.n_samples:
                self._perm = self._rng.permutation(self.n_samples)
                self._pos = 0
                self.epoch += 1
        self.samples_drawn += batch_size
        return np.concatenate(out)


# --------------------------------------------------------------------------
# Parameters, hyper-parameters and schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterVector:
    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        if self.version < 0:
            raise ValueError("version must be non-negative")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class MomentumState:
    velocity: np.ndarray

    @classmethod
    def zeros_like(cls, params: ParameterVector) -> "MomentumState":
        return cls(np.zeros_like(params.values))


@dataclass(frozen=True)
class LRSchedule:
    """Step function: ``base_lr * factors[i]`` from ``boundaries[i]`` on.

    Factors multiply the base rate directly, they do not compound.
    """

    base_lr: float
    boundaries: tuple[int, ...] = ()
    factors: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if len(self.boundaries) != len(self.factors):
            raise ValueError("boundaries and factors must have the same length")
        if any(a >= b for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly ascending")
        if any(f <= 0 for f in self.factors):
            raise ValueError("factors must be positive")

    def with_base(self, base_lr: float) -> "LRSchedule":
        return LRSchedule(base_lr, self.boundaries, self.factors)


def lr_at(schedule: LRSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    factor = 1.0
    for boundary, f in zip(schedule.boundaries, schedule.factors):
        if step >= boundary:
            factor = f
        else:
            break
    return schedule.base_lr * factor


@dataclass(frozen=True)
class Hyperparams:
    """Training hyper-parameters.

    ``batch_size`` is the number of samples behind one parameter update.
    ``total_workload`` is counted in samples and, for user settings, must be
    a multiple of ``batch_size`` (checked when a plan is validated).
    ``lr_boundaries`` live in the same sample coordinate, so the rate decays
    after a given amount of data whatever protocol is running.
    """

    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_workload: int = 64000 * 128
    lr_boundaries: tuple[int, ...] = ()
    lr_factors: tuple[float, ...] = ()
    momentum_variant: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "lr_boundaries", tuple(int(b) for b in self.lr_boundaries))
        object.__setattr__(self, "lr_factors", tuple(float(f) for f in self.lr_factors))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.total_workload < 1:
            raise ValueError("total_workload must be positive")

    @property
    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.learning_rate, self.lr_boundaries, self.lr_factors)


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Model:
    """Flat-parameter classifier: ``d -> h (tanh) -> C`` or linear ``d -> C``.

    Layout of the flat vector: W1 (d*h), b1 (h), W2 (h*C), b2 (C) for the
    MLP; W (d*C), b (C) for the linear model.
    """

    n_features: int
    n_classes: int
    hidden: int = 32
    linear: bool = False

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, h, c = self.n_features, self.hidden, self.n_classes
        if self.linear:
            return [(d, c), (c,)]
        return [(d, h), (h,), (h, c), (c,)]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, values: np.ndarray) -> list[np.ndarray]:
        out, pos = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(values[pos:pos + size].reshape(shape))
            pos += size
        return out

    def init_params(self, seed: int) -> ParameterVector:
        rng = np.random.default_rng(seed)
        parts = []
        for shape in self.shapes:
            if len(shape) == 2:
                scale = np.sqrt(1.0 / shape[0])
                parts.append(rng.normal(0.0, scale, size=shape).ravel())
            else:
                parts.append(np.zeros(shape))
        return ParameterVector(np.concatenate(parts), 0)

    def logits(self, values: np.ndarray, X: np.ndarray) -> np.ndarray:
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        if len(values) != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {len(values)}")
        if self.linear:
            W, b = self.unpack(values)
            return X @ W + b
        W1, b1, W2, b2 = self.unpack(values)
        return np.tanh(X @ W1 + b1) @ W2 + b2

    def predict(self, values: np.ndarray, X: np.ndarray) -> np.ndarray:
        # np.argmax breaks ties towards the lowest class index
        return np.argmax(self.logits(values, X), axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_backward(model: Model, values: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Return per-sample losses and the per-sample logit error (p - onehot)."""
    if len(X) == 0:
        raise ValueError("batch must be non-empty")
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got shape {X.shape}")
    if len(values) != model.n_params:
        raise ValueError(f"expected {model.n_params} parameters, got {len(values)}")
    n = len(y)
    if model.linear:
        W, b = model.unpack(values)
        z = X @ W + b
        hidden = None
    else:
        W1, b1, W2, b2 = model.unpack(values)
        hidden = np.tanh(X @ W1 + b1)
        z = hidden @ W2 + b2
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    losses = logsum - zs[np.arange(n), y]
    err = np.exp(zs - logsum[:, None])
    err[np.arange(n), y] -= 1.0
    return losses, err, hidden


def loss_and_grad(
    model: Model,
    params: ParameterVector | np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    weight_decay: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (plus ``weight_decay/2 * ||w||^2``) and its gradient.

    The gradient is the mean per-sample gradient plus ``weight_decay * w``.
    """
    values = params.values if isinstance(params, ParameterVector) else params
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grad = _loss_and_grad(model, values, X, y, weight_decay)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite loss or gradient")
    return loss, grad


def _loss_and_grad(model: Model, values: np.ndarray, X: np.ndarray, y: np.ndarray, weight_decay: float):
    losses, err, hidden = _forward_backward(model, values, X, y)
    n = len(y)
    err = err / n
    if model.linear:
        grads = [X.T @ err, err.sum(axis=0)]
    else:
        _, _, W2, _ = model.unpack(values)
        dh = (err @ W2.T) * (1.0 - hidden ** 2)
        grads = [X.T @ dh, dh.sum(axis=0), hidden.T @ err, err.sum(axis=0)]
    grad = np.concatenate([g.ravel() for g in grads])
    loss = float(losses.mean())
    if weight_decay:
        grad = grad + weight_decay * values
        loss += 0.5 * weight_decay * float(values @ values)
    return loss, grad


def per_sample_grads(model: Model, params: ParameterVector | np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Data-term gradient of every sample, shape ``(len(y), n_params)``."""
    values = params.values if isinstance(params, ParameterVector) else params
    _, err, hidden = _forward_backward(model, values, X, y)
    n = len(y)
    if model.linear:
        parts = [np.einsum("ni,nj->nij", X, err).reshape(n, -1), err]
    else:
        _, _, W2, _ = model.unpack(values)
        dh = (err @ W2.T) * (1.0 - hidden ** 2)
        parts = [
            np.einsum("ni,nj->nij", X, dh).reshape(n, -1),
            dh,
            np.einsum("ni,nj->nij", hidden, err).reshape(n, -1),
            err,
        ]
    return np.concatenate(parts, axis=1)


def sgd_momentum_step(
    params: ParameterVector,
    mstate: MomentumState,
    grad: np.ndarray,
    lr: float,
    momentum: float,
) -> tuple[ParameterVector, MomentumState]:
    """``v' = mu v + g``; ``w' = w - lr v'``; version advances by one."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(grad) != len(params.values) or len(mstate.velocity) != len(params.values):
        raise ValueError("parameter, velocity and gradient lengths differ")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    velocity = momentum * mstate.velocity + grad
    values = params.values - lr * velocity
    return ParameterVector(values, params.version + 1), MomentumState(velocity)


def test_accuracy(model: Model, params: ParameterVector | np.ndarray, dataset: SyntheticDataset) -> float:
    values = params.values if isinstance(params, ParameterVector) else params
    if len(dataset.y_test) == 0:
        raise ValueError("dataset has no test split")
    pred = model.predict(values, dataset.X_test)
    return float(np.mean(pred == dataset.y_test))


test_accuracy.__test__ = False  # keep pytest from collecting it


def full_batch_gd(
    model: Model,
    dataset: SyntheticDataset,
    steps: int,
    lr: float,
    seed: int = 0,
) -> tuple[ParameterVector, list[float]]:
    """Reference full-batch gradient descent, used as an oracle in tests."""
    params = model.init_params(seed)
    mstate = MomentumState.zeros_like(params)
    losses = []
    for _ in range(steps):
        loss, grad = loss_and_grad(model, params, dataset.X_train, dataset.y_train)
        losses.append(loss)
        params, mstate = sgd_momentum_step(params, mstate, grad, lr, 0.0)
    return params, losses
