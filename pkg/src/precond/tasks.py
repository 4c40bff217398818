"""Toy training tasks with hand-derived analytic gradients.

Every task exposes the same small surface:

* ``param_shapes`` and ``init_params(rng)`` -- one or two weight matrices;
* ``sample_batch(rng)`` -- ``None`` for deterministic full-batch tasks;
* ``loss(params, batch=None)`` and ``gradients(params, batch=None)``;
* ``optimum_loss`` -- closed form where one exists, else ``None``.

Gradients are exact for the given batch (no autodiff dependency), so a
central-finite-difference check against ``loss`` must agree to high
accuracy; the test suite enforces this for every kind. All task data is
generated from ``dataset_seed`` alone, making gradient streams exactly
reproducible.
"""

from __future__ import annotations

import numpy as np

TASK_KINDS = ("quadratic", "matrix-factorization", "softmax-regression", "two-layer-mlp")


def make_task(kind: str, dims=None, dataset_seed: int = 0, batch_size: int = 32,
              noise_scale: float = 0.0):
    """Build a task by kind name; ``dims`` falls back to per-kind defaults."""
    kind = kind.lower().replace("_", "-")
    if kind == "quadratic":
        d1, d2 = dims or (8, 6)
        return QuadraticTask(d1, d2, dataset_seed)
    if kind == "matrix-factorization":
        d1, d2, rank = dims or (64, 48, 16)
        return MatrixFactorizationTask(d1, d2, rank, dataset_seed, noise_scale)
    if kind == "softmax-regression":
        n, d, c = dims or (256, 32, 10)
        return SoftmaxRegressionTask(n, d, c, dataset_seed, batch_size, noise_scale)
    if kind == "two-layer-mlp":
        n, d_in, hidden, d_out = dims or (256, 16, 24, 8)
        return TwoLayerMlpTask(n, d_in, hidden, d_out, dataset_seed, batch_size, noise_scale)
    raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")


class QuadraticTask:
    """loss = 0.5 tr((T - T*)^T A (T - T*) B) with SPD A, B.

    Deterministic (no batches, no noise); gradient A (T - T*) B; the
    optimum is exactly 0 at T = T*. The two-sided curvature exercises both
    Kronecker factors.
    """

    kind = "quadratic"

    def __init__(self, d1: int, d2: int, dataset_seed: int = 0):
        rng = np.random.default_rng(dataset_seed)
        self.a = _random_spd(rng, d1)
        self.b = _random_spd(rng, d2)
        self.target = rng.normal(size=(d1, d2))
        self.param_shapes = [(d1, d2)]
        self.optimum_loss = 0.0

    def init_params(self, rng: np.random.Generator):
        return [self.target + 0.5 * rng.normal(size=self.target.shape)]

    def sample_batch(self, rng):
        return None

    def loss(self, params, batch=None) -> float:
        e = params[0] - self.target
        return float(0.5 * np.sum(e * (self.a @ e @ self.b)))

    def gradients(self, params, batch=None):
        e = params[0] - self.target
        return [self.a @ e @ self.b]


class MatrixFactorizationTask:
    """loss = 0.5 ||X Y - A||_F^2 for a rank-r factorization of A.

    A = U V + noise_scale * E with a planted rank-r pair, so the optimum
    is the rank-r truncation residual (closed form from the SVD of A);
    with noise it sits strictly above zero, which keeps final losses
    comparable across storage precisions. Deterministic, full batch.
    """

    kind = "matrix-factorization"

    def __init__(self, d1: int, d2: int, rank: int, dataset_seed: int = 0,
                 noise_scale: float = 0.0):
        rng = np.random.default_rng(dataset_seed)
        u = rng.normal(size=(d1, rank)) / np.sqrt(rank)
        v = rng.normal(size=(rank, d2))
        self.a = u @ v + noise_scale * rng.normal(size=(d1, d2))
        self.rank = rank
        self.param_shapes = [(d1, rank), (rank, d2)]
        sv = np.linalg.svd(self.a, compute_uv=False)
        self.optimum_loss = float(0.5 * np.sum(sv[rank:] ** 2))

    def init_params(self, rng: np.random.Generator):
        d1, r = self.param_shapes[0]
        _, d2 = self.param_shapes[1]
        return [rng.normal(size=(d1, r)) / np.sqrt(r), rng.normal(size=(r, d2)) / np.sqrt(r)]

    def sample_batch(self, rng):
        return None

    def loss(self, params, batch=None) -> float:
        x, y = params
        r = x @ y - self.a
        return float(0.5 * np.sum(r * r))

    def gradients(self, params, batch=None):
        x, y = params
        r = x @ y - self.a
        return [r @ y.T, x.T @ r]


class SoftmaxRegressionTask:
    """Mean cross-entropy of a linear softmax classifier on synthetic data.

    Labels come from a planted teacher's softmax with optional extra
    sampling temperature noise. Minibatches are index subsets drawn from
    the run's generator.
    """

    kind = "softmax-regression"

    def __init__(self, n: int, d: int, c: int, dataset_seed: int = 0,
                 batch_size: int = 32, noise_scale: float = 0.0):
        rng = np.random.default_rng(dataset_seed)
        self.x = rng.normal(size=(n, d))
        teacher = rng.normal(size=(d, c))
        logits = self.x @ teacher
        if noise_scale > 0:
            logits = logits + noise_scale * rng.normal(size=logits.shape)
        probs = _softmax(logits)
        self.labels = np.array([rng.choice(c, p=p) for p in probs])
        self.n = n
        self.batch_size = min(batch_size, n)
        self.param_shapes = [(d, c)]

    optimum_loss = None

    def init_params(self, rng: np.random.Generator):
        d, c = self.param_shapes[0]
        return [0.01 * rng.normal(size=(d, c))]

    def sample_batch(self, rng: np.random.Generator):
        return rng.choice(self.n, size=self.batch_size, replace=False)

    def loss(self, params, batch=None) -> float:
        idx = np.arange(self.n) if batch is None else batch
        z = self.x[idx] @ params[0]
        logp = z - _logsumexp(z)
        return float(-np.mean(logp[np.arange(len(idx)), self.labels[idx]]))

    def gradients(self, params, batch=None):
        idx = np.arange(self.n) if batch is None else batch
        xb = self.x[idx]
        probs = _softmax(xb @ params[0])
        probs[np.arange(len(idx)), self.labels[idx]] -= 1.0
        return [xb.T @ probs / len(idx)]


class TwoLayerMlpTask:
    """Half mean-squared error of a tanh MLP regressing a noisy teacher.

    loss = ||tanh(X W1) W2 - Y||_F^2 / (2 n_batch). Non-quadratic
    curvature through the tanh; two weight matrices, so two layers of
    optimizer state.
    """

    kind = "two-layer-mlp"

    def __init__(self, n: int, d_in: int, hidden: int, d_out: int,
                 dataset_seed: int = 0, batch_size: int = 32, noise_scale: float = 0.0):
        rng = np.random.default_rng(dataset_seed)
        self.x = rng.normal(size=(n, d_in))
        w1 = rng.normal(size=(d_in, hidden)) / np.sqrt(d_in)
        w2 = rng.normal(size=(hidden, d_out)) / np.sqrt(hidden)
        self.y = np.tanh(self.x @ w1) @ w2
        if noise_scale > 0:
            self.y = self.y + noise_scale * rng.normal(size=self.y.shape)
        self.n = n
        self.batch_size = min(batch_size, n)
        self.param_shapes = [(d_in, hidden), (hidden, d_out)]

    optimum_loss = None

    def init_params(self, rng: np.random.Generator):
        (d_in, hidden), (_, d_out) = self.param_shapes
        return [
            rng.normal(size=(d_in, hidden)) / np.sqrt(d_in),
            rng.normal(size=(hidden, d_out)) / np.sqrt(hidden),
        ]

    def sample_batch(self, rng: np.random.Generator):
        return rng.choice(self.n, size=self.batch_size, replace=False)

    def loss(self, params, batch=None) -> float:
        idx = np.arange(self.n) if batch is None else batch
        w1, w2 = params
        r = np.tanh(self.x[idx] @ w1) @ w2 - self.y[idx]
        return float(0.5 * np.sum(r * r) / len(idx))

    def gradients(self, params, batch=None):
        idx = np.arange(self.n) if batch is None else batch
        w1, w2 = params
        xb = self.x[idx]
        h = np.tanh(xb @ w1)
        r = (h @ w2 - self.y[idx]) / len(idx)
        g2 = h.T @ r
        g1 = xb.T @ ((r @ w2.T) * (1.0 - h * h))
        return [g1, g2]


def _random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    m = rng.normal(size=(d, d))
    return m @ m.T / d + 0.5 * np.eye(d)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
