"""Minimal dense neural-network substrate on float64 numpy arrays.

Layers cache whatever their backward pass needs during forward, so the usage
pattern is: zero_grads -> forward -> backward (once per layer per step) ->
optimizer step. Gradients accumulate into ``grad_*`` buffers, which keeps
multi-consumer wiring (sum upstream gradients, then call backward once)
explicit in the training code rather than hidden in a tape.
"""

import numpy as np

ZERO_NORM_TOL = 1e-12


def glorot_uniform(n_in, n_out, rng):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class Dense:
    """Fully connected layer, weight (out x in), bias (out)."""

    def __init__(self, n_in, n_out, rng):
        self.n_in = n_in
        self.n_out = n_out
        self.weight = glorot_uniform(n_in, n_out, rng)
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input (batch, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.grad_weight += grad_out.T @ self._x
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def parameters(self):
        return [self.weight, self.bias]

    def gradients(self):
        return [self.grad_weight, self.grad_bias]


class Relu:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0  # subgradient 0 at the kink
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        if self._mask is None:
            raise RuntimeError("backward called before forward")
        return np.where(self._mask, grad_out, 0.0)

    def parameters(self):
        return []

    def gradients(self):
        return []


class L2Normalize:
    """Row-wise x / ||x||; backward applies (I - yy^T) / ||x||."""

    def __init__(self):
        self._y = None
        self._inv_norm = None

    def forward(self, x):
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(norms <= ZERO_NORM_TOL):
            raise ValueError("cannot L2-normalize a (near) zero vector")
        self._inv_norm = 1.0 / norms
        self._y = x * self._inv_norm
        return self._y

    def backward(self, grad_out):
        if self._y is None:
            raise RuntimeError("backward called before forward")
        dot = np.sum(grad_out * self._y, axis=-1, keepdims=True)
        return (grad_out - dot * self._y) * self._inv_norm

    def parameters(self):
        return []

    def gradients(self):
        return []


class MaxPoolSet:
    """Elementwise max over the set axis: (batch, set, feat) -> (batch, feat).

    Gradients route only to the first argmax element of each feature column.
    """

    def __init__(self):
        self._argmax = None
        self._shape = None

    def forward(self, x):
        if x.ndim != 3:
            raise ValueError(f"expected (batch, set, feat), got shape {x.shape}")
        self._argmax = np.argmax(x, axis=1)
        self._shape = x.shape
        return np.take_along_axis(x, self._argmax[:, None, :], axis=1)[:, 0, :]

    def backward(self, grad_out):
        if self._argmax is None:
            raise RuntimeError("backward called before forward")
        grad_in = np.zeros(self._shape)
        np.put_along_axis(grad_in, self._argmax[:, None, :], grad_out[:, None, :], axis=1)
        return grad_in

    def parameters(self):
        return []

    def gradients(self):
        return []


class Sequential:
    def __init__(self, *modules):
        self.modules = list(modules)

    def forward(self, x):
        for m in self.modules:
            x = m.forward(x)
        return x

    def backward(self, grad_out):
        for m in reversed(self.modules):
            grad_out = m.backward(grad_out)
        return grad_out

    def parameters(self):
        return [p for m in self.modules for p in m.parameters()]

    def gradients(self):
        return [g for m in self.modules for g in m.gradients()]


def zero_grads(*module_groups):
    for group in module_groups:
        for g in group.gradients():
            g[...] = 0.0


class Adam:
    """Adam with bias correction; weight decay is coupled (added to the
    gradient) by default, decoupled (applied directly to the parameter)
    optionally."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decoupled=False):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            if self.weight_decay and self.decoupled:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def mse(a, b):
    """Squared L2 distance: sum of squared differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def mse_grad(a, b):
    """Gradient of :func:`mse` with respect to ``a`` (negate for ``b``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return 2.0 * (a - b)


def triplet_cosine_loss(t_p, t_o, negatives, margin):
    """Mean over negatives of max(d(t_p, t_o) - d(t_p, n_j) + margin, 0)
    with d the cosine distance; all inputs are unit vectors."""
    value, _, _, _ = triplet_cosine_loss_grad(t_p, t_o, negatives, margin)
    return value


def triplet_cosine_loss_grad(t_p, t_o, negatives, margin):
    """Loss value and gradients w.r.t. (t_p, t_o, negatives)."""
    t_p = np.asarray(t_p, dtype=np.float64)
    t_o = np.asarray(t_o, dtype=np.float64)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] == 0:
        raise ValueError("triplet loss needs at least one negative")
    n_neg = negatives.shape[0]
    # d(t_p,t_o) - d(t_p,n_j) + m  ==  t_p.n_j - t_p.t_o + m
    terms = negatives @ t_p - float(t_p @ t_o) + margin
    active = terms > 0
    value = float(np.sum(terms[active])) / n_neg
    g_tp = (negatives[active].sum(axis=0) - active.sum() * t_o) / n_neg
    g_to = -(active.sum() / n_neg) * t_p
    g_neg = np.zeros_like(negatives)
    g_neg[active] = t_p / n_neg
    return value, g_tp, g_to, g_neg


def batch_triplet_cosine_loss(t_p, t_o, margin):
    """In-batch triplet loss: each row's negatives are the other rows of t_o.

    Per-sample mean over its batch-1 negatives, then mean over the batch.
    Returns (loss, grad_t_p, grad_t_o).
    """
    t_p = np.asarray(t_p, dtype=np.float64)
    t_o = np.asarray(t_o, dtype=np.float64)
    b = t_p.shape[0]
    if b < 2:
        raise ValueError("in-batch triplet loss needs batch size >= 2")
    sim = t_p @ t_o.T  # (b, b)
    terms = sim - np.diag(sim)[:, None] + margin
    np.fill_diagonal(terms, 0.0)
    active = terms > 0
    np.fill_diagonal(active, False)
    scale = 1.0 / (b * (b - 1))
    loss = float(np.sum(terms[active])) * scale
    d_sim = active * scale
    np.fill_diagonal(d_sim, -active.sum(axis=1) * scale)
    return loss, d_sim @ t_o, d_sim.T @ t_p
