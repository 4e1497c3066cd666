"""Dense float64 tensors with taped reverse-mode gradients.

A deliberately small kernel: each op records its parents and a backward
closure on the value it returns, and ``backward`` replays the recorded
graph once in reverse topological order, accumulating adjoints. Only the
operations the models in this package need are provided: matmul (plain
or batched over a leading axis), relu, row softmax, layer norm, cross
entropy, and concat/reshape/broadcast plumbing. No implicit broadcasting
beyond adding a 1-d bias over the trailing axis; anything else goes
through an explicit ``broadcast_to``.

``check_gradients`` compares tape adjoints against central finite
differences and is used heavily by the tests.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

# per-thread so concurrent workers can toggle recording independently
_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    """Row-major float64 array plus an optional gradient buffer.

    Leaves are built directly from array data; interior nodes carry the
    parents and backward closure recorded by the op that produced them.
    ``grad`` stays ``None`` until ``backward`` reaches the node, so an
    unused node's adjoint is identically zero.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward) -> Tensor:
    if not _grad_enabled():
        return Tensor(data)
    return Tensor(data, parents=tuple(parents), backward=backward)


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, root first, parents after children.

    Iterative post-order walk; each node appears exactly once, which is
    what guarantees the backward pass visits it exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``grad`` for every reachable node."""
    if root.data.size != 1:
        raise ValueError("backward expects a scalar root")
    if not np.isfinite(root.data).all():
        raise FloatingPointError("non-finite value at backward root")
    root.grad = np.ones_like(root.data)
    for node in topo_order(root):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-d bias matching the trailing axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = a.data + b.data

        def bw(g):
            return g, g

    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = a.data + b.data
        lead = tuple(range(a.ndim - 1))

        def bw(g):
            return g, g.sum(axis=lead) if lead else g

    else:
        raise ValueError(f"add shapes {a.shape} and {b.shape} do not align")
    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shapes {a.shape} and {b.shape} differ")

    def bw(g):
        return g, -g

    return _record(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shapes {a.shape} and {b.shape} differ")

    def bw(g):
        return g * b.data, g * a.data

    return _record(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def bw(g):
        return (g * s,)

    return _record(a.data * s, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over a leading axis when an operand is 3-d."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ValueError("matmul supports 2-d and 3-d operands only")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError("batched matmul needs equal leading axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if ga.ndim > a.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return _record(out, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0.0

    def bw(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0.0), (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the trailing axis, with per-row max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _record(y, (a,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("cross_entropy expects (n, c) logits and (n,) labels")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    loss = (lse - logits.data[np.arange(n), labels]).mean()
    probs = np.exp(logits.data - m)
    probs /= probs.sum(axis=1, keepdims=True)

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return _record(loss, (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the trailing axis to mean 0, variance 1, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    p = x.shape[-1]
    if gain.shape != (p,) or bias.shape != (p,):
        raise ValueError("layer_norm gain/bias must match the trailing axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * gain.data
        dvar = (gx_hat * centered).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = -gx_hat.sum(axis=-1, keepdims=True) * inv + dvar * (-2.0 / p) * centered.sum(
            axis=-1, keepdims=True
        )
        gx = gx_hat * inv + dvar * (2.0 / p) * centered + dmu / p
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(orig),)

    return _record(out, (a,), bw)


def transpose_last(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(np.swapaxes(a.data, -1, -2), (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; backward sums over the expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    extra = len(shape) - a.ndim
    summed = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(a.shape) if n == 1 and shape[i + extra] != 1
    )

    def bw(g):
        ga = g.sum(axis=summed, keepdims=False) if summed else g
        return (ga.reshape(a.shape),)

    return _record(out.copy(), (a,), bw)


def concat_last(parts: list[Tensor]) -> Tensor:
    """Concatenate along the trailing axis."""
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    edges = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., edges[i] : edges[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), bw)


def take_token0(a: Tensor) -> Tensor:
    """First token of each sequence in a (n, s, p) batch."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise ValueError("take_token0 expects a (n, s, p) tensor")

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, 0, :] = g
        return (ga,)

    return _record(a.data[:, 0, :].copy(), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (np.full(a.shape, float(g)),)

    return _record(a.data.sum(), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def bw(g):
        return (np.full(a.shape, float(g) / n),)

    return _record(a.data.mean(), (a,), bw)


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(f, x: Tensor, eps: float = 1e-5, coords=None, rng=None) -> float:
    """Max relative error between tape adjoints and central differences.

    ``f`` maps a Tensor to a scalar Tensor. All coordinates of ``x`` are
    probed unless ``coords`` caps the number checked (sampled with
    ``rng``). The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError("check_gradients needs a scalar-valued f")
    if not np.isfinite(out.data).all():
        raise ValueError("non-finite value from f")
    backward(out)
    analytic = np.zeros(x.data.size) if x.grad is None else x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(flat.size, size=coords, replace=False)
    worst = 0.0
    for i in idx:
        keep = flat[i]
        flat[i] = keep + eps
        with no_grad():
            hi = float(f(x).data)
        flat[i] = keep - eps
        with no_grad():
            lo = float(f(x).data)
        flat[i] = keep
        numeric = (hi - lo) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def check_param_gradients(make_loss, params: dict, eps: float = 1e-5, coords=None, rng=None) -> float:
    """Run ``check_gradients`` against every tensor in a parameter dict.

    ``make_loss`` rebuilds the scalar loss from the live parameter
    values, so probing a coordinate in place is seen by the forward
    pass. Returns the worst relative error across all probed
    coordinates of all parameters.
    """
    worst = 0.0
    for name in sorted(params):
        t = params[name]
        err = check_gradients(lambda _x: make_loss(), t, eps=eps, coords=coords, rng=rng)
        worst = max(worst, err)
    return worst
