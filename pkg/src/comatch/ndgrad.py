"""A small dense-tensor engine with tape-based reverse-mode autodiff.

Operations record onto the innermost active :class:`Graph` (entered with a
``with`` block). Outside any graph they just compute, which is what eval-mode
inference uses. ``Graph.backward`` walks the tape in exact reverse creation
order and writes ``.grad`` on every leaf tensor with ``requires_grad``.

Only the operations needed by the MLP and the 7-layer CNN are provided, and
no broadcasting exists beyond adding a bias.
"""
import contextlib
import hashlib
import math
import threading
import weakref
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError, NumericalError, StateError, ValidationError

LOG_FLOOR = 1e-12
_LOG_FLOOR_VALUE = math.log(LOG_FLOOR)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_node")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._graph = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: object
    pattern: np.ndarray = None


_local = threading.local()

# Tensors point back at their graph weakly: a strong reference would close a
# cycle through the tape and keep every activation alive until the cyclic
# collector happened to run.
_COLLECTED = object()


def _owner(t):
    ref = t._graph
    if ref is None:
        return None
    g = ref()
    return _COLLECTED if g is None else g


def _active_graph():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of operation records for one forward/backward pass."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, kind, inputs, output, backward, pattern=None):
        output._graph = weakref.ref(self)
        output._node = len(self.nodes)
        output.requires_grad = any(t.requires_grad for t in inputs)
        self.nodes.append(Node(kind, tuple(inputs), output, backward, pattern))
        return output

    def reset(self):
        """Allow another backward pass over the same tape."""
        self._consumed = False

    def leaves(self):
        seen = {}
        for node in self.nodes:
            for t in node.inputs:
                if t._graph is None and t.requires_grad:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss):
        if self._consumed:
            raise StateError("backward() already ran on this graph; call reset() before running it again")
        if _owner(loss) is not self:
            raise StateError("loss tensor was not produced on this graph")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        leaves = self.leaves()
        for t in leaves:
            t.grad = np.zeros_like(t.data)
        acc = [None] * len(self.nodes)
        acc[loss._node] = np.ones_like(loss.data)
        for i in range(len(self.nodes) - 1, -1, -1):
            g = acc[i]
            if g is None:
                continue
            acc[i] = None
            node = self.nodes[i]
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                owner = _owner(t)
                if owner is self:
                    j = t._node
                    acc[j] = gi if acc[j] is None else acc[j] + gi
                elif owner is None:
                    t.grad += gi
        return {t.name or str(id(t)): t.grad for t in leaves}

    def activation_pattern(self):
        """Digest of every recorded non-smooth decision (relu masks, pool argmax)."""
        h = hashlib.blake2b(digest_size=16)
        for node in self.nodes:
            if node.pattern is not None:
                h.update(node.kind.encode())
                h.update(np.ascontiguousarray(node.pattern).tobytes())
        return h.hexdigest()


@contextlib.contextmanager
def no_graph():
    """Suspend recording, e.g. for inference inside a training step."""
    saved = getattr(_local, "stack", [])
    _local.stack = []
    try:
        yield
    finally:
        _local.stack = saved


def backward(loss):
    """Back-propagate from a scalar loss produced on an active or finished graph.

    The graph must still be referenced somewhere (e.g. ``with Graph() as g``).
    """
    owner = _owner(loss)
    if owner is None or owner is _COLLECTED:
        raise StateError("loss is not attached to a live graph")
    return owner.backward(loss)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(kind, out_data, inputs, backward_fn, pattern=None):
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"{kind} produced non-finite values")
    out = Tensor(out_data)
    g = _active_graph()
    if g is not None:
        g.record(kind, inputs, out, backward_fn, pattern)
    else:
        out.requires_grad = False
    return out


# ------------------------------------------------------------------- ops


def affine(x, W, b):
    """y = x @ W + b for x [N, D_in], W [D_in, D_out], b [D_out]."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: cannot combine x{x.shape} with W{W.shape} and b{b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd + b.data

    def back(g):
        return (g @ Wd.T, xd.T @ g, g.sum(axis=0))

    return _finish("affine", out, (x, W, b), back)


def conv2d(x, k, b):
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved)."""
    x, k, b = _as_tensor(x), _as_tensor(k), _as_tensor(b)
    if x.data.ndim != 4 or k.data.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: expected x[N,C,H,W] and k[C_out,C_in,3,3], got x{x.shape}, k{k.shape}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: channel mismatch, x{x.shape} vs k{k.shape}")
    if b.shape != (k.shape[0],):
        raise DimensionError(f"conv2d: bias {b.shape} does not match kernel {k.shape}")
    n, _, h, w = x.shape
    c_out = k.shape[0]
    cols = kernels.im2col(x.data)
    kmat = k.data.reshape(c_out, -1)
    out = (cols @ kmat.T + b.data).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    xshape = x.shape

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dk = (gmat.T @ cols).reshape(k.shape)
        dx = kernels.col2im(gmat @ kmat, xshape) if x.requires_grad else None
        return (dx, dk, gmat.sum(axis=0))

    return _finish("conv2d", out, (x, k, b), back)


def maxpool2d(x):
    """2x2 max pool with stride 2; gradient goes to the first maximum of each window."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"maxpool2d needs [N,C,H,W] with even H and W, got {x.shape}")
    out, arg = kernels.maxpool2x2(x.data)

    def back(g):
        return (kernels.maxpool2x2_backward(g, arg),)

    return _finish("maxpool2d", out, (x,), back, pattern=arg)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def back(g):
        return (g * mask,)

    return _finish("relu", out, (x,), back, pattern=mask)


def batchnorm2d(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS,
                update_stats=True):
    """Per-channel batch normalisation of [N,C,H,W].

    In train mode the batch statistics normalise the input and, when
    ``update_stats`` is set, the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: x{x.shape}, gamma{gamma.shape}, beta{beta.shape}")
    xd = x.data
    shape = (1, -1, 1, 1)
    if train:
        if xd.shape[0] < 2:
            raise ConfigurationError("batchnorm2d in train mode needs a batch of at least 2")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_stats:
            m = xd.shape[0] * xd.shape[2] * xd.shape[3]
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    gd = gamma.data

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return (None, dgamma, dbeta)
        gx = g * gd.reshape(shape)
        if train:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            dx = (inv.reshape(shape) / m) * (
                m * gx
                - gx.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (gx * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
        else:
            dx = gx * inv.reshape(shape)
        return (dx, dgamma, dbeta)

    return _finish("batchnorm2d", out.astype(xd.dtype, copy=False), (x, gamma, beta), back)


def flatten(x):
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def back(g):
        return (g.reshape(shape),)

    return _finish("flatten", out, (x,), back)


def softmax(logits):
    """Row softmax with max subtraction (plain ndarray, no graph)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Per-sample cross entropy between softmax(logits) and a target distribution.

    Returns ``(loss, probs)``: ``loss`` is a Tensor [N] on the graph, ``probs``
    a plain array. The target is a constant; the gradient reaching the logits
    is ``(probs - target) * upstream`` per row. Log-probabilities are floored
    at log(1e-12).
    """
    logits = _as_tensor(logits)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.data.ndim != 2 or target.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: logits{logits.shape} vs target{target.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericalError("softmax_cross_entropy: non-finite logits")
    rows = target.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-6):
        raise ValidationError("softmax_cross_entropy: every target row must sum to 1")
    target = target.astype(logits.dtype, copy=False)
    logp = np.maximum(log_softmax(logits.data), _LOG_FLOOR_VALUE)
    probs = softmax(logits.data)
    loss = -(target * logp).sum(axis=1)

    def back(g):
        return ((probs - target) * g[:, None],)

    return _finish("softmax_cross_entropy", loss, (logits,), back), probs


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        return (g, g)

    return _finish("add", a.data + b.data, (a, b), back)


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)

    def back(g):
        return (g * c,)

    return _finish("scale", (a.data * c).astype(a.dtype, copy=False), (a,), back)


def square(a):
    a = _as_tensor(a)
    ad = a.data

    def back(g):
        return (2 * ad * g,)

    return _finish("square", ad * ad, (a,), back)


def take(a, index):
    """Rows of a 1-D or 2-D tensor at integer ``index`` (no duplicates)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _finish("take", a.data[index], (a,), back)


def reduce_sum(a):
    a = _as_tensor(a)
    shape = a.shape

    def back(g):
        return (np.full(shape, g, dtype=a.dtype),)

    return _finish("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), back)


def reduce_mean(a):
    a = _as_tensor(a)
    shape = a.shape
    n = a.data.size
    if n == 0:
        raise ValidationError("reduce_mean of an empty tensor")

    def back(g):
        return (np.full(shape, g / n, dtype=a.dtype),)

    return _finish("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,), back)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict
    tolerance: float
    checked: int
    skipped_kinks: int = 0
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_error < self.tolerance)

    def lines(self):
        out = []
        for name, err in self.per_layer.items():
            out.append(f"{name:<24s} {err:.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"max_rel_error={self.max_rel_error:.3e} tolerance={self.tolerance:g} "
                   f"checked={self.checked} skipped_kinks={self.skipped_kinks} {verdict}")
        return out


# Central differences at h=1e-5 carry ~1e-10 of round-off, so gradients that are
# exactly zero (a conv bias feeding batch norm) need a denominator floor well above it.
RELATIVE_ERROR_FLOOR = 1e-5


def relative_error(analytic, numeric, floor=RELATIVE_ERROR_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _mean_ce_loss(network, batch):
    x, target = batch
    logits = network.forward(x, train=True, update_stats=False)
    loss, _ = softmax_cross_entropy(logits, target)
    return reduce_mean(loss)


def grad_check(network, batch, tolerance=1e-4, h=1e-5, max_per_layer=200, seed=0, loss_fn=None):
    """Compare backprop gradients with central finite differences.

    ``network`` needs a ``params`` mapping of name -> Tensor; ``loss_fn(network,
    batch)`` must build a scalar loss on the active graph (default: mean
    softmax cross entropy of ``network.forward`` against ``batch = (x,
    target)``). Up to ``max_per_layer`` entries per parameter tensor are
    sampled. Perturbations that flip a relu mask or a pool argmax sit on a
    kink and are skipped in favour of another entry.
    """
    loss_fn = loss_fn or _mean_ce_loss
    params = network.params
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValidationError(f"grad_check needs 64-bit parameters; {name} is {p.dtype}")

    def evaluate():
        with Graph() as g:
            loss = loss_fn(network, batch)
        return float(loss.data), g, loss

    _, graph, loss = evaluate()
    base_pattern = graph.activation_pattern()
    graph.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    per_layer = {}
    checked = skipped = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        order = rng.permutation(flat.size)
        worst = 0.0
        taken = 0
        for idx in order:
            if taken >= max_per_layer:
                break
            orig = flat[idx]
            flat[idx] = orig + h
            lp, gp, _ = evaluate()
            flat[idx] = orig - h
            lm, gm, _ = evaluate()
            flat[idx] = orig
            if gp.activation_pattern() != base_pattern or gm.activation_pattern() != base_pattern:
                skipped += 1
                continue
            numeric = (lp - lm) / (2 * h)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[idx]), numeric))
            taken += 1
        per_layer[name] = worst
        checked += taken
    max_err = max(per_layer.values()) if per_layer else 0.0
    return GradCheckReport(max_err, per_layer, tolerance, checked, skipped)
