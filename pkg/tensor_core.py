"""
Dense tensor math with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Differentiable operations executed while a Tape
is active (``with Tape() as tape:``) are recorded in execution order, and
``backward(tape, loss)`` replays them in reverse to populate gradients.
Storage is fp32 unless a ``precision(np.float64)`` block is active, which the
gradient-check tests use.
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, ContractError, DimensionError, NonFiniteError

_state = threading.local()

_DEFAULT_DTYPE = np.float32


def get_default_dtype():
    """Return the dtype used for newly created tensors in this thread."""
    return getattr(_state, "dtype", _DEFAULT_DTYPE)


@contextmanager
def precision(dtype):
    """
    Create new tensors with the given float dtype inside the block.

    Args:
        dtype: numpy float dtype, np.float32 or np.float64
    """
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


def active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """
    An n-dimensional array that can take part in gradient computation.

    Attributes:
        data (np.ndarray): values in row-major order
        requires_grad (bool): whether gradients are tracked for this tensor
        grad (np.ndarray or None): gradient populated by backward
        name (str or None): parameter name, used by checkpoints and the optimizer
    """

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, array):
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by a python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeNode:
    op: str
    output: Tensor
    inputs: tuple
    backward_fn: object


class Tape:
    """
    Ordered record of the differentiable operations executed while active.

    Every recorded node refers only to tensors created earlier, so the list
    is already in topological order. A tape is consumed by one backward call.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, output, inputs, backward_fn):
        self.nodes.append(TapeNode(op, output, inputs, backward_fn))


def _result(op, data, inputs, backward_fn):
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape, loss, params=None):
    """
    Run reverse-mode differentiation of a scalar loss over a tape.

    Args:
        tape (Tape): tape the loss was computed on
        loss (Tensor): scalar tensor
        params (list[Tensor], optional): parameters whose gradients are wanted;
            parameters the loss never reached get a zero gradient

    Returns:
        dict: Tensor -> np.ndarray gradient for every tensor that requires grad
            and was reached, plus every entry of ``params``
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape has already been consumed by backward")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in reversed(tape.nodes):
        grad = grads.get(id(node.output))
        if grad is None:
            continue
        del grads[id(node.output)]
        del tensors[id(node.output)]
        for tensor, input_grad in zip(node.inputs, node.backward_fn(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + input_grad
            else:
                grads[key] = input_grad
                tensors[key] = tensor

    result = {}
    for key, grad in grads.items():
        tensor = tensors[key]
        tensor.grad = grad.astype(tensor.data.dtype, copy=False)
        result[tensor] = tensor.grad
    for param in params or ():
        if param not in result:
            param.grad = np.zeros_like(param.data)
            result[param] = param.grad
    return result


# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a, factor):
    """Multiply by a python scalar."""
    factor = a.data.dtype.type(factor)
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(x):
    positive = x.data > 0
    return _result("relu", np.where(positive, x.data, 0), (x,), lambda g: (g * positive,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU activation, tanh approximation."""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u**3)
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * d_inner),)

    return _result("gelu", out, (x,), backward_fn)


ACTIVATIONS = {"gelu": gelu, "relu": relu}


# shape and indexing


def matmul(a, b):
    """
    Matrix product, batched over leading dimensions with broadcasting.

    Args:
        a (Tensor): [..., m, k]
        b (Tensor): [..., k, n]

    Returns:
        Tensor: [..., m, n]
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")

    def backward_fn(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.ndim == 2:
            k, n = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return _result("matmul", a.data @ b.data, (a, b), backward_fn)


def transpose(x, axes=None):
    """Permute axes; swaps the last two when ``axes`` is omitted."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inverse = np.argsort(axes)
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape):
    original = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def broadcast_to(x, shape):
    original = x.shape
    return _result(
        "broadcast_to",
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, original),),
    )


def getitem(x, key):
    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _result("getitem", x.data[key], (x,), backward_fn)


def take(table, ids):
    """
    Gather rows of a 2-d table (embedding lookup).

    Args:
        table (Tensor): [n, d]
        ids (array-like of int): any shape, values in [0, n)

    Returns:
        Tensor: ids.shape + [d]
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids out of range for table with {table.shape[0]} rows")

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result("take", table.data[ids], (table,), backward_fn)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# reductions


def sum(x, axis=None, keepdims=False):
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# normalisation


def _softmax(values):
    shifted = values - values.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_row(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.shape[-1] < 1:
        raise ContractError("softmax needs at least one column")
    y = _softmax(x.data)
    return _result(
        "softmax_row",
        y,
        (x,),
        lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
    )


def log_softmax(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return _result(
        "log_softmax",
        out,
        (x,),
        lambda g: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
    )


def layer_norm(x, gain, bias, eps=1e-5):
    """
    Normalise the last axis to zero mean and unit variance, then apply gain and bias.

    Args:
        x (Tensor): [..., d]
        gain (Tensor): [d]
        bias (Tensor): [d]
        eps (float): variance floor, must be positive

    Returns:
        Tensor: [..., d]
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    normed = centered * inv_std

    def backward_fn(g):
        grad_gain = (g * normed).reshape(-1, d).sum(axis=0)
        grad_bias = g.reshape(-1, d).sum(axis=0)
        gn = g * gain.data
        grad_x = inv_std * (
            gn - gn.mean(axis=-1, keepdims=True) - normed * (gn * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _result("layer_norm", normed * gain.data + bias.data, (x, gain, bias), backward_fn)


def dropout_mask(x, p, mode, rng):
    """
    Inverted dropout.

    Args:
        x (Tensor): input
        p (float): drop probability in [0, 1)
        mode (str): "train" or "eval"; eval is the identity
        rng (np.random.Generator): seeded stream the mask is drawn from

    Returns:
        Tensor: x with dropped elements zeroed and survivors scaled by 1/(1-p)
    """
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# losses


def cross_entropy_smoothed(logits, targets, eps=0.0):
    """
    Mean label-smoothed cross entropy.

    Args:
        logits (Tensor): [B, K]
        targets (array-like of int): [B], values in [0, K)
        eps (float): smoothing rate; the target distribution is
            (1 - eps) * onehot + eps / K

    Returns:
        Tensor: scalar loss
    """
    targets = np.asarray(targets, dtype=np.int64)
    batch, k = logits.shape
    if targets.shape != (batch,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if batch and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"targets out of range [0, {k})")

    dtype = logits.data.dtype
    q = np.full((batch, k), eps / k, dtype=dtype)
    q[np.arange(batch), targets] += dtype.type(1.0 - eps)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -(q * log_probs).sum() / batch

    def backward_fn(g):
        return (g * (np.exp(log_probs) - q) / batch,)

    return _result("cross_entropy", np.asarray(loss, dtype=dtype), (logits,), backward_fn)


# optimisation


@dataclass
class AdamState:
    """
    Per-parameter Adam accumulators.

    Attributes:
        first_moment (list[np.ndarray]): one array per parameter, same shape
        second_moment (list[np.ndarray]): one array per parameter, same shape
        step (int): number of updates applied so far
    """

    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params,
    grads,
    state,
    lr,
    weight_decay=0.0,
    beta1=0.9,
    beta2=0.999,
    eps=1e-8,
    decoupled=True,
    decay_mask=None,
):
    """
    Apply one bias-corrected Adam update in place.

    With ``decoupled`` the decay is applied as param -= lr * weight_decay * param
    before the Adam delta; otherwise weight_decay * param is added to the gradient.

    Args:
        params (list[Tensor]): parameters, updated in place
        grads (list[np.ndarray]): gradients aligned with params
        state (AdamState): accumulators, updated in place
        lr (float): step size, must be non-negative
        weight_decay (float): decay rate
        decay_mask (list[bool], optional): which params receive weight decay
    """
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    if len(grads) != len(params) or len(state.first_moment) != len(params):
        raise ContractError("params, grads and optimizer state have different lengths")

    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.shape:
            raise ContractError(f"gradient shape {grad.shape} does not match parameter {param.name} {param.shape}")
        decay = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        if decay and decoupled:
            param.data -= param.data * param.data.dtype.type(lr * decay)
        elif decay:
            grad = grad + decay * param.data
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        delta = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data -= delta.astype(param.data.dtype, copy=False)


class Adam:
    """Adam optimizer over a fixed list of parameters."""

    def __init__(self, params, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, decoupled=True, decay_mask=None):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.decoupled = decoupled
        self.decay_mask = decay_mask
        self.state = AdamState.for_params(self.params)

    def step(self, grads, lr):
        adam_step(
            self.params,
            grads,
            self.state,
            lr,
            weight_decay=self.weight_decay,
            beta1=self.betas[0],
            beta2=self.betas[1],
            eps=self.eps,
            decoupled=self.decoupled,
            decay_mask=self.decay_mask,
        )


def clip_grad_norm(grads, max_norm):
    """Scale gradients in place so their global L2 norm is at most max_norm. Returns the norm before clipping."""
    total = math.sqrt(float(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads])))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-6)
        for g in grads:
            g *= factor
    return total


def gradient_check(build_loss, params, h=1e-4):
    """
    Compare tape gradients with central finite differences.

    ``build_loss`` is called with no arguments and must rebuild the scalar loss
    from the current parameter values. Run it under ``precision(np.float64)``
    with fp64 parameters for meaningful results.

    Returns:
        list[float]: per-parameter relative error
            ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)
    """
    with Tape() as tape:
        loss = build_loss()
    analytic = backward(tape, loss, params)

    errors = []
    for param in params:
        numeric = np.zeros_like(param.data, dtype=np.float64)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(build_loss().data)
            flat[i] = original - h
            minus = float(build_loss().data)
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        grad = analytic[param].astype(np.float64)
        total = max(np.linalg.norm(grad) + np.linalg.norm(numeric), 1e-12)
        errors.append(float(np.linalg.norm(grad - numeric) / total))
    return errors
