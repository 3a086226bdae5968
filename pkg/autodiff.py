"""
Reverse-mode differentiation over float64 numpy arrays.

Operations executed while a Tape is active (and touching at least one tensor
that requires a gradient) are appended to that tape in execution order, so
walking the records backwards is a valid topological order. Outside a tape
the same functions just compute values.
"""

import os
import math
import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from artifacts import read_container, write_container
from errors import CheckpointFormatError, LabelOutOfRange, NonFiniteValue, ShapeMismatch

logger = logging.getLogger(__name__)

ADAM_LR = float(os.getenv("ADAM_LR", 1e-3))
ADAM_BETA1 = float(os.getenv("ADAM_BETA1", 0.9))
ADAM_BETA2 = float(os.getenv("ADAM_BETA2", 0.999))
ADAM_EPS = float(os.getenv("ADAM_EPS", 1e-8))

CHECKPOINT_MAGIC = "KERNCLF-CKPT"
CHECKPOINT_VERSION = 1

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class DiffTensor:
    __slots__ = ("values", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "", _leaf: bool = True):
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValue(f"non-finite value in {name or 'tensor'}")
        self.values = values
        self.requires_grad = requires_grad
        self.is_leaf = _leaf
        self.name = name
        self.grad = np.zeros_like(values) if requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad}{', name=' + self.name if self.name else ''})"


@dataclass
class _Record:
    output: DiffTensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of operations. Use as a context manager."""

    def __init__(self):
        self.records = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, output: DiffTensor, seed=1.0):
        """
        Propagate d(output) = seed back through the tape, adding into the
        .grad of every leaf that requires a gradient. Repeated calls
        accumulate.
        """
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), output.shape)
        if output.is_leaf:
            if output.requires_grad:
                output.grad += seed
            return

        grads = {id(output): np.array(seed)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += ig
                elif id(inp) in grads:
                    grads[id(inp)] += ig
                else:
                    grads[id(inp)] = ig


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _result(values, inputs: Sequence[DiffTensor], backward: Callable, name: str) -> DiffTensor:
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = DiffTensor(values, name=name, _leaf=not needs)
    if needs:
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


# ========== Operations ==========

def linear(x, W) -> DiffTensor:
    """x [..., a] @ W [a, b] -> [..., b]."""
    x, W = _as_tensor(x), _as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape} does not match W {W.shape}")
    a, b = W.shape

    def backward(g):
        gx = g @ W.values.T if x.requires_grad else None
        gW = x.values.reshape(-1, a).T @ g.reshape(-1, b) if W.requires_grad else None
        return gx, gW

    return _result(x.values @ W.values, (x, W), backward, "linear")


def conv_time(x, W, n: int) -> DiffTensor:
    """
    x [..., T, c], W [n*c, k] -> [..., T, k]. Row t applies W to the
    flattened rows t..t+n-1, zero beyond T.
    """
    x, W = _as_tensor(x), _as_tensor(W)
    if n < 1:
        raise ShapeMismatch("conv_time: window must be >= 1")
    T, c = x.shape[-2], x.shape[-1]
    if W.ndim != 2 or W.shape[0] != n * c:
        raise ShapeMismatch(f"conv_time: W {W.shape} does not fit window {n} over {c} channels")
    k = W.shape[1]
    taps = [W.values[i * c:(i + 1) * c] for i in range(n)]

    out = np.zeros(x.shape[:-1] + (k,))
    for i in range(min(n, T)):
        out[..., :T - i, :] += x.values[..., i:, :] @ taps[i]

    def backward(g):
        gx = np.zeros_like(x.values) if x.requires_grad else None
        gW = np.zeros_like(W.values) if W.requires_grad else None
        for i in range(min(n, T)):
            gi = g[..., :T - i, :]
            if gx is not None:
                gx[..., i:, :] += gi @ taps[i].T
            if gW is not None:
                gW[i * c:(i + 1) * c] = x.values[..., i:, :].reshape(-1, c).T @ gi.reshape(-1, k)
        return gx, gW

    return _result(out, (x, W), backward, "conv_time")


def conv_pitch(f, W, j: int) -> DiffTensor:
    """
    f [..., T, P, N], W [j*P, k] -> [..., T, N, k]. Output (t, u) applies W
    to the flattened slice f[t, :, u:u+j], zero above N.
    """
    f, W = _as_tensor(f), _as_tensor(W)
    P, N = f.shape[-2], f.shape[-1]
    if not 1 <= j <= N:
        raise ShapeMismatch(f"conv_pitch: window {j} outside 1..{N}")
    if W.ndim != 2 or W.shape[0] != j * P:
        raise ShapeMismatch(f"conv_pitch: W {W.shape} does not fit window {j} over {P} voices")
    k = W.shape[1]
    W3 = W.values.reshape(P, j, k)
    fT = np.swapaxes(f.values, -1, -2)  # [..., T, N, P]

    out = np.zeros(fT.shape[:-1] + (k,))
    for r in range(j):
        out[..., :N - r, :] += fT[..., r:, :] @ W3[:, r, :]

    def backward(g):
        gfT = np.zeros_like(fT) if f.requires_grad else None
        gW3 = np.zeros_like(W3) if W.requires_grad else None
        for r in range(j):
            gr = g[..., :N - r, :]
            if gfT is not None:
                gfT[..., r:, :] += gr @ W3[:, r, :].T
            if gW3 is not None:
                gW3[:, r, :] = fT[..., r:, :].reshape(-1, P).T @ gr.reshape(-1, k)
        gf = np.swapaxes(gfT, -1, -2) if gfT is not None else None
        gW = gW3.reshape(j * P, k) if gW3 is not None else None
        return gf, gW

    return _result(out, (f, W), backward, "conv_pitch")


def relu(x) -> DiffTensor:
    x = _as_tensor(x)
    mask = x.values > 0

    def backward(g):
        return (g * mask,)

    return _result(x.values * mask, (x,), backward, "relu")


def _norm_axes(axes, ndim):
    if isinstance(axes, int):
        axes = (axes,)
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeMismatch(f"axis {a} out of range for {ndim}-d tensor")
    norm = tuple(sorted(a % ndim for a in axes))
    if len(set(norm)) != len(norm):
        raise ShapeMismatch(f"repeated axis in {axes!r}")
    return norm


def sum_pool(x, axes) -> DiffTensor:
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _result(x.values.sum(axis=axes), (x,), backward, "sum_pool")


def mean_pool(x, axes) -> DiffTensor:
    """Mean over axes; the denominator is the full extent, padding included."""
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    count = math.prod(x.shape[a] for a in axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),)

    return _result(x.values.sum(axis=axes) / count, (x,), backward, "mean_pool")


def add(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _result(a.values + b.values, (a, b), backward, "add")


def transpose(x, axes: Sequence[int]) -> DiffTensor:
    x = _as_tensor(x)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.values, axes), (x,), backward, "transpose")


def reshape(x, shape) -> DiffTensor:
    x = _as_tensor(x)
    try:
        values = x.values.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(values, (x,), backward, "reshape")


def channels(x, start: int, stop: int) -> DiffTensor:
    """Slice the last axis to [start, stop)."""
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeMismatch(f"channels: [{start}, {stop}) outside last axis of {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[..., start:stop] = g
        return (gx,)

    return _result(x.values[..., start:stop], (x,), backward, "channels")


def softmax_cross_entropy(logits, labels) -> DiffTensor:
    """
    Negative log-softmax at the label. For [C] logits and an int label this
    is the single-example loss; for [B, C] logits and B labels it is the
    mean over the batch.
    """
    logits = _as_tensor(logits)
    z = logits.values
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z2.ndim != 2 or y.shape != (z2.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {z.shape} vs labels {y.shape}")
    B, C = z2.shape
    if np.any(y < 0) or np.any(y >= C):
        raise LabelOutOfRange(f"labels {y.tolist()} outside 0..{C - 1}")

    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(lse - shifted[rows, y]))

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1.0
        p *= float(g) / B
        return (p[0] if single else p,)

    return _result(np.array(loss), (logits,), backward, "softmax_cross_entropy")


# ========== Optimizer ==========

@dataclass
class AdamState:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, DiffTensor], state: AdamState, grads: Optional[Dict[str, np.ndarray]] = None):
    """
    One bias-corrected Adam update, in place. Gradients default to each
    parameter's accumulated .grad.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None or g.shape != p.shape:
            raise ShapeMismatch(f"adam: gradient for {name} has shape {None if g is None else g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeMismatch(f"adam: moment for {name} has shape {m.shape}, parameter {p.shape}")

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    return params, state


# ========== Checks and checkpoints ==========

def gradient_check(
    forward: Callable,
    params: Dict[str, DiffTensor],
    x=None,
    h: float = 1e-5,
    fraction: float = 0.01,
    min_coords: int = 3,
    seed: int = 0,
) -> float:
    """
    Max relative error between reverse-mode and central-difference gradients
    of sum(r * forward(params, x)) for a fixed random projection r, on a
    random subset of parameter coordinates.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()

    with Tape() as tape:
        out = _as_tensor(forward(params, x))
    r = rng.standard_normal(out.shape)
    tape.backward(out, seed=r)

    def objective():
        return float(np.sum(_as_tensor(forward(params, x)).values * r))

    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.values.reshape(-1)
        count = min(flat.size, max(min_coords, math.ceil(fraction * flat.size)))
        for i in rng.choice(flat.size, size=count, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = p.grad.reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def save_checkpoint(path, params: Dict[str, DiffTensor]):
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, {
        name: (p.values if isinstance(p, DiffTensor) else np.asarray(p, dtype=np.float64))
        for name, p in params.items()
    })


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CheckpointFormatError)
    for name, a in arrays.items():
        if a.dtype != np.float64:
            raise CheckpointFormatError(f"{path}: parameter {name} is {a.dtype}, expected float64")
    return arrays
