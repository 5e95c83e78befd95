"""Tensor math with a small reverse-mode tape, plus Adam and seeded RNG streams.

Tensors are plain ``numpy.ndarray`` objects in float64. Every op accepts
optional leading batch axes, so ``conv1d`` works on ``[C, T]`` as well as
``[B, C, T]``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class GraphError(RuntimeError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    return x


# ---------------------------------------------------------------------------
# RNG


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator keyed by a 64-bit seed.

    The stream depends only on the seed (and numpy's PCG64 definition), not on
    platform or global state.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)))


def _key_word(key: int | str) -> int:
    if isinstance(key, str):
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        # strings live above 2**64 so they never collide with integer keys
        return int.from_bytes(digest, "little") | (1 << 64)
    if key < 0:
        raise ValueError("integer split keys must be non-negative")
    return int(key)


def split(rng: np.random.Generator, *keys: int | str) -> np.random.Generator:
    """Derive a labelled child stream.

    The child depends on the parent's seed and the keys only, never on how
    many draws the parent has already made.
    """
    parent = rng.bit_generator.seed_seq
    child = np.random.SeedSequence(
        entropy=parent.entropy,
        spawn_key=tuple(parent.spawn_key) + tuple(_key_word(k) for k in keys),
    )
    return np.random.Generator(np.random.PCG64(child))


# ---------------------------------------------------------------------------
# Parameters and optimizer


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = as_tensor(self.value).copy()
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "Parameter":
        p = Parameter(self.value)
        p.grad[...] = self.grad
        p.adam_m[...] = self.adam_m
        p.adam_v[...] = self.adam_v
        p.step_count = self.step_count
        return p


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update in place. Gradients are left as they are."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Pure forward ops


def _conv_padding(k: int, dilation: int) -> tuple[int, int]:
    total = (k - 1) * dilation
    left = total // 2
    return left, total - left


def conv1d(x: np.ndarray, kernel: np.ndarray, dilation: int = 1) -> np.ndarray:
    """'Same' zero-padded dilated convolution (cross-correlation).

    x: [..., C_in, T]; kernel: [C_out, C_in, K]. Returns [..., C_out, T].
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    _check_conv_args(x, kernel, dilation)
    return _check_finite(_conv_gemm(kernel, _im2col(x, kernel.shape[2], dilation), x.shape), "conv1d")


def _tap_ranges(k: int, dilation: int, t: int):
    """(tap, out_lo, out_hi, shift) so out[lo:hi] reads input[lo+shift:hi+shift]."""
    left, _ = _conv_padding(k, dilation)
    for j in range(k):
        shift = j * dilation - left
        yield j, max(0, -shift), min(t, t - shift), shift


def _im2col(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """[..., C, T] -> [C*K, B*T] matrix of dilated taps, batch folded into time."""
    c, t = x.shape[-2:]
    xc = x.reshape(-1, c, t).transpose(1, 0, 2)
    cols = np.zeros((c, k) + xc.shape[1:])
    for j, lo, hi, shift in _tap_ranges(k, dilation, t):
        cols[:, j, :, lo:hi] = xc[:, :, lo + shift : hi + shift]
    return cols.reshape(c * k, -1)


def _conv_gemm(kernel: np.ndarray, cols: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    c_out = kernel.shape[0]
    t = x_shape[-1]
    # overflow is caught by the explicit finiteness check downstream
    with np.errstate(over="ignore", invalid="ignore"):
        out = kernel.reshape(c_out, -1) @ cols
    return out.reshape(c_out, -1, t).transpose(1, 0, 2).reshape(x_shape[:-2] + (c_out, t))


def _check_conv_args(x: np.ndarray, kernel: np.ndarray, dilation: int) -> None:
    if kernel.ndim != 3:
        raise ValueError(f"conv1d kernel must be [C_out, C_in, K], got {kernel.shape}")
    if x.ndim < 2 or x.shape[-2] != kernel.shape[1]:
        raise ValueError(f"conv1d input {x.shape} does not match kernel {kernel.shape}")
    if kernel.shape[2] < 1 or dilation < 1:
        raise ValueError("conv1d needs K >= 1 and dilation >= 1")
    if (kernel.shape[2] - 1) * dilation >= x.shape[-1]:
        raise ValueError(
            f"conv1d receptive span {(kernel.shape[2] - 1) * dilation} must be shorter than T={x.shape[-1]}"
        )


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    x = as_tensor(x)
    weight = as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense: input {x.shape} does not match weight {weight.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x @ weight.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias
    return _check_finite(out, "dense")


def relu(x: np.ndarray) -> np.ndarray:
    x = _check_finite(as_tensor(x), "relu input")
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = _check_finite(as_tensor(x), "sigmoid input")
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centre over time and scale each row to unit norm; zero rows stay zero."""
    centred = x - x.mean(axis=-1, keepdims=True)
    norm = np.sqrt(np.einsum("...t,...t->...", centred, centred))[..., None]
    zero = norm == 0
    if zero.any():
        return np.where(zero, 0.0, centred / np.where(zero, 1.0, norm)), norm
    centred /= norm
    return centred, norm


def _cosine_from_units(ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    sim = np.matmul(ua, np.swapaxes(ub, -1, -2))
    return _check_finite(sim.reshape(sim.shape[:-2] + (-1,)), "cosine_sim_time")


def cosine_sim_time(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity between channels of ``a`` and ``b``.

    a: [..., F, T], b: [..., G, T]. Returns [..., F*G] with entry i*G + j
    holding the similarity of a[i] and b[j]. Channels are mean-centred over
    time first; a zero-variance channel has similarity 0 with everything.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"cosine_sim_time: shapes {a.shape} and {b.shape} disagree")
    return _cosine_from_units(_unit_rows(a)[0], _unit_rows(b)[0])


@dataclass
class BatchNormState:
    """Running per-channel statistics for inference-mode batch norm."""

    channels: int
    mean: np.ndarray = field(init=False)
    var: np.ndarray = field(init=False)
    initialized: bool = False

    def __post_init__(self):
        self.mean = np.zeros(self.channels)
        self.var = np.ones(self.channels)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        # the first batch seeds the running stats directly instead of decaying from 0/1
        if not self.initialized:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
            self.initialized = True
        else:
            self.mean = BN_MOMENTUM * self.mean + (1.0 - BN_MOMENTUM) * batch_mean
            self.var = BN_MOMENTUM * self.var + (1.0 - BN_MOMENTUM) * batch_var

    def copy(self) -> "BatchNormState":
        s = BatchNormState(self.channels)
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        s.initialized = self.initialized
        return s


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return tuple(i for i in range(x.ndim) if i != x.ndim - 2)


def batch_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    train: bool,
    state: BatchNormState,
) -> np.ndarray:
    """Per-channel normalisation of [..., C, T] over batch and time."""
    return _batch_norm_forward(as_tensor(x), as_tensor(gamma), as_tensor(beta), train, state)[0]


def _batch_norm_forward(x, gamma, beta, train, state):
    if x.ndim < 2 or gamma.shape != (x.shape[-2],) or beta.shape != gamma.shape:
        raise ValueError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = _bn_axes(x)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        state.update(mean, var)
    else:
        if not state.initialized:
            raise GraphError("batch_norm: running statistics used before any training-mode call")
        mean, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[:, None]) * inv_std[:, None]
    out = gamma[:, None] * xhat + beta[:, None]
    return _check_finite(out, "batch_norm"), xhat, inv_std


def spatial_dropout(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None) -> np.ndarray:
    return _spatial_dropout_forward(as_tensor(x), rate, train, rng)[0]


def _spatial_dropout_forward(x, rate, train, rng):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"spatial_dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("spatial_dropout in training mode needs an rng")
    keep = rng.random(x.shape[:-1] + (1,)) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def bce_loss(p, y) -> float | np.ndarray:
    """Binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]. Elementwise."""
    p = np.clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = as_tensor(y)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Tape


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Node:
    id: int
    op: str
    value: np.ndarray
    inputs: tuple[int, ...] = ()
    backward_fn: BackwardFn | None = None
    param: Parameter | None = None
    requires_grad: bool = False
    grad: np.ndarray | None = None


class Graph:
    """One forward pass recorded as a topologically ordered list of nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._backward_done = False

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def _add(self, op, value, inputs=(), backward_fn=None, param=None, requires_grad=None) -> Node:
        if self._backward_done:
            raise GraphError("graph already consumed by backward(); record a new forward pass")
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        node = Node(len(self.nodes), op, value, tuple(inputs), backward_fn, param, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, x) -> Node:
        return self._add("constant", as_tensor(x), requires_grad=False)

    def param(self, p: Parameter) -> Node:
        return self._add("param", p.value, param=p, requires_grad=True)

    # --- ops ---------------------------------------------------------------

    def conv1d(self, x: Node, kernel: Node, dilation: int = 1) -> Node:
        w = kernel.value
        _check_conv_args(x.value, w, dilation)
        c_out, c_in, k = w.shape
        x_shape = x.value.shape
        t = x_shape[-1]
        cols = _im2col(x.value, k, dilation)
        out = _check_finite(_conv_gemm(w, cols, x_shape), "conv1d")

        def backward(g, needs):
            dx = dw = None
            g2 = g.reshape(-1, c_out, t).transpose(1, 0, 2).reshape(c_out, -1)
            if needs[1]:
                dw = (g2 @ cols.T).reshape(w.shape)
            if needs[0]:
                dcols = (w.reshape(c_out, -1).T @ g2).reshape(c_in, k, -1, t)
                dxc = np.zeros((c_in,) + dcols.shape[2:])
                for j, lo, hi, shift in _tap_ranges(k, dilation, t):
                    dxc[:, :, lo + shift : hi + shift] += dcols[:, j, :, lo:hi]
                dx = dxc.transpose(1, 0, 2).reshape(x_shape)
            return dx, dw

        return self._add("conv1d", out, (x.id, kernel.id), backward)

    def dense(self, x: Node, weight: Node, bias: Node | None = None) -> Node:
        out = dense(x.value, weight.value, None if bias is None else bias.value)
        xv, wv = x.value, weight.value

        def backward(g, needs):
            dx = g @ wv if needs[0] else None
            dw = g.reshape(-1, wv.shape[0]).T @ xv.reshape(-1, wv.shape[1]) if needs[1] else None
            grads = [dx, dw]
            if bias is not None:
                grads.append(g.reshape(-1, wv.shape[0]).sum(axis=0) if needs[2] else None)
            return grads

        inputs = (x.id, weight.id) if bias is None else (x.id, weight.id, bias.id)
        return self._add("dense", out, inputs, backward)

    def relu(self, x: Node) -> Node:
        out = relu(x.value)
        active = x.value > 0
        return self._add("relu", out, (x.id,), lambda g, needs: (g * active,))

    def sigmoid(self, x: Node) -> Node:
        s = sigmoid(x.value)
        return self._add("sigmoid", s, (x.id,), lambda g, needs: (g * s * (1.0 - s),))

    def sub(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ValueError(f"sub: shapes {a.value.shape} and {b.value.shape} disagree")
        out = _check_finite(a.value - b.value, "sub")
        return self._add("sub", out, (a.id, b.id), lambda g, needs: (g, -g))

    def cosine_sim_time(self, a: Node, b: Node) -> Node:
        if a.value.shape[-1] != b.value.shape[-1] or a.value.shape[:-2] != b.value.shape[:-2]:
            raise ValueError(f"cosine_sim_time: shapes {a.value.shape} and {b.value.shape} disagree")
        ua, na = _unit_rows(a.value)
        ub, nb = _unit_rows(b.value)
        out = _cosine_from_units(ua, ub)
        f, gdim = a.value.shape[-2], b.value.shape[-2]

        def through_unit(d_unit, unit, norm):
            # d(centred/|centred|) then d(centring); zero-norm rows pass no gradient
            proj = d_unit - unit * np.einsum("...t,...t->...", d_unit, unit)[..., None]
            zero = norm == 0
            d_centred = np.where(zero, 0.0, proj / np.where(zero, 1.0, norm)) if zero.any() else proj / norm
            return d_centred - d_centred.mean(axis=-1, keepdims=True)

        def backward(g, needs):
            gm = g.reshape(g.shape[:-1] + (f, gdim))
            da = through_unit(np.matmul(gm, ub), ua, na) if needs[0] else None
            db = through_unit(np.matmul(np.swapaxes(gm, -1, -2), ua), ub, nb) if needs[1] else None
            return da, db

        return self._add("cosine_sim_time", out, (a.id, b.id), backward)

    def batch_norm(self, x: Node, gamma: Node, beta: Node, train: bool, state: BatchNormState) -> Node:
        out, xhat, inv_std = _batch_norm_forward(x.value, gamma.value, beta.value, train, state)
        axes = _bn_axes(x.value)
        n = x.value.size // x.value.shape[-2]
        gv = gamma.value

        def backward(g, needs):
            dxhat = g * gv[:, None]
            if not needs[0]:
                dx = None
            elif train:
                sum_d = dxhat.sum(axis=axes)[:, None]
                sum_dx = (dxhat * xhat).sum(axis=axes)[:, None]
                dx = inv_std[:, None] / n * (n * dxhat - sum_d - xhat * sum_dx)
            else:
                dx = dxhat * inv_std[:, None]
            dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
            dbeta = g.sum(axis=axes) if needs[2] else None
            return dx, dgamma, dbeta

        return self._add("batch_norm", out, (x.id, gamma.id, beta.id), backward)

    def spatial_dropout(self, x: Node, rate: float, train: bool, rng: np.random.Generator | None) -> Node:
        out, mask = _spatial_dropout_forward(x.value, rate, train, rng)
        if mask is None:
            return self._add("spatial_dropout", out, (x.id,), lambda g, needs: (g,))
        return self._add("spatial_dropout", out, (x.id,), lambda g, needs: (g * mask,))

    def bce_loss(self, p: Node, y) -> Node:
        """Mean binary cross-entropy over all elements of ``p``."""
        y = np.broadcast_to(as_tensor(y), p.value.shape)
        pc = np.clip(p.value, PROB_CLAMP, 1.0 - PROB_CLAMP)
        loss = np.asarray(bce_loss(pc, y), dtype=np.float64).mean()
        n = p.value.size

        # the derivative is taken at the clamped probability so saturated
        # outputs still receive a (bounded) gradient
        def backward(g, needs):
            return (g * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n,)

        return self._add("bce_loss", _check_finite(np.asarray(loss), "bce_loss"), (p.id,), backward)

    # --- reverse pass ------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(value) into every Parameter.grad on the tape."""
        if self._backward_done:
            raise GraphError("backward() already ran on this graph; re-run the forward pass first")
        if loss.value.size != 1:
            raise GraphError("backward() needs a scalar loss node")
        self._backward_done = True
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or not node.requires_grad:
                continue
            if node.param is not None:
                node.param.grad += node.grad
                continue
            if node.backward_fn is None:
                continue
            needs = [self.nodes[i].requires_grad for i in node.inputs]
            grads = node.backward_fn(node.grad, needs)
            for i, gi in zip(node.inputs, grads):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                src = self.nodes[i]
                src.grad = gi if src.grad is None else src.grad + gi
            node.grad = None
