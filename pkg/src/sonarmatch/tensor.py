"""Dense float64 kernels for the matching networks.

Arrays are plain ``numpy.ndarray``.  The public spatial ops take either a
single ``C x H x W`` image or an ``N x C x H x W`` batch; dense ops take a
vector or an ``N x n`` batch.  Layers run convolutions in channel-major
``C x N x H x W`` layout (``*_cm`` functions), which lets im2col copy whole
rows and avoids transposing activations between layers.  Every backward function returns the
gradient of ``sum(upstream * output)`` with respect to its arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, ShapeError

DTYPE = np.float64
PROB_CLIP = 1e-7


@dataclass
class AdamConfig:
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError(f"alpha must be positive, got {self.alpha}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InputError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise InputError("epsilon must be positive")
        if self.batch_size < 1:
            raise InputError("batch_size must be a positive integer")


@dataclass
class LayerParams:
    """Weights and bias of one layer together with their ADAM moments."""

    weights: np.ndarray
    bias: np.ndarray
    m_weights: np.ndarray = field(default=None, repr=False)
    v_weights: np.ndarray = field(default=None, repr=False)
    m_bias: np.ndarray = field(default=None, repr=False)
    v_bias: np.ndarray = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.m_weights is None:
            self.m_weights = np.zeros_like(self.weights)
            self.v_weights = np.zeros_like(self.weights)
        if self.m_bias is None:
            self.m_bias = np.zeros_like(self.bias)
            self.v_bias = np.zeros_like(self.bias)

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _as_batch(x, ndim):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-D sample or {ndim}-D batch, got shape {x.shape}")
    return x, False


# im2col buffers are built in batch chunks of at most this many float64s
_COLS_BUDGET = 4_000_000


def _im2col(x, k):
    """``C x N x H x W`` -> ``(C*k*k) x (N*Ho*Wo)`` patch matrix."""
    c, n, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * k * k, n * ho * wo)


def _chunks(x, k):
    c, n, h, w = x.shape
    per_sample = c * k * k * (h - k + 1) * (w - k + 1)
    step = max(1, _COLS_BUDGET // per_sample)
    return range(0, n, step), step


def conv_forward_cm(x, weights, bias):
    """Valid cross-correlation in channel-major layout.

    ``x`` is ``C x N x H x W``; the result is ``F x N x Ho x Wo``.
    """
    f, c, k, _ = weights.shape
    _, n, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    wm = weights.reshape(f, c * k * k)
    out = np.empty((f, n, ho, wo), dtype=DTYPE)
    starts, step = _chunks(x, k)
    for s in starts:
        part = x[:, s:s + step]
        m = part.shape[1]
        out[:, s:s + m] = (wm @ _im2col(part, k)).reshape(f, m, ho, wo)
    out += bias[:, None, None, None]
    return out


def conv_backward_cm(x, weights, upstream, need_input_grad=True):
    """Gradients for :func:`conv_forward_cm`: ``(input_grad, weight_grad, bias_grad)``."""
    f, c, k, _ = weights.shape
    _, n, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    wm = weights.reshape(f, c * k * k)
    dw = np.zeros_like(wm)
    dx = np.zeros_like(x) if need_input_grad else None
    starts, step = _chunks(x, k)
    for s in starts:
        part = x[:, s:s + step]
        m = part.shape[1]
        gm = upstream[:, s:s + m].reshape(f, m * ho * wo)
        dw += gm @ _im2col(part, k).T
        if need_input_grad:
            dcols = (wm.T @ gm).reshape(c, k, k, m, ho, wo)
            d = dx[:, s:s + m]
            for i in range(k):
                for j in range(k):
                    d[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
    return dx, dw.reshape(weights.shape), upstream.sum(axis=(1, 2, 3))


def _check_conv(x, params):
    w = params.weights
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"filters must be F x C x k x k, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels (shape {x.shape[1:]}) but filters "
            f"expect {w.shape[1]} (filter shape {w.shape})")
    k = w.shape[-1]
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} is smaller than the {k}x{k} kernel")


def conv2d(x, params: LayerParams) -> np.ndarray:
    """Valid (unpadded) cross-correlation plus per-filter bias.

    ``C x H x W`` input with ``F`` filters of ``C x k x k`` gives
    ``F x (H-k+1) x (W-k+1)``.
    """
    xb, single = _as_batch(x, 4)
    _check_conv(xb, params)
    out = conv_forward_cm(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), params.weights, params.bias)
    out = out.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out[0] if single else out)


def conv2d_grad(x, params: LayerParams, upstream, need_input_grad: bool = True):
    """Gradients of ``sum(upstream * conv2d(x, params))``.

    Returns:
        ``(input_grad, weight_grad, bias_grad)``; ``input_grad`` is None when
        ``need_input_grad`` is false.
    """
    xb, single = _as_batch(x, 4)
    _check_conv(xb, params)
    w = params.weights
    k = w.shape[-1]
    g, _ = _as_batch(upstream, 4)
    expected = (xb.shape[0], w.shape[0], xb.shape[2] - k + 1, xb.shape[3] - k + 1)
    if g.shape != expected:
        raise ShapeError(f"upstream gradient has shape {g.shape}, conv output is {expected}")
    dx, dw, db = conv_backward_cm(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), w,
                                  np.ascontiguousarray(g.transpose(1, 0, 2, 3)), need_input_grad)
    if dx is not None:
        dx = dx.transpose(1, 0, 2, 3)
        dx = np.ascontiguousarray(dx[0] if single else dx)
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling, dense, activations
# ---------------------------------------------------------------------------

def _quarters(x, ho, wo):
    """The four strided views ``x[..., di::2, dj::2]`` in row-major window order."""
    return [x[:, :, di:2 * ho:2, dj:2 * wo:2] for di in (0, 1) for dj in (0, 1)]


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling; an odd trailing row/column is dropped.

    Works on any 4-D layout whose last two axes are spatial.

    Returns:
        ``(output, argmax)`` where ``argmax`` holds the winning position
        (0..3, row-major inside the window, first maximum on ties) of every
        output cell.
    """
    xb, single = _as_batch(x, 4)
    h, w = xb.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"pooling needs at least 2x2 input, got {h}x{w}")
    ho, wo = h // 2, w // 2
    q = _quarters(xb, ho, wo)
    out = q[0].copy()
    argmax = np.zeros(out.shape, dtype=np.uint8)
    for pos in (1, 2, 3):
        better = q[pos] > out
        np.copyto(out, q[pos], where=better)
        argmax[better] = pos
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2x2_grad(upstream, argmax, input_shape):
    """Route ``upstream`` back to the argmax position of each window."""
    g, single = _as_batch(upstream, 4)
    am = argmax[None] if single else argmax
    if g.shape != am.shape:
        raise ShapeError(f"upstream {g.shape} does not match pooled output {am.shape}")
    ho, wo = g.shape[-2:]
    out = np.zeros(g.shape[:2] + tuple(input_shape[-2:]), dtype=DTYPE)
    for pos, view in enumerate(_quarters(out, ho, wo)):
        np.copyto(view, g, where=am == pos)
    return out[0] if single else out


def dense(x, params: LayerParams):
    """Affine map ``W x + b`` for a vector or each row of a batch."""
    xb, single = _as_batch(x, 2)
    w = params.weights
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"input length {xb.shape[1]} does not match weights {w.shape}")
    out = xb @ w.T + params.bias
    return out[0] if single else out


def dense_grad(x, params: LayerParams, upstream):
    xb, single = _as_batch(x, 2)
    g, _ = _as_batch(upstream, 2)
    w = params.weights
    if xb.shape[1] != w.shape[1] or g.shape != (xb.shape[0], w.shape[0]):
        raise ShapeError(f"shapes x={xb.shape}, W={w.shape}, upstream={g.shape} are inconsistent")
    input_grad = g @ w
    return (input_grad[0] if single else input_grad), g.T @ xb, g.sum(axis=0)


def relu(t):
    return np.maximum(t, 0.0)


def relu_grad(t, upstream):
    return upstream * (t > 0)


def sigmoid(t):
    t = np.asarray(t, dtype=DTYPE)
    # split by sign so neither branch overflows
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(t):
    """Softmax over the last axis with max subtraction."""
    t = np.asarray(t, dtype=DTYPE)
    z = t - t.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def binary_cross_entropy(p, y):
    """``-y log p - (1-y) log(1-p)`` with ``p`` clipped to ``[1e-7, 1-1e-7]``.

    Works elementwise on arrays.  Returns ``(loss, dloss/dp)``; the gradient is
    taken at the clipped probability.
    """
    y = np.asarray(y, dtype=DTYPE)
    if not np.all((y == 0) | (y == 1)):
        raise InputError("binary targets must be 0 or 1")
    p = np.clip(np.asarray(p, dtype=DTYPE), PROB_CLIP, 1.0 - PROB_CLIP)
    loss = -y * np.log(p) - (1.0 - y) * np.log1p(-p)
    grad = -y / p + (1.0 - y) / (1.0 - p)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def categorical_cross_entropy(pred, target):
    """``-sum_i y_i log(yhat_i)`` over the last axis, probabilities clipped.

    Returns ``(loss, dloss/dpred)``.
    """
    target = np.asarray(target, dtype=DTYPE)
    pred = np.asarray(pred, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    onehot = np.all((target == 0) | (target == 1), axis=-1) & (target.sum(axis=-1) == 1)
    if not np.all(onehot):
        raise InputError("categorical targets must be one-hot")
    q = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = -(target * np.log(q)).sum(axis=-1)
    grad = -target / q
    if loss.ndim == 0:
        return float(loss), grad
    return loss, grad


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy of a logit batch and its gradient w.r.t. the logits.

    ``labels`` holds class indices.  The loss value uses clipped
    probabilities; the gradient is the closed form ``(softmax - onehot) / N``.
    """
    probs = softmax(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    loss, _ = categorical_cross_entropy(probs, onehot)
    return float(loss.mean()), (probs - onehot) / len(labels)


def sigmoid_cross_entropy(logits, labels):
    """Mean binary cross-entropy of a ``N x 1`` logit batch and its logit gradient."""
    p = sigmoid(logits[:, 0])
    y = np.asarray(labels, dtype=DTYPE)
    loss, _ = binary_cross_entropy(p, y)
    return float(np.mean(loss)), ((p - y) / len(y))[:, None]


# ---------------------------------------------------------------------------
# regularisation and optimisation
# ---------------------------------------------------------------------------

def dropout(t, rate: float, train: bool, rng=None):
    """Inverted dropout.

    In training mode each element is zeroed with probability ``rate`` and the
    survivors are scaled by ``1/(1-rate)``; in inference mode the input is
    returned unchanged.

    Returns:
        ``(output, mask)``; ``mask`` is the scale applied per element, or None
        when nothing was dropped.
    """
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return t, None
    keep = rng.random(np.shape(t)) >= rate
    mask = keep / (1.0 - rate)
    return t * mask, mask


def adam_step(params: LayerParams, grads, cfg: AdamConfig) -> LayerParams:
    """One bias-corrected ADAM update of ``params`` in place.

    Args:
        grads: ``(weight_grad, bias_grad)``.
    """
    gw, gb = grads
    if np.shape(gw) != params.weights.shape or np.shape(gb) != params.bias.shape:
        raise ShapeError(
            f"gradient shapes {np.shape(gw)}, {np.shape(gb)} do not match "
            f"parameters {params.weights.shape}, {params.bias.shape}")
    params.step += 1
    t = params.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for value, m, v, g in ((params.weights, params.m_weights, params.v_weights, gw),
                           (params.bias, params.m_bias, params.v_bias, gb)):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        value -= cfg.alpha * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest ``|a-n| / max(|a|, |n|, floor)`` over paired entries."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_difference_check(loss_fn: Callable[[], float], tensors: Sequence[np.ndarray],
                            grads: Sequence[np.ndarray], eps: float = 1e-3,
                            samples: int | None = None, rng=None,
                            signature_fn: Callable[[], object] | None = None,
                            max_redraws: int = 1000) -> float:
    """Compare analytic gradients with central differences.

    Args:
        loss_fn: evaluates the scalar loss from the current contents of ``tensors``.
        tensors: arrays perturbed in place, one coordinate at a time.
        grads: analytic gradients, same shapes as ``tensors``.
        eps: perturbation size.
        samples: coordinates probed per tensor; all of them when None.
        rng: generator used to choose coordinates when sampling.
        signature_fn: returns a hashable description of the piecewise-linear
            regime (ReLU masks, pooling winners) after the latest ``loss_fn``
            call.  Probes whose ``+eps`` or ``-eps`` evaluation changes the
            regime sit on a kink and are replaced by another coordinate.

    Returns:
        Maximum relative error over all probed coordinates.
    """
    if len(tensors) != len(grads):
        raise InputError("need one gradient per tensor")
    rng = np.random.default_rng(0) if rng is None else rng
    base_sig = None
    if signature_fn is not None:
        loss_fn()
        base_sig = signature_fn()
    worst = 0.0
    for t, g in zip(tensors, grads):
        if np.shape(g) != t.shape:
            raise ShapeError(f"gradient {np.shape(g)} does not match tensor {t.shape}")
        flat_t = t.reshape(-1)
        if not np.shares_memory(flat_t, t):
            raise InputError("tensors must be contiguous so they can be perturbed in place")
        flat_g = np.asarray(g).reshape(-1)
        if samples is None or samples >= t.size:
            order = list(range(t.size))
        else:
            order = list(rng.permutation(t.size))
        want = len(order) if samples is None else min(samples, t.size)
        done = redraws = 0
        analytic, numeric = [], []
        for idx in order:
            if done == want:
                break
            old = flat_t[idx]
            flat_t[idx] = old + eps
            f_plus = loss_fn()
            sig_plus = signature_fn() if signature_fn is not None else None
            flat_t[idx] = old - eps
            f_minus = loss_fn()
            sig_minus = signature_fn() if signature_fn is not None else None
            flat_t[idx] = old
            if signature_fn is not None and (sig_plus != base_sig or sig_minus != base_sig):
                redraws += 1
                if redraws > max_redraws:
                    raise InputError("too many probes straddle a kink; choose another point")
                continue
            analytic.append(flat_g[idx])
            numeric.append((f_plus - f_minus) / (2.0 * eps))
            done += 1
        worst = max(worst, relative_error(analytic, numeric))
    if signature_fn is not None:
        loss_fn()
    return worst


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
