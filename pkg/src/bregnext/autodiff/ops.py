"""Differentiable primitives over NHWC tensors.

Convolutions run as one GEMM per kernel tap against shifted views of the
padded input, which keeps peak memory flat and feeds BLAS contiguous
operands.  All kernels preserve the dtype of their inputs (float32 in
training, float64 when a verification oracle drives the graph).
"""

from __future__ import annotations

import numpy as np

from .graph import Node, ParamEntry, ShapeError
from .. import mappings as _mp


def _binary_shape(a: Node, b: Node, opname: str):
    if len(a.shape) != len(b.shape) or any(
            None not in (x, y) and x != y for x, y in zip(a.shape, b.shape)):
        raise ShapeError(
            f"{opname}: operand shapes {a.shape} and {b.shape} differ")
    return tuple(x if x is not None else y for x, y in zip(a.shape, b.shape))


class Add(Node):
    def __init__(self, a: Node, b: Node, name=None):
        super().__init__((a, b), name)
        self.shape = _binary_shape(a, b, "add")

    def compute(self, feeds, training):
        return self.inputs[0].value + self.inputs[1].value

    def input_grads(self, grad, training):
        return [grad, grad]


class Mul(Node):
    def __init__(self, a: Node, b: Node, name=None):
        super().__init__((a, b), name)
        self.shape = _binary_shape(a, b, "mul")

    def compute(self, feeds, training):
        return self.inputs[0].value * self.inputs[1].value

    def input_grads(self, grad, training):
        a, b = self.inputs
        return [grad * b.value, grad * a.value]


class Scale(Node):
    """Multiply by a fixed python scalar (the lambda-scaled bypass)."""

    def __init__(self, x: Node, factor: float, name=None):
        super().__init__((x,), name)
        self.factor = float(factor)
        self.shape = x.shape

    def compute(self, feeds, training):
        x = self.inputs[0].value
        return (self.factor * x).astype(x.dtype, copy=False)

    def input_grads(self, grad, training):
        return [self.factor * grad]


class SumAll(Node):
    def __init__(self, x: Node, name=None):
        super().__init__((x,), name)
        self.shape = ()

    def compute(self, feeds, training):
        return np.sum(self.inputs[0].value)

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        return [np.broadcast_to(grad, x.shape).astype(x.dtype, copy=True)]


class MeanAll(Node):
    def __init__(self, x: Node, name=None):
        super().__init__((x,), name)
        self.shape = ()

    def compute(self, feeds, training):
        return np.mean(self.inputs[0].value)

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        g = np.broadcast_to(grad / x.size, x.shape)
        return [g.astype(x.dtype, copy=True)]


class Elu(Node):
    def __init__(self, x: Node, a: float = 1.0, name=None):
        super().__init__((x,), name)
        self.a = float(a)
        self.shape = x.shape

    def compute(self, feeds, training):
        x = self.inputs[0].value
        return np.where(x > 0, x, self.a * np.expm1(x)).astype(x.dtype,
                                                               copy=False)

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        # d/dx = 1 for x>0, a*exp(x) = elu(x)+a otherwise
        d = np.where(x > 0, np.asarray(1.0, x.dtype),
                     self.value + np.asarray(self.a, x.dtype))
        return [grad * d]


class Dense(Node):
    """Affine map on (N, D) inputs: x @ W + b."""

    def __init__(self, x: Node, w: Node, b: Node | None = None, name=None):
        inputs = (x, w) if b is None else (x, w, b)
        super().__init__(inputs, name)
        if len(x.shape) != 2 or len(w.shape) != 2:
            raise ShapeError(f"dense '{self.name}': need 2-D x and W")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"dense '{self.name}': x has {x.shape[1]} features, "
                f"W expects {w.shape[0]}")
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeError(f"dense '{self.name}': bias shape {b.shape} "
                             f"does not match output width {w.shape[1]}")
        self.shape = (x.shape[0], w.shape[1])

    def compute(self, feeds, training):
        x, w = self.inputs[0].value, self.inputs[1].value
        y = x @ w
        if len(self.inputs) == 3:
            y += self.inputs[2].value
        return y

    def input_grads(self, grad, training):
        x, w = self.inputs[0].value, self.inputs[1].value
        grads = [grad @ w.T, x.T @ grad]
        if len(self.inputs) == 3:
            grads.append(np.sum(grad, axis=0))
        return grads


class Softmax(Node):
    def __init__(self, x: Node, name=None):
        super().__init__((x,), name)
        if len(x.shape) != 2:
            raise ShapeError(f"softmax '{self.name}': need 2-D logits")
        self.shape = x.shape

    def compute(self, feeds, training):
        x = self.inputs[0].value
        z = x - np.max(x, axis=1, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=1, keepdims=True)

    def input_grads(self, grad, training):
        p = self.value
        inner = np.sum(grad * p, axis=1, keepdims=True)
        return [p * (grad - inner)]


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


class Conv2D(Node):
    """Cross-correlation on NHWC input with (kh, kw, cin, cout) kernel.
    No bias term: batch norm follows every convolution."""

    def __init__(self, x: Node, w: Node, stride: int = 1,
                 padding: str = "SAME", name=None):
        super().__init__((x, w), name)
        if len(x.shape) != 4 or len(w.shape) != 4:
            raise ShapeError(f"conv '{self.name}': need NHWC x and 4-D kernel")
        if padding not in ("SAME", "VALID"):
            raise ValueError(f"conv '{self.name}': bad padding {padding!r}")
        kh, kw, cin, cout = w.shape
        if x.shape[3] != cin:
            raise ShapeError(
                f"conv '{self.name}': input has {x.shape[3]} channels, "
                f"kernel expects {cin}")
        self.stride = int(stride)
        self.padding = padding
        n, h, wd, _ = x.shape
        if padding == "SAME":
            self.pads_h = _same_pads(h, kh, self.stride)
            self.pads_w = _same_pads(wd, kw, self.stride)
            ho = -(-h // self.stride)
            wo = -(-wd // self.stride)
        else:
            self.pads_h = (0, 0)
            self.pads_w = (0, 0)
            if h < kh or wd < kw:
                raise ShapeError(
                    f"conv '{self.name}': kernel {kh}x{kw} larger than "
                    f"input {h}x{wd} with VALID padding")
            ho = (h - kh) // self.stride + 1
            wo = (wd - kw) // self.stride + 1
        self.out_hw = (ho, wo)
        self.shape = (n, ho, wo, cout)

    def _padded(self, x):
        (pt, pb), (pl, pr) = self.pads_h, self.pads_w
        if pt or pb or pl or pr:
            return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        return x

    def compute(self, feeds, training):
        x, w = self.inputs[0].value, self.inputs[1].value
        kh, kw, cin, cout = w.shape
        xp = self._padded(x)
        n = x.shape[0]
        ho, wo = self.out_hw
        s = self.stride
        y = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        ymat = y.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + (ho - 1) * s + 1:s,
                           j:j + (wo - 1) * s + 1:s, :]
                ymat += patch.reshape(-1, cin) @ w[i, j]
        return y

    def input_grads(self, grad, training):
        x, w = self.inputs[0].value, self.inputs[1].value
        kh, kw, cin, cout = w.shape
        xp = self._padded(x)
        n = x.shape[0]
        ho, wo = self.out_hw
        s = self.stride
        gmat = grad.reshape(-1, cout)
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = np.s_[:, i:i + (ho - 1) * s + 1:s,
                           j:j + (wo - 1) * s + 1:s, :]
                patch = xp[sl].reshape(-1, cin)
                dw[i, j] = patch.T @ gmat
                dxp[sl] += (gmat @ w[i, j].T).reshape(n, ho, wo, cin)
        (pt, pb), (pl, pr) = self.pads_h, self.pads_w
        dx = dxp[:, pt:dxp.shape[1] - pb or None,
                 pl:dxp.shape[2] - pr or None, :]
        return [dx, dw]


class BatchNorm(Node):
    """Per-channel batch normalization over all leading axes.

    Train mode normalizes with batch statistics and updates the running
    mean/variance entries by exponential moving average; infer mode uses
    the stored running statistics.
    """

    def __init__(self, x: Node, gamma: Node, beta: Node,
                 running_mean: ParamEntry, running_var: ParamEntry,
                 momentum: float = 0.99, epsilon: float = 1e-5, name=None):
        super().__init__((x, gamma, beta), name)
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(
                f"batch_norm '{self.name}': gamma/beta must have shape ({c},)")
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.stats_recorded = False
        self.shape = x.shape
        self._cache = None

    def compute(self, feeds, training):
        x = self.inputs[0].value
        gamma, beta = self.inputs[1].value, self.inputs[2].value
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = np.mean(x, axis=axes)
            var = np.var(x, axis=axes)
            m = self.momentum
            self.running_mean.value[...] = (m * self.running_mean.value
                                            + (1.0 - m) * mean)
            self.running_var.value[...] = (m * self.running_var.value
                                           + (1.0 - m) * var)
            self.stats_recorded = True
        else:
            if not self.stats_recorded:
                raise RuntimeError(
                    f"batch_norm '{self.name}': inference before any "
                    f"training statistics were recorded")
            mean = self.running_mean.value
            var = self.running_var.value
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std.astype(x.dtype))
        return (gamma * x_hat + beta).astype(x.dtype, copy=False)

    def mark_stats_recorded(self) -> None:
        """Loaded checkpoints carry valid running statistics."""
        self.stats_recorded = True

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        gamma = self.inputs[1].value
        x_hat, inv_std = self._cache
        axes = tuple(range(x.ndim - 1))
        dgamma = np.sum(grad * x_hat, axis=axes)
        dbeta = np.sum(grad, axis=axes)
        if training:
            n = x.size // x.shape[-1]
            dx = (gamma * inv_std / n) * (
                n * grad - dbeta - x_hat * dgamma)
            dx = dx.astype(x.dtype, copy=False)
        else:
            dx = (grad * gamma * inv_std).astype(x.dtype, copy=False)
        return [dx, dgamma, dbeta]


class GlobalAvgPool(Node):
    """NHWC -> (N, C) spatial mean."""

    def __init__(self, x: Node, name=None):
        super().__init__((x,), name)
        if len(x.shape) != 4:
            raise ShapeError(f"global_avg_pool '{self.name}': need NHWC")
        self.shape = (x.shape[0], x.shape[3])

    def compute(self, feeds, training):
        return np.mean(self.inputs[0].value, axis=(1, 2))

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        n, h, w, c = x.shape
        g = np.broadcast_to(grad[:, None, None, :] / (h * w), x.shape)
        return [g.astype(x.dtype, copy=True)]


class AvgPool2x2(Node):
    """2x2 average pooling with stride 2 (bypass down-sampling)."""

    def __init__(self, x: Node, name=None):
        super().__init__((x,), name)
        if len(x.shape) != 4:
            raise ShapeError(f"avg_pool '{self.name}': need NHWC")
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(
                f"avg_pool '{self.name}': spatial dims {h}x{w} not even")
        self.shape = (n, h // 2, w // 2, c)

    def compute(self, feeds, training):
        x = self.inputs[0].value
        n, h, w, c = x.shape
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        n, h, w, c = x.shape
        g = np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2) * np.asarray(
            0.25, x.dtype)
        return [g]


class PadChannels(Node):
    """Zero-pad the channel axis (transition-unit bypass widening)."""

    def __init__(self, x: Node, extra: int, name=None):
        super().__init__((x,), name)
        if extra < 0:
            raise ShapeError(f"pad_channels '{self.name}': negative pad")
        self.extra = int(extra)
        self.shape = (*x.shape[:-1], x.shape[-1] + self.extra)

    def compute(self, feeds, training):
        x = self.inputs[0].value
        pads = [(0, 0)] * (x.ndim - 1) + [(0, self.extra)]
        return np.pad(x, pads)

    def input_grads(self, grad, training):
        c = self.inputs[0].shape[-1]
        return [np.ascontiguousarray(grad[..., :c])]


class BregMap(Node):
    """Adaptive bounded-gradient bypass with trainable scalar alpha/beta
    parameter nodes (each a shape-() Parameter)."""

    def __init__(self, x: Node, alpha: Node, beta: Node, name=None):
        super().__init__((x, alpha, beta), name)
        if alpha.shape != () or beta.shape != ():
            raise ShapeError(f"breg_map '{self.name}': alpha/beta must be "
                             f"scalar parameters")
        self.shape = x.shape

    def compute(self, feeds, training):
        x = self.inputs[0].value
        alpha = float(self.inputs[1].value)
        beta = float(self.inputs[2].value)
        return _mp.breg_forward(x, (alpha, beta))

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        alpha = float(self.inputs[1].value)
        beta = float(self.inputs[2].value)
        dx = grad * _mp.breg_derivative(x, (alpha, beta))
        d_alpha, d_beta = _mp.breg_param_gradients(x, (alpha, beta), grad)
        dt = x.dtype.type
        return [dx, np.asarray(dt(d_alpha)), np.asarray(dt(d_beta))]


class FixedMap(Node):
    """Non-adaptive bypass mapping (identity / lambda / H1 / H2 / H3)."""

    def __init__(self, x: Node, kind: _mp.MappingKind, name=None):
        super().__init__((x,), name)
        if kind.is_adaptive:
            raise ValueError(f"fixed_map '{self.name}': use BregMap for the "
                             f"adaptive mapping")
        self.kind = kind
        self.shape = x.shape

    def compute(self, feeds, training):
        return _mp.mapping_eval(self.kind, self.inputs[0].value)

    def input_grads(self, grad, training):
        x = self.inputs[0].value
        return [grad * _mp.mapping_derivative(self.kind, x)]


class FocalLoss(Node):
    """Mean focal loss over the batch, from class probabilities and
    integer labels.  p_t is floored at 1e-7."""

    P_FLOOR = 1e-7

    def __init__(self, probs: Node, labels: Node, alpha_t: float = 0.25,
                 gamma: float = 2.0, name=None):
        super().__init__((probs, labels), name)
        if len(probs.shape) != 2:
            raise ShapeError(f"focal_loss '{self.name}': need (N, K) probs")
        if gamma < 0:
            raise ValueError("focal loss focusing parameter must be >= 0")
        self.alpha_t = float(alpha_t)
        self.gamma = float(gamma)
        self.shape = ()

    def _pt(self):
        probs, labels = self.inputs[0].value, self.inputs[1].value
        k = probs.shape[1]
        if labels.min() < 0 or labels.max() >= k:
            raise IndexError(
                f"focal_loss '{self.name}': label index out of range [0, {k})")
        pt = probs[np.arange(probs.shape[0]), labels]
        return np.maximum(pt, probs.dtype.type(self.P_FLOOR)), labels

    def compute(self, feeds, training):
        pt, _ = self._pt()
        loss = -self.alpha_t * (1.0 - pt) ** self.gamma * np.log(pt)
        return np.asarray(np.mean(loss), dtype=pt.dtype)

    def input_grads(self, grad, training):
        probs = self.inputs[0].value
        pt, labels = self._pt()
        n = probs.shape[0]
        one_m = 1.0 - pt
        # d/dp_t of -a*(1-p)^g*log(p); the [p<floor] entries are flat.
        if self.gamma == 0.0:
            d = -self.alpha_t / pt
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = self.alpha_t * (self.gamma * one_m ** (self.gamma - 1.0)
                                    * np.log(pt) - one_m ** self.gamma / pt)
            # (1-p)^(gamma-1)*log(p) -> 0 as p -> 1 for any gamma > 0
            d = np.where(one_m == 0.0, 0.0, d)
        d = np.where(probs[np.arange(n), labels] < self.P_FLOOR, 0.0, d)
        dprobs = np.zeros_like(probs)
        dprobs[np.arange(n), labels] = (d / n).astype(probs.dtype)
        return [dprobs * grad, None]


class MseLoss(Node):
    """Mean of squared componentwise differences."""

    def __init__(self, pred: Node, target: Node, name=None):
        super().__init__((pred, target), name)
        self.shape = ()
        _binary_shape(pred, target, "mse_loss")

    def compute(self, feeds, training):
        d = self.inputs[0].value - self.inputs[1].value
        return np.asarray(np.mean(d * d), dtype=d.dtype)

    def input_grads(self, grad, training):
        p, t = self.inputs[0].value, self.inputs[1].value
        g = grad * 2.0 * (p - t) / p.size
        return [g.astype(p.dtype, copy=False), (-g).astype(p.dtype,
                                                           copy=False)]
