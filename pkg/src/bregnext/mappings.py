"""Bypass mapping family for residual units.

The adaptive mapping

    H(x; alpha, beta) = arctan(alpha * x / sqrt(beta^2 + 1)) / (alpha * sqrt(beta^2 + 1))

has the elementwise derivative 1 / (alpha^2 x^2 + beta^2 + 1), which lies
in (0, 1] for all real x, alpha, beta.  The non-adaptive alternatives
(arctan, x*arctan(x) - log(x^2+1)/2, and a log-exp form) and the plain
lambda-scaled bypass are also provided, together with the chained
bypass-derivative product that governs gradient flow across stacked units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# alpha is clamped away from zero after every optimizer step; below the
# switch threshold evaluation falls back to the analytic alpha -> 0 limit.
ALPHA_MIN = 1e-3
ALPHA_LIMIT_SWITCH = 1e-6


@dataclass
class MappingParams:
    """Per-residual-unit trainable scalars of the adaptive mapping."""

    alpha: float = 1.0
    beta: float = 0.0
    unit_id: str = ""


@dataclass(frozen=True)
class MappingKind:
    """Selector for a bypass mapping.

    tag is one of: "identity", "lambda", "h1", "h2", "h3", "adaptive".
    "lambda" carries `lam`; "h3" carries its fixed `alpha`.
    """

    tag: str
    lam: float = 1.0
    alpha: float = 1.0

    _TAGS = ("identity", "lambda", "h1", "h2", "h3", "adaptive")

    def __post_init__(self):
        if self.tag not in self._TAGS:
            raise ValueError(f"unknown mapping tag {self.tag!r}")
        if self.tag == "h3" and self.alpha == 0.0:
            raise ValueError("h3 mapping requires alpha != 0")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def lambda_scaled(cls, lam: float):
        return cls("lambda", lam=lam)

    @classmethod
    def h1(cls):
        return cls("h1")

    @classmethod
    def h2(cls):
        return cls("h2")

    @classmethod
    def h3(cls, alpha: float = 1.0):
        return cls("h3", alpha=alpha)

    @classmethod
    def adaptive(cls):
        return cls("adaptive")

    @property
    def is_adaptive(self) -> bool:
        return self.tag == "adaptive"


def _split(p) -> tuple[float, float]:
    if isinstance(p, MappingParams):
        return float(p.alpha), float(p.beta)
    alpha, beta = p
    return float(alpha), float(beta)


def breg_forward(x, p) -> np.ndarray:
    """Adaptive bounded-gradient mapping, elementwise and odd in x.

    For |alpha| below the switch threshold the analytic limit
    x / (beta^2 + 1) is used, keeping the function total in alpha.
    """
    alpha, beta = _split(p)
    x = np.asarray(x)
    s2 = beta * beta + 1.0
    if abs(alpha) < ALPHA_LIMIT_SWITCH:
        return (x / s2).astype(x.dtype, copy=False)
    s = np.sqrt(s2)
    out = np.arctan(alpha * x / s) / (alpha * s)
    return out.astype(x.dtype, copy=False)


def breg_derivative(x, p) -> np.ndarray:
    """Elementwise d/dx of breg_forward: 1/(alpha^2 x^2 + beta^2 + 1)."""
    alpha, beta = _split(p)
    x = np.asarray(x)
    out = 1.0 / (alpha * alpha * x * x + beta * beta + 1.0)
    return out.astype(x.dtype, copy=False)


def _breg_param_partials(x, alpha: float, beta: float):
    """Elementwise partials of breg_forward w.r.t. alpha and beta."""
    x = np.asarray(x)
    s2 = beta * beta + 1.0
    hprime = 1.0 / (alpha * alpha * x * x + s2)
    if abs(alpha) < ALPHA_LIMIT_SWITCH:
        # Taylor limit:  H = x/s2 - alpha^2 x^3 / (3 s2^2) + O(alpha^4)
        d_alpha = -2.0 * alpha * x ** 3 / (3.0 * s2 * s2)
        h = x / s2
    else:
        h = np.arctan(alpha * x / np.sqrt(s2)) / (alpha * np.sqrt(s2))
        d_alpha = (x * hprime - h) / alpha
    d_beta = -(beta / s2) * (x * hprime + h)
    return d_alpha, d_beta


def breg_param_gradients(x, p, upstream=None) -> tuple[float, float]:
    """Scalar loss gradients (d/dalpha, d/dbeta) accumulated over all
    elements, given the upstream gradient w.r.t. the mapping output
    (defaults to all-ones, i.e. the partials of sum(H))."""
    alpha, beta = _split(p)
    x = np.asarray(x)
    upstream = (np.ones_like(x, dtype=np.float64) if upstream is None
                else np.asarray(upstream))
    if upstream.shape != x.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match x {x.shape}")
    d_alpha, d_beta = _breg_param_partials(x, alpha, beta)
    return float(np.sum(upstream * d_alpha)), float(np.sum(upstream * d_beta))


def mapping_eval(kind: MappingKind, x, params: MappingParams | None = None):
    """Evaluate a bypass mapping elementwise."""
    x = np.asarray(x)
    if kind.tag == "identity":
        return x.copy()
    if kind.tag == "lambda":
        return (kind.lam * x).astype(x.dtype, copy=False)
    if kind.tag == "h1":
        return np.arctan(x).astype(x.dtype, copy=False)
    if kind.tag == "h2":
        out = x * np.arctan(x) - 0.5 * np.log1p(x * x)
        return out.astype(x.dtype, copy=False)
    if kind.tag == "h3":
        a2 = kind.alpha * kind.alpha
        # (x - log(e^x + a^2)) / a^2; the stable logaddexp form avoids
        # overflow for large positive x.
        out = (x - np.logaddexp(x, np.log(a2))) / a2
        return out.astype(x.dtype, copy=False)
    if kind.tag == "adaptive":
        if params is None:
            raise ValueError("adaptive mapping requires MappingParams")
        return breg_forward(x, params)
    raise ValueError(f"unknown mapping tag {kind.tag!r}")


def mapping_derivative(kind: MappingKind, x,
                       params: MappingParams | None = None):
    """Elementwise derivative of `mapping_eval` for the same kind."""
    x = np.asarray(x)
    if kind.tag == "identity":
        return np.ones_like(x)
    if kind.tag == "lambda":
        return np.full_like(x, kind.lam)
    if kind.tag == "h1":
        return (1.0 / (1.0 + x * x)).astype(x.dtype, copy=False)
    if kind.tag == "h2":
        return np.arctan(x).astype(x.dtype, copy=False)
    if kind.tag == "h3":
        a2 = kind.alpha * kind.alpha
        out = 1.0 / (np.exp(np.minimum(x, 700.0)) + a2)
        return out.astype(x.dtype, copy=False)
    if kind.tag == "adaptive":
        if params is None:
            raise ValueError("adaptive mapping requires MappingParams")
        return breg_derivative(x, params)
    raise ValueError(f"unknown mapping tag {kind.tag!r}")


def grad_path_product(per_unit) -> float:
    """Product of (dF_i + dH_i) over a chain of residual units: the
    scalar factor the bypass contributes to the backpropagated gradient.
    Empty chains give 1."""
    total = np.float64(1.0)
    for d_f, d_h in per_unit:
        total *= np.float64(d_f) + np.float64(d_h)
    return float(total)
