"""Two-layer perceptron engine: GeLU, dropout, BCE, Adam and gradient checks.

Every head in the package (concept head, suitability head, black-box head,
query projection of the factorization router) is a ``DenseParams`` network
trained through the functions here. Inputs are batched row-major
``(batch, features)`` arrays; 1-D inputs are treated as a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator

import numpy as np
from scipy.special import expit, ndtr

PROB_CLAMP = 1e-7
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when array widths disagree with a network or schema."""


class TrainingError(RuntimeError):
    """Raised on non-finite losses or gradients during optimization."""


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    # ndtr keeps full relative precision in the lower tail, unlike 1 + erf
    return ndtr(x)


def gelu(x):
    """Exact GeLU, ``x * Phi(x)`` with the standard normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * _normal_cdf(x)


def gelu_grad(x, cdf=None):
    x = np.asarray(x, dtype=np.float64)
    if cdf is None:
        cdf = _normal_cdf(x)
    return cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def softmax(z, axis: int = -1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class ParamSet:
    """Mixin for parameter containers: named blocks, copying and counting."""

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.blocks().values())

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.blocks().items()})

    def astype(self, dtype):
        return type(self)(**{k: v.astype(dtype) for k, v in self.blocks().items()})

    def zeros_like(self):
        return type(self)(**{k: np.zeros_like(v) for k, v in self.blocks().items()})

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.blocks().values()))

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks().values())


@dataclass
class DenseParams(ParamSet):
    """``in_dim -> hidden -> out_dim`` weights; ``w1`` is ``(in_dim, hidden)``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ShapeError("weight matrices must be 2-D")
        if self.b1.shape != (self.w1.shape[1],) or self.w2.shape[0] != self.w1.shape[1]:
            raise ShapeError(
                f"inconsistent hidden width: w1 {self.w1.shape}, b1 {self.b1.shape}, w2 {self.w2.shape}"
            )
        if self.b2.shape != (self.w2.shape[1],):
            raise ShapeError(f"b2 {self.b2.shape} does not match w2 {self.w2.shape}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def zeros(cls, in_dim: int, hidden_dim: int, out_dim: int) -> "DenseParams":
        return cls(
            w1=np.zeros((in_dim, hidden_dim)),
            b1=np.zeros(hidden_dim),
            w2=np.zeros((hidden_dim, out_dim)),
            b2=np.zeros(out_dim),
        )

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseParams":
        """Glorot-uniform first layer; output layer and biases start at zero.

        The zero output layer makes an untrained head emit logits of exactly 0
        (probabilities 0.5). Hidden units still differ through ``w1``, so the
        first update to ``w2`` breaks symmetry.
        """
        limit = math.sqrt(6.0 / (in_dim + hidden_dim))
        params = cls.zeros(in_dim, hidden_dim, out_dim)
        params.w1[...] = rng.uniform(-limit, limit, size=(in_dim, hidden_dim))
        return params

    @classmethod
    def glorot(cls, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseParams":
        """Glorot-uniform on both layers (used for gradient-check fixtures)."""
        p = cls.init(in_dim, hidden_dim, out_dim, rng)
        limit = math.sqrt(6.0 / (hidden_dim + out_dim))
        p.w2[...] = rng.uniform(-limit, limit, size=(hidden_dim, out_dim))
        return p


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre1: np.ndarray
    cdf1: np.ndarray
    post1: np.ndarray
    mask: np.ndarray | None
    hidden: np.ndarray
    out: np.ndarray
    dropout_p: float = 0.0


def _as_batch(x, width: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"expected input width {width}, got shape {np.shape(x)}")
    return arr, single


def mlp_forward(
    params: DenseParams,
    x,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | int | None = None,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """``gelu(x @ w1 + b1)`` -> inverted dropout -> ``@ w2 + b2``.

    Dropout is applied only when ``training`` is set and ``dropout_p > 0``;
    a precomputed boolean ``mask`` replays an earlier pass exactly.
    """
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must lie in [0, 1), got {dropout_p}")
    xb, single = _as_batch(x, params.in_dim)
    pre1 = xb @ params.w1 + params.b1
    cdf1 = _normal_cdf(pre1)
    post1 = pre1 * cdf1
    if training and dropout_p > 0.0:
        if mask is None:
            if not isinstance(rng, np.random.Generator):
                rng = np.random.default_rng(rng)
            mask = rng.random(post1.shape) >= dropout_p
        elif mask.shape != post1.shape:
            raise ShapeError(f"mask shape {mask.shape} != hidden shape {post1.shape}")
        hidden = post1 * mask / (1.0 - dropout_p)
    else:
        mask = None
        hidden = post1
    out = hidden @ params.w2 + params.b2
    trace = ForwardTrace(xb, pre1, cdf1, post1, mask, hidden, out, dropout_p if mask is not None else 0.0)
    return (out[0] if single else out), trace


def mlp_backward(trace: ForwardTrace, params: DenseParams, grad_out) -> DenseParams:
    """Parameter gradients given ``d loss / d output`` for the traced batch."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.out.shape:
        raise ShapeError(f"output gradient shape {g.shape} != output shape {trace.out.shape}")
    gw2 = trace.hidden.T @ g
    gb2 = g.sum(axis=0)
    gh = g @ params.w2.T
    if trace.mask is not None:
        gh = gh * trace.mask / (1.0 - trace.dropout_p)
    gpre = gh * gelu_grad(trace.pre1, trace.cdf1)
    gw1 = trace.x.T @ gpre
    gb1 = gpre.sum(axis=0)
    return DenseParams(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


def mlp_input_grad(trace: ForwardTrace, params: DenseParams, grad_out) -> np.ndarray:
    """Gradient with respect to the network input (for stacked heads)."""
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    gh = g @ params.w2.T
    if trace.mask is not None:
        gh = gh * trace.mask / (1.0 - trace.dropout_p)
    return (gh * gelu_grad(trace.pre1, trace.cdf1)) @ params.w1.T


def clamp_prob(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(pred_prob, target) -> float:
    """Mean binary cross-entropy over every element; soft targets allowed."""
    p = np.asarray(pred_prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    p = clamp_prob(p)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


def bce_with_logits(logits, target) -> tuple[float, np.ndarray]:
    """BCE of ``sigmoid(logits)`` and its gradient with respect to the logits.

    The gradient is ``(p - t) / size``, the derivative of the unclamped loss;
    it agrees with the clamped value wherever the clamp is inactive.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logit shape {z.shape} != target shape {t.shape}")
    p = sigmoid(z)
    return bce_loss(p, t), (p - t) / z.size


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-3, **kw) -> "AdamState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        return cls(
            lr=lr,
            m=[np.zeros_like(a) for a in params],
            v=[np.zeros_like(a) for a in params],
            **kw,
        )


def optimizer_step(state: AdamState, params: ParamSet, grads: ParamSet) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    gblocks = grads.blocks()
    for name, g in gblocks.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter block {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    step_size = state.lr / (1.0 - state.beta1**t)
    inv_c2 = 1.0 / math.sqrt(1.0 - state.beta2**t)
    for p, g, m, v in zip(params, gblocks.values(), state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v)
        denom *= inv_c2
        denom += state.eps
        p -= step_size * m / denom
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    step: float

    @property
    def failed_blocks(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed_blocks


def finite_diff_check(
    params: ParamSet,
    loss_fn: Callable[[ParamSet], tuple[float, ParamSet]],
    tolerance: float = 1e-3,
    step: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient with central differences.

    ``loss_fn(params)`` must be deterministic and return ``(loss, grads)``.
    Per entry the relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps near-zero gradients from amplifying float noise.
    """
    _, analytic = loss_fn(params)
    probe = params.copy()
    report: dict[str, float] = {}
    for name, arr in probe.blocks().items():
        ana = analytic.blocks()[name]
        worst = 0.0
        flat = arr.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_fn(probe)
            flat[i] = orig - step
            lm, _ = loss_fn(probe)
            flat[i] = orig
            num = (lp - lm) / (2.0 * step)
            a = ana_flat[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, rel)
        report[name] = worst
    return GradCheckReport(report, tolerance, step)
