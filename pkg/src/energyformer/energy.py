"""Explicit per-token energy functions and their exact gradients.

Two conditional energies over a token state x given a context:

* interaction energy: couples x to every earlier hidden state through
  per-head bilinear forms, with a log-sum-exp over context positions at
  temperature tau. Its negative gradient is a softmax-weighted sum of
  projected context vectors, which is exactly the shape of a causal
  attention read-out.

* elementwise energy: couples x to its own hidden state through a pair
  of projections and the antiderivative of silu. Its negative gradient
  is a gated two-layer perceptron.

Everything here is plain numpy on purpose: the recurrence layers are
built independently on the autodiff tape, and tests require the two
routes to agree to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, spence, expit

from .tensor import DimensionError, DomainError

# phi(0) = -pi^2/12, the dilogarithm at -1
PHI_AT_ZERO = -(np.pi**2) / 12.0


def silu_antiderivative(z):
    """Antiderivative phi of silu with phi(-inf) = 0.

    Closed form: phi(z) = z*softplus(z) + Li2(-e^z). The dilogarithm is
    evaluated through scipy's spence (Li2(y) = spence(1 - y)); for
    z > 0 the reflection Li2(-e^z) = -pi^2/6 - z^2/2 - Li2(-e^-z)
    keeps the argument bounded.

    Not monotone: phi dips below zero where silu is negative, then
    grows like z^2/2. phi(0) = -pi^2/12.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    neg = z <= 0.0
    zn = z[neg]
    out[neg] = zn * np.logaddexp(0.0, zn) + spence(1.0 + np.exp(zn))
    zp = z[~neg]
    li2 = -(np.pi**2) / 6.0 - 0.5 * zp * zp - spence(1.0 + np.exp(-zp))
    out[~neg] = zp * np.logaddexp(0.0, zp) + li2
    return out if out.ndim else float(out)


def silu_np(z):
    z = np.asarray(z, dtype=np.float64)
    return z * expit(z)


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Geometric head slopes 2^-1, 2^-2, ..., 2^-K."""
    if n_heads < 1:
        raise DomainError("n_heads must be >= 1")
    return 2.0 ** (-np.arange(1, n_heads + 1, dtype=np.float64))


@dataclass(frozen=True)
class AlibiSpec:
    """Distance-linear logit bias plus learnable self/cross offsets.

    bias(i, j, k) = -slopes[k] * |i - j| + (b_self if i == j else b_cross)
    with positions counted 1-based over the visible history.
    """

    slopes: np.ndarray
    b_self: float = 0.0
    b_cross: float = 0.0

    def bias_row(self, i: int, n_ctx: int, head: int) -> np.ndarray:
        """Bias over context positions j = 1..n_ctx for query position i."""
        j = np.arange(1, n_ctx + 1, dtype=np.float64)
        dist = np.abs(float(i) - j)
        off = np.where(j == float(i), self.b_self, self.b_cross)
        return -self.slopes[head] * dist + off


@dataclass(frozen=True)
class InteractionEnergySpec:
    """Per-head bilinear coupling for the interaction energy.

    Heads are given either as explicit square matrices (`full`, one
    (D_h, D_h) array per head, used as a test oracle) or factored as
    w_q[k].T @ w_k[k] with an optional diagonal term, which is the
    production parameterization.
    """

    tau: float
    w_q: tuple[np.ndarray, ...] | None = None  # per head (D_r, D_h)
    w_k: tuple[np.ndarray, ...] | None = None
    diag: tuple[np.ndarray, ...] | None = None  # per head (D_h,), optional
    full: tuple[np.ndarray, ...] | None = None  # per head (D_h, D_h), oracle mode
    alibi: AlibiSpec | None = None

    def __post_init__(self):
        if self.tau <= 0.0:
            raise DomainError("tau must be positive")
        if (self.full is None) == (self.w_q is None):
            raise DomainError("give exactly one of full or factored head matrices")
        if self.w_q is not None and self.w_k is not None:
            if len(self.w_q) != len(self.w_k):
                raise DimensionError("w_q and w_k must have one matrix per head")

    @property
    def n_heads(self) -> int:
        return len(self.full) if self.full is not None else len(self.w_q)

    def head_matrix(self, k: int) -> np.ndarray:
        """Materialize A_k = w_q[k].T @ w_k[k] (+ diag), or return full[k]."""
        if self.full is not None:
            return self.full[k]
        a = self.w_q[k].T @ self.w_k[k]
        if self.diag is not None:
            a = a + np.diag(self.diag[k])
        return a

    def context_projections(self, history: np.ndarray, k: int) -> np.ndarray:
        """beta_{kj} = A_k h_j for all context rows, shape (n_ctx, D_h)."""
        if self.full is not None:
            return history @ self.full[k].T
        beta = (history @ self.w_k[k].T) @ self.w_q[k]
        if self.diag is not None:
            beta = beta + history * self.diag[k]
        return beta


def _check_context(x: np.ndarray, history: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    history = np.asarray(history, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"token state must be a vector, got shape {x.shape}")
    if history.ndim != 2:
        raise DimensionError(f"history must be (n_ctx, D_h), got {history.shape}")
    if history.shape[0] == 0:
        raise DomainError("history must contain at least one token")
    if history.shape[1] != x.shape[0]:
        raise DimensionError(
            f"state dim {x.shape[0]} does not match history dim {history.shape[1]}"
        )
    return x, history


def _interaction_logits(x, history, spec: InteractionEnergySpec, query_index):
    n_ctx = history.shape[0]
    i = n_ctx if query_index is None else int(query_index)
    if i < n_ctx:
        raise DomainError("query index must not precede the visible history")
    logits = []
    for k in range(spec.n_heads):
        beta = spec.context_projections(history, k)  # (n_ctx, D_h)
        a = beta @ x / spec.tau
        if spec.alibi is not None:
            a = a + spec.alibi.bias_row(i, n_ctx, k)
        logits.append((a, beta))
    return logits


def interaction_energy(
    x,
    history,
    spec: InteractionEnergySpec,
    query_index: int | None = None,
) -> float:
    """Energy of state x against a causal history.

    -tau * sum_k logsumexp_j( beta_{kj}.x / tau + bias_{ijk} ) over the
    visible context j = 1..n_ctx. Lower is better; the minimizer pulls
    x toward the dominant projected context directions.
    """
    x, history = _check_context(x, history)
    total = 0.0
    for a, _ in _interaction_logits(x, history, spec, query_index):
        total -= spec.tau * logsumexp(a)
    return float(total)


def interaction_energy_grad(
    x,
    history,
    spec: InteractionEnergySpec,
    query_index: int | None = None,
) -> np.ndarray:
    """Exact gradient d/dx of interaction_energy.

    Per head: -sum_j softmax(a)_j * beta_{kj}; the softmax is over the
    same biased logits the energy uses.
    """
    x, history = _check_context(x, history)
    grad = np.zeros_like(x)
    for a, beta in _interaction_logits(x, history, spec, query_index):
        m = a.max()
        e = np.exp(a - m)
        p = e / e.sum()
        grad -= p @ beta
    return grad


@dataclass(frozen=True)
class ElementwiseEnergySpec:
    """Projection pair for the per-token elementwise energy.

    w, v: (D_m, D_h). The energy reads -(w @ h) . phi(v @ x) with phi
    the silu antiderivative, so its negative x-gradient is the gated
    form v.T @ ((w @ h) * silu(v @ x)).
    """

    w: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if w.ndim != 2 or v.ndim != 2 or w.shape != v.shape:
            raise DimensionError(
                f"w and v must be matching (D_m, D_h) matrices, got {w.shape} and {v.shape}"
            )
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v", v)


def _check_pair(x, h, spec: ElementwiseEnergySpec):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape != h.shape or x.ndim != 1:
        raise DimensionError(
            f"x and h must be equal-length vectors, got {x.shape} and {h.shape}"
        )
    if x.shape[0] != spec.w.shape[1]:
        raise DimensionError(
            f"state dim {x.shape[0]} does not match projection dim {spec.w.shape[1]}"
        )
    return x, h


def elementwise_energy(x, h, spec: ElementwiseEnergySpec) -> float:
    """-(w h) . phi(v x), with phi the silu antiderivative."""
    x, h = _check_pair(x, h, spec)
    gate = spec.w @ h
    return float(-(gate @ silu_antiderivative(spec.v @ x)))


def elementwise_energy_grad(x, h, spec: ElementwiseEnergySpec) -> np.ndarray:
    """Exact gradient d/dx: -v.T @ ((w h) * silu(v x))."""
    x, h = _check_pair(x, h, spec)
    gate = spec.w @ h
    return -(spec.v.T @ (gate * silu_np(spec.v @ x)))
