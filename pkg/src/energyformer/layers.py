"""Sequence layers: reference attention/MLP and their recurrent forms.

The recurrent layers evolve a per-token state x (initialised at the
incoming hidden state) by repeatedly adding a preconditioned update
whose direction is the negative gradient of an explicit energy, with
context projections computed once and frozen across steps. At one step,
identity preconditioner and inner norm off, they reduce exactly to the
weight-tied reference layers.

All shapes follow the row convention: sequences are (..., J, D_h) with
any number of leading batch axes, projection matrices are stored as
(rows_out, D_h) and applied as h @ W.T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    DomainError,
    Tensor,
    add,
    matmul,
    mul,
    rsqrt,
    silu,
    softmax_lastdim,
    softplus,
    swap_last2,
    tmean,
)


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: 0 where j <= i, -inf where j > i."""
    if n < 1:
        raise DomainError("mask size must be >= 1")
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


# ---------------------------------------------------------------------------
# RMS norm


@dataclass
class RmsNormParams:
    gain: Tensor  # (D_h,)
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0.0:
            raise DomainError("rmsnorm eps must be positive")


def rmsnorm(x: Tensor, params: RmsNormParams) -> Tensor:
    """x * gain / sqrt(mean(x^2) + eps) along the last axis."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    return mul(mul(x, rsqrt(add(ms, params.eps))), params.gain)


# ---------------------------------------------------------------------------
# positional logit bias


@dataclass
class AlibiParams:
    """Distance-linear bias with learnable scalar self/cross offsets.

    slopes is a constant (K,) array, normally 2^-k; the two offsets are
    traced scalars shared across heads.
    """

    slopes: np.ndarray
    b_self: Tensor
    b_cross: Tensor

    def bias_matrix(self, n: int, head: int) -> Tensor:
        eye = np.eye(n)
        dist = -self.slopes[head] * np.abs(
            np.arange(n)[:, None] - np.arange(n)[None, :]
        ).astype(np.float64)
        return add(
            Tensor(dist),
            add(mul(Tensor(eye), self.b_self), mul(Tensor(1.0 - eye), self.b_cross)),
        )


# ---------------------------------------------------------------------------
# preconditioners


@dataclass
class PreconditionerParams:
    """Symmetric positive-leaning preconditioner, never materialized.

    kind "identity": no parameters.
    kind "diagonal": diag(softplus(scale * p)) with scale = sqrt(dim);
        p stored at O(1/sqrt(dim)) so the diagonal starts near
        softplus(1).
    kind "diag_lowrank": adds u v.T + v u.T with u, v of shape
        (dim, rank); v starts at zero so the map starts diagonal.
    """

    kind: str
    dim: int
    p: Tensor | None = None
    u: Tensor | None = None
    v: Tensor | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "diagonal", "diag_lowrank"):
            raise DomainError(f"unknown preconditioner kind {self.kind!r}")
        if self.kind != "identity" and (self.p is None or self.p.shape != (self.dim,)):
            raise DimensionError("diagonal preconditioner needs p of shape (dim,)")
        if self.kind == "diag_lowrank":
            if self.u is None or self.v is None:
                raise DimensionError("diag_lowrank needs u and v factors")
            if self.u.shape != self.v.shape or self.u.shape[0] != self.dim:
                raise DimensionError(
                    f"low-rank factors must both be (dim, rank), got "
                    f"{self.u.shape} and {self.v.shape}"
                )

    @property
    def rank(self) -> int:
        return 0 if self.kind != "diag_lowrank" else self.u.shape[1]


def identity_preconditioner(dim: int) -> PreconditionerParams:
    return PreconditionerParams(kind="identity", dim=dim)


def apply_preconditioner(g: Tensor, params: PreconditionerParams) -> Tensor:
    """Apply P to rows of g without forming the (dim, dim) matrix.

    identity returns g itself, bit-exact. The diagonal factor is
    softplus-positive; the low-rank part is the symmetric pair
    (g u) v.T + (g v) u.T.
    """
    if params.kind == "identity":
        return g
    if g.shape[-1] != params.dim:
        raise DimensionError(
            f"preconditioner dim {params.dim} does not match state dim {g.shape[-1]}"
        )
    scale = float(np.sqrt(params.dim))
    out = mul(g, softplus(mul(params.p, scale)))
    if params.kind == "diag_lowrank":
        out = add(out, matmul(matmul(g, params.u), swap_last2(params.v)))
        out = add(out, matmul(matmul(g, params.v), swap_last2(params.u)))
    return out


def materialize_preconditioner(params: PreconditionerParams) -> np.ndarray:
    """Dense P for tests: diag(softplus(sqrt(dim) p)) + u v.T + v u.T."""
    if params.kind == "identity":
        return np.eye(params.dim)
    scale = float(np.sqrt(params.dim))
    mat = np.diag(np.logaddexp(0.0, scale * params.p.data))
    if params.kind == "diag_lowrank":
        u, v = params.u.data, params.v.data
        mat = mat + u @ v.T + v @ u.T
    return mat


# ---------------------------------------------------------------------------
# reference layers


@dataclass
class ReferenceMhaParams:
    """Untied multi-head causal attention, four matrices per head."""

    w_q: tuple[Tensor, ...]  # each (D_r, D_h)
    w_k: tuple[Tensor, ...]
    w_v: tuple[Tensor, ...]
    w_o: tuple[Tensor, ...]
    tau: float
    alibi: AlibiParams | None = None

    def __post_init__(self):
        n = len(self.w_q)
        if not (len(self.w_k) == len(self.w_v) == len(self.w_o) == n) or n == 0:
            raise DimensionError("all four projection tuples need one matrix per head")
        if self.tau <= 0.0:
            raise DomainError("tau must be positive")

    @property
    def n_heads(self) -> int:
        return len(self.w_q)


def reference_mha(h: Tensor, params: ReferenceMhaParams) -> Tensor:
    """Causal multi-head attention, summed over per-head output blocks.

    Returns the attention read-out only (no residual): for each head,
    softmax((q k.T)/tau + bias) v projected back with w_o.
    """
    n = h.shape[-2]
    mask = causal_mask(n)
    out = None
    for k in range(params.n_heads):
        q = matmul(h, swap_last2(params.w_q[k]))   # (..., J, D_r)
        key = matmul(h, swap_last2(params.w_k[k]))
        val = matmul(h, swap_last2(params.w_v[k]))
        logits = mul(matmul(q, swap_last2(key)), 1.0 / params.tau)
        if params.alibi is not None:
            logits = add(logits, params.alibi.bias_matrix(n, k))
        p = softmax_lastdim(logits, mask=mask)
        o = matmul(matmul(p, val), params.w_o[k])  # (..., J, D_h)
        out = o if out is None else add(out, o)
    return out


@dataclass
class GatedMlpParams:
    """Gated two-layer perceptron, three independent matrices."""

    w_gate: Tensor  # (D_m, D_h)
    w_up: Tensor    # (D_m, D_h)
    w_down: Tensor  # (D_h, D_m)

    def __post_init__(self):
        if self.w_gate.shape != self.w_up.shape:
            raise DimensionError("gate and up projections must share a shape")
        if self.w_down.shape != (self.w_gate.shape[1], self.w_gate.shape[0]):
            raise DimensionError(
                f"down projection must be {(self.w_gate.shape[1], self.w_gate.shape[0])}, "
                f"got {self.w_down.shape}"
            )


def reference_gated_mlp(h: Tensor, params: GatedMlpParams) -> Tensor:
    """(gate h) * silu(up h), projected back down. No residual."""
    gate = matmul(h, swap_last2(params.w_gate))
    up = silu(matmul(h, swap_last2(params.w_up)))
    return matmul(mul(gate, up), swap_last2(params.w_down))


@dataclass
class PlainMlpParams:
    """Ungated baseline: down(silu(up h))."""

    w_up: Tensor    # (D_m, D_h)
    w_down: Tensor  # (D_h, D_m)

    def __post_init__(self):
        if self.w_down.shape != (self.w_up.shape[1], self.w_up.shape[0]):
            raise DimensionError("down projection shape must transpose the up shape")


def plain_mlp(h: Tensor, params: PlainMlpParams) -> Tensor:
    return matmul(silu(matmul(h, swap_last2(params.w_up))), swap_last2(params.w_down))


# ---------------------------------------------------------------------------
# recurrent attention


@dataclass
class CemAttentionParams:
    """Recurrent causal attention with tied key/value projections.

    w_q doubles as the output projection (applied transposed) and w_k
    doubles as the value projection, so the parameter core is exactly
    half a reference attention layer. diag optionally adds h_j D u_i
    coupling to the logits, either one vector shared by all heads
    (tuple of length 1) or one per head.
    """

    w_q: tuple[Tensor, ...]  # each (D_r, D_h)
    w_k: tuple[Tensor, ...]
    tau: float
    steps: int = 1
    eta: Tensor | float = 1.0
    diag: tuple[Tensor, ...] | None = None
    precond: tuple[PreconditionerParams, ...] | None = None
    alibi: AlibiParams | None = None
    inner_norm: RmsNormParams | None = None

    def __post_init__(self):
        n = len(self.w_q)
        if n == 0 or len(self.w_k) != n:
            raise DimensionError("w_q and w_k need one matrix per head")
        if self.tau <= 0.0:
            raise DomainError("tau must be positive")
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if self.diag is not None and len(self.diag) not in (1, n):
            raise DimensionError("diag must have one vector total or one per head")
        if self.precond is not None and len(self.precond) != n:
            raise DimensionError("precond needs one entry per head")

    @property
    def n_heads(self) -> int:
        return len(self.w_q)

    def head_diag(self, k: int) -> Tensor | None:
        if self.diag is None:
            return None
        return self.diag[0] if len(self.diag) == 1 else self.diag[k]


def cem_attention(h: Tensor, params: CemAttentionParams) -> Tensor:
    """Run the recurrent attention state update over a full sequence.

    Keys and values are the same tied projection of the frozen input h,
    computed once. Each step re-projects the current (optionally
    normalised) state into queries, attends causally, maps the read-out
    back through w_q transposed, preconditions, and adds. Returns the
    final state x_T for every position, shape of h.
    """
    n = h.shape[-2]
    mask = causal_mask(n)
    kv = [matmul(h, swap_last2(params.w_k[k])) for k in range(params.n_heads)]
    bias = None
    if params.alibi is not None:
        bias = [params.alibi.bias_matrix(n, k) for k in range(params.n_heads)]
    h_t = swap_last2(h)

    x = h
    for _ in range(params.steps):
        u = x if params.inner_norm is None else rmsnorm(x, params.inner_norm)
        shared = None
        if params.diag is not None and len(params.diag) == 1:
            # one diagonal for all heads: compute its logit term once
            shared = matmul(mul(u, params.diag[0]), h_t)
        upd = None
        for k in range(params.n_heads):
            q = matmul(u, swap_last2(params.w_q[k]))
            logits = matmul(q, swap_last2(kv[k]))
            if shared is not None:
                logits = add(logits, shared)
            elif params.diag is not None:
                logits = add(logits, matmul(mul(u, params.head_diag(k)), h_t))
            logits = mul(logits, 1.0 / params.tau)
            if bias is not None:
                logits = add(logits, bias[k])
            p = softmax_lastdim(logits, mask=mask)
            delta = matmul(matmul(p, kv[k]), params.w_q[k])
            if params.precond is not None:
                delta = apply_preconditioner(delta, params.precond[k])
            upd = delta if upd is None else add(upd, delta)
        x = add(x, mul(upd, params.eta))
    return x


# ---------------------------------------------------------------------------
# recurrent MLP


@dataclass
class CemMlpParams:
    """Recurrent gated MLP with the down projection tied to v.

    v doubles as up and (transposed) down projection; w computes the
    gate from the frozen input once. Two matrices against the gated
    reference's three.
    """

    w: Tensor  # (D_m, D_h), gate projection of the frozen input
    v: Tensor  # (D_m, D_h), tied up/down projection of the state
    steps: int = 1
    eta: Tensor | float = 1.0
    precond: PreconditionerParams | None = None
    inner_norm: RmsNormParams | None = None

    def __post_init__(self):
        if self.w.shape != self.v.shape or self.w.ndim != 2:
            raise DimensionError(
                f"w and v must be matching (D_m, D_h) matrices, got "
                f"{self.w.shape} and {self.v.shape}"
            )
        if self.steps < 1:
            raise DomainError("steps must be >= 1")


def cem_mlp(h: Tensor, params: CemMlpParams) -> Tensor:
    """Run the recurrent MLP state update rowwise over (..., D_h).

    The gate (w h) is computed once from the frozen input; each step
    gates silu(v u) with it, projects back through v.T, preconditions,
    and adds. Returns the final state, same shape as h.
    """
    gate = matmul(h, swap_last2(params.w))  # (..., D_m), frozen
    x = h
    for _ in range(params.steps):
        u = x if params.inner_norm is None else rmsnorm(x, params.inner_norm)
        z = silu(matmul(u, swap_last2(params.v)))
        g = matmul(mul(gate, z), params.v)
        if params.precond is not None:
            g = apply_preconditioner(g, params.precond)
        x = add(x, mul(g, params.eta))
    return x
