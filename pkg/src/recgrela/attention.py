"""The three interchangeable attention kernels behind one tape-aware surface.

* ``dot_product_attention`` — softmax-normalized scores, O(N^2 d) time.
* ``linear_attention``      — positive-kernel streaming form, O(N d^2) time;
                              exactly equal to its quadratic definition.
* ``rela``                  — rotary-enhanced linear attention: rotation of
                              the kernelized queries/keys over the full
                              width before the head split, sqrt(N)-scaled
                              key-value memory, and an eps-guarded
                              mean-of-keys normalizer (which stays
                              unrotated, keeping it strictly positive).

Forward passes dispatch to the selected kernel backend; backward rules are
registered on the active tape.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BoundsError, ContractError, DimensionError, ResourceError
from .numerics import Tensor, record
from .positional import RopeTable, rotate_pairs

VARIANTS = ("dot_product", "linear", "rela")

MIXING_GUARD = 4096


@dataclass
class AttentionConfig:
    """Kernel selection plus the shape/stability knobs shared by a model."""

    variant: str = "rela"
    heads: int = 1
    head_dim: int = 64
    causal: bool = True
    eps: float = 1e-6
    scale_n: bool = True
    max_len: int = 200

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.heads < 1 or self.head_dim < 1:
            raise ContractError("heads and head_dim must be positive")
        if self.eps <= 0:
            raise ContractError(f"eps must be positive, got {self.eps}")
        if self.variant == "rela" and self.head_dim % 2 != 0:
            raise ContractError(
                f"rela needs an even head_dim (pairwise rotation), got {self.head_dim}")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


@dataclass
class AttentionOutput:
    """Kernel output plus the token-mixing matrix when it was requested."""

    output: Tensor
    mixing_matrix: np.ndarray | None = None


def kernel_phi(x: Tensor) -> Tensor:
    """Strictly positive feature map ELU(x) + 1."""
    out = Tensor(kernels.phi(x.data))
    return record(out, (x,), lambda g: (g * kernels.phi_grad(x.data),))


def _promote(q, k, v):
    if q.ndim == 2:
        return (q.data[None], k.data[None], v.data[None]), True
    if q.ndim == 3:
        return (q.data, k.data, v.data), False
    raise DimensionError(f"attention input must be (N, d) or (B, N, d), got {q.shape}")


def _wrap(out_data, squeeze):
    return Tensor(out_data[0] if squeeze else out_data)


def _expand_grad(g, squeeze):
    return g[None] if squeeze else g


def _warn_floor(count):
    if count:
        warnings.warn(f"linear-attention normalizer floored at {count} positions",
                      RuntimeWarning, stacklevel=3)


def linear_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False,
                     want_mixing: bool = False) -> AttentionOutput:
    """Plain kernelized linear attention (one head, no rotation/scaling)."""
    (qd, kd, vd), squeeze = _promote(q, k, v)
    out_data, floored = kernels.kla_forward(qd, kd, vd, causal=causal)
    _warn_floor(floored)
    out = _wrap(out_data, squeeze)

    def bwd(g):
        grads = kernels.kla_backward(_expand_grad(g, squeeze), qd, kd, vd,
                                     causal=causal)
        return tuple(gi[0] for gi in grads) if squeeze else grads

    record(out, (q, k, v), bwd)
    mixing = None
    if want_mixing:
        mixing = materialize_mixing_matrix(q, k, "linear", causal=causal)
    return AttentionOutput(out, mixing)


def dot_product_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False,
                          want_mixing: bool = False) -> AttentionOutput:
    """Softmax attention with 1/sqrt(d) score scaling (one head)."""
    (qd, kd, vd), squeeze = _promote(q, k, v)
    out = _wrap(kernels.sdp_forward(qd, kd, vd, causal=causal), squeeze)

    def bwd(g):
        grads = kernels.sdp_backward(_expand_grad(g, squeeze), qd, kd, vd,
                                     causal=causal)
        return tuple(gi[0] for gi in grads) if squeeze else grads

    record(out, (q, k, v), bwd)
    mixing = None
    if want_mixing:
        mixing = materialize_mixing_matrix(q, k, "dot_product", causal=causal)
    return AttentionOutput(out, mixing)


def rela(q: Tensor, k: Tensor, v: Tensor, rope: RopeTable, cfg: AttentionConfig,
         pad_mask: np.ndarray | None = None,
         want_mixing: bool = False) -> AttentionOutput:
    """Rotary-enhanced linear attention over ``cfg.heads`` heads.

    q/k/v are (N, D) or (B, N, D) with D = heads * head_dim; rotation spans
    the full width before the head split.  With ``cfg.scale_n`` the key-value
    memory is scaled by 1/sqrt(cfg.max_len) and the normalizer uses the
    (prefix) mean of keys; both revert to plain sums when disabled.
    """
    (qd, kd, vd), squeeze = _promote(q, k, v)
    n, width = qd.shape[1], qd.shape[2]
    if width != cfg.width:
        raise DimensionError(
            f"input width {width} != heads*head_dim = {cfg.width}")
    if n > rope.max_len:
        raise BoundsError(f"sequence length {n} exceeds rotation table ({rope.max_len})")
    if rope.dim != width:
        raise DimensionError(f"rotation table dim {rope.dim} != input width {width}")
    kw = dict(heads=cfg.heads, causal=cfg.causal, eps=cfg.eps,
              scale_len=cfg.max_len if cfg.scale_n else None,
              cos=rope.cos[:n], sin=rope.sin[:n], mask=pad_mask)
    out_data, floored = kernels.kla_forward(qd, kd, vd, **kw)
    _warn_floor(floored)
    out = _wrap(out_data, squeeze)

    def bwd(g):
        grads = kernels.kla_backward(_expand_grad(g, squeeze), qd, kd, vd, **kw)
        return tuple(gi[0] for gi in grads) if squeeze else grads

    record(out, (q, k, v), bwd)
    mixing = None
    if want_mixing:
        mixing = materialize_mixing_matrix(q, k, "rela", rope=rope,
                                           causal=cfg.causal)
    return AttentionOutput(out, mixing)


def attend(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig,
           rope: RopeTable | None = None,
           pad_mask: np.ndarray | None = None) -> Tensor:
    """Variant dispatch used by model blocks: multi-head, mask-aware.

    The plain linear variant runs unrotated/unscaled with a floored
    normalizer; the dot-product variant masks padded keys out of the
    softmax support.
    """
    if cfg.variant == "rela":
        return rela(q, k, v, rope, cfg, pad_mask=pad_mask).output
    (qd, kd, vd), squeeze = _promote(q, k, v)
    if cfg.variant == "linear":
        out_data, floored = kernels.kla_forward(
            qd, kd, vd, heads=cfg.heads, causal=cfg.causal, mask=pad_mask)
        _warn_floor(floored)
        out = _wrap(out_data, squeeze)

        def bwd(g):
            grads = kernels.kla_backward(_expand_grad(g, squeeze), qd, kd, vd,
                                         heads=cfg.heads, causal=cfg.causal,
                                         mask=pad_mask)
            return tuple(gi[0] for gi in grads) if squeeze else grads

        return record(out, (q, k, v), bwd)
    out = _wrap(kernels.sdp_forward(qd, kd, vd, heads=cfg.heads,
                                    causal=cfg.causal, mask=pad_mask), squeeze)

    def bwd(g):
        grads = kernels.sdp_backward(_expand_grad(g, squeeze), qd, kd, vd,
                                     heads=cfg.heads, causal=cfg.causal,
                                     mask=pad_mask)
        return tuple(gi[0] for gi in grads) if squeeze else grads

    return record(out, (q, k, v), bwd)


def materialize_mixing_matrix(q, k, variant: str, rope: RopeTable | None = None,
                              causal: bool = False,
                              position_offset: int = 0) -> np.ndarray:
    """Explicit N x N token-mixing matrix for rank/score analysis.

    * linear/rela: phi(Q) phi(K)^T, with per-position rotation for rela —
      rank is bounded by the feature width d.
    * dot_product: row-softmaxed scaled scores; rows sum to 1.

    Guarded at N <= 4096 (the matrix is dense).
    """
    if variant not in VARIANTS:
        raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    kd = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
    if qd.ndim == 3:
        if qd.shape[0] != 1:
            raise ContractError("mixing matrix is per sequence; pass a single batch row")
        qd, kd = qd[0], kd[0]
    n, d = qd.shape
    if n > MIXING_GUARD:
        raise ResourceError(f"mixing matrix guard: N={n} exceeds {MIXING_GUARD}")
    if variant == "dot_product":
        scores = (qd @ kd.T) / np.sqrt(d)
        if causal:
            scores = scores + np.triu(np.full((n, n), -np.inf), k=1)
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    fq, fk = kernels.phi(qd), kernels.phi(kd)
    if variant == "rela":
        if rope is None:
            raise ContractError("rela mixing matrix needs the rotation table")
        if position_offset + n > rope.max_len:
            raise BoundsError(
                f"positions up to {position_offset + n} exceed table ({rope.max_len})")
        cos = rope.cos[position_offset:position_offset + n]
        sin = rope.sin[position_offset:position_offset + n]
        fq = rotate_pairs(fq, cos, sin)
        fk = rotate_pairs(fk, cos, sin)
    mix = fq @ fk.T
    if causal:
        mix = np.tril(mix)
    return mix
