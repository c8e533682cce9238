"""The autonomous attention vector field ``psi(x) = F(x) + G(x)``.

A token state is an array (or :class:`~odeflow.diffcore.Tensor`) of shape
``(n_tokens, D)`` with the CLS token in row 0, followed by the M patch tokens
and any register tokens.  Every function here also accepts a leading batch
axis, ``(B, n_tokens, D)``.

``G`` is multi-head dot-product attention and ``F`` a two-layer GELU MLP.  Each
sub-flow centre-normalizes its input once, then applies its linear maps.  No
time argument exists anywhere: a single :class:`OdeBlockParams` defines the
field for every integration step.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields

import numpy as np

from . import container
from . import diffcore as dc
from .diffcore import Tensor

PROJECTIONS = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass
class OdeBlockParams:
    """Shared parameters of the field.

    ``wq``, ``wk`` and ``wv`` hold the per-head projections stacked as
    ``(H, D, d)`` with ``d = D // H``.  ``wo`` is ``(D, D)``, ``w1`` is
    ``(D, r*D)`` and ``w2`` is ``(r*D, D)``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    gamma_attn: Tensor
    beta_attn: Tensor
    gamma_mlp: Tensor
    beta_mlp: Tensor

    @classmethod
    def zeros(cls, dim: int, heads: int, mlp_ratio: int = 1, requires_grad: bool = True) -> "OdeBlockParams":
        if dim % heads:
            raise dc.ShapeError(f"D={dim} not divisible by H={heads}")
        if dim < 2:
            raise dc.ShapeError("D must be at least 2")
        d = dim // heads
        hid = mlp_ratio * dim

        def z(*shape):
            return Tensor(np.zeros(shape), requires_grad=requires_grad)

        def o(n):
            return Tensor(np.ones(n), requires_grad=requires_grad)

        return cls(
            wq=z(heads, dim, d),
            wk=z(heads, dim, d),
            wv=z(heads, dim, d),
            wo=z(dim, dim),
            w1=z(dim, hid),
            w2=z(hid, dim),
            gamma_attn=o(dim),
            beta_attn=z(dim),
            gamma_mlp=o(dim),
            beta_mlp=z(dim),
        )

    @property
    def dim(self) -> int:
        return self.wo.shape[0]

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[2]

    @property
    def mlp_ratio(self) -> int:
        return self.w1.shape[1] // self.dim

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def copy(self, requires_grad: bool | None = None) -> "OdeBlockParams":
        return OdeBlockParams(
            **{
                k: Tensor(t.data.copy(), t.requires_grad if requires_grad is None else requires_grad)
                for k, t in self.named().items()
            }
        )

    def projection_matrices(self) -> list[tuple[str, np.ndarray]]:
        """Every 2-D projection as a view into the parameter storage."""
        out = []
        for name in ("wq", "wk", "wv"):
            arr = getattr(self, name).data
            out += [(f"{name}[{h}]", arr[h]) for h in range(arr.shape[0])]
        out += [(name, getattr(self, name).data) for name in ("wo", "w1", "w2")]
        return out


@dataclass
class HeadMaps:
    """Per-head logit operators ``A`` (H, D, D) and attention maps ``P`` (..., H, n, n)."""

    A: np.ndarray
    P: Tensor


def center_normalize(x, gamma, beta) -> Tensor:
    """``gamma * D/(D-1) * (x - mean(x)) + beta`` row-wise; no variance division."""
    x = dc.as_tensor(x)
    dim = x.shape[-1]
    return dc.add(dc.mul(dc.scale(dc.mean_subtract(x), dim / (dim - 1)), gamma), beta)


def _merge_heads(w: Tensor) -> Tensor:
    # (H, D, d) -> (D, H*d), head h occupying columns h*d:(h+1)*d
    h, dim, d = w.shape
    return dc.reshape(dc.transpose(w, (1, 0, 2)), (dim, h * d))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    # (..., n, H*d) -> (..., H, n, d)
    lead = t.shape[:-2]
    n, hd = t.shape[-2:]
    t = dc.reshape(t, lead + (n, heads, hd // heads))
    k = len(lead)
    return dc.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))


def _join_heads(t: Tensor) -> Tensor:
    # (..., H, n, d) -> (..., n, H*d)
    lead = t.shape[:-3]
    h, n, d = t.shape[-3:]
    k = len(lead)
    t = dc.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return dc.reshape(t, lead + (n, h * d))


def _attention(xc: Tensor, p: OdeBlockParams) -> tuple[Tensor, Tensor]:
    heads, d = p.heads, p.head_dim
    q = _split_heads(dc.matmul(xc, _merge_heads(p.wq)), heads)
    k = _split_heads(dc.matmul(xc, _merge_heads(p.wk)), heads)
    v = _split_heads(dc.matmul(xc, _merge_heads(p.wv)), heads)
    P = dc.softmax_rows(dc.scale(dc.matmul(q, dc.swap_last(k)), 1.0 / math.sqrt(d)))
    out = dc.matmul(_join_heads(dc.matmul(P, v)), p.wo)
    return P, out


def logit_operators(p: OdeBlockParams) -> np.ndarray:
    """``A_h = W_Q^h (W_K^h)^T / sqrt(d)`` for every head, shape (H, D, D)."""
    return np.matmul(p.wq.data, np.swapaxes(p.wk.data, -1, -2)) / math.sqrt(p.head_dim)


def attention_maps(x, p: OdeBlockParams) -> HeadMaps:
    """Attention maps the attention sub-flow applies at state ``x``.

    Logits are computed on the centre-normalized tokens, the same input the
    sub-flow uses for its values.
    """
    xc = center_normalize(x, p.gamma_attn, p.beta_attn)
    P, _ = _attention(xc, p)
    return HeadMaps(A=logit_operators(p), P=P)


def attn_subflow(x, p: OdeBlockParams) -> Tensor:
    xc = center_normalize(x, p.gamma_attn, p.beta_attn)
    return _attention(xc, p)[1]


def mlp_subflow(x, p: OdeBlockParams) -> Tensor:
    xc = center_normalize(x, p.gamma_mlp, p.beta_mlp)
    return dc.matmul(dc.gelu(dc.matmul(xc, p.w1)), p.w2)


def psi(x, p: OdeBlockParams) -> Tensor:
    return dc.add(mlp_subflow(x, p), attn_subflow(x, p))


def psi_with_maps(x, p: OdeBlockParams) -> tuple[Tensor, Tensor]:
    """``psi(x)`` together with the attention maps used to compute it."""
    x = dc.as_tensor(x)
    P, g = _attention(center_normalize(x, p.gamma_attn, p.beta_attn), p)
    return dc.add(mlp_subflow(x, p), g), P


# ---------------------------------------------------------------- spectral control


def spectral_norm(w, iters: int = 2000, tol: float = 1e-13, seed: int = 0) -> float:
    """Largest singular value of ``w`` by power iteration on ``w^T w``.

    The running estimate ``||w v_k||`` (``v_k`` unit) never decreases.
    Returns 0 for the zero matrix.
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if w.ndim != 2:
        raise dc.ShapeError(f"spectral_norm needs a matrix, got shape {w.shape}")
    if not np.any(w):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = np.linalg.norm(w @ v)
    for _ in range(iters):
        u = w.T @ (w @ v)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            break
        v = u / nu
        new = np.linalg.norm(w @ v)
        done = abs(new - sigma) <= tol * max(new, 1e-300)
        sigma = max(sigma, new)
        if done:
            break
    return float(sigma)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples with |z| <= 2 std, by rejection."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def spectral_init(p: OdeBlockParams, target_norm: float = 1.0, seed: int = 0) -> None:
    """Draw every projection matrix and rescale it to spectral norm ``target_norm``.

    Centre-norm gains are reset to one and shifts to zero.
    """
    if target_norm <= 0:
        raise dc.ContractError("target_norm must be positive")
    rng = np.random.default_rng(seed)
    for _, view in p.projection_matrices():
        while True:
            w = truncated_normal(rng, view.shape)
            if np.any(w):
                break
        view[...] = w * (target_norm / spectral_norm(w))
    for name in ("gamma_attn", "gamma_mlp"):
        getattr(p, name).data[...] = 1.0
    for name in ("beta_attn", "beta_mlp"):
        getattr(p, name).data[...] = 0.0


# ---------------------------------------------------------------- serialization


def params_to_sections(p: OdeBlockParams, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: t.data for k, t in p.named().items()}


def params_from_sections(
    sections: dict[str, np.ndarray], dim: int, heads: int, mlp_ratio: int, prefix: str = "",
    requires_grad: bool = True,
) -> OdeBlockParams:
    p = OdeBlockParams.zeros(dim, heads, mlp_ratio, requires_grad=requires_grad)
    for k, t in p.named().items():
        key = prefix + k
        if key not in sections:
            raise container.FormatError(f"missing section {key!r}")
        flat = sections[key]
        if flat.size != t.size:
            raise container.FormatError(f"section {key!r} has {flat.size} values, expected {t.size}")
        t.data[...] = flat.reshape(t.shape)
    return p


def save_params(path: str | os.PathLike, p: OdeBlockParams, patches: int = 0) -> None:
    c = container.Container(p.dim, p.heads, patches, p.mlp_ratio, container.KIND_BLOCK,
                            params_to_sections(p))
    container.save(path, c)


def load_params(path: str | os.PathLike) -> tuple[OdeBlockParams, container.Container]:
    c = container.load(path)
    return params_from_sections(c.sections, c.dim, c.heads, c.mlp_ratio), c
