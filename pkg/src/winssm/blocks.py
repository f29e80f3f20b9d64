"""Scan blocks: the spatial/channel gate, the fixed-direction block, and the
searchable 8-way mixture block.

A block normalizes its input, expands D -> 2E into a scan path u and a gate
path g, runs one scan branch per direction (permute -> causal depthwise conv
-> silu -> selective scan -> un-permute -> gate), sums the branches, and
projects back with a residual connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from . import scan_paths, ssm_core
from .ndtensor import Tensor
from .scan_paths import Permutation, ScanDirection
from .ssm_core import SSMParams

__all__ = [
    "SCAttnParams",
    "BranchParams",
    "LocalBlockParams",
    "MixtureBlockParams",
    "init_scattn_params",
    "init_local_block",
    "init_mixture_block",
    "scattn_forward",
    "local_block_forward",
    "mixture_block_forward",
]

# Gate hidden width is dim // ATTN_REDUCTION; kept lean so the gate stays a
# small fraction of a branch's parameter and FLOP budget.
ATTN_REDUCTION = 32


@dataclass
class SCAttnParams:
    """Channel gate from the pooled tokens, spatial gate from [token; pooled]."""

    W1: Tensor  # (D', h) channel squeeze
    b1: Tensor  # (h,)
    W2: Tensor  # (h, D') channel excite
    b2: Tensor  # (D',)
    U: Tensor  # (2D', h) spatial squeeze on concatenated [token; pooled]
    bU: Tensor  # (h,)
    w_s: Tensor  # (h, 1) spatial score
    b_s: Tensor  # (1,)

    def named(self, prefix: str):
        for field in ("W1", "b1", "W2", "b2", "U", "bU", "w_s", "b_s"):
            yield f"{prefix}.{field}", getattr(self, field)


def _linear(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    k = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape).astype(dtype), requires_grad=True)


def init_scattn_params(rng: np.random.Generator, dim: int, dtype=np.float32, reduction: int = ATTN_REDUCTION) -> SCAttnParams:
    h = max(1, dim // reduction)
    return SCAttnParams(
        W1=_linear(rng, dim, (dim, h), dtype),
        b1=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
        W2=_linear(rng, h, (h, dim), dtype),
        b2=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        U=_linear(rng, 2 * dim, (2 * dim, h), dtype),
        bU=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
        w_s=_linear(rng, h, (h, 1), dtype),
        b_s=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    )


def scattn_forward(Z: Tensor, p: SCAttnParams) -> Tensor:
    """Gate Z (B, L, D') by a per-channel and a per-token sigmoid weight.

    Channel gate: sigmoid(W2 silu(W1 g)) from the token mean g. Spatial gate:
    sigmoid(w_s silu(U [Z_t ; g])) per token. Both lie in (0, 1), so the
    output magnitude never exceeds the input elementwise.
    """
    if Z.ndim != 3:
        raise nd.ShapeError("scattn_forward expects (B, L, D')")
    B, L, D = Z.shape
    g = nd.mean(Z, axis=1)  # (B, D')
    c = nd.sigmoid(nd.add(nd.matmul(nd.silu(nd.add(nd.matmul(g, p.W1), p.b1)), p.W2), p.b2))
    g_tiled = nd.broadcast_to(nd.reshape(g, (B, 1, D)), (B, L, D))
    zg = nd.concat([Z, g_tiled], axis=2)  # (B, L, 2D')
    s = nd.sigmoid(nd.add(nd.matmul(nd.silu(nd.add(nd.matmul(zg, p.U), p.bU)), p.w_s), p.b_s))
    return nd.mul(nd.mul(Z, nd.reshape(c, (B, 1, D))), s)


@dataclass
class BranchParams:
    """One scan branch: depthwise causal conv, scan parameters, optional gate."""

    conv_w: Tensor  # (E, k)
    conv_b: Tensor  # (E,)
    ssm: SSMParams
    attn: SCAttnParams | None

    def named(self, prefix: str, shared_wx: bool):
        yield f"{prefix}.conv_w", self.conv_w
        yield f"{prefix}.conv_b", self.conv_b
        yield from self.ssm.named(f"{prefix}.ssm", shared_wx)
        if self.attn is not None:
            yield from self.attn.named(f"{prefix}.attn")


@dataclass
class LocalBlockParams:
    """Fixed-direction block; ``directions`` typically holds 4 entries."""

    norm_scale: Tensor  # (D,)
    norm_bias: Tensor  # (D,)
    W_in: Tensor  # (D, 2E)
    W_x: Tensor  # (E, R + 2N), shared by all branches
    branches: list[BranchParams]
    W_out: Tensor  # (E, D)
    directions: list[ScanDirection]

    @property
    def inner_dim(self) -> int:
        return self.W_out.shape[0]

    def named(self, prefix: str):
        yield f"{prefix}.norm_scale", self.norm_scale
        yield f"{prefix}.norm_bias", self.norm_bias
        yield f"{prefix}.W_in", self.W_in
        yield f"{prefix}.W_x", self.W_x
        for i, br in enumerate(self.branches):
            yield from br.named(f"{prefix}.branches.{i}", shared_wx=True)
        yield f"{prefix}.W_out", self.W_out


@dataclass
class MixtureBlockParams:
    """As LocalBlockParams but with one branch per candidate direction."""

    norm_scale: Tensor
    norm_bias: Tensor
    W_in: Tensor
    W_x: Tensor
    branches: list[BranchParams]
    W_out: Tensor
    directions: list[ScanDirection]  # the full candidate set, len 8

    named = LocalBlockParams.named


def _init_branches(
    rng: np.random.Generator,
    n: int,
    E: int,
    N: int,
    R: int,
    conv_k: int,
    W_x: Tensor,
    dtype,
    use_attn: bool,
    attn_reduction: int,
) -> list[BranchParams]:
    branches = []
    for _ in range(n):
        branches.append(
            BranchParams(
                conv_w=_linear(rng, conv_k, (E, conv_k), dtype),
                conv_b=Tensor(np.zeros(E, dtype=dtype), requires_grad=True),
                ssm=ssm_core.init_ssm_params(rng, E, N, R, dtype, W_x=W_x),
                attn=init_scattn_params(rng, E, dtype, attn_reduction) if use_attn else None,
            )
        )
    return branches


def init_local_block(
    rng: np.random.Generator,
    D: int,
    directions: list[ScanDirection],
    N: int = 16,
    expand: int = 2,
    conv_k: int = 4,
    dtype=np.float32,
    use_attn: bool = True,
    attn_reduction: int = ATTN_REDUCTION,
) -> LocalBlockParams:
    if not directions:
        raise ValueError("block needs at least one direction")
    E = expand * D
    R = max(1, math.ceil(D / 16))
    W_x = _linear(rng, E, (E, R + 2 * N), dtype)
    return LocalBlockParams(
        norm_scale=Tensor(np.ones(D, dtype=dtype), requires_grad=True),
        norm_bias=Tensor(np.zeros(D, dtype=dtype), requires_grad=True),
        W_in=_linear(rng, D, (D, 2 * E), dtype),
        W_x=W_x,
        branches=_init_branches(rng, len(directions), E, N, R, conv_k, W_x, dtype, use_attn, attn_reduction),
        W_out=_linear(rng, E, (E, D), dtype),
        directions=list(directions),
    )


def init_mixture_block(
    rng: np.random.Generator,
    D: int,
    candidates: list[ScanDirection],
    N: int = 16,
    expand: int = 2,
    conv_k: int = 4,
    dtype=np.float32,
    use_attn: bool = True,
    attn_reduction: int = ATTN_REDUCTION,
) -> MixtureBlockParams:
    if len(candidates) != 8:
        raise ValueError("mixture block needs the full 8-direction candidate set")
    E = expand * D
    R = max(1, math.ceil(D / 16))
    W_x = _linear(rng, E, (E, R + 2 * N), dtype)
    return MixtureBlockParams(
        norm_scale=Tensor(np.ones(D, dtype=dtype), requires_grad=True),
        norm_bias=Tensor(np.zeros(D, dtype=dtype), requires_grad=True),
        W_in=_linear(rng, D, (D, 2 * E), dtype),
        W_x=W_x,
        branches=_init_branches(rng, 8, E, N, R, conv_k, W_x, dtype, use_attn, attn_reduction),
        W_out=_linear(rng, E, (E, D), dtype),
        directions=list(candidates),
    )


def _branch_forward(u: Tensor, br: BranchParams, perm: Permutation, inv: Permutation) -> Tensor:
    ud = scan_paths.apply_permutation(u, perm)
    ud = nd.silu(nd.conv1d_causal(ud, br.conv_w, br.conv_b))
    y = ssm_core.selective_scan(ud, br.ssm)
    y = scan_paths.apply_permutation(y, inv)
    if br.attn is not None:
        y = scattn_forward(y, br.attn)
    return y


def _block_pre(x: Tensor, p) -> tuple[Tensor, Tensor]:
    E = p.W_out.shape[0]
    h = nd.layernorm(x, p.norm_scale, p.norm_bias, axis=-1)
    ug = nd.matmul(h, p.W_in)  # (B, L, 2E)
    u = nd.gather(ug, np.arange(E), axis=2)
    g = nd.gather(ug, np.arange(E, 2 * E), axis=2)
    return u, g


def _block_post(x: Tensor, y: Tensor, g: Tensor, p) -> Tensor:
    return nd.add(x, nd.matmul(nd.mul(y, nd.silu(g)), p.W_out))


def _grid_perms(directions, grid):
    H, W = grid
    perms = []
    for d in directions:
        perm = scan_paths.cached_scan_order(H, W, d)
        perms.append((perm, scan_paths.invert_permutation(perm)))
    return perms


def local_block_forward(x: Tensor, p: LocalBlockParams, grid: tuple[int, int]) -> Tensor:
    """Residual block over tokens x (B, L, D) laid out on ``grid``."""
    H, W = grid
    if x.ndim != 3 or x.shape[1] != H * W:
        raise nd.ShapeError(f"token count {x.shape} does not match grid {grid}")
    u, g = _block_pre(x, p)
    y = None
    for br, (perm, inv) in zip(p.branches, _grid_perms(p.directions, grid)):
        out = _branch_forward(u, br, perm, inv)
        y = out if y is None else nd.add(y, out)
    return _block_post(x, y, g, p)


def mixture_block_forward(x: Tensor, p: MixtureBlockParams, alpha: Tensor, grid: tuple[int, int]) -> Tensor:
    """All 8 candidate branches, blended by softmax(alpha); alpha gets grads."""
    H, W = grid
    if x.ndim != 3 or x.shape[1] != H * W:
        raise nd.ShapeError(f"token count {x.shape} does not match grid {grid}")
    if alpha.size != len(p.branches):
        raise nd.ShapeError("alpha length must match the branch count")
    if not np.isfinite(alpha.data).all():
        raise nd.NonFiniteError("alpha must be finite")
    w = nd.softmax(nd.reshape(alpha, (alpha.size,)), axis=0)
    u, g = _block_pre(x, p)
    y = None
    for s, (br, (perm, inv)) in enumerate(zip(p.branches, _grid_perms(p.directions, grid))):
        out = _branch_forward(u, br, perm, inv)
        w_s = nd.reshape(nd.gather(w, np.array([s]), axis=0), (1, 1, 1))
        out = nd.mul(out, w_s)
        y = out if y is None else nd.add(y, out)
    return _block_post(x, y, g, p)
