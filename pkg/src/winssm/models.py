"""Model assembly: plain (single-stage, stride-16 style) and hierarchical
(four-stage, patch-merging) token mixers built from the scan blocks, plus the
analytic parameter and FLOP accounting used by ``inspect``.

FLOPs are multiply-accumulates (1 MAC = 1 FLOP): linear and conv layers are
counted exactly, a selective-scan branch costs 6*L*E*N (discretize 2, state
update 3, readout 1), and token permutations cost zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import blocks as blk
from . import ndtensor as nd
from . import scan_paths
from .blocks import LocalBlockParams, MixtureBlockParams
from .ndtensor import Tensor
from .scan_paths import ScanDirection

__all__ = [
    "ModelConfig",
    "Model",
    "DEFAULT_DIRECTIONS",
    "build_model",
    "patch_embed",
    "patch_merge",
    "model_forward",
    "count_params",
    "estimate_flops",
]

DEFAULT_DIRECTIONS = (
    ScanDirection("h"),
    ScanDirection("h", flip=True),
    ScanDirection("local", window=2),
    ScanDirection("local", window=2, flip=True),
)


@dataclass
class ModelConfig:
    """Architecture description.

    ``dims``/``depths`` are ints for the plain kind and 4-entry lists for the
    hierarchical kind. ``directions`` is None (default set), "search"
    (mixture supernet), one direction list applied to every block, or a
    per-block list of lists. ``stage_directions`` optionally overrides
    per stage (hierarchical only).
    """

    kind: str = "local_vim"  # local_vim (plain) | local_vmamba (hierarchical)
    image_size: int = 224
    patch_size: int = 16
    dims: int | list[int] = 192
    depths: int | list[int] = 20
    num_classes: int = 1000
    directions: str | list | None = None
    stage_directions: list | None = None
    state_size: int = 16
    expand: int = 2
    conv_kernel: int = 4
    attn_reduction: int = blk.ATTN_REDUCTION
    use_attn: bool = True
    local_windows: list[int] = field(default_factory=lambda: list(scan_paths.DEFAULT_WINDOWS))
    pos_embed: bool | None = None  # default: plain yes, hierarchical no
    pooling: str = "mean"

    def __post_init__(self):
        if self.kind not in ("local_vim", "local_vmamba"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.pooling != "mean":
            raise ValueError(f"unsupported pooling {self.pooling!r}")
        if self.kind == "local_vim":
            if not isinstance(self.dims, int) or not isinstance(self.depths, int):
                raise ValueError("plain model takes scalar dims/depths")
        else:
            if not (isinstance(self.dims, list) and isinstance(self.depths, list)):
                raise ValueError("hierarchical model takes per-stage dims/depths lists")
            if len(self.dims) != len(self.depths) or len(self.dims) != 4:
                raise ValueError("hierarchical model needs 4 stages")
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.pos_embed is None:
            self.pos_embed = self.kind == "local_vim"

    # --- derived structure -------------------------------------------------

    def stage_dims(self) -> list[int]:
        return [self.dims] if isinstance(self.dims, int) else list(self.dims)

    def stage_depths(self) -> list[int]:
        return [self.depths] if isinstance(self.depths, int) else list(self.depths)

    def stage_grids(self) -> list[tuple[int, int]]:
        g = self.image_size // self.patch_size
        out = []
        for s in range(len(self.stage_depths())):
            gs = g // (2**s)
            if gs < 1:
                raise ValueError("grid vanishes before the last stage")
            out.append((gs, gs))
        return out

    def total_blocks(self) -> int:
        return sum(self.stage_depths())

    def block_layout(self) -> list[tuple[int, tuple[int, int], int]]:
        """(stage, grid, dim) per block, in depth order."""
        out = []
        for s, (depth, grid, dim) in enumerate(zip(self.stage_depths(), self.stage_grids(), self.stage_dims())):
            out.extend((s, grid, dim) for _ in range(depth))
        return out

    def block_directions(self) -> list[list[ScanDirection]]:
        """Resolve the per-block direction lists (fixed models only)."""
        if self.directions == "search":
            raise ValueError("search config has no fixed directions")
        layout = self.block_layout()
        if self.stage_directions is not None:
            if self.directions is not None:
                raise ValueError("give either directions or stage_directions, not both")
            if len(self.stage_directions) != len(self.stage_depths()):
                raise ValueError("stage_directions length must equal the stage count")
            per_stage = [[_as_direction(d) for d in ds] for ds in self.stage_directions]
            return [list(per_stage[s]) for s, _, _ in layout]
        if self.directions is None:
            return [list(DEFAULT_DIRECTIONS) for _ in layout]
        dirs = self.directions
        if dirs and isinstance(dirs[0], (list, tuple)):
            if len(dirs) != len(layout):
                raise ValueError(f"per-block directions length {len(dirs)} != block count {len(layout)}")
            return [[_as_direction(d) for d in one] for one in dirs]
        quad = [_as_direction(d) for d in dirs]
        return [list(quad) for _ in layout]

    def validate_directions(self) -> None:
        """Every block's local windows must divide its stage grid."""
        if self.directions == "search":
            for grid in self.stage_grids():
                scan_paths.candidate_set(grid[0], grid[1], tuple(self.local_windows))
            return
        for dirs, (s, grid, _) in zip(self.block_directions(), self.block_layout()):
            for d in dirs:
                if d.kind == "local" and (grid[0] % d.window or grid[1] % d.window):
                    raise ValueError(
                        f"window {d.window} does not divide stage {s} grid {grid[0]}x{grid[1]}"
                    )


def _as_direction(d) -> ScanDirection:
    return d if isinstance(d, ScanDirection) else ScanDirection.from_json(d)


@dataclass
class Model:
    cfg: ModelConfig
    dtype: object
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor | None
    blocks: list  # LocalBlockParams | MixtureBlockParams
    merges: list[Tensor]  # hierarchical stage-boundary projections
    norm_scale: Tensor
    norm_bias: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self):
        yield "patch_embed.weight", self.patch_w
        yield "patch_embed.bias", self.patch_b
        if self.pos is not None:
            yield "pos_embed", self.pos
        for i, b in enumerate(self.blocks):
            yield from b.named(f"blocks.{i}")
        for i, m in enumerate(self.merges):
            yield f"merges.{i}.weight", m
        yield "final_norm.scale", self.norm_scale
        yield "final_norm.bias", self.norm_bias
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    @property
    def is_mixture(self) -> bool:
        return self.cfg.directions == "search"


def _linear(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    k = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape).astype(dtype), requires_grad=True)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministic construction: same (cfg, seed) -> bit-identical weights."""
    cfg.validate_directions()
    rng = nd.substream(seed, "init")
    dims = cfg.stage_dims()
    depths = cfg.stage_depths()
    grids = cfg.stage_grids()
    p = cfg.patch_size
    in_feat = 3 * p * p

    patch_w = _linear(rng, in_feat, (in_feat, dims[0]), dtype)
    patch_b = Tensor(np.zeros(dims[0], dtype=dtype), requires_grad=True)
    pos = None
    if cfg.pos_embed:
        L0 = grids[0][0] * grids[0][1]
        pos = Tensor(rng.normal(0.0, 0.02, size=(1, L0, dims[0])).astype(dtype), requires_grad=True)

    model_blocks: list = []
    if cfg.directions == "search":
        for s, grid, dim in cfg.block_layout():
            cands = scan_paths.candidate_set(grid[0], grid[1], tuple(cfg.local_windows))
            model_blocks.append(
                blk.init_mixture_block(
                    rng, dim, cands, N=cfg.state_size, expand=cfg.expand, conv_k=cfg.conv_kernel,
                    dtype=dtype, use_attn=cfg.use_attn, attn_reduction=cfg.attn_reduction,
                )
            )
    else:
        for dirs, (s, grid, dim) in zip(cfg.block_directions(), cfg.block_layout()):
            model_blocks.append(
                blk.init_local_block(
                    rng, dim, dirs, N=cfg.state_size, expand=cfg.expand, conv_k=cfg.conv_kernel,
                    dtype=dtype, use_attn=cfg.use_attn, attn_reduction=cfg.attn_reduction,
                )
            )

    merges = []
    for s in range(len(dims) - 1):
        merges.append(_linear(rng, 4 * dims[s], (4 * dims[s], dims[s + 1]), dtype))

    d_last = dims[-1]
    return Model(
        cfg=cfg,
        dtype=np.dtype(dtype),
        patch_w=patch_w,
        patch_b=patch_b,
        pos=pos,
        blocks=model_blocks,
        merges=merges,
        norm_scale=Tensor(np.ones(d_last, dtype=dtype), requires_grad=True),
        norm_bias=Tensor(np.zeros(d_last, dtype=dtype), requires_grad=True),
        head_w=_linear(rng, d_last, (d_last, cfg.num_classes), dtype),
        head_b=Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True),
    )


def patch_embed(images: Tensor, w: Tensor, b: Tensor, stride: int) -> tuple[Tensor, tuple[int, int]]:
    """Non-overlapping patchify + linear projection.

    images: (B, 3, H, W) -> tokens (B, L, D) with L = (H/stride)(W/stride).
    """
    B, C, H, W = images.shape
    if H % stride or W % stride:
        raise nd.ShapeError(f"image {H}x{W} not divisible by stride {stride}")
    Hp, Wp = H // stride, W // stride
    x = nd.reshape(images, (B, C, Hp, stride, Wp, stride))
    x = nd.transpose(x, (0, 2, 4, 1, 3, 5))  # (B, Hp, Wp, C, s, s)
    x = nd.reshape(x, (B, Hp * Wp, C * stride * stride))
    tokens = nd.add(nd.matmul(x, w), b)
    return tokens, (Hp, Wp)


def patch_merge(tokens: Tensor, grid: tuple[int, int], w: Tensor) -> tuple[Tensor, tuple[int, int]]:
    """Concatenate 2x2 token neighborhoods and project 4D -> 2D; grid halves."""
    H, W = grid
    if H % 2 or W % 2:
        raise nd.ShapeError(f"patch_merge needs an even grid, got {H}x{W}")
    B, L, D = tokens.shape
    if L != H * W:
        raise nd.ShapeError("token count does not match grid")
    x = nd.reshape(tokens, (B, H // 2, 2, W // 2, 2, D))
    x = nd.transpose(x, (0, 1, 3, 2, 4, 5))  # (B, H/2, W/2, 2, 2, D)
    x = nd.reshape(x, (B, (H // 2) * (W // 2), 4 * D))
    return nd.matmul(x, w), (H // 2, W // 2)


def model_forward(m: Model, images: Tensor, alpha: Tensor | None = None) -> Tensor:
    """images (B, 3, H, W) -> logits (B, num_classes).

    ``alpha`` is the (K, 8) mixture logits tensor, required for supernets.
    """
    cfg = m.cfg
    tokens, grid = patch_embed(images, m.patch_w, m.patch_b, cfg.patch_size)
    if m.pos is not None:
        tokens = nd.add(tokens, nd.broadcast_to(m.pos, tokens.shape))

    depths = cfg.stage_depths()
    idx = 0
    for s, depth in enumerate(depths):
        for _ in range(depth):
            b = m.blocks[idx]
            if isinstance(b, MixtureBlockParams):
                if alpha is None:
                    raise ValueError("supernet forward needs alpha")
                row = nd.reshape(nd.gather(alpha, np.array([idx]), axis=0), (alpha.shape[1],))
                tokens = blk.mixture_block_forward(tokens, b, row, grid)
            else:
                tokens = blk.local_block_forward(tokens, b, grid)
            idx += 1
        if s < len(depths) - 1:
            tokens, grid = patch_merge(tokens, grid, m.merges[s])

    tokens = nd.layernorm(tokens, m.norm_scale, m.norm_bias, axis=-1)
    pooled = nd.mean(tokens, axis=1)  # (B, D)
    return nd.add(nd.matmul(pooled, m.head_w), m.head_b)


# ---------------------------------------------------------------------------
# accounting


def count_params(m: Model) -> tuple[int, dict[str, int]]:
    """Exact scalar-parameter count with a per-component breakdown.

    Shared tensors (the per-block W_x) are counted once; the breakdown sums
    exactly to the total.
    """
    seen: set[int] = set()
    breakdown: dict[str, int] = {}
    for name, t in m.named_parameters():
        if id(t) in seen:
            continue
        seen.add(id(t))
        top = name.split(".")[0] if not name.startswith("blocks.") else ".".join(name.split(".")[:2])
        breakdown[top] = breakdown.get(top, 0) + t.size
    return sum(breakdown.values()), breakdown


def _block_flops(L: int, D: int, n_branch: int, cfg: ModelConfig) -> dict[str, int]:
    E = cfg.expand * D
    N = cfg.state_size
    R = max(1, math.ceil(D / 16))
    h = max(1, E // cfg.attn_reduction)
    f = {
        "in_proj": L * D * 2 * E,
        "x_proj": L * E * (R + 2 * N),  # shared across branches
        "conv": n_branch * L * E * cfg.conv_kernel,
        "dt_proj": n_branch * L * R * E,
        "scan": n_branch * 6 * L * E * N,
        "out_proj": L * E * D,
        "permute": 0,
    }
    if cfg.use_attn:
        channel = 2 * E * h  # pooled squeeze/excite, once per image
        spatial = L * (2 * E * h + h)  # per-token concat squeeze + score
        f["attn"] = n_branch * (channel + spatial)
    else:
        f["attn"] = 0
    return f


def estimate_flops(m: Model, image_size: int | None = None) -> tuple[int, dict[str, int]]:
    """Analytic MAC count for one image at ``image_size`` (default: config)."""
    cfg = m.cfg
    size = image_size or cfg.image_size
    if size % cfg.patch_size:
        raise ValueError("image size not divisible by patch size")
    g = size // cfg.patch_size
    dims = cfg.stage_dims()
    depths = cfg.stage_depths()
    n_branch = 8 if m.is_mixture else None

    breakdown: dict[str, int] = {}
    breakdown["patch_embed"] = g * g * (3 * cfg.patch_size**2) * dims[0]
    idx = 0
    for s, depth in enumerate(depths):
        gs = g // (2**s)
        L = gs * gs
        for _ in range(depth):
            nb = n_branch if n_branch is not None else len(m.blocks[idx].directions)
            for key, val in _block_flops(L, dims[s], nb, cfg).items():
                breakdown[f"block.{key}"] = breakdown.get(f"block.{key}", 0) + val
            idx += 1
        if s < len(depths) - 1:
            L_out = (gs // 2) ** 2
            breakdown["patch_merge"] = breakdown.get("patch_merge", 0) + L_out * (4 * dims[s]) * dims[s + 1]
    breakdown["head"] = dims[-1] * cfg.num_classes
    return sum(breakdown.values()), breakdown
