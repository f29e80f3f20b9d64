"""Token-order permutations for the scan directions.

A scan direction is a total order over the H x W token grid: horizontal
raster, vertical raster, or window-local traversal (each w x w window fully
scanned, row-major within the window and row-major across windows), each
optionally flipped (full-sequence reversal, tail-to-head).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd

__all__ = [
    "ScanDirection",
    "Permutation",
    "build_scan_order",
    "invert_permutation",
    "apply_permutation",
    "candidate_set",
    "DEFAULT_WINDOWS",
]

DEFAULT_WINDOWS = (2, 7)


@dataclass(frozen=True, order=True)
class ScanDirection:
    """Descriptor of one scan order: kind in {"h", "v", "local"}."""

    kind: str
    window: int | None = None
    flip: bool = False

    def __post_init__(self):
        if self.kind not in ("h", "v", "local"):
            raise ValueError(f"unknown scan kind {self.kind!r}")
        if self.kind == "local":
            if self.window is None or self.window < 2:
                raise ValueError("local scan needs window >= 2")
        elif self.window is not None:
            raise ValueError(f"{self.kind!r} scan takes no window")

    def label(self) -> str:
        base = {"h": "h", "v": "v", "local": f"local{self.window}"}[self.kind]
        return base + ("-flip" if self.flip else "")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind, "flip": self.flip}
        if self.kind == "local":
            out["window"] = self.window
        return out

    @staticmethod
    def from_json(obj: dict) -> "ScanDirection":
        if not isinstance(obj, dict):
            raise ValueError("direction must be a JSON object")
        extra = set(obj) - {"kind", "window", "flip"}
        if extra:
            raise ValueError(f"unknown direction key {sorted(extra)[0]!r}")
        return ScanDirection(
            kind=obj.get("kind", ""),
            window=obj.get("window"),
            flip=bool(obj.get("flip", False)),
        )


@dataclass(frozen=True)
class Permutation:
    """order[i] = flat row-major index of the i-th token visited."""

    order: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        H, W = self.grid
        order = np.asarray(self.order, dtype=np.int64)
        if order.shape != (H * W,):
            raise ValueError(f"order length {order.shape} != H*W for grid {self.grid}")
        if not np.array_equal(np.sort(order), np.arange(H * W)):
            raise ValueError("order is not a bijection on the token grid")
        object.__setattr__(self, "order", order)
        self.order.setflags(write=False)

    def __len__(self) -> int:
        return self.order.size


def _local_order(H: int, W: int, w: int) -> np.ndarray:
    # windows enumerated row-major over the window grid, tokens row-major
    # within each window
    order = np.empty(H * W, dtype=np.int64)
    pos = 0
    for wr in range(H // w):
        for wc in range(W // w):
            for r in range(w):
                for c in range(w):
                    order[pos] = (wr * w + r) * W + (wc * w + c)
                    pos += 1
    return order


def build_scan_order(H: int, W: int, d: ScanDirection) -> Permutation:
    """Realize a direction as an explicit index permutation over H x W."""
    if H < 1 or W < 1:
        raise ValueError(f"invalid grid {H}x{W}")
    if d.kind == "h":
        order = np.arange(H * W, dtype=np.int64)
    elif d.kind == "v":
        order = np.arange(H * W, dtype=np.int64).reshape(H, W).T.reshape(-1)
    else:
        w = d.window
        if H % w != 0 or W % w != 0:
            raise ValueError(f"window {w} does not divide grid {H}x{W}")
        order = _local_order(H, W, w)
    if d.flip:
        order = order[::-1]
    return Permutation(order=np.ascontiguousarray(order), grid=(H, W))


def invert_permutation(p: Permutation) -> Permutation:
    inv = np.empty_like(p.order)
    inv[p.order] = np.arange(p.order.size, dtype=np.int64)
    return Permutation(order=inv, grid=p.grid)


def apply_permutation(x: nd.Tensor, p: Permutation) -> nd.Tensor:
    """Reorder tokens of x (B, L, D) so output token i is input token order[i].

    Implemented with the gather primitive, so it is differentiable and costs
    no arithmetic.
    """
    if x.ndim != 3 or x.shape[1] != len(p):
        raise nd.ShapeError(f"token axis {list(x.shape)} does not match permutation length {len(p)}")
    return nd.gather(x, p.order, axis=1)


_CACHE: dict[tuple[int, int, ScanDirection], Permutation] = {}


def cached_scan_order(H: int, W: int, d: ScanDirection) -> Permutation:
    """Permutations are immutable; cache per (grid, direction)."""
    key = (H, W, d)
    p = _CACHE.get(key)
    if p is None:
        p = build_scan_order(H, W, d)
        _CACHE[key] = p
    return p


def candidate_set(H: int, W: int, windows: tuple[int, int] = DEFAULT_WINDOWS) -> list[ScanDirection]:
    """The 8 candidate directions for a grid, in fixed index order.

    0: h, 1: h-flip, 2: v, 3: v-flip, 4: local(w0), 5: local(w0)-flip,
    6: local(w1), 7: local(w1)-flip. Both windows must divide the grid;
    supply a substitute window pair for grids the defaults do not divide.
    """
    if len(windows) != 2 or windows[0] == windows[1]:
        raise ValueError("candidate set needs two distinct local window sizes")
    for w in windows:
        if w < 2 or H % w != 0 or W % w != 0:
            raise ValueError(f"no valid window sizes for grid {H}x{W}: {w} does not divide")
    dirs = [
        ScanDirection("h"),
        ScanDirection("h", flip=True),
        ScanDirection("v"),
        ScanDirection("v", flip=True),
    ]
    for w in windows:
        dirs.append(ScanDirection("local", window=int(w)))
        dirs.append(ScanDirection("local", window=int(w), flip=True))
    return dirs
