"""Differentiable scan-direction search.

A supernet holds all 8 candidate branches per block, blended by per-layer
softmax weights over learnable logits alpha (K, 8). Weights and alpha train
jointly in single-level steps; afterwards each layer keeps its top-4
directions, exported as a machine-readable layout that the training CLI can
feed back into a fixed-direction build.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import models, ndtensor as nd, scan_paths, training
from .ndtensor import Tensor
from .scan_paths import ScanDirection

__all__ = [
    "SearchState",
    "DirectionLayout",
    "init_search_state",
    "supernet_train_step",
    "select_topk",
    "export_architecture",
    "supernet_config",
    "run_search",
]


@dataclass
class SearchState:
    """Per-layer architecture logits over the 8 candidate directions."""

    alpha: Tensor  # (K, 8), requires_grad

    @property
    def num_blocks(self) -> int:
        return self.alpha.shape[0]


@dataclass
class DirectionLayout:
    """Per-block top-4 directions with their (raw) softmax probabilities."""

    blocks: list[tuple[list[ScanDirection], list[float]]]

    def to_json(self) -> dict:
        return {
            "blocks": [
                {"directions": [d.to_json() for d in dirs], "probs": [float(p) for p in probs]}
                for dirs, probs in self.blocks
            ]
        }

    @staticmethod
    def from_json(obj: dict) -> "DirectionLayout":
        if set(obj) != {"blocks"}:
            raise ValueError("layout JSON must have exactly a 'blocks' key")
        out = []
        for entry in obj["blocks"]:
            extra = set(entry) - {"directions", "probs"}
            if extra:
                raise ValueError(f"unknown layout key {sorted(extra)[0]!r}")
            dirs = [ScanDirection.from_json(d) for d in entry["directions"]]
            probs = [float(p) for p in entry["probs"]]
            if len(dirs) != 4 or len(probs) != 4:
                raise ValueError("each layout block needs exactly 4 directions and probs")
            if len(set(dirs)) != 4:
                raise ValueError("layout directions within a block must be distinct")
            out.append((dirs, probs))
        return DirectionLayout(blocks=out)

    def direction_lists(self) -> list[list[ScanDirection]]:
        return [list(dirs) for dirs, _ in self.blocks]


def init_search_state(K: int, dtype=np.float32) -> SearchState:
    """Zero logits: a uniform, unbiased softmax start."""
    if K < 1:
        raise ValueError("need at least one block")
    return SearchState(alpha=Tensor(np.zeros((K, 8), dtype=dtype), requires_grad=True))


def select_topk(alpha_row: np.ndarray, k: int = 4) -> list[int]:
    """Indices of the k largest logits, ties to the lower index, sorted by
    descending probability. Softmax is monotone, so logits order suffices;
    the selection is invariant under uniform logit shifts.
    """
    row = np.asarray(alpha_row, dtype=np.float64).reshape(-1)
    if k > row.size:
        raise ValueError(f"k={k} exceeds {row.size} candidates")
    if not np.isfinite(row).all():
        raise ValueError("alpha row must be finite")
    order = sorted(range(row.size), key=lambda i: (-row[i], i))
    return order[:k]


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def export_architecture(state: SearchState, cfg: models.ModelConfig) -> DirectionLayout:
    """Top-4 per block with their softmax probabilities (sum <= 1 per row)."""
    layout = cfg.block_layout()
    if len(layout) != state.num_blocks:
        raise ValueError("search state block count does not match the config")
    probs = _softmax_rows(state.alpha.data.astype(np.float64))
    out = []
    for (s, grid, _), row_p, row_a in zip(layout, probs, state.alpha.data):
        cands = scan_paths.candidate_set(grid[0], grid[1], tuple(cfg.local_windows))
        top = select_topk(row_a)
        out.append(([cands[i] for i in top], [float(row_p[i]) for i in top]))
    return DirectionLayout(blocks=out)


def supernet_config(cfg: models.ModelConfig, supernet_dim: int) -> models.ModelConfig:
    """Reduced-width mixture config sharing the target's depth layout."""
    if cfg.kind == "local_vim":
        dims = supernet_dim
    else:
        dims = [supernet_dim * 2**s for s in range(len(cfg.stage_dims()))]
    return models.ModelConfig(
        kind=cfg.kind,
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        dims=dims,
        depths=cfg.depths if isinstance(cfg.depths, int) else list(cfg.depths),
        num_classes=cfg.num_classes,
        directions="search",
        state_size=cfg.state_size,
        expand=cfg.expand,
        conv_kernel=cfg.conv_kernel,
        attn_reduction=cfg.attn_reduction,
        use_attn=cfg.use_attn,
        local_windows=list(cfg.local_windows),
        pos_embed=cfg.pos_embed,
    )


def supernet_train_step(
    supernet: models.Model,
    state: SearchState,
    images: Tensor,
    labels: np.ndarray,
    weight_opt: "training.OptimState",
    alpha_opt: "training.OptimState",
    lr: float,
    alpha_lr: float,
) -> dict:
    """One joint step: forward, backward, then both optimizers.

    Weights update with weight decay; alpha updates without. Non-finite loss
    skips the step and reports it.
    """
    params = supernet.parameters()
    with nd.Tape() as tape:
        logits = models.model_forward(supernet, images, alpha=state.alpha)
        loss = training.cross_entropy(logits, labels)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            return {"loss": loss_val, "alpha_entropy": _alpha_entropy(state), "skipped": True}
        tape.backward(loss, params=params + [state.alpha])
    training.adamw_step(params, weight_opt, lr=lr)
    training.adamw_step([state.alpha], alpha_opt, lr=alpha_lr)
    return {"loss": loss_val, "alpha_entropy": _alpha_entropy(state), "skipped": False}


def _alpha_entropy(state: SearchState) -> float:
    p = _softmax_rows(state.alpha.data.astype(np.float64))
    ent = -(p * np.log(p + 1e-12)).sum(axis=1)
    return float(ent.mean())


def run_search(
    cfg: models.ModelConfig,
    dataset: "training.Dataset",
    *,
    supernet_dim: int,
    epochs: int,
    batch: int,
    lr: float,
    alpha_lr: float,
    weight_decay: float,
    seed: int,
    log=None,
) -> tuple[SearchState, DirectionLayout]:
    """Train the supernet and return (state, exported layout). Deterministic
    for a fixed seed."""
    sup_cfg = supernet_config(cfg, supernet_dim)
    supernet = models.build_model(sup_cfg, seed=seed)
    state = init_search_state(sup_cfg.total_blocks())
    weight_opt = training.init_optim(supernet.parameters(), weight_decay=weight_decay)
    alpha_opt = training.init_optim([state.alpha], weight_decay=0.0)

    step = 0
    for epoch in range(epochs):
        order = training.epoch_order(dataset.train_count(), seed, epoch)
        for lo in range(0, order.size, batch):
            idx = order[lo : lo + batch]
            images, labels = dataset.batch(idx)
            metrics = supernet_train_step(
                supernet, state, images, labels, weight_opt, alpha_opt, lr=lr, alpha_lr=alpha_lr
            )
            step += 1
        if log is not None:
            log({"event": "search_epoch", "epoch": epoch, **metrics})
    return state, export_architecture(state, sup_cfg)
