"""Desk-scale supervised training: synthetic motif dataset, IDX ingestion,
AdamW, cosine schedule, train/eval loops, and the scan-direction ablation
harness.

Everything is deterministic given the config seed; data generation, weight
init, and batch shuffling draw from named substreams of that one seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import models, ndtensor as nd
from .models import Model, ModelConfig
from .ndtensor import Tensor
from .scan_paths import ScanDirection

__all__ = [
    "Dataset",
    "synth_dataset",
    "motif_patterns",
    "template_match_labels",
    "load_idx",
    "OptimState",
    "init_optim",
    "adamw_step",
    "cosine_lr",
    "cross_entropy",
    "epoch_order",
    "train_epoch",
    "evaluate",
    "train_run",
    "ablation_harness",
    "ABLATION_ROWS",
]

# synthetic task constants: noisy background, one high-contrast 2x2 motif;
# noise amplitude is capped so exact template matching keeps a positive
# worst-case margin over every rival pattern
BG_LO, BG_HI = 0.0, 0.25
MOTIF_CONTRAST = 0.8  # motif pixels sit at background mean + 0.8
CELL = 2  # motif cell edge in pixels


@dataclass
class Dataset:
    """Images in [0, 1], (M, 3, H, W) float32; labels int64; fixed 90/10 split."""

    images: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError("images must be (M, 3, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("label count does not match image count")
        if not np.isfinite(self.images).all():
            raise ValueError("images must be finite")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def train_count(self) -> int:
        return self.train_idx.size

    def val_count(self) -> int:
        return self.val_idx.size

    def batch(self, order_slice: np.ndarray, split: str = "train") -> tuple[Tensor, np.ndarray]:
        base = self.train_idx if split == "train" else self.val_idx
        sel = base[order_slice]
        return Tensor(self.images[sel]), self.labels[sel]


def motif_patterns(classes: int) -> np.ndarray:
    """Class-specific 2x2 on/off masks, each distinguishable by template match."""
    if not 1 <= classes <= 8:
        raise ValueError("supported class counts are 1..8")
    masks = [
        [[1, 0], [0, 0]],
        [[0, 1], [0, 0]],
        [[0, 0], [1, 0]],
        [[0, 0], [0, 1]],
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[1, 1], [0, 0]],
        [[1, 0], [1, 0]],
    ]
    return np.asarray(masks[:classes], dtype=bool)


def synth_dataset(grid_cells: int, classes: int, samples: int, seed: int) -> Dataset:
    """Uniform-noise background plus one class motif at a random cell.

    Image edge = 2 * grid_cells pixels. The motif's on-pixels sit exactly
    MOTIF_CONTRAST above the background mean; classes are balanced and the
    train/val split is the deterministic last 10%.
    """
    if grid_cells < 1 or samples < 1:
        raise ValueError("invalid sizes")
    if samples % classes != 0:
        raise ValueError("samples must be divisible by classes for balance")
    size = grid_cells * CELL
    rng = nd.substream(seed, "synth")
    patterns = motif_patterns(classes)
    motif_value = (BG_LO + BG_HI) / 2.0 + MOTIF_CONTRAST

    images = rng.uniform(BG_LO, BG_HI, size=(samples, size, size)).astype(np.float32)
    labels = (np.arange(samples) % classes).astype(np.int64)
    cells = rng.integers(0, grid_cells, size=(samples, 2))
    for i in range(samples):
        r, c = cells[i] * CELL
        mask = patterns[labels[i]]
        patch = images[i, r : r + CELL, c : c + CELL]
        patch[mask] = motif_value
    images3 = np.repeat(images[:, None, :, :], 3, axis=1)

    n_train = (samples * 9) // 10
    return Dataset(
        images=images3,
        labels=labels,
        train_idx=np.arange(n_train),
        val_idx=np.arange(n_train, samples),
        name=f"synth{grid_cells}x{classes}",
    )


def template_match_labels(images: np.ndarray, classes: int) -> np.ndarray:
    """Trivial oracle: argmax over (cell, class) of mean(on) - mean(off).

    Recovers synth labels with 100% accuracy by construction.
    """
    patterns = motif_patterns(classes)
    gray = images[:, 0]
    M, H, W = gray.shape
    best = np.full(M, -np.inf)
    out = np.zeros(M, dtype=np.int64)
    for r in range(0, H, CELL):
        for c in range(0, W, CELL):
            cell = gray[:, r : r + CELL, c : c + CELL].reshape(M, -1)
            for k, mask in enumerate(patterns):
                on = mask.reshape(-1)
                score = cell[:, on].mean(axis=1) - cell[:, ~on].mean(axis=1)
                upd = score > best
                best[upd] = score[upd]
                out[upd] = k
    return out


# ---------------------------------------------------------------------------
# IDX ingestion

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"truncated IDX file while reading {what}")
    return data


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse a big-endian IDX image/label pair (MNIST layout)."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise ValueError(f"bad IDX magic 0x{magic:08x} in {images_path}")
        raw = _read_exact(f, count * rows * cols, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise ValueError(f"bad IDX magic 0x{magic:08x} in {labels_path}")
        labels = np.frombuffer(_read_exact(f, label_count, "label data"), dtype=np.uint8)

    if count != label_count:
        raise ValueError(f"image count {count} does not match label count {label_count}")
    scaled = (images.astype(np.float32) / 255.0)[:, None, :, :]
    images3 = np.repeat(scaled, 3, axis=1)
    n_train = (count * 9) // 10
    return Dataset(
        images=images3,
        labels=labels.astype(np.int64),
        train_idx=np.arange(n_train),
        val_idx=np.arange(n_train, count),
        name="idx",
    )


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam moments, shaped like their parameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_optim(params: list[Tensor], weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimState:
    return OptimState(
        m=[np.zeros_like(p.data, dtype=np.float64) for p in params],
        v=[np.zeros_like(p.data, dtype=np.float64) for p in params],
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adamw_step(params: list[Tensor], state: OptimState, lr: float, grads: list[np.ndarray] | None = None) -> bool:
    """One AdamW update with bias correction; returns False (skipped) if any
    grad is non-finite. Moments update even at lr = 0."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(params) != len(state.m):
        raise ValueError("params/grads/state size mismatch")
    for g in grads:
        if not np.isfinite(g).all():
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g64 = g.astype(np.float64, copy=False)
        m *= state.beta1
        m += (1.0 - state.beta1) * g64
        v *= state.beta2
        v += (1.0 - state.beta2) * g64 * g64
        if lr == 0.0:
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = p.data.astype(np.float64) * (1.0 - lr * state.weight_decay) - lr * update
        p.data = new.astype(p.dtype)
    return True


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup must be shorter than the schedule")
    if step <= warmup_steps:
        return base_lr * (step / warmup_steps) if warmup_steps > 0 else base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# loops


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch (no label smoothing)."""
    B, C = logits.shape
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    picked = nd.sum_(nd.mul(nd.log_softmax(logits, axis=1), Tensor(onehot)), axis=1)
    return nd.mul(nd.mean(picked), nd.from_array(-1.0, dtype=logits.dtype))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return nd.substream(seed, "shuffle", str(epoch)).permutation(n)


def train_epoch(
    model: Model,
    dataset: Dataset,
    opt: OptimState,
    schedule,
    seed: int,
    epoch: int,
    batch: int,
    step0: int,
) -> tuple[dict, int]:
    """One seeded-shuffle pass; returns ({mean_loss, acc}, next global step)."""
    params = model.parameters()
    order = epoch_order(dataset.train_count(), seed, epoch)
    total_loss = 0.0
    correct = 0
    step = step0
    skipped = 0
    for lo in range(0, order.size, batch):
        images, labels = dataset.batch(order[lo : lo + batch])
        with nd.Tape() as tape:
            logits = models.model_forward(model, images)
            loss = cross_entropy(logits, labels)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                skipped += 1
                step += 1
                continue
            tape.backward(loss, params=params)
        adamw_step(params, opt, lr=schedule(step))
        step += 1
        total_loss += loss_val * labels.size
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    n = dataset.train_count()
    metrics = {"mean_loss": total_loss / n, "acc": correct / n}
    if skipped:
        metrics["skipped_steps"] = skipped
    return metrics, step


def evaluate(model: Model, dataset: Dataset, split: str = "val", batch: int = 256) -> dict:
    """Pure evaluation: mean loss and exact argmax top-1 on a split."""
    base = dataset.val_idx if split == "val" else dataset.train_idx
    total_loss = 0.0
    correct = 0
    for lo in range(0, base.size, batch):
        images, labels = dataset.batch(np.arange(lo, min(lo + batch, base.size)), split=split)
        logits = models.model_forward(model, images)
        total_loss += cross_entropy(logits, labels).item() * labels.size
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return {"loss": total_loss / base.size, "top1": correct / base.size}


def train_run(
    cfg: ModelConfig,
    dataset: Dataset,
    *,
    epochs: int,
    batch: int,
    lr: float,
    weight_decay: float,
    seed: int,
    warmup_frac: float = 0.1,
    log=None,
) -> tuple[Model, dict]:
    """Full supervised run; returns the trained model and final metrics."""
    model = models.build_model(cfg, seed=seed)
    opt = init_optim(model.parameters(), weight_decay=weight_decay)
    steps_per_epoch = math.ceil(dataset.train_count() / batch)
    total_steps = max(1, epochs * steps_per_epoch)
    warmup = int(total_steps * warmup_frac)
    schedule = lambda s: cosine_lr(min(s + 1, total_steps), total_steps, lr, warmup)

    step = 0
    last = {}
    for epoch in range(epochs):
        train_metrics, step = train_epoch(model, dataset, opt, schedule, seed, epoch, batch, step)
        val_metrics = evaluate(model, dataset)
        last = {"epoch": epoch, **train_metrics, "val_loss": val_metrics["loss"], "val_top1": val_metrics["top1"]}
        if log is not None:
            log(last)
    return model, last


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_ROWS = ("horizontal", "local", "horizontal+local", "horizontal+local+attn")


def _ablation_config(base: ModelConfig, row: str) -> ModelConfig:
    w = base.local_windows[0]
    direction_sets = {
        "horizontal": [ScanDirection("h"), ScanDirection("h", flip=True)],
        "local": [ScanDirection("local", window=w), ScanDirection("local", window=w, flip=True)],
        "horizontal+local": list(models.DEFAULT_DIRECTIONS[:2])
        + [ScanDirection("local", window=w), ScanDirection("local", window=w, flip=True)],
    }
    dirs = direction_sets.get(row, direction_sets["horizontal+local"])
    cfg = ModelConfig(
        kind=base.kind,
        image_size=base.image_size,
        patch_size=base.patch_size,
        dims=base.dims,
        depths=base.depths,
        num_classes=base.num_classes,
        directions=[d.to_json() for d in dirs],
        state_size=base.state_size,
        expand=base.expand,
        conv_kernel=base.conv_kernel,
        attn_reduction=base.attn_reduction,
        use_attn=(row == "horizontal+local+attn"),
        local_windows=list(base.local_windows),
        pos_embed=base.pos_embed,
    )
    return cfg


def ablation_harness(
    base_cfg: ModelConfig,
    dataset: Dataset,
    seeds: list[int],
    *,
    epochs: int,
    batch: int,
    lr: float,
    weight_decay: float,
    log=None,
) -> list[dict]:
    """Train the four direction/gate configurations under identical budgets.

    Rows mirror: horizontal-only, local-only, both, both + gating. Returns one
    dict per row with per-seed accuracies, mean, std, and parameter count.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    table = []
    for row in ABLATION_ROWS:
        cfg = _ablation_config(base_cfg, row)
        accs = []
        for seed in seeds:
            model, metrics = train_run(
                cfg, dataset, epochs=epochs, batch=batch, lr=lr, weight_decay=weight_decay, seed=seed,
            )
            accs.append(metrics["val_top1"])
            if log is not None:
                log({"event": "ablation_run", "row": row, "seed": seed, "val_top1": metrics["val_top1"]})
        n_params, _ = models.count_params(models.build_model(cfg, seed=seeds[0]))
        table.append(
            {
                "row": row,
                "accs": accs,
                "mean": float(np.mean(accs)),
                "std": float(np.std(accs)),
                "params": n_params,
            }
        )
    return table
