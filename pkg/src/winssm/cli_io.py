"""Configuration parsing, checkpoint serialization, reports, and the CLI.

Checkpoint container: magic "LMCK", u32 version, length-prefixed config JSON,
then named tensors (u16 name length + UTF-8, u8 dtype 0=f32/1=f64, u8 ndim,
u32 dims, raw little-endian payload), closed by a CRC32 of everything after
the magic. Loads are strict: bad magic/version/CRC and missing or extra
tensor names are hard errors. Config parsing rejects unknown keys.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import struct
import sys
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import blocks, models, ndtensor as nd, scan_paths, search, ssm_core, training
from .models import Model, ModelConfig
from .ndtensor import Tensor
from .search import DirectionLayout
from .scan_paths import ScanDirection

__all__ = [
    "Config",
    "TrainParams",
    "SearchParams",
    "DataParams",
    "ConfigError",
    "CheckpointError",
    "parse_config",
    "load_config",
    "save_checkpoint",
    "load_checkpoint",
    "export_directions_report",
    "run_verify",
    "cli_main",
    "main",
]

MAGIC = b"LMCK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainParams:
    lr: float = 1e-3
    epochs: int = 20
    batch: int = 64
    seed: int = 0
    wd: float = 0.05


@dataclass
class SearchParams:
    epochs: int | None = None  # default: train.epochs // 3
    alpha_lr: float | None = None  # default: 10 * train.lr
    supernet_dim: int | None = None  # default: width-reduced per kind


@dataclass
class DataParams:
    kind: str = "synth"
    grid_cells: int = 8
    classes: int = 4
    samples: int = 1000
    images: str | None = None
    labels: str | None = None


@dataclass
class Config:
    model: ModelConfig
    train: TrainParams = field(default_factory=TrainParams)
    search: SearchParams = field(default_factory=SearchParams)
    data: DataParams = field(default_factory=DataParams)
    target_params: float | None = None
    target_flops: float | None = None

    def search_epochs(self) -> int:
        return self.search.epochs if self.search.epochs is not None else max(1, self.train.epochs // 3)

    def alpha_lr(self) -> float:
        return self.search.alpha_lr if self.search.alpha_lr is not None else 10.0 * self.train.lr

    def supernet_dim(self) -> int:
        if self.search.supernet_dim is not None:
            return self.search.supernet_dim
        dims = self.model.stage_dims()
        cap = 128 if self.model.kind == "local_vim" else 32
        return min(cap, dims[0])


def _take(section: dict, allowed: dict, where: str) -> dict:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")
    out = dict(allowed)
    out.update(section)
    return out


_MODEL_KEYS = {
    "kind": "local_vim",
    "image_size": 224,
    "patch_size": 16,
    "dims": 192,
    "depths": 20,
    "num_classes": 1000,
    "directions": None,
    "stage_directions": None,
    "state_size": 16,
    "expand": 2,
    "conv_kernel": 4,
    "attn_reduction": blocks.ATTN_REDUCTION,
    "use_attn": True,
    "local_windows": None,
    "pos_embed": None,
    "pooling": "mean",
}


def _parse_model(section: dict) -> ModelConfig:
    vals = _take(section, _MODEL_KEYS, "model")
    if vals["local_windows"] is None:
        vals["local_windows"] = list(scan_paths.DEFAULT_WINDOWS)
    try:
        cfg = ModelConfig(**vals)
        cfg.validate_directions()
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid model config: {e}") from e
    return cfg


def parse_config(text: str) -> Config:
    """Strict parse: unknown keys anywhere are errors naming the key."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    top = _take(
        doc,
        {"model": {}, "train": {}, "search": {}, "data": {}, "target_params": None, "target_flops": None},
        "config",
    )
    model = _parse_model(top["model"])
    train = TrainParams(**_take(top["train"], {"lr": 1e-3, "epochs": 20, "batch": 64, "seed": 0, "wd": 0.05}, "train"))
    srch = SearchParams(**_take(top["search"], {"epochs": None, "alpha_lr": None, "supernet_dim": None}, "search"))
    data = DataParams(
        **_take(
            top["data"],
            {"kind": "synth", "grid_cells": 8, "classes": 4, "samples": 1000, "images": None, "labels": None},
            "data",
        )
    )
    if data.kind not in ("synth", "idx"):
        raise ConfigError(f"unknown key {data.kind!r} in data.kind")
    if train.epochs < 1 or train.batch < 1:
        raise ConfigError("train.epochs and train.batch must be positive")
    return Config(
        model=model,
        train=train,
        search=srch,
        data=data,
        target_params=top["target_params"],
        target_flops=top["target_flops"],
    )


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def model_config_json(cfg: ModelConfig) -> dict:
    dirs = cfg.directions
    if isinstance(dirs, list) and dirs and isinstance(dirs[0], list) and dirs[0] and isinstance(dirs[0][0], ScanDirection):
        dirs = [[d.to_json() for d in one] for one in dirs]
    elif isinstance(dirs, list) and dirs and isinstance(dirs[0], ScanDirection):
        dirs = [d.to_json() for d in dirs]
    return {
        "kind": cfg.kind,
        "image_size": cfg.image_size,
        "patch_size": cfg.patch_size,
        "dims": cfg.dims,
        "depths": cfg.depths,
        "num_classes": cfg.num_classes,
        "directions": dirs,
        "stage_directions": cfg.stage_directions,
        "state_size": cfg.state_size,
        "expand": cfg.expand,
        "conv_kernel": cfg.conv_kernel,
        "attn_reduction": cfg.attn_reduction,
        "use_attn": cfg.use_attn,
        "local_windows": list(cfg.local_windows),
        "pos_embed": cfg.pos_embed,
        "pooling": cfg.pooling,
    }


# ---------------------------------------------------------------------------
# checkpoint container


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _named_tensors(model: Model, optstate: training.OptimState | None):
    for name, t in model.named_parameters():
        yield name, t.data
    if optstate is not None:
        names = [n for n, _ in model.named_parameters()]
        yield "opt/step", np.array([float(optstate.step)], dtype=np.float64)
        for kind, arrs in (("m", optstate.m), ("v", optstate.v)):
            for name, arr in zip(names, arrs):
                yield f"opt/{kind}/{name}", arr


def save_checkpoint(model: Model, path: str, optstate: training.OptimState | None = None) -> None:
    """Write the versioned container; file writes are atomic (tmp + rename)."""
    body = io.BytesIO()
    body.write(struct.pack("<I", VERSION))
    cfg_bytes = json.dumps({"model": model_config_json(model.cfg)}, sort_keys=True).encode("utf-8")
    body.write(struct.pack("<I", len(cfg_bytes)))
    body.write(cfg_bytes)
    entries = list(_named_tensors(model, optstate))
    body.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        code = _DTYPE_CODES.get(np.dtype(arr.dtype))
        if code is None:
            raise CheckpointError(f"unserializable dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        body.write(struct.pack("<H", len(nb)))
        body.write(nb)
        body.write(struct.pack("<BB", code, arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.write(np.ascontiguousarray(arr).astype(arr.dtype, copy=False).tobytes())
    blob = body.getvalue()
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    _atomic_write(path, MAGIC + blob + struct.pack("<I", crc))


def _read(buf: memoryview, off: int, n: int) -> tuple[memoryview, int]:
    if off + n > len(buf):
        raise CheckpointError("truncated checkpoint")
    return buf[off : off + n], off + n


def load_checkpoint(path: str) -> tuple[Model, training.OptimState | None]:
    """Rebuild the model from the embedded config and fill parameters by name."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    blob, crc_stored = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(blob) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    buf = memoryview(blob)
    off = 0
    chunk, off = _read(buf, off, 4)
    version = struct.unpack("<I", chunk)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    chunk, off = _read(buf, off, 4)
    (cfg_len,) = struct.unpack("<I", chunk)
    chunk, off = _read(buf, off, cfg_len)
    cfg_doc = json.loads(bytes(chunk).decode("utf-8"))
    cfg = _parse_model(cfg_doc["model"])
    chunk, off = _read(buf, off, 4)
    (count,) = struct.unpack("<I", chunk)

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, off = _read(buf, off, 2)
        (name_len,) = struct.unpack("<H", chunk)
        chunk, off = _read(buf, off, name_len)
        name = bytes(chunk).decode("utf-8")
        chunk, off = _read(buf, off, 2)
        code, ndim = struct.unpack("<BB", chunk)
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        chunk, off = _read(buf, off, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", chunk)
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        chunk, off = _read(buf, off, nbytes)
        tensors[name] = np.frombuffer(bytes(chunk), dtype=dtype).reshape(shape)
    if off != len(buf):
        raise CheckpointError("trailing bytes in checkpoint body")

    model_entries = {n: a for n, a in tensors.items() if not n.startswith("opt/")}
    opt_entries = {n: a for n, a in tensors.items() if n.startswith("opt/")}

    dtype = next(iter(model_entries.values())).dtype if model_entries else np.float32
    model = models.build_model(cfg, seed=0, dtype=dtype)
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(model_entries))
    extra = sorted(set(model_entries) - set(expected))
    if missing or extra:
        raise CheckpointError(f"tensor name mismatch: missing {missing}, extra {extra}")
    for name, t in expected.items():
        arr = model_entries[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
        t.data = arr.copy()

    optstate = None
    if opt_entries:
        names = [n for n, _ in model.named_parameters()]
        optstate = training.init_optim(model.parameters())
        optstate.step = int(opt_entries["opt/step"][0])
        optstate.m = [opt_entries[f"opt/m/{n}"].astype(np.float64).copy() for n in names]
        optstate.v = [opt_entries[f"opt/v/{n}"].astype(np.float64).copy() for n in names]
    return model, optstate


# ---------------------------------------------------------------------------
# reports


def export_directions_report(layout: DirectionLayout) -> str:
    """Per-block table of the four chosen directions and their probabilities,
    followed by the canonical JSON."""
    lines = ["block | directions                                  | probs"]
    for i, (dirs, probs) in enumerate(layout.blocks):
        labels = " ".join(f"{d.label():<11s}" for d in dirs)
        pstr = " ".join(f"{p:.3f}" for p in probs)
        lines.append(f"{i:5d} | {labels} | {pstr}")
    lines.append(json.dumps(layout.to_json(), sort_keys=True))
    return "\n".join(lines) + "\n"


def inspect_report(cfg: Config) -> dict:
    model = models.build_model(cfg.model, seed=cfg.train.seed)
    n_params, p_breakdown = models.count_params(model)
    n_flops, f_breakdown = models.estimate_flops(model)
    report = {
        "kind": cfg.model.kind,
        "image_size": cfg.model.image_size,
        "params": n_params,
        "flops": n_flops,
        "params_breakdown": p_breakdown,
        "flops_breakdown": f_breakdown,
    }
    if cfg.target_params:
        report["target_params"] = cfg.target_params
        report["params_rel_err"] = (n_params - cfg.target_params) / cfg.target_params
        report["params_within_15pct"] = abs(report["params_rel_err"]) <= 0.15
    if cfg.target_flops:
        report["target_flops"] = cfg.target_flops
        report["flops_rel_err"] = (n_flops - cfg.target_flops) / cfg.target_flops
        report["flops_within_20pct"] = abs(report["flops_rel_err"]) <= 0.20
    # swapping global for local directions repositions tokens only; the FLOPs
    # delta against a 4-global-direction baseline must stay under 3%
    try:
        report["local_vs_global_flops_rel_delta"] = _direction_swap_delta(cfg.model)
    except ValueError:
        pass
    return report


def _direction_swap_delta(cfg: ModelConfig) -> float:
    base = json.loads(json.dumps(model_config_json(cfg)))
    quad_global = [{"kind": "h"}, {"kind": "h", "flip": True}, {"kind": "v"}, {"kind": "v", "flip": True}]
    a = dict(base)
    a["directions"] = quad_global
    a["stage_directions"] = None
    cfg_a = _parse_model(a)
    f_a, _ = models.estimate_flops(models.build_model(cfg_a, seed=0))
    f_b, _ = models.estimate_flops(models.build_model(cfg, seed=0))
    return abs(f_b - f_a) / f_a


# ---------------------------------------------------------------------------
# dataset plumbing


def build_dataset(cfg: Config) -> training.Dataset:
    if cfg.data.kind == "synth":
        return training.synth_dataset(cfg.data.grid_cells, cfg.data.classes, cfg.data.samples, cfg.train.seed)
    if cfg.data.images is None or cfg.data.labels is None:
        raise ConfigError("idx data needs 'images' and 'labels' paths")
    return training.load_idx(cfg.data.images, cfg.data.labels)


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# verification suite


def run_verify(quiet: bool = False) -> int:
    """Self-contained oracle/property suite; one line per check, exit code 0/1."""
    failures = 0

    def check(name: str, fn) -> None:
        nonlocal failures
        try:
            fn()
            status = "pass"
        except Exception as e:  # noqa: BLE001 - report and count any failure
            status = f"FAIL ({e})"
            failures += 1
        if not quiet:
            print(f"[{'ok' if status == 'pass' else '!!'}] {name}: {status}")

    rng = np.random.default_rng(0)

    def scan_suite():
        for H, W in ((4, 4), (8, 8), (14, 14)):
            windows = (2, 7) if H % 7 == 0 else (2, 4)
            for d in scan_paths.candidate_set(H, W, windows):
                p = scan_paths.build_scan_order(H, W, d)
                assert np.array_equal(np.sort(p.order), np.arange(H * W))
                if d.flip:
                    q = scan_paths.build_scan_order(H, W, ScanDirection(d.kind, d.window, False))
                    assert np.array_equal(p.order, q.order[::-1])
                inv = scan_paths.invert_permutation(p)
                assert np.array_equal(inv.order[p.order], np.arange(H * W))
                x = Tensor(rng.normal(size=(2, H * W, 3)))
                rt = scan_paths.apply_permutation(scan_paths.apply_permutation(x, p), scan_paths.invert_permutation(p))
                assert np.array_equal(rt.data, x.data)

    def discretize_values():
        a_bar, b_bar = ssm_core.discretize_zoh(-1.0, 1.0, 0.5)
        assert abs(a_bar - math.exp(-0.5)) < 1e-12 and abs(b_bar - (1 - math.exp(-0.5))) < 1e-12
        a_bar, b_bar = ssm_core.discretize_zoh(0.0, 1.0, 0.3)
        assert abs(a_bar - 1.0) < 1e-12 and abs(b_bar - 0.3) < 1e-12

    def static_oracle():
        for i in range(25):
            r = np.random.default_rng(100 + i)
            L, N = int(r.integers(1, 33)), int(r.integers(1, 9))
            A_bar = r.uniform(0.0, 0.999, N)
            B_bar, C = r.normal(size=N), r.normal(size=N)
            x = r.normal(size=L)
            y_scan = ssm_core.ssm_scan_sequential(x, np.tile(A_bar, (L, 1)), np.tile(B_bar, (L, 1)), np.tile(C, (L, 1)))
            y_conv = ssm_core.ssm_conv_oracle(A_bar, B_bar, C, x)
            assert np.max(np.abs(y_scan - y_conv)) / (np.max(np.abs(y_conv)) + 1e-12) < 1e-10

    def parallel_matches_sequential():
        for i in range(10):
            r = nd.substream(200 + i, "verify")
            B, L, E, N = 2, int(r.integers(1, 33)), 3, 4
            p = ssm_core.init_ssm_params(r, E, N, 2, dtype=np.float64)
            u = Tensor(r.normal(size=(B, L, E)))
            y1 = ssm_core.selective_scan(u, p)
            y2 = ssm_core.selective_scan_parallel(u, p)
            rel = np.max(np.abs(y1.data - y2.data)) / (np.max(np.abs(y1.data)) + 1e-12)
            assert rel < 1e-10, f"rel diff {rel}"

    def gradients():
        r = nd.substream(7, "verify-grad")
        p = ssm_core.init_ssm_params(r, 2, 2, 1, dtype=np.float64)
        u = Tensor(r.normal(size=(1, 4, 2)), requires_grad=True)
        params = [u, p.A_log, p.D_skip, p.W_x, p.W_dt, p.b_dt]
        rep = nd.grad_check(lambda: nd.sum_(ssm_core.selective_scan(u, p)), params, eps=1e-4, tol=1e-5)
        assert rep.passed, f"max rel err {rep.max_rel_err}"
        attn = blocks.init_scattn_params(r, 4, dtype=np.float64, reduction=2)
        z = Tensor(r.normal(size=(1, 3, 4)), requires_grad=True)
        rep = nd.grad_check(
            lambda: nd.sum_(blocks.scattn_forward(z, attn)),
            [z, attn.W1, attn.W2, attn.U, attn.w_s],
            eps=1e-4,
            tol=1e-5,
        )
        assert rep.passed, f"max rel err {rep.max_rel_err}"

    def mixture_consistency():
        r = nd.substream(11, "verify-mixture")
        cands = scan_paths.candidate_set(4, 4, (2, 4))
        mix = blocks.init_mixture_block(r, 4, cands, N=2, dtype=np.float64)
        x = Tensor(r.normal(size=(1, 16, 4)))
        sat = np.full(8, -40.0)
        sat[0] = 40.0
        y_sat = blocks.mixture_block_forward(x, mix, Tensor(sat), (4, 4))
        single = blocks.LocalBlockParams(
            norm_scale=mix.norm_scale, norm_bias=mix.norm_bias, W_in=mix.W_in, W_x=mix.W_x,
            branches=[mix.branches[0]], W_out=mix.W_out, directions=[cands[0]],
        )
        y_one = blocks.local_block_forward(x, single, (4, 4))
        rel = np.max(np.abs(y_sat.data - y_one.data)) / (np.max(np.abs(y_one.data)) + 1e-12)
        assert rel < 1e-6, f"saturated mixture off by {rel}"
        row = np.array([3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0])
        assert search.select_topk(row) == [0, 1, 2, 3]
        assert search.select_topk(row + 17.5) == search.select_topk(row)

    def serialization():
        import tempfile

        cfg = ModelConfig(kind="local_vim", image_size=8, patch_size=4, dims=8, depths=1,
                          num_classes=2, state_size=2, local_windows=[2, 4],
                          directions=[{"kind": "h"}, {"kind": "h", "flip": True},
                                      {"kind": "local", "window": 2}, {"kind": "local", "window": 2, "flip": True}])
        model = models.build_model(cfg, seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.ckpt")
            save_checkpoint(model, path)
            loaded, _ = load_checkpoint(path)
            for (n1, t1), (n2, t2) in zip(model.named_parameters(), loaded.named_parameters()):
                assert n1 == n2 and np.array_equal(t1.data, t2.data)
            raw = bytearray(open(path, "rb").read())
            raw[len(raw) // 2] ^= 0xFF
            open(path, "wb").write(bytes(raw))
            try:
                load_checkpoint(path)
            except CheckpointError:
                pass
            else:
                raise AssertionError("corrupted checkpoint was accepted")

    check("scan paths: bijectivity, flip law, round trip", scan_suite)
    check("zero-order hold values", discretize_values)
    check("sequential scan == static convolution kernel", static_oracle)
    check("sequential scan == parallel scan", parallel_matches_sequential)
    check("gradients match finite differences", gradients)
    check("mixture saturation and top-k invariance", mixture_consistency)
    check("checkpoint round trip and CRC rejection", serialization)
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# commands


def _load_or_fail(path: str) -> Config:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return load_config(path)


def _cmd_search(args) -> int:
    cfg = _load_or_fail(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    dataset = build_dataset(cfg)
    state, layout = search.run_search(
        cfg.model,
        dataset,
        supernet_dim=cfg.supernet_dim(),
        epochs=cfg.search_epochs(),
        batch=cfg.train.batch,
        lr=cfg.train.lr,
        alpha_lr=cfg.alpha_lr(),
        weight_decay=cfg.train.wd,
        seed=cfg.train.seed,
        log=_emit,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "directions.json")
    payload = json.dumps(layout.to_json(), indent=2, sort_keys=True).encode("utf-8")
    _atomic_write(out, payload)
    sys.stdout.write(export_directions_report(layout))
    _emit({"event": "search_done", "directions": out})
    return 0


def _apply_layout(cfg: Config, layout_path: str) -> None:
    with open(layout_path, "r", encoding="utf-8") as f:
        layout = DirectionLayout.from_json(json.load(f))
    cfg.model.directions = [[d.to_json() for d in dirs] for dirs in layout.direction_lists()]
    cfg.model.stage_directions = None
    cfg.model.validate_directions()


def _cmd_train(args) -> int:
    cfg = _load_or_fail(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.directions:
        _apply_layout(cfg, args.directions)
    dataset = build_dataset(cfg)
    model, metrics = training.train_run(
        cfg.model,
        dataset,
        epochs=cfg.train.epochs,
        batch=cfg.train.batch,
        lr=cfg.train.lr,
        weight_decay=cfg.train.wd,
        seed=cfg.train.seed,
        log=_emit,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "model.ckpt")
    save_checkpoint(model, ckpt)
    _emit({"event": "train_done", "checkpoint": ckpt, **metrics})
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_or_fail(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    model, _ = load_checkpoint(args.ckpt)
    dataset = build_dataset(cfg)
    metrics = training.evaluate(model, dataset)
    _emit({"event": "eval", "ckpt": args.ckpt, **metrics})
    return 0


def _cmd_inspect(args) -> int:
    cfg = _load_or_fail(args.config)
    print(json.dumps(inspect_report(cfg), indent=2, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_or_fail(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    dataset = build_dataset(cfg)
    table = training.ablation_harness(
        cfg.model,
        dataset,
        seeds,
        epochs=cfg.train.epochs,
        batch=cfg.train.batch,
        lr=cfg.train.lr,
        weight_decay=cfg.train.wd,
        log=_emit,
    )
    print(f"{'config':24s} {'mean':>7s} {'std':>7s}  params")
    for row in table:
        print(f"{row['row']:24s} {row['mean']*100:6.1f}% {row['std']*100:6.1f}%  {row['params']}")
    _emit({"event": "ablation_done", "table": table})
    return 0


def _cmd_verify(args) -> int:
    return run_verify()


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="winssm", description="windowed-scan SSM vision models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default=".", help="output directory")

    p = sub.add_parser("search", help="train the direction-search supernet")
    p.add_argument("config")
    common(p)
    p.set_defaults(fn=_cmd_search)

    p = sub.add_parser("train", help="train a fixed-direction model")
    p.add_argument("config")
    p.add_argument("--directions", default=None, help="layout JSON from `search`")
    common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("config")
    p.add_argument("--ckpt", required=True)
    common(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("inspect", help="parameter/FLOPs report")
    p.add_argument("config")
    common(p)
    p.set_defaults(fn=_cmd_inspect)

    p = sub.add_parser("ablate", help="direction/gate ablation table")
    p.add_argument("config")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default 0,1,2)")
    common(p)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("verify", help="run the oracle/property suite")
    common(p)
    p.set_defaults(fn=_cmd_verify)
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
