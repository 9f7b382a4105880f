"""On-disk formats: volume files, checkpoints, and the flat run configuration.

Volume file: magic "RFPV", version u32, dtype code u8 (0 = f32, 1 = u8),
ndim u8, dims u32[ndim], spacing f32[3] (mm), then the little-endian
row-major payload.

Checkpoint: magic "RFPC", version u32, 32-byte config digest, tensor count
u32, then per tensor: name length u16, UTF-8 name, ndim u8, dims u32[],
little-endian f32 payload. Optimizer state uses the same framing under
names prefixed "opt.". Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .segnet import NetworkConfig

VOLUME_MAGIC = b"RFPV"
CHECKPOINT_MAGIC = b"RFPC"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


class FormatError(ValueError):
    pass


def _atomic_write(path: str, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_volume(path: str, array: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODE_FOR:
        raise FormatError(f"volume dtype must be float32 or uint8, got {arr.dtype}")
    code = _CODE_FOR[arr.dtype]
    head = bytearray()
    head += VOLUME_MAGIC
    head += struct.pack("<I", FORMAT_VERSION)
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<3f", *[float(s) for s in spacing])
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")
    _atomic_write(path, bytes(head) + payload)


def read_volume(path: str):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume file (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported volume version {version}")
    code, ndim = struct.unpack_from("<BB", raw, 8)
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    at = 10
    dims = struct.unpack_from(f"<{ndim}I", raw, at)
    at += 4 * ndim
    spacing = struct.unpack_from("<3f", raw, at)
    at += 12
    dtype = _DTYPE_CODES[code]
    expect = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - at != expect:
        raise FormatError(f"{path}: payload is {len(raw) - at} bytes, expected {expect}")
    arr = np.frombuffer(raw[at:], dtype=dtype).reshape(dims)
    return arr.copy(), tuple(float(s) for s in spacing)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path: str, digest: bytes, tensors: dict):
    """Write named f32 tensors (insertion order preserved)."""
    if len(digest) != 32:
        raise FormatError("config digest must be 32 bytes")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    body += digest
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb))
        body += nb
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes(order="C")
    _atomic_write(path, bytes(body))


def read_checkpoint(path: str):
    """Returns (digest, tensors dict in file order)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[8:40]
    (count,) = struct.unpack_from("<I", raw, 40)
    at = 44
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, at)
        at += 2
        name = raw[at:at + nlen].decode("utf-8")
        at += nlen
        (ndim,) = struct.unpack_from("<B", raw, at)
        at += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, at)
        at += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw[at:at + 4 * size], dtype="<f4").reshape(dims)
        at += 4 * size
        tensors[name] = arr.copy()
    return digest, tensors


def checkpoint_from_state(net, opt, epoch: int) -> dict:
    """Flatten network params + optimizer state into the checkpoint tensor map."""
    tensors = dict(net.params)
    for name in net.trainable_names():
        tensors[f"opt.m.{name}"] = opt.m[name]
        tensors[f"opt.v.{name}"] = opt.v[name]
    tensors["opt.step"] = np.float32(opt.step)
    tensors["opt.epoch"] = np.float32(epoch)
    return tensors


def state_from_checkpoint(tensors: dict, net, opt):
    """Load params/optimizer in place; returns the stored epoch."""
    for name in net.params:
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != net.params[name].shape:
            raise FormatError(f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                              f"expected {net.params[name].shape}")
        net.params[name][...] = tensors[name]
    for name in net.trainable_names():
        opt.m[name][...] = tensors[f"opt.m.{name}"]
        opt.v[name][...] = tensors[f"opt.v.{name}"]
    opt.step = int(tensors["opt.step"])
    return int(tensors["opt.epoch"])


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Flat key=value configuration; every field feeds the config digest."""
    # network
    input_shape: tuple = (32, 32, 16)
    num_classes: int = 4
    stage_channels: tuple = (16, 32, 64, 128, 256)
    edge_enabled: bool = True
    esc_count: int = 4
    dag_count: int = 4
    neighborhood: str = "four"
    fusion_mode: str = "sum"
    edge_mode: str = "canny"
    loss_seg_decoder: float = 1.0
    loss_seg_final: float = 1.0
    loss_edge: float = 1.0
    # optimization
    total_epochs: int = 400
    base_lr: float = 1e-3
    weight_decay: float = 3e-4
    batch_size: int = 2
    seed: int = 0
    val_interval: int = 10
    checkpoint_interval: int = 25
    early_stop_dsc: float = 0.0
    augment_enabled: bool = True
    augment_angle: float = 15.0
    # data
    data_dir: str = "data"
    out_dir: str = "run"
    gen_count: int = 50
    val_count: int = 10
    gen_num_structures: int = 3
    gen_contrast_delta: float = 12.0
    gen_noise_sigma: float = 12.0
    gen_adjacency: bool = True

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_shape=tuple(self.input_shape), num_classes=self.num_classes,
            stage_channels=tuple(self.stage_channels), edge_enabled=self.edge_enabled,
            esc_count=self.esc_count, dag_count=self.dag_count,
            neighborhood=self.neighborhood, fusion_mode=self.fusion_mode,
            edge_mode=self.edge_mode, loss_seg_decoder=self.loss_seg_decoder,
            loss_seg_final=self.loss_seg_final, loss_edge=self.loss_edge)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, template):
    if isinstance(template, bool):
        if text not in ("true", "false"):
            raise FormatError(f"boolean fields take true/false, got {text!r}")
        return text == "true"
    if isinstance(template, tuple):
        return tuple(int(x) for x in text.split(",") if x != "")
    if isinstance(template, float):
        return float(text)
    if isinstance(template, int):
        return int(text)
    return text


def config_text(cfg: RunConfig) -> str:
    """Canonical serialization: sorted key=value lines."""
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in sorted(fields(cfg), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def config_digest(cfg: RunConfig) -> bytes:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).digest()


def parse_config_text(text: str, base: RunConfig = None) -> RunConfig:
    cfg = base or RunConfig()
    template = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in template:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(value.strip(), template[key])
    return replace(cfg, **updates)


def load_config(path: str, base: RunConfig = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base)


def save_config(path: str, cfg: RunConfig):
    _atomic_write(path, config_text(cfg).encode("utf-8"))


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply key=value override strings (CLI --set)."""
    return parse_config_text("\n".join(pairs), cfg)
