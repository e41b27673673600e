"""Checkpoint container for trained denoiser weights (.ffz files).

Layout, all little-endian:

    8 bytes   magic "FLEXIFZ1"
    u32       format version (currently 1)
    u32       config block length, then that many bytes of key=value text
    u32       tensor count
    per tensor:
        u16   name length, then the UTF-8 name
        u8    rank
        u32   each dimension
        f32   payload, C order

The config block records the architecture plus the diffusion settings the
weights were trained under.  Loading validates shapes against the config
and optionally against a caller-supplied expected architecture.
"""

from __future__ import annotations

import struct

import numpy as np

from .denoiser import DenoiserParams, PatchConfig, expected_shapes

MAGIC = b"FLEXIFZ1"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, mismatched or truncated checkpoint files."""


def format_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat key=value lines; blank lines and #-comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


_CFG_KEYS = ("patch", "dim", "e_width", "state_dim", "depth", "channels")


def config_block(cfg: PatchConfig, steps: int, schedule_kind: str) -> dict[str, str]:
    pairs = {k: str(getattr(cfg, k)) for k in _CFG_KEYS}
    pairs["steps"] = str(steps)
    pairs["schedule"] = schedule_kind
    return pairs


def save_checkpoint(
    path: str, params: DenoiserParams, steps: int = 100, schedule_kind: str = "linear"
) -> None:
    """Write weights plus their config block; tensor order is sorted by name."""
    params.validate()
    cfg_text = format_kv(config_block(params.cfg, steps, schedule_kind)).encode()
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(struct.pack("<I", len(cfg_text)))
    chunks.append(cfg_text)
    names = sorted(params.tensors)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(
    path: str, expect: PatchConfig | None = None
) -> tuple[DenoiserParams, dict[str, str]]:
    """Read a checkpoint; returns (params, config pairs including steps/schedule)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        pairs = parse_kv(r.take(r.u32()).decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from exc
    try:
        cfg = PatchConfig(**{k: int(pairs[k]) for k in _CFG_KEYS})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from exc
    if expect is not None and cfg != expect:
        raise CheckpointError(f"{path}: checkpoint config {cfg} != requested {expect}")

    count = r.u32()
    expected = expected_shapes(cfg)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode()
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: tensor {name} shape {shape}, config implies {expected[name]}"
            )
        n_items = int(np.prod(shape)) if shape else 1
        buf = r.take(4 * n_items)
        tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        raise CheckpointError(f"{path}: missing tensors {missing}")
    params = DenoiserParams(cfg, tensors)
    params.validate()
    return params, pairs
