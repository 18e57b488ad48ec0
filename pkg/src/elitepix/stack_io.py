"""On-disk stack/mask formats and the patch, stitch and resampling transforms.

A ``.tsstack`` file is one UTF-8 JSON header line followed by a raw payload of
little-endian float32 values, laid out band by band (amplitude, phase,
coherence), each band in (epoch, row, col) row-major order.  A ``.mask`` file
uses the same header style with bands ``elite`` and ``valid`` stored as uint8.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Union

import numpy as np

FORMAT_VERSION = 1
PATCH_SIZE = 100
STACK_BANDS = ("amplitude", "phase", "coherence")
MASK_BANDS = ("elite", "valid")

# largest float32 strictly inside [-pi, pi)
PHASE_MIN = float(np.nextafter(np.float32(-math.pi), np.float32(0)))
PHASE_MAX = float(np.nextafter(np.float32(math.pi), np.float32(0)))

PathType = Union[str, PathLike]


class StackFormatError(ValueError):
    """Base class for unreadable stack or mask files."""


class MalformedHeaderError(StackFormatError):
    pass


class TruncatedPayloadError(StackFormatError):
    pass


class VersionMismatchError(StackFormatError):
    pass


class StructuralError(ValueError):
    """Patch origins do not tile the target exactly once."""


@dataclass
class InterferogramStack:
    """Per-epoch amplitude, wrapped phase and coherence, each ``(n_t, h, w)`` float32."""

    amplitude: np.ndarray
    phase: np.ndarray
    coherence: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.amplitude = np.ascontiguousarray(self.amplitude, dtype=np.float32)
        self.phase = np.ascontiguousarray(self.phase, dtype=np.float32)
        self.coherence = np.ascontiguousarray(self.coherence, dtype=np.float32)

    @property
    def n_t(self) -> int:
        return self.amplitude.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.amplitude.shape[1], self.amplitude.shape[2]

    def bands(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.amplitude, self.phase, self.coherence

    def validate(self) -> "InterferogramStack":
        if self.amplitude.ndim != 3:
            raise ValueError(f"bands must be 3-D (n_t, h, w), got {self.amplitude.shape}")
        for name, band in zip(STACK_BANDS, self.bands()):
            if band.shape != self.amplitude.shape:
                raise ValueError(f"{name} shape {band.shape} != amplitude shape {self.amplitude.shape}")
        n_t, h, w = self.amplitude.shape
        if n_t < 2 or h < 1 or w < 1:
            raise ValueError(f"need n_t >= 2, h >= 1, w >= 1; got {(n_t, h, w)}")
        if not np.all(self.amplitude >= 0):
            raise ValueError("amplitude must be non-negative")
        if not np.all((self.coherence >= 0) & (self.coherence <= 1)):
            raise ValueError("coherence must lie in [0, 1]")
        ph = self.phase.astype(np.float64)
        if not np.all((ph >= -math.pi) & (ph < math.pi)):
            raise ValueError("phase must lie in [-pi, pi)")
        return self

    def select_epochs(self, idx) -> "InterferogramStack":
        idx = np.asarray(idx)
        return InterferogramStack(self.amplitude[idx], self.phase[idx],
                                  self.coherence[idx], dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, InterferogramStack):
            return NotImplemented
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.bands(), other.bands()))


@dataclass
class EliteMask:
    elite: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.elite = np.asarray(self.elite, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.elite.shape != self.valid.shape or self.elite.ndim != 2:
            raise ValueError(f"elite {self.elite.shape} and valid {self.valid.shape} must be equal 2-D shapes")
        if np.any(self.elite & ~self.valid):
            raise ValueError("elite pixels must be valid")

    @classmethod
    def full(cls, elite) -> "EliteMask":
        elite = np.asarray(elite, dtype=bool)
        return cls(elite, np.ones_like(elite))

    @property
    def shape(self) -> tuple[int, int]:
        return self.elite.shape

    def __eq__(self, other):
        if not isinstance(other, EliteMask):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.elite, other.elite)
                and np.array_equal(self.valid, other.valid))


@dataclass
class PatchBatch:
    """Tiles cut from a stack.

    ``data`` has the two tile axes at positions -3 and -2, e.g.
    ``(n_s, n_t, size, size, f)`` for network input or ``(n_s, size, size, 1)``
    for predictions.  ``origin`` holds the (row, col) of each tile in the source
    and ``valid`` marks pixels that lie inside the source.
    """

    data: np.ndarray
    origin: np.ndarray
    valid: np.ndarray
    size: int = PATCH_SIZE

    @property
    def n_s(self) -> int:
        return self.data.shape[0]

    def subset(self, idx) -> "PatchBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchBatch(self.data[idx], self.origin[idx], self.valid[idx], self.size)


# ---------------------------------------------------------------- file format

def _header_bytes(header: dict) -> bytes:
    return (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")


def _read_header(buf: bytes, bands: tuple[str, ...], dtype: str) -> tuple[dict, int]:
    nl = buf.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError("no newline-terminated header line")
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    if "version" not in header:
        raise MalformedHeaderError("header lacks 'version'")
    if header["version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"file version {header['version']!r}, reader supports {FORMAT_VERSION}")
    if tuple(header.get("bands", ())) != bands:
        raise MalformedHeaderError(f"expected bands {list(bands)}, got {header.get('bands')!r}")
    if header.get("endian") != "little":
        raise MalformedHeaderError(f"unsupported endianness {header.get('endian')!r}")
    if header.get("dtype") != dtype:
        raise MalformedHeaderError(f"expected dtype {dtype!r}, got {header.get('dtype')!r}")
    for key in ("h", "w"):
        v = header.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise MalformedHeaderError(f"header field {key!r} must be a positive integer, got {v!r}")
    return header, nl + 1


def _payload(buf: bytes, start: int, expected: int) -> bytes:
    got = len(buf) - start
    if got < expected:
        raise TruncatedPayloadError(f"payload has {got} bytes, header implies {expected}")
    if got > expected:
        raise StackFormatError(f"{got - expected} trailing bytes after payload")
    return buf[start:]


def stack_to_bytes(stack: InterferogramStack) -> bytes:
    n_t, h, w = stack.amplitude.shape
    header = {"version": FORMAT_VERSION, "n_t": n_t, "h": h, "w": w,
              "bands": list(STACK_BANDS), "endian": "little", "dtype": "f32"}
    if "generator" in stack.meta:
        header["generator"] = stack.meta["generator"]
    body = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in stack.bands())
    return _header_bytes(header) + body


def stack_from_bytes(buf: bytes) -> InterferogramStack:
    header, start = _read_header(buf, STACK_BANDS, "f32")
    n_t = header.get("n_t")
    if not isinstance(n_t, int) or isinstance(n_t, bool) or n_t < 2:
        raise MalformedHeaderError(f"n_t must be an integer >= 2, got {n_t!r}")
    h, w = header["h"], header["w"]
    plane = n_t * h * w
    raw = np.frombuffer(_payload(buf, start, plane * 3 * 4), dtype="<f4")
    amp, ph, coh = (raw[i * plane:(i + 1) * plane].reshape(n_t, h, w).astype(np.float32)
                    for i in range(3))
    meta = {"generator": header["generator"]} if "generator" in header else {}
    return InterferogramStack(amp, ph, coh, meta)


def write_stack(stack: InterferogramStack, path: PathType) -> None:
    with open(path, "wb") as fh:
        fh.write(stack_to_bytes(stack))


def read_stack(path: PathType) -> InterferogramStack:
    with open(path, "rb") as fh:
        return stack_from_bytes(fh.read())


def mask_to_bytes(mask: EliteMask) -> bytes:
    h, w = mask.shape
    header = {"version": FORMAT_VERSION, "h": h, "w": w, "bands": list(MASK_BANDS),
              "endian": "little", "dtype": "u8"}
    return (_header_bytes(header) + mask.elite.astype(np.uint8).tobytes()
            + mask.valid.astype(np.uint8).tobytes())


def mask_from_bytes(buf: bytes) -> EliteMask:
    header, start = _read_header(buf, MASK_BANDS, "u8")
    h, w = header["h"], header["w"]
    raw = np.frombuffer(_payload(buf, start, 2 * h * w), dtype=np.uint8)
    if np.any(raw > 1):
        raise StackFormatError("mask payload values must be 0 or 1")
    return EliteMask(raw[:h * w].reshape(h, w).astype(bool), raw[h * w:].reshape(h, w).astype(bool))


def write_mask(mask: EliteMask, path: PathType) -> None:
    with open(path, "wb") as fh:
        fh.write(mask_to_bytes(mask))


def read_mask(path: PathType) -> EliteMask:
    with open(path, "rb") as fh:
        return mask_from_bytes(fh.read())


# ------------------------------------------------------------------ transforms

def wrap_phase(phi: np.ndarray) -> np.ndarray:
    """Wrap to [-pi, pi) and make the result survive a float32 cast."""
    wrapped = np.mod(np.asarray(phi, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi
    return np.clip(wrapped.astype(np.float32), PHASE_MIN, PHASE_MAX)


def temporal_indices(n_t: int, m: int) -> np.ndarray:
    if not (2 <= m <= n_t):
        raise ValueError(f"target epoch count m={m} outside [2, n_t={n_t}]")
    # half away from zero; all positions are non-negative
    pos = np.arange(m, dtype=np.float64) * (n_t - 1) / (m - 1)
    return np.floor(pos + 0.5).astype(np.int64)


def temporal_sample(stack: InterferogramStack, m: int) -> InterferogramStack:
    return stack.select_epochs(temporal_indices(stack.n_t, m))


FEATURE_SETS = {"cos_sin": 2, "cos_sin_amp": 3, "bands": 3}


def phase_to_features(stack: InterferogramStack, with_amplitude: bool = False) -> np.ndarray:
    """Per-epoch feature planes ``(n_t, h, w, f)``: cos and sin of the phase,
    optionally followed by amplitude over its per-pixel temporal mean."""
    ph = stack.phase.astype(np.float64)
    planes = [np.cos(ph), np.sin(ph)]
    if with_amplitude:
        amp = stack.amplitude.astype(np.float64)
        mean = amp.mean(axis=0, keepdims=True)
        planes.append(np.divide(amp, mean, out=np.zeros_like(amp), where=mean > 0))
    return np.stack(planes, axis=-1)


def stack_features(stack: InterferogramStack, features: str = "cos_sin") -> np.ndarray:
    if features == "cos_sin":
        return phase_to_features(stack)
    if features == "cos_sin_amp":
        return phase_to_features(stack, with_amplitude=True)
    if features == "bands":
        return np.stack(stack.bands(), axis=-1)
    raise ValueError(f"unknown feature set {features!r}; choose from {sorted(FEATURE_SETS)}")


def tile_origins(h: int, w: int, size: int = PATCH_SIZE) -> np.ndarray:
    rows = range(0, h, size)
    cols = range(0, w, size)
    return np.array([(r, c) for r in rows for c in cols], dtype=np.int64).reshape(-1, 2)


def tile_array(arr: np.ndarray, size: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cut ``arr`` (tile axes at -3, -2) into zero-padded, non-overlapping tiles."""
    h, w = arr.shape[-3], arr.shape[-2]
    origins = tile_origins(h, w, size)
    lead, trail = arr.shape[:-3], arr.shape[-1:]
    out = np.zeros((len(origins),) + lead + (size, size) + trail, dtype=arr.dtype)
    valid = np.zeros((len(origins), size, size), dtype=bool)
    for i, (r, c) in enumerate(origins):
        ph, pw = min(size, h - r), min(size, w - c)
        out[i, ..., :ph, :pw, :] = arr[..., r:r + ph, c:c + pw, :]
        valid[i, :ph, :pw] = True
    return out, origins, valid


def extract_patches(stack: InterferogramStack, features: str = "cos_sin",
                    size: int = PATCH_SIZE) -> PatchBatch:
    stack.validate()
    data, origins, valid = tile_array(stack_features(stack, features), size)
    return PatchBatch(data, origins, valid, size)


def extract_mask_patches(mask: EliteMask, size: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Tile a mask the same way as its stack: returns (elite, valid) each ``(n_s, size, size)``."""
    both = np.stack([mask.elite, mask.valid], axis=-1)
    tiles, _, inside = tile_array(both, size)
    return tiles[..., 0], tiles[..., 1] & inside


def reassemble_patches(batch: PatchBatch, target_h: int, target_w: int) -> np.ndarray:
    size = batch.size
    origins = np.asarray(batch.origin, dtype=np.int64).reshape(-1, 2)
    expected = {tuple(o) for o in tile_origins(target_h, target_w, size)}
    seen = set()
    for o in map(tuple, origins):
        if o in seen:
            raise StructuralError(f"tile origin {o} appears more than once")
        if o not in expected:
            raise StructuralError(f"tile origin {o} is not on the stride-{size} grid of {target_h}x{target_w}")
        seen.add(o)
    if seen != expected:
        missing = sorted(expected - seen)
        raise StructuralError(f"{len(missing)} tile(s) missing, first at {missing[0]}")
    data = batch.data
    out = np.zeros(data.shape[1:-3] + (target_h, target_w) + data.shape[-1:], dtype=data.dtype)
    for i, (r, c) in enumerate(origins):
        ph, pw = min(size, target_h - r), min(size, target_w - c)
        out[..., r:r + ph, c:c + pw, :] = data[i, ..., :ph, :pw, :]
    return out
