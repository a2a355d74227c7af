"""Volumes, label maps, the ``.gvol`` container, normalization and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODALITIES = ("CT", "MRI", "SYNTH")

# wide / soft-tissue / liver-ish windows in HU
DEFAULT_CT_WINDOWS = ((-1000.0, 400.0), (-160.0, 240.0), (40.0, 560.0))


class GvolError(ValueError):
    """Base class for container read errors."""


class MalformedHeaderError(GvolError):
    pass


class TruncatedBufferError(GvolError):
    pass


class SizeMismatchError(GvolError):
    pass


class LabelRangeError(GvolError):
    pass


@dataclass
class Volume:
    data: np.ndarray  # [C, D, H, W]
    spacing: tuple = (1.0, 1.0, 1.0)
    modality: str = "SYNTH"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"Volume data must be [C,D,H,W] with C >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def channels(self):
        return self.data.shape[0]


@dataclass
class LabelMap:
    labels: np.ndarray  # [D, H, W] integer
    num_classes: int
    available: np.ndarray | None = None
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"LabelMap must be [D,H,W], got {self.labels.shape}")
        if self.available is None:
            self.available = np.ones(self.num_classes, dtype=bool)
        self.available = np.asarray(self.available, dtype=bool)
        if self.available.shape != (self.num_classes,):
            raise ValueError("available must have one flag per class")
        self.available[0] = True
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(
                f"label values must lie in [0, {self.num_classes}), found max {int(self.labels.max())}")
        self.labels = self.labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.labels.shape

    def onehot(self, dtype=np.float32) -> np.ndarray:
        return (np.arange(self.num_classes)[:, None, None, None] == self.labels[None]).astype(dtype)


# ---------------------------------------------------------------- container


def _fmt(values) -> str:
    return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


def save_volume(obj: Volume | LabelMap, path, field_tag: str | None = None) -> None:
    """Write a volume or label map as header lines, a blank line, then raw bytes."""
    if isinstance(obj, LabelMap):
        buf = np.ascontiguousarray(obj.labels, dtype="<u1")
        lines = [f"shape: {_fmt(obj.labels.shape)}", f"spacing: {_fmt(obj.spacing)}", "dtype: u8",
                 "modality: LABEL", f"num_classes: {obj.num_classes}",
                 f"available: {_fmt(int(a) for a in obj.available)}"]
    else:
        buf = np.ascontiguousarray(obj.data, dtype="<f4")
        lines = [f"shape: {_fmt(obj.data.shape)}", f"spacing: {_fmt(obj.spacing)}", "dtype: f32",
                 f"modality: {obj.modality}"]
        if field_tag:
            lines.append(f"field: {field_tag}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    Path(path).write_bytes(header + buf.tobytes())


def _parse_header(raw: bytes) -> tuple[dict, bytes]:
    end = raw.find(b"\n\n")
    if end < 0:
        raise MalformedHeaderError("header is not terminated by a blank line")
    try:
        text = raw[:end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError(f"header is not UTF-8: {exc}") from None
    header = {}
    for line in text.splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            raise MalformedHeaderError(f"header line without ':' separator: {line!r}")
        header[key.strip()] = value.strip()
    for key in ("shape", "spacing", "dtype", "modality"):
        if key not in header:
            raise MalformedHeaderError(f"header missing key {key!r}")
    return header, raw[end + 2:]


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(4096)
    return _parse_header(head)[0]


def load_volume(path) -> Volume | LabelMap:
    header, payload = _parse_header(Path(path).read_bytes())
    try:
        shape = tuple(int(s) for s in header["shape"].split(","))
        spacing = tuple(float(s) for s in header["spacing"].split(","))
    except ValueError:
        raise MalformedHeaderError(f"unparseable shape/spacing in {path}") from None
    dtype = {"f32": "<f4", "u8": "<u1"}.get(header["dtype"])
    if dtype is None:
        raise MalformedHeaderError(f"unknown dtype tag {header['dtype']!r}")
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) < expected:
        raise TruncatedBufferError(f"{path}: header shape {shape} needs {expected} bytes, buffer has {len(payload)}")
    if len(payload) != expected:
        raise SizeMismatchError(f"{path}: header shape {shape} needs {expected} bytes, buffer has {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if header["dtype"] == "u8":
        if "num_classes" not in header:
            raise MalformedHeaderError("label container without num_classes")
        k = int(header["num_classes"])
        avail = None
        if "available" in header:
            avail = np.array([int(a) for a in header["available"].split(",")], dtype=bool)
        return LabelMap(data.astype(np.uint8), k, avail, spacing)
    vol = Volume(data.astype(np.float32), spacing, header["modality"])
    if "field" in header:
        vol.meta["field"] = header["field"]
    return vol


# ---------------------------------------------------------------- normalization


def _minmax_window(x, low, high):
    return (np.clip(x, low, high) - low) / (high - low)


def normalize_ct(v: Volume, windows=DEFAULT_CT_WINDOWS) -> Volume:
    """Stack three clamped and rescaled HU windows as channels."""
    if v.channels != 1:
        raise ValueError("normalize_ct expects a single-channel volume")
    if len(windows) != 3:
        raise ValueError(f"exactly three CT windows are required, got {len(windows)}")
    for low, high in windows:
        if low >= high:
            raise ValueError(f"invalid CT window ({low}, {high}): low must be below high")
    x = v.data[0].astype(np.float64)
    data = np.stack([_minmax_window(x, lo, hi) for lo, hi in windows]).astype(np.float32)
    return Volume(data, v.spacing, v.modality)


def normalize_mri(v: Volume, clip: float = 5.0) -> Volume:
    if v.channels != 1:
        raise ValueError("normalize_mri expects a single-channel volume")
    x = v.data[0].astype(np.float64)
    sd = x.std()
    if sd == 0:
        return Volume(np.full_like(v.data, 0.5, dtype=np.float32), v.spacing, v.modality)
    z = np.clip((x - x.mean()) / sd, -clip, clip)
    z = (z - z.min()) / (z.max() - z.min())
    return Volume(z[None].astype(np.float32), v.spacing, v.modality)


# ---------------------------------------------------------------- patches & augmentation


def _pad_to(arr, size):
    pads = [(0, 0)] * (arr.ndim - 3) + [(0, max(0, p - n)) for p, n in zip(size, arr.shape[-3:])]
    return np.pad(arr, pads, mode="edge") if any(p[1] for p in pads) else arr


def extract_patch(pair, size, origin=None, rng=None):
    """Crop the same window from every grid in ``pair``.

    ``pair`` is any sequence of Volume / LabelMap objects sharing a spatial
    shape. ``origin=None`` draws a uniform random origin from ``rng``.
    Grids smaller than ``size`` are padded by border replication first.
    """
    size = tuple(int(s) for s in size)
    shape = pair[0].shape
    padded_shape = tuple(max(p, n) for p, n in zip(size, shape))
    if origin is None:
        rng = rng if rng is not None else np.random.default_rng()
        origin = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(padded_shape, size))
    sl = tuple(slice(o, o + p) for o, p in zip(origin, size))
    out = []
    for g in pair:
        if isinstance(g, LabelMap):
            lab = _pad_to(g.labels, size)[sl]
            out.append(LabelMap(lab.copy(), g.num_classes, g.available.copy(), g.spacing))
        else:
            d = _pad_to(g.data, size)[(slice(None),) + sl]
            out.append(Volume(d.copy(), g.spacing, g.modality))
    return tuple(out)


def _apply_grid(arr, flips, rot, shift):
    # arr spatial axes are the last three
    nd = arr.ndim
    ax = [nd - 3, nd - 2, nd - 1]
    for a, f in enumerate(flips):
        if f:
            arr = np.flip(arr, axis=ax[a])
    k, (a0, a1) = rot
    if k:
        arr = np.rot90(arr, k=k, axes=(ax[a0], ax[a1]))
    if any(shift):
        arr = np.roll(arr, shift, axis=ax)
    return np.ascontiguousarray(arr)


def augment_pair(pair, seed, flip=True, rotate=True, max_shift: int = 2):
    """Apply one random lossless spatial transform jointly to every grid.

    Flips, quarter-turn rotations in one coordinate plane, and circular
    integer shifts. Rotations that would swap unequal extents are skipped.
    """
    rng = np.random.default_rng(seed)
    flips = tuple(bool(rng.integers(2)) if flip else False for _ in range(3))
    plane = [(0, 1), (0, 2), (1, 2)][int(rng.integers(3))]
    k = int(rng.integers(4)) if rotate else 0
    shape = pair[0].shape
    if k % 2 and shape[plane[0]] != shape[plane[1]]:
        k = 0
    shift = tuple(int(rng.integers(-max_shift, max_shift + 1)) if max_shift else 0 for _ in range(3))
    return transform_pair(pair, flips, (k, plane), shift)


def transform_pair(pair, flips=(False, False, False), rot=(0, (0, 1)), shift=(0, 0, 0)):
    out = []
    for g in pair:
        if isinstance(g, LabelMap):
            out.append(LabelMap(_apply_grid(g.labels, flips, rot, shift), g.num_classes, g.available.copy(), g.spacing))
        else:
            out.append(Volume(_apply_grid(g.data, flips, rot, shift), g.spacing, g.modality))
    return tuple(out)
