"""Event streams, frame-aligned time surfaces, crops and patch tokens.

Also holds the on-disk formats for a sequence directory:

* ``events.evt``  magic ``EVT1``, u32 count, records of
  (x: u16, y: u16, t: i64 microseconds, p: i8, 1 pad byte), little-endian.
* ``frames.frm``  magic ``FRM1``, u32 H, W, C, T, then T*H*W*C float32 LE.
* ``groundtruth.txt``  one ``frame_idx,cx,cy,w,h`` line per frame.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("p", "i1"), ("pad", "u1")])
assert EVENT_DTYPE.itemsize == 14


class FormatError(IOError):
    """A sequence file is malformed."""


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


class EventStream:
    """Time-ordered events from an ``height`` x ``width`` sensor, stored columnwise."""

    def __init__(self, x, y, t, p, height: int, width: int):
        self.x = np.asarray(x, dtype=np.int64)
        self.y = np.asarray(y, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.int64)
        self.p = np.asarray(p, dtype=np.int64)
        self.height = int(height)
        self.width = int(width)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarity must be +1 or -1")
            if self.x.min() < 0 or self.x.max() >= width or self.y.min() < 0 or self.y.max() >= height:
                raise ValueError(f"event coordinates outside {height}x{width} sensor")

    @classmethod
    def from_events(cls, events: Iterable[Event], height: int, width: int) -> "EventStream":
        events = list(events)
        if not events:
            return cls.empty(height, width)
        x, y, t, p = zip(*events)
        return cls(x, y, t, p, height, width)

    @classmethod
    def empty(cls, height: int, width: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, height, width)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.x, self.y, self.t, self.p):
            yield Event(*map(int, row))

    def concat(self, other: "EventStream") -> "EventStream":
        """Merge two streams from the same sensor, keeping time order (stable)."""
        t = np.concatenate([self.t, other.t])
        order = np.argsort(t, kind="stable")
        cols = [np.concatenate([a, b])[order] for a, b in
                ((self.x, other.x), (self.y, other.y), (self.t, other.t), (self.p, other.p))]
        return EventStream(*cols, self.height, self.width)

    def flipped(self) -> "EventStream":
        return EventStream(self.x, self.y, self.t, -self.p, self.height, self.width)


@dataclass
class TimeSurface:
    grid: np.ndarray  # [H, W] signed
    t_ref: int
    delta_t: float
    contributing_count: int
    density: float


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def voxelize(stream: EventStream, t_ref: int, delta_t: float, H: int | None = None,
             W: int | None = None) -> TimeSurface:
    """Accumulate ``p * max(0, 1 - |t_ref - t| / delta_t)`` per pixel.

    When ``H, W`` differ from the sensor size, coordinates are rescaled by
    integer flooring onto the target grid.
    """
    if not delta_t > 0:
        raise ValueError(f"delta_t must be positive, got {delta_t}")
    H = stream.height if H is None else H
    W = stream.width if W is None else W
    grid = np.zeros((H, W))
    lo = np.searchsorted(stream.t, t_ref - delta_t, side="right")
    hi = np.searchsorted(stream.t, t_ref + delta_t, side="left")
    t = stream.t[lo:hi]
    weight = 1.0 - np.abs(t_ref - t).astype(np.float64) / delta_t
    keep = weight > 0
    weight = weight[keep]
    xs = stream.x[lo:hi][keep]
    ys = stream.y[lo:hi][keep]
    if W != stream.width:
        xs = xs * W // stream.width
    if H != stream.height:
        ys = ys * H // stream.height
    np.add.at(grid, (ys, xs), stream.p[lo:hi][keep] * weight)
    count = int(keep.sum())
    return TimeSurface(grid, int(t_ref), float(delta_t), count, count / float(H * W))


def event_density(surface: TimeSurface) -> float:
    H, W = surface.grid.shape
    return surface.contributing_count / float(H * W)


def _interp_matrix(n_out: int, n_in: int, start: float, scale: float) -> np.ndarray:
    """Rows of bilinear weights sampling [start, start + n_out*scale) at pixel centres.

    Input pixel k covers [k, k+1) with its centre at k + 0.5; taps outside the
    input get no weight (zero padding).
    """
    pos = start + (np.arange(n_out) + 0.5) * scale - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for idx, wt in ((lo, 1.0 - frac), (lo + 1, frac)):
        ok = (idx >= 0) & (idx < n_in)
        M[rows[ok], idx[ok]] += wt[ok]
    return M


def crop_window(box: BBox, context_factor: float) -> tuple[float, float, float]:
    """Square crop (x0, y0, side) centred on ``box`` with side ``factor * sqrt(w*h)``."""
    side = context_factor * math.sqrt(box.w * box.h)
    return box.cx - side / 2, box.cy - side / 2, side


def crop_patch(image: np.ndarray, box: BBox, context_factor: float, out_size: int) -> np.ndarray:
    """Bilinear square crop around ``box`` resized to ``out_size``; outside the image reads 0."""
    if context_factor < 1:
        raise ValueError("context_factor must be >= 1")
    if out_size <= 0:
        raise ValueError("out_size must be positive")
    if not (box.w > 0 and box.h > 0):
        raise ValueError("degenerate box")
    img = image if image.ndim == 3 else image[..., None]
    x0, y0, side = crop_window(box, context_factor)
    scale = side / out_size
    Ry = _interp_matrix(out_size, img.shape[0], y0, scale)
    Rx = _interp_matrix(out_size, img.shape[1], x0, scale)
    out = np.einsum("oh,hwc,pw->opc", Ry, img.astype(np.float64), Rx, optimize=True)
    return out if image.ndim == 3 else out[..., 0]


def patch_embed(grid: Tensor, patch: int, W_e: Tensor, pos: Tensor) -> Tensor:
    """Non-overlapping ``patch`` x ``patch`` tokens (row-major), projected by ``W_e`` plus ``pos``."""
    grid = nx.as_tensor(grid)
    if grid.ndim == 2:
        grid = nx.reshape(grid, grid.shape + (1,))
    S, S2, C = grid.shape
    if S != S2 or S % patch:
        raise ValueError(f"patch {patch} does not tile a {S}x{S2} grid")
    g = S // patch
    tiles = nx.reshape(grid, (g, patch, g, patch, C))
    tiles = nx.transpose(tiles, (0, 2, 1, 3, 4))
    flat = nx.reshape(tiles, (g * g, patch * patch * C))
    return nx.linear(flat, W_e) + pos


# ----------------------------------------------------------------------------
# file formats


def write_events(path: Path, stream: EventStream) -> None:
    rec = np.zeros(len(stream), dtype=EVENT_DTYPE)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    with open(path, "wb") as f:
        f.write(b"EVT1" + struct.pack("<I", len(stream)))
        f.write(rec.tobytes())


def read_events(path: Path, height: int, width: int) -> EventStream:
    raw = Path(path).read_bytes()
    if raw[:4] != b"EVT1" or len(raw) < 8:
        raise FormatError(f"{path}: not an EVT1 file")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + n * EVENT_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {n} records, file size {len(raw)} disagrees")
    rec = np.frombuffer(raw, dtype=EVENT_DTYPE, offset=8, count=n)
    return EventStream(rec["x"], rec["y"], rec["t"], rec["p"], height, width)


def write_frames(path: Path, frames: np.ndarray) -> None:
    """``frames``: [T, H, W, C]."""
    T, H, W, C = frames.shape
    with open(path, "wb") as f:
        f.write(b"FRM1" + struct.pack("<IIII", H, W, C, T))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_frames(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"FRM1" or len(raw) < 20:
        raise FormatError(f"{path}: not an FRM1 file")
    H, W, C, T = struct.unpack("<IIII", raw[4:20])
    if len(raw) != 20 + 4 * T * H * W * C:
        raise FormatError(f"{path}: header says {T}x{H}x{W}x{C}, size disagrees")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(T, H, W, C).astype(np.float64)


def write_groundtruth(path: Path, boxes: list[BBox]) -> None:
    with open(path, "w") as f:
        for i, b in enumerate(boxes):
            f.write(f"{i},{b.cx!r},{b.cy!r},{b.w!r},{b.h!r}\n")


def read_groundtruth(path: Path) -> list[BBox]:
    boxes: dict[int, BBox] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            idx, cx, cy, w, h = line.split(",")
            boxes[int(idx)] = BBox(float(cx), float(cy), float(w), float(h))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if sorted(boxes) != list(range(len(boxes))):
        raise FormatError(f"{path}: frame indices are not contiguous from 0")
    return [boxes[i] for i in range(len(boxes))]
