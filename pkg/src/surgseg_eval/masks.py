"""Binary masks and their encodings.

Run-length encoding follows the COCO convention: pixels are read in
column-major order and counts alternate background/foreground, starting with
a (possibly zero-length) background run.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable, Sequence

import numpy as np
from scipy import ndimage

FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


class MaskError(ValueError):
    pass


class BinaryMask:
    """Immutable height x width boolean grid."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def empty(cls, width: int, height: int) -> BinaryMask:
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_box(cls, box: Sequence[int], width: int, height: int) -> BinaryMask:
        x0, y0, x1, y1 = (int(v) for v in box)
        arr = np.zeros((height, width), dtype=bool)
        arr[max(y0, 0):y1 + 1, max(x0, 0):x1 + 1] = True
        return cls(arr)

    @classmethod
    def from_rle(cls, counts: Sequence[int], width: int, height: int) -> BinaryMask:
        return cls(rle_decode(counts, width, height))

    @property
    def array(self) -> np.ndarray:
        return self._data

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def area(self) -> int:
        return int(self._data.sum())

    def is_empty(self) -> bool:
        return not self._data.any()

    def to_rle(self) -> list[int]:
        return rle_encode(self._data)

    def bbox(self) -> tuple[int, int, int, int] | None:
        """Tight (x_min, y_min, x_max, y_max), inclusive; None when empty."""
        return tight_bbox(self._data)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.height}x{self.width}:".encode())
        h.update(np.packbits(self._data, axis=None).tobytes())
        return h.hexdigest()[:16]

    def __and__(self, other: BinaryMask) -> BinaryMask:
        return BinaryMask(self._data & _same_shape(self, other)._data)

    def __or__(self, other: BinaryMask) -> BinaryMask:
        return BinaryMask(self._data | _same_shape(self, other)._data)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self):
        return hash((self.shape, np.packbits(self._data, axis=None).tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.area})"


def _same_shape(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    if a.shape != b.shape:
        raise MaskError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return b


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def rle_decode(counts: Sequence[int], width: int, height: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise MaskError("negative run length in RLE")
    total = sum(counts)
    if total != width * height:
        raise MaskError(f"RLE runs sum to {total}, expected {width}x{height}={width * height}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def rle_to_string(counts: Sequence[int]) -> str:
    """Compress counts into the COCO LEB128-like ASCII form."""
    out = []
    cnts = [int(c) for c in counts]
    for i, x in enumerate(cnts):
        if i > 2:
            x -= cnts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_from_string(s: str) -> list[int]:
    cnts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(cnts) > 2:
            x += cnts[-2]
        cnts.append(x)
    return cnts


def polygons_to_mask(polygons: Iterable[Sequence[float]], width: int, height: int) -> np.ndarray:
    from skimage.draw import polygon as draw_polygon

    arr = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        xs = np.asarray(poly[0::2], dtype=float)
        ys = np.asarray(poly[1::2], dtype=float)
        if len(xs) < 3:
            raise MaskError("polygon needs at least 3 vertices")
        rr, cc = draw_polygon(ys, xs, shape=(height, width))
        arr[rr, cc] = True
    return arr


def tight_bbox(arr: np.ndarray) -> tuple[int, int, int, int] | None:
    ys, xs = np.nonzero(arr)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def label_components(arr: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected labelling; labels are numbered in raster-scan order."""
    labels, n = ndimage.label(np.asarray(arr, dtype=bool), structure=FOUR_CONNECTIVITY)
    return labels, int(n)


def connected_regions(arr: np.ndarray) -> list[np.ndarray]:
    labels, n = label_components(arr)
    return [labels == i for i in range(1, n + 1)]


def translate(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift by (dx, dy) pixels; content leaving the frame is dropped."""
    h, w = arr.shape
    out = np.zeros_like(arr, dtype=bool)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def erode_square(arr: np.ndarray, radius: int) -> np.ndarray:
    """Erosion by a (2r+1)x(2r+1) square; the frame border does not erode."""
    if radius <= 0:
        return np.asarray(arr, dtype=bool).copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_erosion(arr, structure=structure, border_value=1)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)
