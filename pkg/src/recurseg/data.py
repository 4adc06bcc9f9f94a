"""Synthetic occluded-shape scenes with full ground truth.

Scenes hold a handful of discs, rectangles, and capsules drawn back to front,
so later shapes occlude earlier ones. Ground truth is the visible part of each
instance, its tight box, the foreground union, and a per-pixel quantized angle
map pointing at the instance centroid. Rasterization is integer-only, so the
same spec and seed produce identical bytes on every platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RSD1"
RESAMPLE_BUDGET = 100
MIN_VISIBLE_FRACTION = 0.2
ANGLE_BINS = 8
BG_SENTINEL = 255


class GenerationError(Exception):
    pass


class DatasetFormatError(Exception):
    pass


@dataclass
class SceneSpec:
    img_h: int = 64
    img_w: int = 64
    n_min: int = 1
    n_max: int = 5
    kinds: tuple = ("disc", "rectangle", "capsule")
    size_min: float = 0.18
    size_max: float = 0.38
    max_overlap: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.img_h < 8 or self.img_w < 8:
            raise ValueError(f"image {self.img_h}x{self.img_w} too small")
        if not 0 <= self.n_min <= self.n_max:
            raise ValueError(f"bad instance range [{self.n_min}, {self.n_max}]")
        bad = set(self.kinds) - {"disc", "rectangle", "capsule"}
        if bad or not self.kinds:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        if not 0 < self.size_min <= self.size_max <= 1:
            raise ValueError(f"bad size range [{self.size_min}, {self.size_max}]")
        if not 0 <= self.max_overlap <= 1:
            raise ValueError(f"bad overlap limit {self.max_overlap}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class LabeledScene:
    rgb: np.ndarray
    masks: list
    boxes: list
    foreground: np.ndarray
    angle_map: np.ndarray

    @property
    def count(self) -> int:
        return len(self.masks)


def scenes_equal(a: LabeledScene, b: LabeledScene) -> bool:
    return (
        np.array_equal(a.rgb, b.rgb)
        and len(a.masks) == len(b.masks)
        and all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))
        and a.boxes == b.boxes
        and np.array_equal(a.foreground, b.foreground)
        and np.array_equal(a.angle_map, b.angle_map)
    )


def _grid(h, w):
    ys = np.arange(h, dtype=np.int64)[:, None]
    xs = np.arange(w, dtype=np.int64)[None, :]
    return ys, xs


def _disc(h, w, cy, cx, r):
    ys, xs = _grid(h, w)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


def _rectangle(h, w, cy, cx, a, b, dy, dx):
    """Oriented rectangle: half-extent a along (dy,dx), b across it."""
    ys, xs = _grid(h, w)
    u = (ys - cy) * dy + (xs - cx) * dx
    v = (ys - cy) * dx - (xs - cx) * dy
    n = dy * dy + dx * dx
    return (u * u <= a * a * n) & (v * v <= b * b * n)


def _capsule(h, w, ay, ax, by, bx, r):
    """All pixels within r of the segment (ay,ax)-(by,bx), by exact integer arithmetic."""
    ys, xs = _grid(h, w)
    dy, dx = by - ay, bx - ax
    n = dy * dy + dx * dx
    wy, wx = ys - ay, xs - ax
    s = wy * dy + wx * dx
    d_a = wy * wy + wx * wx
    d_b = (ys - by) ** 2 + (xs - bx) ** 2
    mid = n * d_a - s * s <= r * r * n
    return np.where(s <= 0, d_a <= r * r, np.where(s >= n, d_b <= r * r, mid))


def _sample_direction(rng):
    while True:
        dy = int(rng.integers(-3, 4))
        dx = int(rng.integers(-3, 4))
        if dy or dx:
            return dy, dx


def _sample_shape(rng, spec: SceneSpec):
    base = min(spec.img_h, spec.img_w)
    kind = spec.kinds[int(rng.integers(0, len(spec.kinds)))]
    color = rng.integers(70, 256, size=3).astype(np.uint8)
    cy = int(rng.integers(0, spec.img_h))
    cx = int(rng.integers(0, spec.img_w))

    def extent():
        frac = rng.uniform(spec.size_min, spec.size_max)
        return max(1, int(frac * base / 2))

    if kind == "disc":
        mask = _disc(spec.img_h, spec.img_w, cy, cx, extent())
    elif kind == "rectangle":
        dy, dx = _sample_direction(rng)
        mask = _rectangle(spec.img_h, spec.img_w, cy, cx, extent(), extent(), dy, dx)
    else:
        dy, dx = _sample_direction(rng)
        k = max(1, int(extent() / np.sqrt(dy * dy + dx * dx)))
        r = max(1, extent() // 2)
        mask = _capsule(spec.img_h, spec.img_w, cy, cx, cy + k * dy, cx + k * dx, r)
    return mask, color


def _full_mask_iou(a, b):
    union = int(np.logical_or(a, b).sum())
    return int(np.logical_and(a, b).sum()) / union if union else 0.0


def _place_shapes(rng, spec: SceneSpec, n: int):
    """Sample n full shape masks back to front, respecting overlap and visibility limits."""
    fulls, colors = [], []
    for _ in range(n):
        for _attempt in range(RESAMPLE_BUDGET):
            mask, color = _sample_shape(rng, spec)
            if int(mask.sum()) < 4:
                continue
            if any(_full_mask_iou(mask, f) > spec.max_overlap for f in fulls):
                continue
            # later shapes occlude earlier ones: placing this shape must not
            # hide more than 80% of anything already placed
            occluders = mask.copy()
            ok = True
            for f in reversed(fulls):
                visible = int(np.logical_and(f, ~occluders).sum())
                if visible < MIN_VISIBLE_FRACTION * int(f.sum()):
                    ok = False
                    break
                occluders |= f
            if ok:
                fulls.append(mask)
                colors.append(color)
                break
        else:
            raise GenerationError(f"no valid placement for instance {len(fulls)} in 100 tries")
    return fulls, colors


def generate_scene(spec: SceneSpec, index: int) -> LabeledScene:
    """One deterministic scene; `index` separates scenes drawn from the same spec."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.img_h, spec.img_w
    rgb = rng.integers(10, 46, size=(h, w, 3), dtype=np.uint8)
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    fulls, colors = _place_shapes(rng, spec, n)

    masks = []
    cover = np.zeros((h, w), dtype=bool)
    for f in reversed(fulls):
        masks.append(np.logical_and(f, ~cover))
        cover |= f
    masks.reverse()

    for f, c in zip(fulls, colors):
        rgb[f] = c
    foreground = cover
    angle = angle_map_gt(masks) if masks else np.zeros((h, w, ANGLE_BINS), dtype=bool)
    boxes = tight_boxes(masks)
    return LabeledScene(
        rgb=(rgb.astype(np.float32) / np.float32(255.0)),
        masks=masks,
        boxes=boxes,
        foreground=foreground,
        angle_map=angle,
    )


def generate_dataset(spec: SceneSpec, count: int) -> list:
    return [generate_scene(spec, i) for i in range(count)]


def _octant_bins(vy: np.ndarray, vx: np.ndarray) -> np.ndarray:
    """floor((atan2(vy, vx) + pi) / (pi/4)) mod 8, by integer comparisons only.

    Bins are half-open on the left edge; the zero vector maps to bin 0.
    """
    conds = [
        (vy < 0) & (vx < 0) & (vy <= vx),          # [-3pi/4, -pi/2)
        (vy < 0) & (vx >= 0) & (-vy > vx),         # [-pi/2, -pi/4)
        (vy < 0) & (vx > 0) & (-vy <= vx),         # [-pi/4, 0)
        (vy >= 0) & (vx > 0) & (vy < vx),          # [0, pi/4)
        (vy > 0) & (vx > 0) & (vy >= vx),          # [pi/4, pi/2)
        (vy > 0) & (vx <= 0) & (vy > -vx),         # [pi/2, 3pi/4)
        (vy > 0) & (vx < 0) & (vy <= -vx),         # [3pi/4, pi)
    ]
    return np.select(conds, np.arange(1, 8, dtype=np.uint8), default=np.uint8(0))


def angle_map_gt(masks) -> np.ndarray:
    """One-hot direction-to-centroid bin per foreground pixel, zero on background."""
    if not masks:
        raise ValueError("angle map needs at least one mask")
    h, w = masks[0].shape
    out = np.zeros((h, w, ANGLE_BINS), dtype=bool)
    for mask in masks:
        pys, pxs = np.nonzero(mask)
        if pys.size == 0:
            continue
        cnt = pys.size
        # centroid scaled by the pixel count keeps the comparison integer-exact
        vy = int(pys.sum()) - pys.astype(np.int64) * cnt
        vx = int(pxs.sum()) - pxs.astype(np.int64) * cnt
        out[pys, pxs, _octant_bins(vy, vx)] = True
    return out


def tight_boxes(masks) -> list:
    """Inclusive (row_min, col_min, row_max, col_max) per mask."""
    boxes = []
    for mask in masks:
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise ValueError("tight box of an empty mask")
        boxes.append((int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])))
    return boxes


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Row-major run lengths, alternating values starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, shape) -> np.ndarray:
    total = int(np.sum(runs, dtype=np.int64))
    expected = int(shape[0] * shape[1])
    if total != expected:
        raise DatasetFormatError(f"run lengths cover {total} pixels, expected {expected}")
    flat = np.zeros(expected, dtype=bool)
    pos = 0
    for i, r in enumerate(runs):
        if i % 2 == 1:
            flat[pos:pos + int(r)] = True
        pos += int(r)
    return flat.reshape(shape)


def _need(buf: bytes, offset: int, n: int) -> int:
    if offset + n > len(buf):
        raise DatasetFormatError(f"truncated dataset: wanted {n} bytes at offset {offset}")
    return offset + n


def write_dataset(path, scenes) -> None:
    shapes = {s.rgb.shape[:2] for s in scenes}
    if len(shapes) > 1:
        raise ValueError(f"scenes disagree on image size: {sorted(shapes)}")
    h, w = shapes.pop() if shapes else (0, 0)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<III", len(scenes), h, w)
    for s in scenes:
        rgb_u8 = np.clip(np.rint(np.asarray(s.rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        out += rgb_u8.tobytes()
        out += struct.pack("<H", s.count)
        for mask in s.masks:
            runs = rle_encode(mask)
            out += struct.pack("<I", len(runs))
            out += runs.astype("<u4").tobytes()
        for box in s.boxes:
            out += struct.pack("<4H", *box)
        bins = np.argmax(s.angle_map, axis=2).astype(np.uint8)
        bins[~s.angle_map.any(axis=2)] = BG_SENTINEL
        out += bins.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_dataset(path) -> list:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"wrong format or version: magic {buf[:4]!r}")
    off = 4
    end = _need(buf, off, 12)
    count, h, w = struct.unpack_from("<III", buf, off)
    off = end
    scenes = []
    for _ in range(count):
        end = _need(buf, off, h * w * 3)
        rgb_u8 = np.frombuffer(buf[off:end], dtype=np.uint8).reshape(h, w, 3)
        off = end
        end = _need(buf, off, 2)
        (n,) = struct.unpack_from("<H", buf, off)
        off = end
        masks = []
        for _ in range(n):
            end = _need(buf, off, 4)
            (n_runs,) = struct.unpack_from("<I", buf, off)
            off = end
            end = _need(buf, off, 4 * n_runs)
            runs = np.frombuffer(buf[off:end], dtype="<u4")
            off = end
            masks.append(rle_decode(runs, (h, w)))
        boxes = []
        for _ in range(n):
            end = _need(buf, off, 8)
            boxes.append(struct.unpack_from("<4H", buf, off))
            off = end
        end = _need(buf, off, h * w)
        bins = np.frombuffer(buf[off:end], dtype=np.uint8).reshape(h, w)
        off = end
        angle = np.zeros((h, w, ANGLE_BINS), dtype=bool)
        fg_bins = bins != BG_SENTINEL
        if bins[fg_bins].size and bins[fg_bins].max() >= ANGLE_BINS:
            raise DatasetFormatError("angle bin index out of range")
        ys, xs = np.nonzero(fg_bins)
        angle[ys, xs, bins[ys, xs]] = True
        foreground = np.zeros((h, w), dtype=bool)
        for m in masks:
            foreground |= m
        scenes.append(LabeledScene(
            rgb=rgb_u8.astype(np.float32) / np.float32(255.0),
            masks=masks,
            boxes=[tuple(int(v) for v in b) for b in boxes],
            foreground=foreground,
            angle_map=angle,
        ))
    return scenes
