"""Synthetic video generation, affine augmentation, and frame/mask I/O.

Frames are [H, W, 3] float arrays in [0, 1]; masks are [H, W] integer label
maps with 0 = background. Sequences live on disk as binary PPM (P6) frames
and PGM (P5) masks under ``<seq>/frames/%05d.ppm`` and
``<seq>/masks/%05d.pgm``. All generators are deterministic under a seed.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, UsageError

_PALETTE = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.55, 0.90],
    [0.95, 0.80, 0.25],
    [0.45, 0.85, 0.35],
], dtype=np.float32)


@dataclass
class VideoSample:
    frames: list  # [H, W, 3] float32 in [0, 1]
    masks: list   # [H, W] int64 labels in {0..n_objects}
    n_objects: int

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise DimensionError(
                f"{len(self.frames)} frames vs {len(self.masks)} masks")
        for f, m in zip(self.frames, self.masks):
            if f.shape[:2] != m.shape:
                raise DimensionError(f"frame {f.shape} vs mask {m.shape}")
            if m.max(initial=0) > self.n_objects:
                raise DataError(f"mask label {m.max()} exceeds object count")


@dataclass
class AffineParams:
    """Joint image/mask warp: rotate, shear, scale, translate, then crop."""
    rotation: float = 0.0          # radians
    shear: tuple = (0.0, 0.0)
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)  # pixels (dy, dx)
    crop: tuple = None               # (y0, x0, h, w); None = full canvas

    def __post_init__(self):
        if self.scale <= 0:
            raise DataError(f"affine scale must be positive, got {self.scale}")

    def validate_crop(self, shape):
        if self.crop is None:
            return (0, 0, shape[0], shape[1])
        y0, x0, h, w = self.crop
        if h <= 1 or w <= 1 or y0 < 0 or x0 < 0 or y0 + h > shape[0] or x0 + w > shape[1]:
            raise DataError(f"degenerate crop {self.crop} for canvas {shape}")
        return self.crop


def _smooth_noise(rng, size, cells=8):
    """Low-frequency background texture: coarse noise, bilinear upsizing."""
    coarse = rng.uniform(0.25, 0.75, size=(cells, cells, 3)).astype(np.float32)
    idx = (np.arange(size) + 0.5) * cells / size - 0.5
    lo = np.clip(np.floor(idx).astype(int), 0, cells - 1)
    hi = np.clip(lo + 1, 0, cells - 1)
    frac = (idx - np.floor(idx)).astype(np.float32)
    rows = coarse[lo] * (1 - frac)[:, None, None] + coarse[hi] * frac[:, None, None]
    out = (rows[:, lo] * (1 - frac)[None, :, None]
           + rows[:, hi] * frac[None, :, None])
    return out


def _object_stamp(kind, extent):
    """Boolean footprint of a shape inside an extent x extent box."""
    if kind == "disk":
        yy, xx = np.mgrid[0:extent, 0:extent]
        r = (extent - 1) / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    return np.ones((extent, extent), dtype=bool)


def synth_moving_shapes(seed, n_frames, size, n_objects, object_extent=None,
                        velocity_cap=3, velocities=None):
    """Distinctly colored shapes translating over a textured background.

    Objects bounce off the canvas edges, so their true footprints never
    leave the frame; crossings occlude lower-numbered objects. Masks are
    exact by construction. ``velocities`` overrides the sampled per-object
    (dy, dx) steps; (0, 0) produces a static object.
    """
    if n_objects < 1 or n_objects > 4:
        raise UsageError(f"supported object counts are 1..4, got {n_objects}")
    if size < 32:
        raise UsageError(f"canvas must be at least 32 px, got {size}")
    rng = np.random.default_rng(seed)
    background = _smooth_noise(rng, size)
    if object_extent is None:
        object_extent = max(8, size * 3 // 8)
    if object_extent > size // 2 and n_objects > 1:
        raise DataError(
            f"objects of extent {object_extent} cannot be placed disjointly on {size} px")

    stamps = [_object_stamp("disk" if m % 2 else "rect",
                            max(6, object_extent - 2 * m)) for m in range(n_objects)]
    positions = []
    for stamp in stamps:
        placed = False
        for _ in range(200):
            e = stamp.shape[0]
            pos = rng.integers(0, size - e, size=2)
            box = (pos[0], pos[1], e)
            if all(not _boxes_overlap(box, (q[0], q[1], s.shape[0]))
                   for q, s in zip(positions, stamps[:len(positions)])):
                positions.append(pos.astype(np.int64))
                placed = True
                break
        if not placed:
            raise DataError(
                f"could not place {n_objects} objects of extent {object_extent} "
                f"disjointly on a {size} px canvas")
    if velocities is None:
        velocities = [rng.integers(-velocity_cap, velocity_cap + 1, size=2)
                      for _ in range(n_objects)]
        for v in velocities:
            if v[0] == 0 and v[1] == 0:
                v[0] = 1  # sampled objects always move
    else:
        if len(velocities) != n_objects:
            raise UsageError(f"{len(velocities)} velocities for {n_objects} objects")
        velocities = [np.asarray(v, dtype=np.int64) for v in velocities]

    frames, masks = [], []
    pos = [p.copy() for p in positions]
    vel = [v.copy() for v in velocities]
    for _ in range(n_frames):
        frame = background.copy()
        mask = np.zeros((size, size), dtype=np.int64)
        for m in range(n_objects):
            e = stamps[m].shape[0]
            y, x = int(pos[m][0]), int(pos[m][1])
            stamp = stamps[m]
            frame[y:y + e, x:x + e][stamp] = _PALETTE[m]
            mask[y:y + e, x:x + e][stamp] = m + 1
            for axis in (0, 1):
                pos[m][axis] += vel[m][axis]
                limit = size - e
                if pos[m][axis] < 0:
                    pos[m][axis] = -pos[m][axis]
                    vel[m][axis] = -vel[m][axis]
                elif pos[m][axis] > limit:
                    pos[m][axis] = 2 * limit - pos[m][axis]
                    vel[m][axis] = -vel[m][axis]
        frames.append(frame)
        masks.append(mask)
    return VideoSample(frames, masks, n_objects)


def _boxes_overlap(a, b):
    return not (a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0]
                or a[1] + a[2] <= b[1] or b[1] + b[2] <= a[1])


def sample_affine(rng, shape):
    """Moderate augmentation ranges: rotation +-15 deg, shear +-0.1,
    scale [0.9, 1.1], translation +-10% of extent, crop >= 90%."""
    h, w = shape
    ch = int(h * rng.uniform(0.9, 1.0))
    cw = int(w * rng.uniform(0.9, 1.0))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return AffineParams(
        rotation=math.radians(rng.uniform(-15, 15)),
        shear=(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)),
        scale=rng.uniform(0.9, 1.1),
        translation=(rng.uniform(-0.1, 0.1) * h, rng.uniform(-0.1, 0.1) * w),
        crop=(y0, x0, ch, cw),
    )


def _affine_matrix(params):
    c, s = math.cos(params.rotation), math.sin(params.rotation)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, params.shear[0]], [params.shear[1], 1.0]])
    return params.scale * (rot @ shear)


def apply_affine(image, mask, params):
    """Warp an image (bilinear) and its mask (nearest) by the same params.

    The output grid is the crop window resized back to the input extents;
    samples falling outside the canvas become background/black.
    """
    h, w = mask.shape
    y0, x0, ch, cw = params.validate_crop((h, w))
    a_inv = np.linalg.inv(_affine_matrix(params))
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.array(params.translation, dtype=np.float64)

    oy = y0 + (np.arange(h) + 0.5) * ch / h - 0.5
    ox = x0 + (np.arange(w) + 0.5) * cw / w - 0.5
    grid = np.stack(np.meshgrid(oy, ox, indexing="ij"), axis=-1)  # [H, W, 2]
    src = (grid - center - t) @ a_inv.T + center

    sy, sx = src[..., 0], src[..., 1]
    ny = np.rint(sy).astype(np.int64)
    nx = np.rint(sx).astype(np.int64)
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    warped_mask = np.zeros_like(mask)
    warped_mask[inside] = mask[ny[inside], nx[inside]]

    fy = np.clip(np.floor(sy).astype(np.int64), 0, h - 2)
    fx = np.clip(np.floor(sx).astype(np.int64), 0, w - 2)
    wy = np.clip(sy - fy, 0.0, 1.0)[..., None]
    wx = np.clip(sx - fx, 0.0, 1.0)[..., None]
    img = (image[fy, fx] * (1 - wy) * (1 - wx)
           + image[fy + 1, fx] * wy * (1 - wx)
           + image[fy, fx + 1] * (1 - wy) * wx
           + image[fy + 1, fx + 1] * wy * wx)
    in_canvas = (sy >= -0.5) & (sy <= h - 0.5) & (sx >= -0.5) & (sx <= w - 0.5)
    img = np.where(in_canvas[..., None], img, 0.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32), warped_mask


def synth_from_image(image, mask, seed, params=None):
    """Three pseudo-video frames from one annotated image via affine warps."""
    if image.shape[:2] != mask.shape:
        raise DimensionError(f"image {image.shape} vs mask {mask.shape}")
    rng = np.random.default_rng(seed)
    if params is None:
        params = [sample_affine(rng, mask.shape) for _ in range(3)]
    if len(params) != 3:
        raise UsageError(f"need exactly 3 affine parameter sets, got {len(params)}")
    frames, masks = [], []
    for p in params:
        f, m = apply_affine(image, mask, p)
        frames.append(f)
        masks.append(m)
    return VideoSample(frames, masks, int(max(m.max() for m in masks)))


def sample_training_triplet(n_frames, max_interval, rng):
    """Three ordered frame indices with consecutive gaps <= max(1, cap),
    uniform over all valid triples."""
    if n_frames < 3:
        raise UsageError(f"triplet sampling needs >= 3 frames, got {n_frames}")
    cap = max(1, int(max_interval))
    triples = [(a, b, c)
               for a in range(n_frames - 2)
               for b in range(a + 1, min(a + cap, n_frames - 1) + 1)
               for c in range(b + 1, min(b + cap, n_frames - 1) + 1)
               if b - a <= cap and c - b <= cap]
    return triples[int(rng.integers(0, len(triples)))]


# ---------------------------------------------------------------------------
# PPM / PGM

def _read_header(blob, magic, path):
    if blob[:2] != magic:
        raise DataError(f"{path}: bad magic {blob[:2]!r}, expected {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}, expected 255")
    return width, height, blob[pos:]


def read_ppm(path):
    """Binary P6 -> [H, W, 3] float32 scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, payload = _read_header(blob, b"P6", path)
    need = width * height * 3
    if len(payload) < need:
        raise DataError(f"{path}: short payload, {len(payload)} < {need} bytes")
    data = np.frombuffer(payload[:need], dtype=np.uint8)
    return (data.reshape(height, width, 3).astype(np.float32)) / 255.0


def write_ppm(frame, path):
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def read_pgm(path):
    """Binary P5 -> [H, W] int64 label map."""
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, payload = _read_header(blob, b"P5", path)
    need = width * height
    if len(payload) < need:
        raise DataError(f"{path}: short payload, {len(payload)} < {need} bytes")
    data = np.frombuffer(payload[:need], dtype=np.uint8)
    return data.reshape(height, width).astype(np.int64)


def write_pgm(labels, path):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError(f"labels outside [0, 255] cannot be written: "
                        f"[{labels.min()}, {labels.max()}]")
    arr = labels.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# sequence directories: <seq>/frames/%05d.ppm + <seq>/masks/%05d.pgm

def write_sequence(sample, root):
    frames_dir = os.path.join(root, "frames")
    masks_dir = os.path.join(root, "masks")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(sample.frames, sample.masks)):
        write_ppm(frame, os.path.join(frames_dir, f"{i:05d}.ppm"))
        write_pgm(mask, os.path.join(masks_dir, f"{i:05d}.pgm"))


def load_sequence(root, need_all_masks=False):
    """Load a sequence directory; at minimum frame 0 must have a mask."""
    frames_dir = os.path.join(root, "frames")
    masks_dir = os.path.join(root, "masks")
    if not os.path.isdir(frames_dir):
        raise DataError(f"{root}: missing frames/ directory")
    names = sorted(n for n in os.listdir(frames_dir) if n.endswith(".ppm"))
    if not names:
        raise DataError(f"{root}: no .ppm frames found")
    frames = [read_ppm(os.path.join(frames_dir, n)) for n in names]
    masks = []
    for n in names:
        mask_path = os.path.join(masks_dir, n.replace(".ppm", ".pgm"))
        if os.path.exists(mask_path):
            masks.append(read_pgm(mask_path))
        elif need_all_masks or not masks:
            raise DataError(f"{root}: missing mask {mask_path}")
        else:
            masks.append(None)
    n_objects = int(max(m.max() for m in masks if m is not None))
    return frames, masks, n_objects
