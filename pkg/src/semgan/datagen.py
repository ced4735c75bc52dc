"""Procedural paired datasets: (semantic description, image) examples.

Two flavors are generated, both pure functions of an integer seed:

* scene mode: 1..4 colored geometric shapes on a textured background, with a
  pixel-exclusive one-hot class map (channel 0 is background);
* keypoint mode: a stick figure of colored blobs and limbs, with one delta
  peak per joint channel.

Also derives the gating mask pyramid used by the class-specific adversarial
branches, and reads/writes the bit-exact "SDL1" dataset file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SDL1"
MODE_SCENE = "scene"
MODE_KEYPOINT = "keypoint"
_MODE_CODES = {MODE_SCENE: 0, MODE_KEYPOINT: 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}

# base colors (RGB in [0,1]); index 0 is the background class
PALETTE = np.array(
    [
        [0.25, 0.25, 0.28],
        [0.85, 0.20, 0.20],
        [0.20, 0.65, 0.90],
        [0.95, 0.80, 0.15],
        [0.30, 0.75, 0.30],
        [0.75, 0.30, 0.80],
        [0.95, 0.55, 0.15],
        [0.20, 0.30, 0.75],
        [0.55, 0.85, 0.75],
        [0.90, 0.45, 0.60],
        [0.55, 0.40, 0.20],
        [0.70, 0.70, 0.70],
    ]
)

# stick-figure joint tree: entry i is the parent of joint i (-1 = root)
SKELETON_PARENTS = (-1, 0, 1, 2, 2, 2, 4, 5, 6, 7, 0, 0, 10, 11, 12, 13, 3, 3)
# canonical joint offsets in a unit-height figure, (row, col) from the pelvis
SKELETON_POSE = np.array(
    [
        (0.00, 0.00),   # pelvis
        (-0.25, 0.00),  # spine
        (-0.50, 0.00),  # neck
        (-0.68, 0.00),  # head
        (-0.48, -0.18), # shoulders
        (-0.48, 0.18),
        (-0.28, -0.26), # elbows
        (-0.28, 0.26),
        (-0.08, -0.30), # hands
        (-0.08, 0.30),
        (0.02, -0.12),  # hips
        (0.02, 0.12),
        (0.30, -0.14),  # knees
        (0.30, 0.14),
        (0.58, -0.16),  # feet
        (0.58, 0.16),
        (-0.70, -0.10), # ears
        (-0.70, 0.10),
    ]
)


class DatasetFormatError(IOError):
    """Malformed, truncated or wrong-version dataset file."""


@dataclass
class Example:
    """One paired sample: image in [-1,1], semantics in [0,1], both float32."""

    image: np.ndarray      # (3, H, W)
    semantics: np.ndarray  # (K, H, W)
    seed: int


@dataclass
class Dataset:
    mode: str
    examples: list

    def __len__(self):
        return len(self.examples)

    @property
    def num_channels(self):
        return self.examples[0].semantics.shape[0]

    @property
    def image_hw(self):
        return self.examples[0].image.shape[1:]


# ---------------------------------------------------------------------------
# scene mode


def _raster_shape(rng, h, w):
    """Rasterize one random shape (rect/disk/triangle/stripe) as a bool mask."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = int(rng.integers(0, 4))
    if kind == 0:  # rectangle
        rh = int(rng.integers(h // 6, h // 2 + 1))
        rw = int(rng.integers(w // 6, w // 2 + 1))
        r0 = int(rng.integers(0, h - rh))
        c0 = int(rng.integers(0, w - rw))
        mask = np.zeros((h, w), dtype=bool)
        mask[r0 : r0 + rh, c0 : c0 + rw] = True
    elif kind == 1:  # disk
        r = float(rng.uniform(min(h, w) / 8.0, min(h, w) / 3.5))
        cy = float(rng.uniform(r, h - r))
        cx = float(rng.uniform(r, w - r))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == 2:  # triangle
        while True:
            pts = np.stack([rng.uniform(0, h, 3), rng.uniform(0, w, 3)], axis=1)
            area = 0.5 * abs(
                (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
            )
            if area >= h * w / 16.0:
                break
        mask = np.ones((h, w), dtype=bool)
        for i in range(3):
            a, b, c = pts[i], pts[(i + 1) % 3], pts[(i + 2) % 3]
            side = (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
            ref = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            mask &= side * ref >= 0
    else:  # diagonal stripe
        theta = float(rng.uniform(0, np.pi))
        width = float(rng.uniform(min(h, w) / 10.0, min(h, w) / 4.0))
        ny, nx = np.sin(theta), np.cos(theta)
        d0 = float(rng.uniform(0.2, 0.8)) * (ny * h + nx * w)
        mask = np.abs(ny * yy + nx * xx - d0) <= width / 2.0
    return mask


def gen_scene(seed, h, w, num_classes):
    """Generate one scene example; deterministic in (seed, h, w, num_classes)."""
    if num_classes < 2:
        raise ValueError("gen_scene: need at least 2 classes (background + 1)")
    if num_classes > len(PALETTE):
        raise ValueError(f"gen_scene: palette supports at most {len(PALETTE)} classes")
    if h < 16 or w < 16:
        raise ValueError("gen_scene: image must be at least 16x16")

    rng = np.random.default_rng((int(seed), 0x5CE2E))
    labels = np.zeros((h, w), dtype=np.int64)
    img = np.empty((3, h, w), dtype=np.float64)

    # textured background: jittered base hue plus a soft vertical ramp
    base = PALETTE[0] + rng.uniform(-0.08, 0.08, 3)
    ramp = np.linspace(-0.06, 0.06, h)[None, :, None]
    img[:] = base[:, None, None] + ramp

    n_shapes = int(rng.integers(1, 5))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        mask = _raster_shape(rng, h, w)
        color = PALETTE[cls] + rng.uniform(-0.08, 0.08, 3)
        labels[mask] = cls
        for ch in range(3):
            img[ch][mask] = color[ch]

    img += rng.normal(0.0, 0.04, size=img.shape)
    img = np.clip(img * 2.0 - 1.0, -1.0, 1.0)

    sem = np.zeros((num_classes, h, w), dtype=np.float32)
    for k in range(num_classes):
        sem[k] = labels == k
    return Example(image=img.astype(np.float32), semantics=sem, seed=int(seed))


# ---------------------------------------------------------------------------
# keypoint mode


def _joint_color(k, total):
    hue = (k / max(total, 1)) * 6.0
    i = int(hue) % 6
    f = hue - int(hue)
    p, q = 0.15, 1.0 - 0.85 * f
    t = 0.15 + 0.85 * f
    table = [(1, t, p), (q, 1, p), (p, 1, t), (p, q, 1), (t, p, 1), (1, p, q)]
    return np.array(table[i])


def gen_keypoint(seed, h, w, num_keypoints):
    """Generate one stick-figure example with delta-peak joint channels."""
    if num_keypoints < 2:
        raise ValueError("gen_keypoint: need at least 2 keypoints")
    rng = np.random.default_rng((int(seed), 0xB0DE5))

    k = num_keypoints
    reps = (k + len(SKELETON_POSE) - 1) // len(SKELETON_POSE)
    pose = np.tile(SKELETON_POSE, (reps, 1))[:k].copy()
    parents = [
        SKELETON_PARENTS[i % len(SKELETON_PARENTS)] if i < len(SKELETON_PARENTS) else i - 1
        for i in range(k)
    ]

    scale = float(rng.uniform(0.30, 0.42)) * min(h, w)
    angle = float(rng.uniform(-0.25, 0.25))
    ca, sa = np.cos(angle), np.sin(angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    jitter = rng.normal(0.0, 0.03, size=pose.shape)
    pts = (pose + jitter) @ rot.T * scale
    center = np.array(
        [rng.uniform(0.40 * h, 0.60 * h), rng.uniform(0.40 * w, 0.60 * w)]
    )
    pts = pts + center
    pts[:, 0] = np.clip(pts[:, 0], 1.0, h - 2.0)
    pts[:, 1] = np.clip(pts[:, 1], 1.0, w - 2.0)

    present = np.ones(k, dtype=bool)
    for i in range(1, k):
        if rng.random() < 0.08:
            present[i] = False

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w), dtype=np.float64)
    bg = np.array([0.08, 0.08, 0.10]) + rng.uniform(-0.03, 0.03, 3)
    img[:] = bg[:, None, None]

    limb_w = max(1.5, min(h, w) / 24.0)
    for i in range(k):
        pi = parents[i]
        if pi < 0 or not (present[i] and present[pi]):
            continue
        a, b = pts[pi], pts[i]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-9:
            continue
        tproj = np.clip(((yy - a[0]) * ab[0] + (xx - a[1]) * ab[1]) / denom, 0.0, 1.0)
        d2 = (yy - (a[0] + tproj * ab[0])) ** 2 + (xx - (a[1] + tproj * ab[1])) ** 2
        seg = d2 <= limb_w**2
        col = 0.5 * (_joint_color(i, k) + _joint_color(pi, k)) * 0.6
        for ch in range(3):
            img[ch][seg] = col[ch]

    blob_r = max(2.0, min(h, w) / 16.0)
    for i in range(k):
        if not present[i]:
            continue
        d2 = (yy - pts[i, 0]) ** 2 + (xx - pts[i, 1]) ** 2
        blob = d2 <= blob_r**2
        col = _joint_color(i, k)
        for ch in range(3):
            img[ch][blob] = col[ch]

    img += rng.normal(0.0, 0.03, size=img.shape)
    img = np.clip(img * 2.0 - 1.0, -1.0, 1.0)

    sem = np.zeros((k, h, w), dtype=np.float32)
    for i in range(k):
        if present[i]:
            sem[i, int(round(pts[i, 0])), int(round(pts[i, 1]))] = 1.0
    return Example(image=img.astype(np.float32), semantics=sem, seed=int(seed))


def gen_dataset(mode, n, h, w, k, seed):
    """Generate n examples; example i is a pure function of (seed, i)."""
    gen = gen_scene if mode == MODE_SCENE else gen_keypoint
    examples = [gen((int(seed) << 20) + i, h, w, k) for i in range(n)]
    return Dataset(mode=mode, examples=examples)


# ---------------------------------------------------------------------------
# gating masks


def downsample_max(plane, out_h, out_w):
    """Covering-cell max reduction; output pixel (i,j) is the max over the
    input cells it covers. Exact block max when the factors divide."""
    h, w = plane.shape
    if h % out_h == 0 and w % out_w == 0:
        fh, fw = h // out_h, w // out_w
        return plane.reshape(out_h, fh, out_w, fw).max(axis=(1, 3))
    out = np.empty((out_h, out_w), dtype=plane.dtype)
    rb = (np.arange(out_h + 1) * h) // out_h
    cb = (np.arange(out_w + 1) * w) // out_w
    for i in range(out_h):
        for j in range(out_w):
            out[i, j] = plane[rb[i] : max(rb[i + 1], rb[i] + 1), cb[j] : max(cb[j + 1], cb[j] + 1)].max()
    return out


def masks_from_scene(semantics, out_h, out_w):
    """Gating masks for scene semantics: max-pooled class masks plus an
    all-ones coarse mask in slot 0. Returns (K+1, out_h, out_w) float64."""
    k, h, w = semantics.shape
    masks = np.empty((k + 1, out_h, out_w), dtype=np.float64)
    masks[0] = 1.0
    for i in range(k):
        masks[i + 1] = downsample_max(np.asarray(semantics[i], dtype=np.float64), out_h, out_w)
    return masks


def masks_from_keypoints(semantics, out_h, out_w, sigma=6.0, sigma_is_variance=False):
    """Gating masks for keypoint semantics: unit-peak gaussians around each
    joint, evaluated in input-pixel units at the centers of the output grid.
    Absent joints (all-zero channels) give all-zero masks; slot 0 is ones.

    sigma is the standard deviation in pixels; pass sigma_is_variance=True to
    interpret the value as a variance instead.
    """
    k, h, w = semantics.shape
    sd = float(np.sqrt(sigma)) if sigma_is_variance else float(sigma)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    masks = np.zeros((k + 1, out_h, out_w), dtype=np.float64)
    masks[0] = 1.0
    for i in range(k):
        chan = semantics[i]
        if chan.max() < 1.0:
            continue
        r, c = np.unravel_index(int(chan.argmax()), chan.shape)
        d2 = (ys[:, None] - r) ** 2 + (xs[None, :] - c) ** 2
        masks[i + 1] = np.exp(-d2 / (2.0 * sd * sd))
    return masks


def build_masks(mode, semantics, out_h, out_w, sigma=6.0, sigma_is_variance=False):
    if mode == MODE_SCENE:
        return masks_from_scene(semantics, out_h, out_w)
    return masks_from_keypoints(semantics, out_h, out_w, sigma, sigma_is_variance)


# ---------------------------------------------------------------------------
# file format: magic "SDL1", little-endian u32 header (mode, count, H, W, K),
# then one record per example: u64 seed, f32 image planes, f32 semantics


def write_dataset(path, dataset):
    h, w = dataset.image_hw
    k = dataset.num_channels
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", _MODE_CODES[dataset.mode], len(dataset), h, w, k))
        for ex in dataset.examples:
            if ex.image.shape != (3, h, w) or ex.semantics.shape != (k, h, w):
                raise ValueError("write_dataset: inconsistent example shapes")
            fh.write(struct.pack("<Q", ex.seed & 0xFFFFFFFFFFFFFFFF))
            fh.write(np.ascontiguousarray(ex.image, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ex.semantics, dtype="<f4").tobytes())


def read_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DatasetFormatError(f"{path}: truncated header")
    magic = blob[:4]
    if magic != MAGIC:
        if magic[:3] == MAGIC[:3]:
            raise DatasetFormatError(f"{path}: unsupported format version {magic!r}")
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if len(blob) < 24:
        raise DatasetFormatError(f"{path}: truncated header")
    mode_code, count, h, w, k = struct.unpack("<5I", blob[4:24])
    if mode_code not in _CODE_MODES:
        raise DatasetFormatError(f"{path}: unknown mode code {mode_code}")
    rec = 8 + 4 * (3 + k) * h * w
    expected = 24 + count * rec
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} bytes for {count} examples, found {len(blob)}"
        )
    examples = []
    off = 24
    for _ in range(count):
        (seed,) = struct.unpack_from("<Q", blob, off)
        off += 8
        img = np.frombuffer(blob, dtype="<f4", count=3 * h * w, offset=off).reshape(3, h, w)
        off += 4 * 3 * h * w
        sem = np.frombuffer(blob, dtype="<f4", count=k * h * w, offset=off).reshape(k, h, w)
        off += 4 * k * h * w
        examples.append(Example(image=img.copy(), semantics=sem.copy(), seed=seed))
    return Dataset(mode=_CODE_MODES[mode_code], examples=examples)


# ---------------------------------------------------------------------------
# PNG export for visual inspection


def image_to_uint8(image):
    """Map a (3,H,W) image in [-1,1] to (H,W,3) uint8."""
    arr = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return arr.transpose(1, 2, 0).astype(np.uint8)


def semantics_to_uint8(mode, semantics):
    """Colorize a semantic map: palette colors for classes, max-over-channel
    joint colors for keypoint heatmaps."""
    k, h, w = semantics.shape
    if mode == MODE_SCENE:
        labels = np.asarray(semantics).argmax(axis=0)
        return (PALETTE[labels] * 255).astype(np.uint8)
    out = np.zeros((h, w, 3), dtype=np.float64)
    for i in range(k):
        # paint a small halo around each peak so single pixels stay visible
        chan = np.asarray(semantics[i], dtype=np.float64)
        if chan.max() < 1.0:
            continue
        r, c = np.unravel_index(int(chan.argmax()), chan.shape)
        yy, xx = np.mgrid[0:h, 0:w]
        halo = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / 8.0)
        out = np.maximum(out, halo[:, :, None] * _joint_color(i, k))
    return (np.clip(out, 0, 1) * 255).astype(np.uint8)


def save_png(path, rgb_uint8):
    from PIL import Image

    Image.fromarray(rgb_uint8, mode="RGB").save(path)


def save_preview(dataset, out_dir, count=8):
    import os

    os.makedirs(out_dir, exist_ok=True)
    for i, ex in enumerate(dataset.examples[:count]):
        save_png(os.path.join(out_dir, f"example_{i:03d}_image.png"), image_to_uint8(ex.image))
        save_png(
            os.path.join(out_dir, f"example_{i:03d}_semantics.png"),
            semantics_to_uint8(dataset.mode, ex.semantics),
        )
