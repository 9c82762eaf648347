"""Procedural cartoon-face sprites with one binary attribute.

Each sprite is a face (ellipse) with two eyes and a mouth. The identity of a
sprite is a vector of continuous factors in [0, 1] (position, scale, aspect,
face hue, background, eye spacing, mouth width, mouth curvature). The
attribute is the direction of the mouth arc: 1 bends it into a smile, 0 into
a frown. How strongly the mouth bends is an identity factor, so the mouth
shape varies continuously within each class, the way expressions do. The
attribute occupies a small localized set of pixels ("the glyph"), so the
generator can always tell which label an image was rendered with.

Binary file layout (all little-endian)::

    offset  type        field
    0       4s          magic  b"FKDS"
    4       uint16      version (1)
    6       uint16      reserved (0)
    8       uint32 x5   N, H, W, C, F  (samples, height, width, channels, factors)
    28      uint64      manifest length in bytes
    36      float32     pixels, N*C*H*W, sample-major, channel-first
    ...     uint8       labels, N
    ...     uint8       split tags, N  (0 train, 1 val, 2 test)
    ...     float32     identity factors, N*F
    ...     utf-8       JSON manifest footer
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, FormatError

MAGIC = b"FKDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHH5IQ")

FACTOR_NAMES = (
    "pos_x",
    "pos_y",
    "scale",
    "aspect",
    "face_hue",
    "background",
    "eye_spacing",
    "mouth_width",
    "mouth_curve",
)
SPLIT_NAMES = ("train", "val", "test")
GENERATOR_VERSION = "sprites-2"


@dataclass(frozen=True)
class SpriteSpec:
    identity_factors: tuple[float, ...]
    attribute: int
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if len(self.identity_factors) != len(FACTOR_NAMES):
            raise ConfigurationError(
                f"expected {len(FACTOR_NAMES)} identity factors, got {len(self.identity_factors)}"
            )
        if any(not 0.0 <= f <= 1.0 for f in self.identity_factors):
            raise ConfigurationError("identity factors must lie in [0, 1]")
        if self.attribute not in (0, 1):
            raise ConfigurationError("attribute must be 0 or 1")
        _check_geometry(self.image_size, self.channels)

    def render(self) -> np.ndarray:
        return render_sprite(self.identity_factors, self.attribute, self.image_size, self.channels)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images (N, C, H, W) float32 in [0, 1], uint8 labels and split tags."""

    images: np.ndarray
    labels: np.ndarray
    factors: np.ndarray
    split_tags: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.images, self.labels, self.factors, self.split_tags):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.factors, other.factors)
            and np.array_equal(self.split_tags, other.split_tags)
            and self.manifest == other.manifest
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split_tags == SPLIT_NAMES.index(split))

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(name)
        return self.images[idx], self.labels[idx]

    def split_factors(self, name: str) -> np.ndarray:
        return self.factors[self.indices(name)]


def _check_geometry(image_size, channels):
    if image_size < 8:
        raise ConfigurationError(f"image_size must be >= 8, got {image_size}")
    if channels not in (1, 3):
        raise ConfigurationError(f"channels must be 1 or 3, got {channels}")


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _coverage(dist, half_width, pixel):
    # linear ramp over one pixel around the edge
    return np.clip(0.5 - (dist - half_width) / pixel, 0.0, 1.0)


def _geometry(factors):
    fx, fy, fs, fa, _, _, fe, fm = (float(f) for f in factors[:8])
    cx = 0.5 + (fx - 0.5) * 0.12
    cy = 0.5 + (fy - 0.5) * 0.12
    r = 0.30 + 0.08 * fs
    ry = r * (0.88 + 0.24 * fa)
    return cx, cy, r, ry, (0.28 + 0.14 * fe) * r, (0.38 + 0.18 * fm) * r


def _mouth_distance(xx, yy, factors, attribute):
    cx, cy, r, ry, _, mw = _geometry(factors)
    u = np.linspace(-1.0, 1.0, 48)
    ym = cy + 0.42 * ry
    # curvature magnitude is identity; its sign is the attribute
    bend = (0.12 + 0.22 * float(factors[8])) * r * (1.0 if attribute else -1.0)
    px = cx + u * mw
    py = ym + bend * (1.0 - u**2) - 0.5 * bend
    d2 = (xx[..., None] - px) ** 2 + (yy[..., None] - py) ** 2
    return np.sqrt(d2.min(axis=-1)), 0.075 * r


def render_sprite(factors, attribute: int, image_size: int = 32, channels: int = 3) -> np.ndarray:
    """Render one sprite as a float32 (C, H, W) array in [0, 1]. Pure function of its inputs."""
    _check_geometry(image_size, channels)
    pixel = 1.0 / image_size
    coords = (np.arange(image_size) + 0.5) * pixel
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy, r, ry, ex, _ = _geometry(factors)
    face_rgb = np.array(_hsv_to_rgb(float(factors[4]), 0.55, 0.95))
    bg_rgb = np.array(_hsv_to_rgb((float(factors[5]) + 0.5) % 1.0, 0.35, 0.25 + 0.2 * float(factors[5])))
    ink = np.array([0.05, 0.05, 0.08])

    # signed distance to the face ellipse, approximated in normalized radius units
    rho = np.sqrt(((xx - cx) / r) ** 2 + ((yy - cy) / ry) ** 2)
    face = _coverage((rho - 1.0) * min(r, ry), 0.0, pixel)
    img = bg_rgb[:, None, None] * (1 - face) + face_rgb[:, None, None] * face

    eye_r = 0.10 * r
    for sx in (-1.0, 1.0):
        d = np.sqrt((xx - (cx + sx * ex)) ** 2 + (yy - (cy - 0.25 * ry)) ** 2)
        a = _coverage(d, eye_r, pixel)
        img = img * (1 - a) + ink[:, None, None] * a

    dist, half = _mouth_distance(xx, yy, factors, attribute)
    a = _coverage(dist, half, pixel)
    img = img * (1 - a) + ink[:, None, None] * a

    if channels == 1:
        img = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def glyph_mask(factors, image_size: int = 32, threshold: float = 0.02) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose value depends on the attribute."""
    a = render_sprite(factors, 0, image_size, 3)
    b = render_sprite(factors, 1, image_size, 3)
    return np.abs(a - b).max(axis=0) > threshold


def pixel_rule_labels(images: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Exact oracle: for each image, pick the attribute whose rendering is nearer on the glyph.

    ``factors`` are the identity factors the images were generated (or edited) from.
    """
    images = np.asarray(images, dtype=np.float32)
    n, c, size, _ = images.shape
    out = np.empty(n, dtype=np.uint8)
    for i in range(n):
        r0 = render_sprite(factors[i], 0, size, c)
        r1 = render_sprite(factors[i], 1, size, c)
        mask = np.abs(r0 - r1).max(axis=0) > 0.02
        d0 = ((images[i] - r0)[:, mask] ** 2).sum()
        d1 = ((images[i] - r1)[:, mask] ** 2).sum()
        out[i] = 1 if d1 < d0 else 0
    return out


def _normalize_ranges(spec_ranges):
    ranges = {name: (0.0, 1.0) for name in FACTOR_NAMES}
    for name, bounds in (spec_ranges or {}).items():
        if name not in ranges:
            raise ConfigurationError(f"unknown identity factor {name!r}")
        lo, hi = (float(b) for b in bounds)
        if lo > hi:
            raise ConfigurationError(f"invalid bounds for {name}: min {lo} > max {hi}")
        if lo < 0.0 or hi > 1.0:
            raise ConfigurationError(f"bounds for {name} must lie within [0, 1]")
        ranges[name] = (lo, hi)
    return ranges


def _split_counts(n, splits):
    if splits is None:
        splits = {"train": 0.8, "val": 0.1, "test": 0.1}
    unknown = set(splits) - set(SPLIT_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown split names {sorted(unknown)}")
    values = [splits.get(s, 0) for s in SPLIT_NAMES]
    if all(isinstance(v, (int, np.integer)) for v in values) and sum(values) == n:
        counts = [int(v) for v in values]
    else:
        total = float(sum(values))
        if total <= 0 or any(v < 0 for v in values):
            raise ConfigurationError("split fractions must be non-negative with positive sum")
        counts = [int(np.floor(n * v / total)) for v in values]
        counts[0] += n - sum(counts)
    return dict(zip(SPLIT_NAMES, counts))


def generate_dataset(
    n: int,
    seed: int,
    spec_ranges: Mapping[str, tuple[float, float]] | None = None,
    image_size: int = 32,
    channels: int = 3,
    splits: Mapping[str, float] | None = None,
) -> Dataset:
    """Generate ``n`` labeled sprites.

    Identity factors and labels come from independent seeded streams. Labels
    are drawn i.i.d. Bernoulli(0.5) and then balance-corrected by flipping
    randomly chosen labels of the majority class (images are never resampled).
    """
    if n < 2:
        raise ConfigurationError(f"n must be >= 2, got {n}")
    _check_geometry(image_size, channels)
    ranges = _normalize_ranges(spec_ranges)
    target = n // 2
    if abs(target / n - 0.5) > 0.01:
        raise ConfigurationError(f"n={n} is too small to balance labels within 1%")
    counts = _split_counts(n, splits)

    factor_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    label_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    lo = np.array([ranges[k][0] for k in FACTOR_NAMES])
    hi = np.array([ranges[k][1] for k in FACTOR_NAMES])
    factors = (lo + (hi - lo) * factor_rng.random((n, len(FACTOR_NAMES)))).astype(np.float32)

    labels = (label_rng.random(n) < 0.5).astype(np.uint8)
    excess = int(labels.sum()) - target
    if excess:
        majority = 1 if excess > 0 else 0
        pool = np.flatnonzero(labels == majority)
        flip = label_rng.choice(pool, size=abs(excess), replace=False)
        labels[flip] = 1 - majority

    images = np.stack(
        [render_sprite(factors[i], int(labels[i]), image_size, channels) for i in range(n)]
    )
    split_tags = np.repeat(
        np.arange(len(SPLIT_NAMES), dtype=np.uint8), [counts[s] for s in SPLIT_NAMES]
    )
    manifest = {
        "generator": GENERATOR_VERSION,
        "seed": int(seed),
        "n": int(n),
        "image_size": int(image_size),
        "channels": int(channels),
        "factor_names": list(FACTOR_NAMES),
        "spec_ranges": {k: list(v) for k, v in ranges.items()},
        "split_counts": counts,
    }
    return Dataset(images, labels, factors, split_tags, manifest)


def save_dataset(d: Dataset, path) -> Path:
    path = Path(path)
    n, c, h, w = d.images.shape
    f = d.factors.shape[1]
    manifest = json.dumps(d.manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 0, n, h, w, c, f, len(manifest)))
        fh.write(np.ascontiguousarray(d.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(d.labels, dtype="u1").tobytes())
        fh.write(np.ascontiguousarray(d.split_tags, dtype="u1").tobytes())
        fh.write(np.ascontiguousarray(d.factors, dtype="<f4").tobytes())
        fh.write(manifest)
    tmp.replace(path)
    return path


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(raw)} bytes)", field="header")
    magic, version, _, n, h, w, c, f, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", field="magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", field="version")
    if c not in (1, 3) or h < 8 or w < 8:
        raise FormatError(f"implausible image geometry {c}x{h}x{w}", field="header")

    blocks = [
        ("pixels", n * c * h * w * 4),
        ("labels", n),
        ("split_tags", n),
        ("factors", n * f * 4),
        ("manifest", mlen),
    ]
    offset = _HEADER.size
    chunks = {}
    for name, size in blocks:
        if offset + size > len(raw):
            raise FormatError(
                f"{name} block truncated: need {size} bytes at offset {offset}, file has {len(raw)}",
                field=name,
            )
        chunks[name] = raw[offset:offset + size]
        offset += size
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after manifest", field="manifest")

    images = np.frombuffer(chunks["pixels"], dtype="<f4").reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(chunks["labels"], dtype="u1").copy()
    split_tags = np.frombuffer(chunks["split_tags"], dtype="u1").copy()
    factors = np.frombuffer(chunks["factors"], dtype="<f4").reshape(n, f).astype(np.float32)
    try:
        manifest = json.loads(chunks["manifest"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", field="manifest") from exc
    if labels.max(initial=0) > 1:
        raise FormatError("labels must be 0 or 1", field="labels")
    if split_tags.max(initial=0) >= len(SPLIT_NAMES):
        raise FormatError("unknown split tag", field="split_tags")
    return Dataset(images, labels, factors, split_tags, manifest)
