"""Datasets, IDX files and the synthetic glyph problem.

The synthetic problem stands in for a real image-classification task.  Each
class is a glyph family (bars, diagonals, rings, ...) drawn with anti-aliased
strokes.  ODD and TD share one rendering style; PDD uses a shifted style
(different background texture, stroke statistics and jitter); NPDD is
class-free clutter: random strokes, blobs and textures in colour.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNLABELED = -1
_UNLABELED_BYTE = 0xFF

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class Provenance(str, enum.Enum):
    ODD = "ODD"
    PDD = "PDD"
    NPDD = "NPDD"
    TD = "TD"
    FAKE_NPD = "FAKE_NPD"
    FAKE_PD = "FAKE_PD"
    GENERIC = "GENERIC"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64, UNLABELED allowed only for NPDD
    n_classes: int
    provenance: Provenance

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        floor = UNLABELED if self.provenance == Provenance.NPDD else 0
        if labels.size and (labels.min() < floor or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [{floor}, {self.n_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_classes)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.n_classes, self.provenance)

    def with_labels(self, labels, n_classes: int | None = None, provenance=None) -> "LabeledDataset":
        return LabeledDataset(self.images, labels, n_classes or self.n_classes,
                              provenance or self.provenance)


def concat(datasets: list[LabeledDataset]) -> LabeledDataset:
    first = datasets[0]
    return LabeledDataset(np.concatenate([d.images for d in datasets]),
                          np.concatenate([d.labels for d in datasets]),
                          first.n_classes, first.provenance)


def quantize(images: np.ndarray) -> np.ndarray:
    """Snap values to the u8 grid v = k/255 used by files and the wire."""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# synthetic problem

# mirror-symmetric families first: horizontal_flip must not change the class
GLYPHS = ("hbar", "vbar", "ring", "plus", "square", "disk", "cross", "triangle", "slash", "backslash")


@dataclass(frozen=True)
class DomainStyle:
    background: str = "flat"           # flat | stripes | gradient | noise
    thickness: tuple[float, float] = (1.2, 2.0)
    jitter: float = 0.15               # centre offset, fraction of half-size
    size: tuple[float, float] = (0.55, 0.8)
    rotation_deg: float = 8.0
    contrast: tuple[float, float] = (0.55, 0.9)
    pixel_noise: float = 0.03


ORIGINAL_STYLE = DomainStyle()
SHIFTED_STYLE = DomainStyle(background="stripes", thickness=(2.0, 3.0), jitter=0.3,
                            size=(0.45, 0.85), rotation_deg=15.0, contrast=(0.4, 0.8),
                            pixel_noise=0.05)


@dataclass
class SynthProblemConfig:
    n_classes: int = 4
    image_size: tuple[int, int] = (16, 16)
    odd_size: int = 2000
    pdd_size: int = 80
    npdd_size: int = 20000
    td_size: int = 400
    shift: DomainStyle = SHIFTED_STYLE
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if isinstance(self.shift, dict):
            self.shift = style_from_dict(self.shift)
        if not 2 <= self.n_classes <= len(GLYPHS):
            raise ValueError(f"n_classes must lie in [2, {len(GLYPHS)}]")
        if min(self.image_size) < 4:
            raise ValueError("image_size must be at least 4x4")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        for name in ("odd_size", "pdd_size", "td_size"):
            if getattr(self, name) < self.n_classes:
                raise ValueError(f"{name} must be >= n_classes ({self.n_classes})")
        if self.npdd_size < 0:
            raise ValueError("npdd_size must be non-negative")


def style_from_dict(d: dict) -> DomainStyle:
    d = dict(d)
    for key in ("thickness", "size", "contrast"):
        if key in d:
            d[key] = tuple(d[key])
    return DomainStyle(**d)


def _grid(h: int, w: int):
    # pixel centres in [-1, 1]
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    return np.meshgrid(ys, xs, indexing="ij")


def _segment_distance(y, x, p0, p1):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    denom = dy * dy + dx * dx
    t = np.clip(((y - y0) * dy + (x - x0) * dx) / denom, 0.0, 1.0) if denom > 0 else 0.0
    return np.hypot(y - (y0 + t * dy), x - (x0 + t * dx))


def _glyph_shapes(name: str):
    """Segments and circles in unit glyph coordinates ([-1, 1]^2)."""
    segs, circles, disks = [], [], []
    if name == "hbar":
        segs = [((0, -1), (0, 1))]
    elif name == "vbar":
        segs = [((-1, 0), (1, 0))]
    elif name == "slash":
        segs = [((0.85, -0.85), (-0.85, 0.85))]
    elif name == "backslash":
        segs = [((-0.85, -0.85), (0.85, 0.85))]
    elif name == "ring":
        circles = [0.8]
    elif name == "plus":
        segs = [((0, -1), (0, 1)), ((-1, 0), (1, 0))]
    elif name == "cross":
        segs = [((0.85, -0.85), (-0.85, 0.85)), ((-0.85, -0.85), (0.85, 0.85))]
    elif name == "square":
        c = [(-0.75, -0.75), (-0.75, 0.75), (0.75, 0.75), (0.75, -0.75)]
        segs = [(c[i], c[(i + 1) % 4]) for i in range(4)]
    elif name == "triangle":
        c = [(-0.8, 0.0), (0.7, 0.85), (0.7, -0.85)]
        segs = [(c[i], c[(i + 1) % 3]) for i in range(3)]
    elif name == "disk":
        disks = [0.6]
    else:
        raise ValueError(f"unknown glyph {name!r}")
    return segs, circles, disks


def _background(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    y, x = _grid(h, w)
    level = rng.uniform(0.0, 0.3)
    if kind == "flat":
        return np.full((h, w), level)
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 5.0)
        amp = rng.uniform(0.1, 0.25)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * np.pi * (y * np.cos(theta) + x * np.sin(theta)) + phase)
        return level + amp * (wave + 1) / 2
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.1, 0.3)
        return level + amp * ((y * np.cos(theta) + x * np.sin(theta)) + 1) / 2
    if kind == "noise":
        return level + rng.uniform(0.0, 0.25) * rng.random((h, w))
    raise ValueError(f"unknown background {kind!r}")


def render_glyph(glyph: str, style: DomainStyle, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """One grayscale (H, W) image of a glyph drawn in ``style``."""
    y, x = _grid(h, w)
    bg = _background(style.background, h, w, rng)
    scale = rng.uniform(*style.size)
    cy, cx = rng.uniform(-style.jitter, style.jitter, size=2) * scale
    angle = np.deg2rad(rng.uniform(-style.rotation_deg, style.rotation_deg))
    thickness = rng.uniform(*style.thickness) / (h / 2)  # pixels -> unit coords
    ink = rng.uniform(*style.contrast)
    # glyph-frame coordinates
    gy = ((y - cy) * np.cos(angle) + (x - cx) * np.sin(angle)) / scale
    gx = (-(y - cy) * np.sin(angle) + (x - cx) * np.cos(angle)) / scale
    half_px = 1.0 / (h / 2)
    segs, circles, disks = _glyph_shapes(glyph)
    dist = np.full((h, w), np.inf)
    for p0, p1 in segs:
        dist = np.minimum(dist, _segment_distance(gy, gx, p0, p1) * scale)
    for r in circles:
        dist = np.minimum(dist, np.abs(np.hypot(gy, gx) - r) * scale)
    for r in disks:
        dist = np.minimum(dist, np.maximum(np.hypot(gy, gx) - r, 0.0) * scale)
    alpha = np.clip((thickness / 2 - dist) / half_px + 0.5, 0.0, 1.0)
    img = bg * (1 - alpha) + (bg + ink) * alpha
    img = img + style.pixel_noise * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0)


def _balanced_labels(size: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(size) % n_classes
    return rng.permutation(labels)


def _render_split(n: int, n_classes: int, style: DomainStyle, cfg: SynthProblemConfig,
                  seed_seq: np.random.SeedSequence, provenance: Provenance) -> LabeledDataset:
    rng = np.random.default_rng(seed_seq)
    h, w = cfg.image_size
    labels = _balanced_labels(n, n_classes, rng)
    images = np.empty((n, cfg.channels, h, w))
    for i, label in enumerate(labels):
        gray = render_glyph(GLYPHS[label], style, h, w, rng)
        if cfg.channels == 3:
            tint = rng.uniform(0.85, 1.0, size=3)
            images[i] = np.clip(gray[None] * tint[:, None, None], 0, 1)
        else:
            images[i, 0] = gray
    return LabeledDataset(quantize(images), labels, n_classes, provenance)


def render_clutter(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A class-free RGB (3, H, W) image: textured background plus random primitives."""
    y, x = _grid(h, w)
    kind = rng.choice(["flat", "stripes", "gradient", "noise"])
    base = _background(str(kind), h, w, rng)
    tint = rng.uniform(0.3, 1.0, size=3)
    img = np.clip(base[None] * tint[:, None, None] * 2.0, 0, 1)
    for _ in range(rng.integers(1, 5)):
        colour = rng.uniform(0, 1, size=3)
        px = 1.0 / (h / 2)
        shape = rng.integers(0, 3)
        if shape == 0:  # stroke
            p0 = tuple(rng.uniform(-1, 1, size=2))
            p1 = tuple(rng.uniform(-1, 1, size=2))
            dist = _segment_distance(y, x, p0, p1)
            alpha = np.clip((rng.uniform(1.0, 3.0) * px / 2 - dist) / px + 0.5, 0, 1)
        elif shape == 1:  # ellipse outline or blob
            cy, cx = rng.uniform(-0.8, 0.8, size=2)
            ry, rx = rng.uniform(0.15, 0.9, size=2)
            rho = np.hypot((y - cy) / ry, (x - cx) / rx)
            if rng.random() < 0.5:
                alpha = np.clip((1.0 - rho) / (px / min(ry, rx)) + 0.5, 0, 1)
            else:
                alpha = np.clip((rng.uniform(1.0, 3.0) * px / 2 - np.abs(rho - 1) * min(ry, rx)) / px + 0.5, 0, 1)
        else:  # rectangle
            y0, y1 = np.sort(rng.uniform(-1, 1, size=2))
            x0, x1 = np.sort(rng.uniform(-1, 1, size=2))
            alpha = ((y >= y0) & (y <= y1) & (x >= x0) & (x <= x1)).astype(float)
        img = img * (1 - alpha) + colour[:, None, None] * alpha
    img = img + rng.uniform(0, 0.05) * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_npdd(n: int, image_size, seed) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    h, w = image_size
    images = np.empty((n, 3, h, w))
    for i in range(n):
        images[i] = render_clutter(h, w, rng)
    return LabeledDataset(quantize(images), np.full(n, UNLABELED), 1, Provenance.NPDD)


def synth_problem(config: SynthProblemConfig) -> dict[str, LabeledDataset]:
    """ODD, PDD, NPDD and TD splits; bitwise deterministic in ``config.seed``."""
    odd_seq, pdd_seq, npdd_seq, td_seq = np.random.SeedSequence(int(config.seed)).spawn(4)
    k = config.n_classes
    odd = _render_split(config.odd_size, k, ORIGINAL_STYLE, config, odd_seq, Provenance.ODD)
    td = _render_split(config.td_size, k, ORIGINAL_STYLE, config, td_seq, Provenance.TD)
    pdd = _render_split(config.pdd_size, k, config.shift, config, pdd_seq, Provenance.PDD)
    npdd = synth_npdd(config.npdd_size, config.image_size, npdd_seq)
    return {"odd": odd, "pdd": pdd, "npdd": npdd, "td": td}


GENERIC_FAMILIES = ("stripes", "gradient", "noise", "blob", "rect", "strokes")


def synth_generic(n: int, image_size, channels: int, seed: int) -> LabeledDataset:
    """Texture-family classification used to pretrain backbones.

    Shares no renderer state with :func:`synth_problem`; the six classes are
    background/primitive families, not glyphs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E6E]))
    h, w = image_size
    y, x = _grid(h, w)
    px = 1.0 / (h / 2)
    labels = _balanced_labels(n, len(GENERIC_FAMILIES), rng)
    images = np.empty((n, channels, h, w))
    for i, label in enumerate(labels):
        family = GENERIC_FAMILIES[label]
        if family in ("stripes", "gradient", "noise"):
            gray = _background(family, h, w, rng)
            gray = (gray - gray.min()) / max(gray.max() - gray.min(), 1e-9) * rng.uniform(0.5, 1.0)
        elif family == "blob":
            cy, cx = rng.uniform(-0.6, 0.6, size=2)
            r = rng.uniform(0.2, 0.6)
            gray = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * r * r)) * rng.uniform(0.5, 1.0)
        elif family == "rect":
            y0, y1 = np.sort(rng.uniform(-1, 1, size=2))
            x0, x1 = np.sort(rng.uniform(-1, 1, size=2))
            gray = ((y >= y0) & (y <= y1) & (x >= x0) & (x <= x1)) * rng.uniform(0.5, 1.0)
        else:
            gray = np.zeros((h, w))
            for _ in range(rng.integers(3, 6)):
                dist = _segment_distance(y, x, tuple(rng.uniform(-1, 1, 2)), tuple(rng.uniform(-1, 1, 2)))
                gray = np.maximum(gray, np.clip((1.5 * px / 2 - dist) / px + 0.5, 0, 1))
            gray = gray * rng.uniform(0.5, 1.0)
        gray = np.clip(gray + 0.03 * rng.standard_normal((h, w)), 0, 1)
        images[i] = gray[None] if channels == 1 else np.repeat(gray[None], channels, axis=0)
    return LabeledDataset(quantize(images), labels, len(GENERIC_FAMILIES), Provenance.GENERIC)


# ---------------------------------------------------------------------------
# preprocessing


def to_grayscale(dataset: LabeledDataset) -> LabeledDataset:
    """ITU-R 601 luma; single-channel input passes through unchanged."""
    c = dataset.images.shape[1]
    if c == 1:
        return dataset
    if c != 3:
        raise ValueError(f"to_grayscale needs 1 or 3 channels, got {c}")
    r, g, b = LUMA_WEIGHTS
    imgs = dataset.images
    gray = r * imgs[:, 0] + g * imgs[:, 1] + b * imgs[:, 2]
    return LabeledDataset(np.clip(gray, 0.0, 1.0)[:, None], dataset.labels, dataset.n_classes,
                          dataset.provenance)


def filter_classes(dataset: LabeledDataset, excluded) -> LabeledDataset:
    """Drop ``excluded`` classes and renumber the rest densely, keeping order."""
    excluded = {int(c) for c in excluded}
    if any(c < 0 or c >= dataset.n_classes for c in excluded):
        raise ValueError(f"excluded classes must lie in [0, {dataset.n_classes})")
    if not excluded:
        return dataset
    kept = [c for c in range(dataset.n_classes) if c not in excluded]
    if not kept:
        raise ValueError("cannot exclude every class")
    remap = np.full(dataset.n_classes, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    mask = np.isin(dataset.labels, kept)
    return LabeledDataset(dataset.images[mask], remap[dataset.labels[mask]], len(kept),
                          dataset.provenance)


# ---------------------------------------------------------------------------
# IDX files


class IdxError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


_IMAGE_MAGIC = {3: 0x00000803, 4: 0x00000804}
_LABEL_MAGIC = 0x00000801


def save_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Images as u8 rank-3 (single channel) or rank-4 (N, C, H, W); labels as u8."""
    n, c, h, w = dataset.images.shape
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    if c == 1:
        header = struct.pack(">IIII", _IMAGE_MAGIC[3], n, h, w)
    else:
        header = struct.pack(">IIIII", _IMAGE_MAGIC[4], n, c, h, w)
    Path(images_path).write_bytes(header + pixels.tobytes())
    labels = dataset.labels
    if labels.max(initial=0) >= _UNLABELED_BYTE:
        raise ValueError("labels must be < 255 to fit the IDX label format")
    encoded = np.where(labels == UNLABELED, _UNLABELED_BYTE, labels).astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", _LABEL_MAGIC, n) + encoded.tobytes())


def _read_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(path, len(raw), "file shorter than the magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    rank = {v: k for k, v in _IMAGE_MAGIC.items()}.get(magic)
    if rank is None:
        raise IdxMagicError(path, 0, f"bad image magic 0x{magic:08x}")
    if len(raw) < 4 + 4 * rank:
        raise IdxTruncatedError(path, len(raw), f"header needs {4 + 4 * rank} bytes")
    dims = struct.unpack_from(f">{rank}I", raw, 4)
    start = 4 + 4 * rank
    need = int(np.prod(dims))
    if len(raw) - start < need:
        raise IdxTruncatedError(path, len(raw), f"expected {need} pixel bytes after offset {start}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=start).reshape(dims)
    if rank == 3:
        pixels = pixels[:, None]
    return pixels.astype(np.float64) / 255.0


def _read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(path, len(raw), "file shorter than the magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != _LABEL_MAGIC:
        raise IdxMagicError(path, 0, f"bad label magic 0x{magic:08x}")
    if len(raw) < 8:
        raise IdxTruncatedError(path, len(raw), "missing label count")
    (n,) = struct.unpack_from(">I", raw, 4)
    if len(raw) - 8 < n:
        raise IdxTruncatedError(path, len(raw), f"expected {n} label bytes after offset 8")
    encoded = np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return np.where(encoded == _UNLABELED_BYTE, UNLABELED, encoded)


def load_idx(images_path, labels_path, n_classes: int | None = None,
             provenance: Provenance | str | None = None) -> LabeledDataset:
    images = _read_images(images_path)
    labels = _read_labels(labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatch(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    labeled = labels[labels >= 0]
    if provenance is None:
        provenance = Provenance.NPDD if len(labeled) < len(labels) else Provenance.ODD
    if n_classes is None:
        n_classes = int(labeled.max()) + 1 if labeled.size else 1
    return LabeledDataset(images, labels, n_classes, Provenance(provenance))


def load_idx_images(path) -> np.ndarray:
    """Only the image file: enough for querying an oracle."""
    return _read_images(path)


def dataset_summary(d: LabeledDataset) -> dict:
    return {"n": len(d), "shape": list(d.image_shape), "n_classes": d.n_classes,
            "provenance": d.provenance.value, "class_counts": d.class_counts().tolist()}
