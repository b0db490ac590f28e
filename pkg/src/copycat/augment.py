"""Label-preserving augmentation: 12 base ops, 22 composed types, 3 draws each.

A registry entry lists ops with *ranges*; :func:`augment_image` samples a
concrete value per parameter from the range and calls :func:`base_op` with it.
"""
from __future__ import annotations

import hashlib
import json
from importlib import resources

import numpy as np
from scipy import ndimage

from .data import LabeledDataset

SYNTHETICS_PER_TYPE = 3
N_TYPES = 22

# versioned parameter table: name -> {param: (lo, hi)}
PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "add_sub_intensity": {"delta": (-0.1, 0.1)},
    "contrast_normalization": {"alpha": (0.75, 1.25)},
    "crop": {"fraction": (0.0, 0.1)},
    "horizontal_flip": {},
    "gaussian_blur": {"sigma": (0.0, 1.0)},
    "gaussian_noise": {"scale": (0.0, 0.05)},
    "piecewise_affine": {"scale": (0.01, 0.04)},
    "rotate": {"degrees": (-20.0, 20.0)},
    "scale": {"factor": (0.85, 1.15)},
    "sharpen": {"alpha": (0.0, 1.0)},
    "shear": {"degrees": (-15.0, 15.0)},
    "translate": {"fraction": (-0.1, 0.1)},
}
BASE_OPS = tuple(PARAM_RANGES)

_COMPOSITIONS = [
    ("horizontal_flip", "rotate"),
    ("horizontal_flip", "translate"),
    ("crop", "scale"),
    ("gaussian_blur", "gaussian_noise"),
    ("rotate", "shear"),
    ("add_sub_intensity", "contrast_normalization"),
    ("translate", "gaussian_noise"),
    ("scale", "rotate"),
    ("sharpen", "contrast_normalization"),
    ("piecewise_affine", "horizontal_flip"),
]


def _op_entry(op: str) -> dict:
    return {"op": op, "params": {k: list(v) for k, v in PARAM_RANGES[op].items()}}


def default_registry() -> list[dict]:
    """Types 0-11 are the single base ops; 12-21 are fixed two-op compositions."""
    types = [{"id": i, "name": op, "ops": [_op_entry(op)]} for i, op in enumerate(BASE_OPS)]
    for j, ops in enumerate(_COMPOSITIONS):
        types.append({"id": len(BASE_OPS) + j, "name": "+".join(ops), "ops": [_op_entry(o) for o in ops]})
    return types


def registry_digest(registry: list[dict]) -> str:
    canonical = json.dumps(registry, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


DEFAULT_REGISTRY_SHA256 = "b13b740c07f800096c352e29eafc1703e10da165eb19f2a676ad985d2d02737e"


def validate_registry(registry: list[dict]) -> None:
    if len(registry) != N_TYPES:
        raise ValueError(f"registry must hold exactly {N_TYPES} types, got {len(registry)}")
    for i, entry in enumerate(registry):
        if entry.get("id") != i:
            raise ValueError(f"registry entry {i} has id {entry.get('id')!r}")
        if not entry.get("ops"):
            raise ValueError(f"registry entry {i} has no ops")
        for spec in entry["ops"]:
            if spec["op"] not in PARAM_RANGES:
                raise ValueError(f"registry entry {i} uses unknown op {spec['op']!r}")
            allowed = PARAM_RANGES[spec["op"]]
            for name, (lo, hi) in spec.get("params", {}).items():
                if name not in allowed:
                    raise ValueError(f"{spec['op']} has no parameter {name!r}")
                a_lo, a_hi = allowed[name]
                if not a_lo <= lo <= hi <= a_hi:
                    raise ValueError(f"{spec['op']}.{name} range [{lo}, {hi}] outside [{a_lo}, {a_hi}]")


def load_registry(path=None) -> list[dict]:
    """Read a registry JSON file; the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("copycat").joinpath("augment_registry.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    registry = json.loads(text)
    validate_registry(registry)
    return registry


def write_registry(path, registry: list[dict] | None = None) -> None:
    registry = default_registry() if registry is None else registry
    validate_registry(registry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(registry, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# base operations on a single (C, H, W) image


def _check_params(op: str, params: dict) -> None:
    if op not in PARAM_RANGES:
        raise ValueError(f"unknown augmentation op {op!r}")
    allowed = PARAM_RANGES[op]
    extra = set(params) - set(allowed)
    if extra:
        raise ValueError(f"{op} got unexpected parameters {sorted(extra)}")
    for name, (lo, hi) in allowed.items():
        if name not in params:
            raise ValueError(f"{op} requires parameter {name!r}")
        if not lo <= params[name] <= hi:
            raise ValueError(f"{op}.{name}={params[name]} outside [{lo}, {hi}]")


def _warp(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample every channel with output(p) = input(matrix @ (p - c) + c)."""
    h, w = image.shape[1:]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    return np.stack([ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest")
                     for ch in image])


def _piecewise_affine(image: np.ndarray, scale: float, rng: np.random.Generator, grid: int = 4) -> np.ndarray:
    """Jitter a (grid+1)^2 control lattice; warp affinely inside each triangle."""
    c, h, w = image.shape
    disp = rng.normal(0.0, scale, size=(2, grid + 1, grid + 1)) * np.array([h, w])[:, None, None]
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    gy = yy / max(h - 1, 1) * grid
    gx = xx / max(w - 1, 1) * grid
    iy = np.minimum(gy.astype(int), grid - 1)
    ix = np.minimum(gx.astype(int), grid - 1)
    u, v = gy - iy, gx - ix
    d00 = disp[:, iy, ix]
    d10 = disp[:, iy + 1, ix]
    d01 = disp[:, iy, ix + 1]
    d11 = disp[:, iy + 1, ix + 1]
    lower = (u + v) <= 1.0
    tri_a = d00 + u * (d10 - d00) + v * (d01 - d00)
    tri_b = d11 + (1 - u) * (d01 - d11) + (1 - v) * (d10 - d11)
    d = np.where(lower, tri_a, tri_b)
    coords = np.stack([yy + d[0], xx + d[1]])
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in image])


def base_op(image: np.ndarray, op: str, params: dict | None = None, seed: int = 0) -> np.ndarray:
    """Apply one base op with concrete ``params``; output is clamped to [0, 1].

    ``seed`` only matters for the stochastic ops (gaussian_noise,
    piecewise_affine).
    """
    params = dict(params or {})
    _check_params(op, params)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"base_op expects (C, H, W), got {image.shape}")
    h, w = image.shape[1:]
    rng = np.random.default_rng(int(seed))

    if op == "add_sub_intensity":
        out = image + params["delta"]
    elif op == "contrast_normalization":
        out = (image - 0.5) * params["alpha"] + 0.5
    elif op == "crop":
        # cut `fraction` from every side, resample back to H x W
        keep = 1.0 - 2.0 * params["fraction"]
        out = _warp(image, np.diag([keep, keep]))
    elif op == "horizontal_flip":
        out = image[:, :, ::-1]
    elif op == "gaussian_blur":
        sigma = params["sigma"]
        out = image if sigma == 0 else np.stack([ndimage.gaussian_filter(ch, sigma, mode="nearest") for ch in image])
    elif op == "gaussian_noise":
        out = image + rng.normal(0.0, 1.0, size=image.shape) * params["scale"]
    elif op == "piecewise_affine":
        out = _piecewise_affine(image, params["scale"], rng)
    elif op == "rotate":
        t = np.deg2rad(params["degrees"])
        out = _warp(image, np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))
    elif op == "scale":
        f = params["factor"]
        out = _warp(image, np.diag([1.0 / f, 1.0 / f]))
    elif op == "sharpen":
        blurred = np.stack([ndimage.gaussian_filter(ch, 1.0, mode="nearest") for ch in image])
        out = image + params["alpha"] * (image - blurred)
    elif op == "shear":
        out = _warp(image, np.array([[1.0, 0.0], [np.tan(np.deg2rad(params["degrees"])), 1.0]]))
    elif op == "translate":
        # same fraction along both axes keeps the parameter table one-dimensional
        shift = params["fraction"] * np.array([h, w])
        out = np.stack([ndimage.shift(ch, shift, order=1, mode="nearest") for ch in image])
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# types and datasets


def _sample_params(spec: dict, rng: np.random.Generator) -> dict:
    return {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in sorted(spec.get("params", {}).items())}


def _apply_type(image: np.ndarray, aug_type: dict, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = image
    for spec in aug_type["ops"]:
        out = base_op(out, spec["op"], _sample_params(spec, rng), seed=int(rng.integers(2**63)))
    return out


def _resolve_type(aug_type, registry) -> dict:
    if isinstance(aug_type, dict):
        return aug_type
    registry = load_registry() if registry is None else registry
    if not 0 <= int(aug_type) < len(registry):
        raise ValueError(f"augmentation type id {aug_type} outside [0, {len(registry)})")
    return registry[int(aug_type)]


def augment_image(image, label, aug_type, seed: int, registry=None) -> list[tuple[np.ndarray, int]]:
    """Three (image, label) draws of one augmentation type, sub-seeds seed+0..2."""
    spec = _resolve_type(aug_type, registry)
    return [(_apply_type(image, spec, (int(seed) + k) % 2**64), label) for k in range(SYNTHETICS_PER_TYPE)]


def _image_type_seed(seed: int, index: int, type_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), index, type_id]).generate_state(1, dtype=np.uint64)[0])


def augment_dataset(dataset: LabeledDataset, seed: int, registry=None) -> LabeledDataset:
    """Originals followed by 22 x 3 synthetics per image: 67 * N samples.

    Per-image seeds depend only on (seed, image index, type id), so the result
    does not depend on processing order.
    """
    if len(dataset) == 0:
        raise ValueError("cannot augment an empty dataset")
    registry = load_registry() if registry is None else registry
    validate_registry(registry)
    per_image = 1 + len(registry) * SYNTHETICS_PER_TYPE
    n = len(dataset)
    images = np.empty((n * per_image,) + dataset.image_shape)
    labels = np.repeat(dataset.labels, per_image)
    for i in range(n):
        row = i * per_image
        images[row] = dataset.images[i]
        for t, spec in enumerate(registry):
            draws = augment_image(dataset.images[i], int(dataset.labels[i]), spec,
                                  _image_type_seed(seed, i, t))
            for k, (img, _) in enumerate(draws):
                images[row + 1 + t * SYNTHETICS_PER_TYPE + k] = img
    return LabeledDataset(images, labels, dataset.n_classes, dataset.provenance)
