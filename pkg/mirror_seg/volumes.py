"""Volume and label-map data model, sidecar file I/O, geometric preprocessing
(body mask, crop, resample) and the synthetic PET/CT phantom generator.

Volumes are immutable: every operation returns a new object and the backing
numpy arrays are flagged read-only.
"""

__all__ = [
    "Modality",
    "LabelKind",
    "Volume",
    "LabelMap",
    "BoundingBox",
    "PhantomConfig",
    "DEFAULT_HU_PER_TISSUE",
    "write_volume",
    "read_volume",
    "body_mask",
    "crop_to_mask",
    "paste_to_parent",
    "pad_to_size",
    "resample_trilinear",
    "resample_nearest",
    "generate_phantom",
]

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from fastcore.xtras import Path
from scipy import ndimage

from .errors import (
    ConfigError,
    EmptyMaskError,
    ModalityError,
    NonFiniteError,
    PlacementError,
    RangeError,
    ShapeError,
    VolumeFormatError,
)


class Modality(str, Enum):
    "Physical meaning of a `Volume`'s scalars"
    PET_SUV = "PET_SUV"
    CT_HU = "CT_HU"
    PROB = "PROB"


class LabelKind(str, Enum):
    "Meaning of the integers stored in a `LabelMap`"
    BINARY = "BinaryMask"
    TISSUES = "TissueGroups"
    COMPONENTS = "ComponentLabels"


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ShapeError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


def _first_bad_voxel(data):
    bad = ~np.isfinite(data)
    if not bad.any():
        return None
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), data.shape))


@dataclass(frozen=True)
class Volume:
    "A 3D scalar grid (SUV, HU or probability) with voxel spacing in mm, indexed (D,H,W)"
    data: np.ndarray
    spacing: Tuple[float, float, float]
    modality: Modality

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True, order="C")
        if data.ndim != 3:
            raise ShapeError(f"a volume is 3D, got an array of shape {data.shape}")
        idx = _first_bad_voxel(data)
        if idx is not None:
            raise NonFiniteError(f"non-finite value {data[idx]} at voxel {idx}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_ml(self):
        "Volume of one voxel in milliliters"
        return float(np.prod(self.spacing, dtype=np.float64)) / 1000.0

    def new(self, data, spacing=None):
        "A `Volume` with the same modality holding `data`"
        return replace(self, data=data, spacing=self.spacing if spacing is None else spacing)


@dataclass(frozen=True)
class LabelMap:
    "A 3D unsigned-integer grid sharing a `Volume`'s geometry"
    data: np.ndarray
    spacing: Tuple[float, float, float]
    kind: LabelKind = LabelKind.BINARY

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        if data.ndim != 3:
            raise ShapeError(f"a label map is 3D, got an array of shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise VolumeFormatError(f"label maps hold integers, got dtype {data.dtype}")
        if data.size and data.min() < 0:
            raise RangeError(f"label maps are unsigned, found {data.min()}")
        if not np.issubdtype(data.dtype, np.unsignedinteger):
            data = data.astype(np.uint32 if data.size and data.max() > 65535 else np.uint16)
        kind = LabelKind(self.kind)
        if kind is LabelKind.BINARY and data.size and data.max() > 1:
            raise RangeError(f"a binary mask holds only 0/1, found {data.max()}")
        data = np.array(data, copy=True, order="C")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "kind", kind)

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_ml(self):
        return float(np.prod(self.spacing, dtype=np.float64)) / 1000.0

    def new(self, data, spacing=None, kind=None):
        return replace(
            self,
            data=data,
            spacing=self.spacing if spacing is None else spacing,
            kind=self.kind if kind is None else kind,
        )


Grid = Union[Volume, LabelMap]


@dataclass(frozen=True)
class BoundingBox:
    "Voxel box `[lo, hi)` inside a parent grid"
    lo: Tuple[int, int, int]
    hi: Tuple[int, int, int]

    def __post_init__(self):
        lo, hi = tuple(int(i) for i in self.lo), tuple(int(i) for i in self.hi)
        if len(lo) != 3 or len(hi) != 3 or any(l < 0 or l >= h for l, h in zip(lo, hi)):
            raise ShapeError(f"invalid bounding box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    @property
    def shape(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))


# Sidecar + raw payload

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "u16": np.dtype("<u2")}
_ORDER = "DHW-row-major"


def _base(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".raw") else path


def _label_dtype(data):
    top = int(data.max()) if data.size else 0
    if top < 2**8:
        return "u8"
    if top < 2**16:
        return "u16"
    raise VolumeFormatError(f"label value {top} does not fit the u16 payload")


def write_volume(vol: Grid, path):
    "Write `vol` as `<path>.json` sidecar plus `<path>.raw` little-endian payload"
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(vol, LabelMap):
        dtype, modality = _label_dtype(vol.data), "LABEL"
    else:
        dtype, modality = "f32", vol.modality.value
    meta = {
        "shape": [int(s) for s in vol.shape],
        "spacing_mm": [float(s) for s in vol.spacing],
        "dtype": dtype,
        "modality": modality,
        "order": _ORDER,
    }
    if isinstance(vol, LabelMap):
        meta["semantics"] = vol.kind.value
    base.with_suffix(".raw").write_bytes(vol.data.astype(_DTYPES[dtype]).tobytes(order="C"))
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return base


def read_volume(path) -> Grid:
    "Read a sidecar/raw pair written by `write_volume`; `LABEL` files come back as `LabelMap`"
    base = _base(path)
    side, raw = base.with_suffix(".json"), base.with_suffix(".raw")
    for f in (side, raw):
        if not f.exists():
            raise VolumeFormatError(f"missing file {f}")
    try:
        meta = json.loads(side.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        spacing, dtype, modality = meta["spacing_mm"], meta["dtype"], meta["modality"]
    except (ValueError, KeyError, TypeError) as e:
        raise VolumeFormatError(f"{side}: malformed sidecar ({e})") from e
    if len(shape) != 3 or min(shape) <= 0:
        raise VolumeFormatError(f"{side}: shape must be three positive ints, got {shape}")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{side}: unknown dtype {dtype!r}")
    if meta.get("order", _ORDER) != _ORDER:
        raise VolumeFormatError(f"{side}: unsupported order {meta['order']!r}")
    dt = _DTYPES[dtype]
    payload = raw.read_bytes()
    expected = int(np.prod(shape)) * dt.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw}: size mismatch, sidecar implies {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dt).reshape(shape)
    if modality == "LABEL":
        if dtype == "f32":
            raise VolumeFormatError(f"{side}: label maps must use an unsigned dtype")
        kind = meta.get("semantics")
        if kind is None:
            kind = LabelKind.BINARY if data.max() <= 1 else LabelKind.COMPONENTS
        return LabelMap(data.astype(dt.newbyteorder("=")), spacing, kind)
    if modality not in Modality.__members__:
        raise VolumeFormatError(f"{side}: unknown modality {modality!r}")
    if dtype != "f32":
        raise VolumeFormatError(f"{side}: {modality} volumes must be f32, got {dtype}")
    try:
        return Volume(data, spacing, Modality(modality))
    except NonFiniteError as e:
        raise NonFiniteError(f"{raw}: {e}") from e


# Geometry


def body_mask(ct: Volume, hu_threshold: float = -500.0) -> LabelMap:
    "Largest 26-connected component of `ct > hu_threshold` with enclosed cavities filled"
    if ct.modality is not Modality.CT_HU:
        raise ModalityError(f"body_mask needs a CT_HU volume, got {ct.modality.value}")
    fg = ct.data > hu_threshold
    if not fg.any():
        raise EmptyMaskError(f"empty body: no voxel above {hu_threshold} HU")
    labels, _ = ndimage.label(fg, structure=ndimage.generate_binary_structure(3, 3))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    body = ndimage.binary_fill_holes(labels == int(np.argmax(sizes)))
    return LabelMap(body.astype(np.uint8), ct.spacing, LabelKind.BINARY)


def _check_aligned(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def crop_to_mask(vol: Grid, mask: LabelMap, margin_vox: int = 0):
    "Crop `vol` to the bounding box of `mask >= 1` grown by `margin_vox`; returns `(cropped, box)`"
    _check_aligned(vol, mask)
    fg = mask.data >= 1
    if not fg.any():
        raise EmptyMaskError("cannot crop to an empty mask")
    lo, hi = [], []
    for ax in range(3):
        idx = np.flatnonzero(fg.any(axis=tuple(a for a in range(3) if a != ax)))
        lo.append(max(int(idx[0]) - margin_vox, 0))
        hi.append(min(int(idx[-1]) + 1 + margin_vox, fg.shape[ax]))
    box = BoundingBox(tuple(lo), tuple(hi))
    return vol.new(vol.data[box.slices]), box


def paste_to_parent(cropped: Grid, box: BoundingBox, parent_shape, fill=0):
    "Inverse of `crop_to_mask`: place `cropped` at `box` inside a `fill`-valued parent grid"
    if tuple(cropped.shape) != box.shape:
        raise ShapeError(f"cropped shape {cropped.shape} does not match box {box.shape}")
    if any(h > s for h, s in zip(box.hi, parent_shape)):
        raise ShapeError(f"box {box} exceeds parent shape {tuple(parent_shape)}")
    out = np.full(tuple(parent_shape), fill, dtype=cropped.data.dtype)
    out[box.slices] = cropped.data
    return cropped.new(out)


def pad_to_size(x: np.ndarray, size, mode="edge"):
    "Pad the trailing side of each of the last three axes of `x` up to `size`"
    pads = [(0, 0)] * (x.ndim - 3) + [(0, max(int(s) - d, 0)) for d, s in zip(x.shape[-3:], size)]
    if not any(p[1] for p in pads):
        return x
    return np.pad(x, pads, mode=mode) if mode == "edge" else np.pad(x, pads, mode="constant")


def _resample(data, spacing, target_shape, target_spacing, order):
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or min(target_shape) <= 0:
        raise ShapeError(f"target shape must be three positive ints, got {target_shape}")
    target_spacing = _check_spacing(target_spacing)
    # output voxel centre j sits at (j + .5) * t mm, i.e. input index (j + .5) * t / s - .5
    scale = np.asarray(target_spacing) / np.asarray(spacing)
    offset = 0.5 * scale - 0.5
    if data.shape == target_shape and np.all(scale == 1.0):
        return data.copy(), target_spacing
    out = ndimage.affine_transform(
        data,
        scale,
        offset=offset,
        output_shape=target_shape,
        order=order,
        mode="nearest",
        prefilter=False,
    )
    return out, target_spacing


def resample_trilinear(vol: Volume, target_shape, target_spacing) -> Volume:
    "Trilinear resampling with voxel-centre alignment; samples past the border clamp to edge values"
    data, spacing = _resample(
        vol.data.astype(np.float64), vol.spacing, target_shape, target_spacing, order=1
    )
    return vol.new(data.astype(np.float32), spacing)


def resample_nearest(labels: LabelMap, target_shape, target_spacing) -> LabelMap:
    "Nearest-neighbour counterpart of `resample_trilinear` for label maps"
    data, spacing = _resample(labels.data, labels.spacing, target_shape, target_spacing, order=0)
    return labels.new(data, spacing)


# Phantoms

DEFAULT_HU_PER_TISSUE = (
    -1000.0,  # outside body
    40.0,  # generic soft tissue
    -750.0,  # lungs
    700.0,  # bone
    60.0,
    10.0,
    -100.0,
    50.0,
    35.0,
    45.0,
    30.0,
    80.0,
    20.0,
    120.0,
    25.0,
    55.0,
)


def _range(name, r, lo_incl=None):
    r = tuple(float(v) for v in r)
    if len(r) != 2 or r[0] > r[1]:
        raise ConfigError(f"{name} must be a nonempty [lo, hi] range, got {r}")
    if lo_incl is not None and r[0] < lo_incl:
        raise ConfigError(f"{name} must be >= {lo_incl}, got {r}")
    return r


@dataclass
class PhantomConfig:
    "Parameters of one synthetic PET/CT study"
    shape: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    tissue_class_count: int = 4
    lesion_count_range: Tuple[int, int] = (1, 3)
    lesion_radius_range_mm: Tuple[float, float] = (4.0, 10.0)
    lesion_suv_range: Tuple[float, float] = (4.0, 8.0)
    background_suv_range: Tuple[float, float] = (0.5, 1.5)
    hu_per_tissue: Optional[Tuple[float, ...]] = None
    noise_std: float = 0.2
    seed: int = 0
    max_placement_tries: int = 200

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ConfigError(f"phantom shape must be three ints >= 4, got {self.shape}")
        try:
            self.spacing = _check_spacing(self.spacing)
        except ShapeError as e:
            raise ConfigError(str(e)) from e
        if not 2 <= self.tissue_class_count <= len(DEFAULT_HU_PER_TISSUE):
            raise ConfigError(f"tissue_class_count must lie in [2, 16], got {self.tissue_class_count}")
        lo, hi = (int(v) for v in self.lesion_count_range)
        if lo < 0 or lo > hi:
            raise ConfigError(f"lesion_count_range must be 0 <= lo <= hi, got {(lo, hi)}")
        self.lesion_count_range = (lo, hi)
        self.lesion_radius_range_mm = _range("lesion_radius_range_mm", self.lesion_radius_range_mm)
        if self.lesion_radius_range_mm[0] <= 0:
            raise ConfigError("lesion radii must be positive")
        self.background_suv_range = _range("background_suv_range", self.background_suv_range, 0.0)
        self.lesion_suv_range = _range("lesion_suv_range", self.lesion_suv_range)
        if self.lesion_suv_range[0] <= self.background_suv_range[1]:
            raise ConfigError(
                f"lesion SUV range {self.lesion_suv_range} must lie strictly above "
                f"background {self.background_suv_range}"
            )
        if self.hu_per_tissue is None:
            self.hu_per_tissue = DEFAULT_HU_PER_TISSUE[: self.tissue_class_count]
        self.hu_per_tissue = tuple(float(h) for h in self.hu_per_tissue)
        if len(self.hu_per_tissue) != self.tissue_class_count:
            raise ConfigError(
                f"hu_per_tissue needs {self.tissue_class_count} values, got {len(self.hu_per_tissue)}"
            )
        if len(set(self.hu_per_tissue)) != len(self.hu_per_tissue):
            raise ConfigError("hu_per_tissue values must be distinct")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _place_lesion(rng, grid, inner, taken, radius, cfg):
    # candidate centres are drawn from the physical extent of `inner`
    extent = []
    for ax, g in enumerate(grid):
        hit = inner.any(axis=tuple(a for a in range(3) if a != ax))
        coords = g.ravel()[hit]
        extent.append((coords[0], coords[-1]))
    for _ in range(cfg.max_placement_tries):
        center = [rng.uniform(lo, hi) for lo, hi in extent]
        sphere = _ellipsoid(grid, center, (radius,) * 3)
        if sphere.any() and not (sphere & ~inner).any() and not (sphere & taken).any():
            return sphere
    raise PlacementError(
        f"could not place a {radius:.1f} mm lesion inside the body after {cfg.max_placement_tries} tries"
    )


def generate_phantom(cfg: PhantomConfig):
    """Synthesize one study: returns `(ct, pet, tissues, lesions)`.

    The body is an ellipsoid in air, organs are ellipsoids inside it (later ones
    overwrite earlier ones), lesions are non-touching spheres inside the body.
    Class 0 of `tissues` is everything outside the body. PET is piecewise
    constant per tissue plus lesion uptake and Gaussian noise, clipped at 0.
    """
    rng = np.random.default_rng(cfg.seed)
    grid = np.ogrid[tuple(slice(0, n) for n in cfg.shape)]
    grid = [(g + 0.5) * s for g, s in zip(grid, cfg.spacing)]
    extent = np.asarray(cfg.shape) * np.asarray(cfg.spacing)
    center = extent / 2
    body_r = 0.45 * extent * rng.uniform(0.85, 1.0, 3)
    body = _ellipsoid(grid, center, body_r)
    # organs and lesions stay inside this shell so cavities remain enclosed
    inner = _ellipsoid(grid, center, 0.8 * body_r)

    tissues = np.where(body, 1, 0).astype(np.uint8)
    for k in range(2, cfg.tissue_class_count):
        c = center + rng.uniform(-0.35, 0.35, 3) * body_r
        r = rng.uniform(0.15, 0.3, 3) * body_r
        tissues[_ellipsoid(grid, c, r) & inner] = k

    ct = np.asarray(cfg.hu_per_tissue, dtype=np.float32)[tissues]
    suv = rng.uniform(*cfg.background_suv_range, size=cfg.tissue_class_count)
    suv[0] = 0.0
    pet = suv.astype(np.float32)[tissues]

    lesions = np.zeros(cfg.shape, dtype=bool)
    taken = np.zeros(cfg.shape, dtype=bool)
    struct = ndimage.generate_binary_structure(3, 3)
    for _ in range(int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))):
        radius = rng.uniform(*cfg.lesion_radius_range_mm)
        sphere = _place_lesion(rng, grid, inner, taken, radius, cfg)
        pet[sphere] = rng.uniform(*cfg.lesion_suv_range)
        lesions |= sphere
        taken |= ndimage.binary_dilation(sphere, structure=struct)

    if cfg.noise_std > 0:
        pet = pet + rng.normal(0.0, cfg.noise_std, cfg.shape).astype(np.float32)
    pet = np.clip(pet, 0.0, None)
    return (
        Volume(ct, cfg.spacing, Modality.CT_HU),
        Volume(pet, cfg.spacing, Modality.PET_SUV),
        LabelMap(tissues, cfg.spacing, LabelKind.TISSUES),
        LabelMap(lesions.astype(np.uint8), cfg.spacing, LabelKind.BINARY),
    )
