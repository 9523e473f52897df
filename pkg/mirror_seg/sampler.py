"""Study preparation, patch enumeration, class-balanced epoch sampling,
augmentation and the epoch-seeded patch loader used for training."""

__all__ = [
    "Study",
    "prepare_study",
    "PatchIndex",
    "grid_starts",
    "enumerate_patches",
    "balance_epoch",
    "AugmentConfig",
    "augment",
    "PatchLoader",
]

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple
from warnings import warn

import numpy as np
import torch
from fastcore.basics import store_attr
from fastcore.foundation import L
from scipy import ndimage

from .errors import ConfigError, SamplingError, ShapeError
from .utils import derive_seed, tensor
from .volumes import (
    BoundingBox,
    LabelMap,
    Volume,
    body_mask,
    crop_to_mask,
    pad_to_size,
    resample_nearest,
    resample_trilinear,
)


@dataclass(frozen=True)
class Study:
    "One PET/CT study on a common grid, cropped to the body; `box` locates it in the original grid"
    id: str
    ct: Volume
    pet: Volume
    body: LabelMap
    tissues: Optional[LabelMap] = None
    lesions: Optional[LabelMap] = None
    box: Optional[BoundingBox] = None
    parent_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        for name in ("pet", "body", "tissues", "lesions"):
            v = getattr(self, name)
            if v is not None and v.shape != self.ct.shape:
                raise ShapeError(f"study {self.id}: {name} shape {v.shape} differs from ct {self.ct.shape}")

    @property
    def shape(self):
        return self.ct.shape

    @property
    def has_lesion(self):
        return self.lesions is not None and bool(self.lesions.data.any())

    def padded(self, size):
        "Pad images with edge values and labels with zeros up to `size` voxels per axis"
        if all(d >= s for d, s in zip(self.shape, size)):
            return self

        def _pad(g, mode):
            return None if g is None else g.new(pad_to_size(g.data, size, mode))

        return replace(
            self,
            ct=_pad(self.ct, "edge"),
            pet=_pad(self.pet, "edge"),
            body=_pad(self.body, "constant"),
            tissues=_pad(self.tissues, "constant"),
            lesions=_pad(self.lesions, "constant"),
        )


def prepare_study(study_id, ct, pet, tissues=None, lesions=None, hu_threshold=-500.0, margin_vox=2):
    """Bring CT (and its tissue map) onto the PET grid, build the body mask from CT,
    and crop every channel to it. Lesions are expected on the PET grid."""
    if ct.shape != pet.shape or ct.spacing != pet.spacing:
        ct = resample_trilinear(ct, pet.shape, pet.spacing)
        if tissues is not None:
            tissues = resample_nearest(tissues, pet.shape, pet.spacing)
    body = body_mask(ct, hu_threshold)
    crop = lambda g: None if g is None else crop_to_mask(g, body, margin_vox)[0]
    ct_c, box = crop_to_mask(ct, body, margin_vox)
    return Study(
        id=study_id,
        ct=ct_c,
        pet=crop(pet),
        body=crop(body),
        tissues=crop(tissues),
        lesions=crop(lesions),
        box=box,
        parent_shape=tuple(pet.shape),
    )


@dataclass(frozen=True)
class PatchIndex:
    "A cubic patch of side `size` at `corner` in study `study_id`"
    study_id: str
    corner: Tuple[int, int, int]
    size: int
    has_lesion: bool = False

    @property
    def slices(self):
        return tuple(slice(c, c + self.size) for c in self.corner)


def grid_starts(dim, size, stride):
    "Window starts `0, stride, ...` plus a final start clamped so the last window ends at `dim`"
    if dim <= size:
        return [0]
    starts = list(range(0, dim - size + 1, stride))
    if starts[-1] != dim - size:
        starts.append(dim - size)
    return starts


def enumerate_patches(study: Study, size, stride=None):
    "Grid patches of `study` (padded to `size`) that touch the body mask"
    stride = size if stride is None else stride
    study = study.padded((size,) * 3)
    body = study.body.data
    lesions = None if study.lesions is None else study.lesions.data
    res = []
    for d in grid_starts(study.shape[0], size, stride):
        for h in grid_starts(study.shape[1], size, stride):
            for w in grid_starts(study.shape[2], size, stride):
                idx = PatchIndex(study.id, (d, h, w), size)
                if not body[idx.slices].any():
                    continue
                has_lesion = lesions is not None and bool(lesions[idx.slices].any())
                res.append(replace(idx, has_lesion=has_lesion))
    return res


def balance_epoch(patches, epoch_seed):
    "Every lesion patch plus an equal-size random draw of lesion-free patches, shuffled"
    rng = np.random.default_rng(epoch_seed)
    les = [p for p in patches if p.has_lesion]
    bg = [p for p in patches if not p.has_lesion]
    if not les:
        raise SamplingError(f"no lesion patch among {len(patches)} patches")
    if not bg:
        warn("no lesion-free patches available, epoch holds lesion patches only")
        drawn = []
    else:
        replace_ = len(bg) < len(les)
        if replace_:
            warn(f"only {len(bg)} lesion-free patches for {len(les)} lesion patches, sampling with replacement")
        drawn = [bg[i] for i in rng.choice(len(bg), len(les), replace=replace_)]
    out = les + drawn
    return [out[i] for i in rng.permutation(len(out))]


def _prob(name, p):
    if not 0.0 <= float(p) <= 1.0:
        raise ConfigError(f"AugmentConfig.{name} must lie in [0, 1], got {p}")
    return float(p)


def _rng_pair(name, r, positive=False):
    r = tuple(float(v) for v in r)
    if len(r) != 2 or r[0] > r[1] or (positive and r[0] <= 0):
        raise ConfigError(f"AugmentConfig.{name} must be a nonempty range, got {r}")
    return r


@dataclass
class AugmentConfig:
    "Probability and parameter range of each augmentation; sigma and angles in voxels and degrees"
    p_blur: float = 0.2
    blur_sigma: Tuple[float, float] = (0.5, 1.0)
    p_noise: float = 0.1
    noise_std: Tuple[float, float] = (0.0, 0.1)
    p_contrast: float = 0.15
    contrast: Tuple[float, float] = (0.75, 1.25)
    p_rotate: float = 0.2
    rotate_deg: float = 30.0
    p_scale: float = 0.2
    scale: Tuple[float, float] = (0.7, 1.4)
    p_gamma: float = 0.3
    gamma: Tuple[float, float] = (0.7, 1.5)
    p_mirror: float = 0.5
    mirror_axes: Tuple[int, ...] = (0, 1, 2)
    seed: int = 0

    def __post_init__(self):
        for k in ("p_blur", "p_noise", "p_contrast", "p_rotate", "p_scale", "p_gamma", "p_mirror"):
            setattr(self, k, _prob(k, getattr(self, k)))
        self.blur_sigma = _rng_pair("blur_sigma", self.blur_sigma, positive=True)
        self.noise_std = _rng_pair("noise_std", self.noise_std)
        self.contrast = _rng_pair("contrast", self.contrast, positive=True)
        self.scale = _rng_pair("scale", self.scale, positive=True)
        self.gamma = _rng_pair("gamma", self.gamma, positive=True)
        if self.rotate_deg < 0:
            raise ConfigError(f"AugmentConfig.rotate_deg must be >= 0, got {self.rotate_deg}")
        self.mirror_axes = tuple(int(a) for a in self.mirror_axes)
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            raise ConfigError(f"AugmentConfig.mirror_axes must be spatial axes 0-2, got {self.mirror_axes}")

    @classmethod
    def off(cls):
        "No augmentation at all"
        return cls(p_blur=0, p_noise=0, p_contrast=0, p_rotate=0, p_scale=0, p_gamma=0, p_mirror=0)


def _rotation(angles):
    ax, ay, az = np.deg2rad(angles)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _spatial(x, matrix, order):
    center = (np.asarray(x.shape) - 1) / 2.0
    offset = center - matrix @ center
    if order == 0:
        return ndimage.affine_transform(x, matrix, offset=offset, order=0, mode="constant", cval=0)
    return ndimage.affine_transform(x, matrix, offset=offset, order=order, mode="nearest", prefilter=False)


def _intensity(x, cfg, rng):
    if rng.random() < cfg.p_noise:
        std = rng.uniform(*cfg.noise_std) * float(x.std())
        x = x + rng.normal(0.0, std, x.shape) if std > 0 else x
    if rng.random() < cfg.p_blur:
        x = ndimage.gaussian_filter(x, rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.p_contrast:
        mean = x.mean()
        x = (x - mean) * rng.uniform(*cfg.contrast) + mean
    if rng.random() < cfg.p_gamma:
        g, lo, hi = rng.uniform(*cfg.gamma), x.min(), x.max()
        if hi > lo:
            x = ((x - lo) / (hi - lo)) ** g * (hi - lo) + lo
    return x


def augment(pet, ct, labels, cfg: AugmentConfig, draw_seed):
    """Randomly transform an aligned `(pet, ct, labels)` triple of D,H,W arrays.

    Rotation, zoom and mirroring are shared by all three (labels resampled with
    nearest neighbour, zero outside); blur, noise, contrast and gamma are drawn
    separately for PET and CT and never touch labels.
    """
    if not (pet.shape == ct.shape == labels.shape):
        raise ShapeError(f"augment needs aligned arrays, got {pet.shape}, {ct.shape}, {labels.shape}")
    rng = np.random.default_rng(draw_seed)
    pet, ct = pet.astype(np.float64), ct.astype(np.float64)
    matrix = np.eye(3)
    if rng.random() < cfg.p_rotate:
        matrix = _rotation(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, 3)) @ matrix
    if rng.random() < cfg.p_scale:
        # zoom > 1 magnifies, so each output voxel samples closer to the centre
        matrix = matrix / rng.uniform(*cfg.scale)
    if not np.array_equal(matrix, np.eye(3)):
        pet, ct = _spatial(pet, matrix, 1), _spatial(ct, matrix, 1)
        labels = _spatial(labels, matrix, 0)
    for ax in cfg.mirror_axes:
        if rng.random() < cfg.p_mirror:
            pet, ct, labels = (np.flip(a, ax) for a in (pet, ct, labels))
    pet, ct = _intensity(pet, cfg, rng), _intensity(ct, cfg, rng)
    return (
        np.ascontiguousarray(pet, dtype=np.float32),
        np.ascontiguousarray(ct, dtype=np.float32),
        np.ascontiguousarray(labels),
    )


class PatchLoader:
    """Batches of patches for one training stage.

    `stage="ct"` yields `(ct, tissues)`, `stage="pet"` yields `(ct, pet, lesions)`,
    all as N,1,P,P,P tensors. In training mode each epoch is a fresh
    `balance_epoch` draw, augmented, fully determined by `(seed, epoch)`;
    otherwise every enumerated patch is served once, unaugmented, in order.
    """

    def __init__(self, studies, patch_size, batch_size=2, stage="pet", train=True, augment_cfg=None, seed=0, stride=None):
        store_attr("patch_size,batch_size,stage,train,seed")
        if stage not in ("ct", "pet"):
            raise ConfigError(f"unknown stage {stage!r}")
        self.augment_cfg = augment_cfg if augment_cfg is not None else AugmentConfig()
        size = (patch_size,) * 3
        self.studies = {s.id: s.padded(size) for s in studies}
        self.patches = L(studies).map(lambda s: enumerate_patches(s, patch_size, stride)).concat()
        self.epoch = 0

    @property
    def n_inp(self):
        return 1 if self.stage == "ct" else 2

    def set_epoch(self, epoch):
        self.epoch = int(epoch)

    def items(self):
        "Patch list served in the current epoch"
        if self.train:
            return balance_epoch(self.patches, derive_seed(self.seed, self.epoch))
        return list(self.patches)

    def __len__(self):
        return math.ceil(len(self.items()) / self.batch_size)

    def _load(self, i, p):
        s = self.studies[p.study_id]
        ct, pet = s.ct.data[p.slices], s.pet.data[p.slices]
        labels = (s.tissues if self.stage == "ct" else s.lesions)
        if labels is None:
            raise SamplingError(f"study {s.id} has no {'tissue' if self.stage == 'ct' else 'lesion'} labels")
        labels = labels.data[p.slices]
        if self.train:
            pet, ct, labels = augment(pet, ct, labels, self.augment_cfg, derive_seed(self.seed, self.augment_cfg.seed, self.epoch, i))
        return ct, pet, labels

    def __iter__(self):
        items = self.items()
        for b in range(0, len(items), self.batch_size):
            batch = [self._load(b + j, p) for j, p in enumerate(items[b : b + self.batch_size])]
            ct, pet, labels = (torch.stack([tensor(np.ascontiguousarray(o[k]))[None] for o in batch]) for k in range(3))
            if self.stage == "ct":
                yield ct, labels.long()
            else:
                yield ct, pet, labels.float()
