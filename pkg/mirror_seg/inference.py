"""Whole-volume lesion prediction: half-overlapping windows blended with a
Gaussian importance map, mirror test-time augmentation and binarization."""

__all__ = [
    "WindowPlan",
    "plan_windows",
    "gaussian_weights",
    "sliding_window_predict",
    "flip_sets",
    "tta_predict",
    "binarize",
]

import itertools
import time
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, RangeError, ShapeError
from .sampler import grid_starts
from .utils import tensor
from .volumes import LabelKind, LabelMap, Modality, Volume, pad_to_size


@dataclass(frozen=True)
class WindowPlan:
    "Window corners of side `size` covering a grid of `shape` (already padded to at least `size`)"
    shape: Tuple[int, int, int]
    size: int
    stride: int
    corners: List[Tuple[int, int, int]]

    def slices(self, corner):
        return tuple(slice(c, c + self.size) for c in corner)


def plan_windows(shape, size):
    "Corners on a `size//2` grid per axis, with the last window clamped to the edge"
    if size < 2:
        raise RangeError(f"window size must be >= 2, got {size}")
    shape = tuple(max(int(d), size) for d in shape)
    stride = size // 2
    axes = [grid_starts(d, size, stride) for d in shape]
    return WindowPlan(shape, size, stride, list(itertools.product(*axes)))


def gaussian_weights(size, sigma_scale=1 / 8):
    "`exp(-|x - c|^2 / 2 sigma^2)` with `c = size//2` and `sigma = sigma_scale * size`; centre weight is 1"
    if size < 2 or sigma_scale <= 0:
        raise RangeError(f"need size >= 2 and sigma_scale > 0, got {size}, {sigma_scale}")
    sigma = sigma_scale * size
    r = (np.arange(size, dtype=np.float64) - size // 2) ** 2
    d2 = r[:, None, None] + r[None, :, None] + r[None, None, :]
    w = np.exp(-d2 / (2 * sigma**2))
    return np.maximum(w, np.finfo(np.float32).tiny)


def _check_aligned(ct, pet):
    if ct.shape != pet.shape or ct.spacing != pet.spacing:
        raise ShapeError(
            f"CT {ct.shape}@{ct.spacing} and PET {pet.shape}@{pet.spacing} are not on the same grid"
        )


def _predict_array(net, ct, pet, size, sigma_scale, batch_size, timings):
    shape = ct.shape
    plan = plan_windows(shape, size)
    ct_a, pet_a = pad_to_size(ct, plan.shape), pad_to_size(pet, plan.shape)
    w = gaussian_weights(size, sigma_scale)
    acc, wsum = np.zeros(plan.shape), np.zeros(plan.shape)
    if isinstance(net, nn.Module):
        net.eval()
    with torch.no_grad():
        for b in range(0, len(plan.corners), batch_size):
            corners = plan.corners[b : b + batch_size]
            start = time.perf_counter()
            x_ct = torch.stack([tensor(np.ascontiguousarray(ct_a[plan.slices(c)]))[None] for c in corners])
            x_pet = torch.stack([tensor(np.ascontiguousarray(pet_a[plan.slices(c)]))[None] for c in corners])
            probs = torch.sigmoid(net(x_ct, x_pet)).double().numpy()[:, 0]
            for c, p in zip(corners, probs):
                sl = plan.slices(c)
                acc[sl] += w * p
                wsum[sl] += w
            if timings is not None:
                dt = time.perf_counter() - start
                timings.extend(dict(window=b + i, corner=c, seconds=dt / len(corners)) for i, c in enumerate(corners))
    out = acc / wsum
    return out[: shape[0], : shape[1], : shape[2]]


def sliding_window_predict(net, ct: Volume, pet: Volume, patch_size=32, sigma_scale=1 / 8, batch_size=1, timings=None):
    """Lesion probability map of `net(ct_patch, pet_patch)` over the whole volume.

    Window probabilities are accumulated with Gaussian weights in float64 and
    normalized by the summed weights. Pass a list as `timings` to collect one
    `{window, corner, seconds}` record per window.
    """
    _check_aligned(ct, pet)
    prob = _predict_array(net, ct.data, pet.data, patch_size, sigma_scale, batch_size, timings)
    return Volume(np.clip(prob, 0.0, 1.0), pet.spacing, Modality.PROB)


def flip_sets(mode="all"):
    "Axis tuples to mirror: all 8 combinations, or identity plus the 3 single-axis flips"
    if mode == "all":
        return [tuple(a for a, on in zip((0, 1, 2), bits) if on) for bits in itertools.product((0, 1), repeat=3)]
    if mode == "single":
        return [(), (0,), (1,), (2,)]
    raise ConfigError(f"unknown TTA mode {mode!r}, expected 'all' or 'single'")


def tta_predict(net, ct: Volume, pet: Volume, patch_size=32, sigma_scale=1 / 8, mode="all", batch_size=1, timings=None):
    "Mean of `sliding_window_predict` over mirrored inputs, each result mirrored back"
    _check_aligned(ct, pet)
    flips = flip_sets(mode)
    total = np.zeros(ct.shape)
    for axes in flips:
        f = (lambda a: np.flip(a, axes)) if axes else (lambda a: a)
        start = 0 if timings is None else len(timings)
        prob = _predict_array(net, f(ct.data), f(pet.data), patch_size, sigma_scale, batch_size, timings)
        if timings is not None:
            for t in timings[start:]:
                t["flip"] = axes
        total += f(prob)
    return Volume(np.clip(total / len(flips), 0.0, 1.0), pet.spacing, Modality.PROB)


def binarize(prob: Volume, threshold=0.5) -> LabelMap:
    "Lesion mask `prob > threshold`"
    return LabelMap((prob.data > threshold).astype(np.uint8), prob.spacing, LabelKind.BINARY)
