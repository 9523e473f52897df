__all__ = [
    "flatten_check",
    "tissue_accuracy",
    "Dice",
    "DiceMulti",
    "connected_components",
    "dice",
    "false_positive_volume",
    "false_negative_volume",
    "StudyMetrics",
    "evaluate_study",
    "CohortReport",
    "evaluate_cohort",
]

# Contains code used/modified by mirror_seg authors from fastai
# Copyright 2019 the fast.ai team.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language

from dataclasses import asdict, dataclass, field
from typing import List

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch
from fastcore.foundation import L
from fastcore.xtras import Path
from scipy import ndimage

from .errors import MirrorSegError, RangeError, ShapeError
from .learner import Metric
from .volumes import LabelKind, LabelMap


def flatten_check(inp, targ):
    "Check that `inp` and `targ` have the same number of elements and flatten them."
    inp, targ = inp.contiguous().view(-1), targ.contiguous().view(-1)
    if len(inp) != len(targ):
        raise ShapeError(f"prediction has {len(inp)} elements, target {len(targ)}")
    return inp, targ


def tissue_accuracy(inp, targ, axis=1):
    "Per-voxel argmax accuracy of N,C,D,H,W logits against N,1,D,H,W tissue labels"
    pred, targ = flatten_check(inp.argmax(dim=axis), targ)
    return (pred == targ).float().mean()


class Dice(Metric):
    "Dice coefficient over an epoch for binary lesion logits (positive where logit > 0)"

    def reset(self):
        self.inter, self.union = 0, 0

    def accumulate(self, learn):
        pred, targ = flatten_check((learn.pred > 0).long(), learn.y.long())
        self.inter += (pred * targ).float().sum().item()
        self.union += (pred + targ).float().sum().item()

    @property
    def value(self):
        return 2.0 * self.inter / self.union if self.union > 0 else None


class DiceMulti(Metric):
    "Averaged Dice metric (Macro F1) for multiclass target in segmentation"

    def __init__(self, axis=1):
        self.axis = axis

    def reset(self):
        self.inter, self.union = {}, {}

    def accumulate(self, learn):
        pred, targ = flatten_check(learn.pred.argmax(dim=self.axis), learn.y)
        for c in range(learn.pred.shape[self.axis]):
            p = torch.where(pred == c, 1, 0)
            t = torch.where(targ == c, 1, 0)
            self.inter[c] = self.inter.get(c, 0) + (p * t).float().sum().item()
            self.union[c] = self.union.get(c, 0) + (p + t).float().sum().item()

    @property
    def value(self):
        scores = [2.0 * self.inter[c] / self.union[c] for c in self.inter if self.union[c] > 0]
        return float(np.mean(scores)) if scores else None


_RANK = {6: 1, 18: 2, 26: 3}


def _mask(x):
    data = x.data if isinstance(x, LabelMap) else np.asarray(x)
    return data > 0


def _pair(pred, gt):
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} differs from ground truth {g.shape}")
    return p, g


def _spacing(spacing, *grids):
    maps = [tuple(g.spacing) for g in grids if isinstance(g, LabelMap)]
    if len(maps) > 1 and not np.allclose(maps[0], maps[1], rtol=1e-6, atol=0):
        raise ShapeError(f"prediction spacing {maps[0]} differs from ground truth {maps[1]}")
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    if maps:
        return maps[0]
    raise ShapeError("spacing is required for plain array masks")


def connected_components(mask, connectivity=26):
    "Label maximal connected regions of `mask > 0`; returns `(labels, count)` in scan order"
    if connectivity not in _RANK:
        raise RangeError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    m = _mask(mask)
    labels, n = ndimage.label(m, structure=ndimage.generate_binary_structure(m.ndim, _RANK[connectivity]))
    labels = labels.astype(np.uint32)
    if isinstance(mask, LabelMap):
        return LabelMap(labels, mask.spacing, LabelKind.COMPONENTS), int(n)
    return labels, int(n)


def dice(pred, gt):
    "2|P and G| / (|P| + |G|); 0 when both masks are empty"
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    return 2.0 * int((p & g).sum()) / total if total else 0.0


def false_positive_volume(pred, gt, spacing=None, connectivity=26):
    "Milliliters of predicted components that share no voxel with `gt`"
    p, g = _pair(pred, gt)
    sp = _spacing(spacing, pred, gt)
    labels, n = connected_components(p, connectivity)
    if n == 0:
        return 0.0
    sizes = np.bincount(labels.ravel(), minlength=n + 1).astype(np.float64)
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    keep[np.unique(labels[g])] = False
    return float(sizes[keep].sum() * np.prod(sp, dtype=np.float64) / 1000.0)


def false_negative_volume(pred, gt, spacing=None, connectivity=26):
    "Milliliters of ground-truth components that share no voxel with `pred`"
    return false_positive_volume(gt, pred, spacing=_spacing(spacing, pred, gt), connectivity=connectivity)


@dataclass
class StudyMetrics:
    study_id: str
    dice: float
    fnv_ml: float
    fpv_ml: float


def evaluate_study(pred, gt, spacing=None, study_id="", connectivity=26):
    sp = _spacing(spacing, pred, gt)
    return StudyMetrics(
        study_id=str(study_id),
        dice=dice(pred, gt),
        fnv_ml=false_negative_volume(pred, gt, sp, connectivity),
        fpv_ml=false_positive_volume(pred, gt, sp, connectivity),
    )


_COLS = ["study_id", "dice", "fnv_ml", "fpv_ml"]


@dataclass
class CohortReport:
    "Per-study metrics and their arithmetic means"
    studies: List[StudyMetrics] = field(default_factory=list)

    def _mean(self, k):
        return float(np.mean([getattr(s, k) for s in self.studies])) if self.studies else float("nan")

    @property
    def mean_dice(self):
        return self._mean("dice")

    @property
    def mean_fnv_ml(self):
        return self._mean("fnv_ml")

    @property
    def mean_fpv_ml(self):
        return self._mean("fpv_ml")

    def to_frame(self, with_mean=True):
        df = pd.DataFrame([asdict(s) for s in self.studies], columns=_COLS)
        if with_mean:
            mean = dict(study_id="MEAN", dice=self.mean_dice, fnv_ml=self.mean_fnv_ml, fpv_ml=self.mean_fpv_ml)
            df = pd.concat([df, pd.DataFrame([mean], columns=_COLS)], ignore_index=True)
        return df

    def to_csv(self, fname):
        fname = Path(fname)
        fname.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(fname, index=False, float_format="%.17g")
        return fname

    @classmethod
    def read_csv(cls, fname):
        "Parse a report written by `to_csv`; the MEAN row is recomputed, not read"
        df = pd.read_csv(fname, dtype={"study_id": str})
        if list(df.columns) != _COLS:
            raise ShapeError(f"{fname}: expected columns {_COLS}, got {list(df.columns)}")
        df = df[df["study_id"] != "MEAN"]
        return cls([StudyMetrics(r.study_id, float(r.dice), float(r.fnv_ml), float(r.fpv_ml)) for r in df.itertuples()])

    def plot(self, fname=None):
        "One boxplot per metric over the studies; saved to `fname` when given"
        df = self.to_frame(with_mean=False)
        fig, axs = plt.subplots(1, 3, figsize=(10, 4))
        for ax, col, label in zip(axs, _COLS[1:], ["Dice", "FNV (ml)", "FPV (ml)"]):
            ax.boxplot(df[col].to_numpy(dtype=float))
            ax.set_title(label)
            ax.set_xticks([])
        if fname is not None:
            fig.savefig(fname, bbox_inches="tight")
            plt.close(fig)
        return fig


def evaluate_cohort(items, connectivity=26):
    "Metrics for each `(pred, gt, spacing, study_id)`, in input order"
    items = L(items)
    if not items:
        raise RangeError("evaluate_cohort needs at least one study")
    res = []
    for pred, gt, spacing, sid in items:
        try:
            res.append(evaluate_study(pred, gt, spacing, sid, connectivity))
        except MirrorSegError as e:
            raise type(e)(f"study {sid}: {e}") from e
    return CohortReport(res)
