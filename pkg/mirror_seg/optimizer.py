__all__ = [
    "detuplify_pg",
    "set_item_pg",
    "pytorch_hp_map",
    "OptimWrapper",
    "SGD",
    "sgd_step",
    "lr_schedule",
    "Checkpoint",
    "swa_average",
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

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from fastcore.basics import GetAttr, range_of
from fastcore.foundation import L
from fastcore.meta import delegates
from fastcore.xtras import is_listy
from torch import optim

from .engine import load_params, save_params
from .errors import RangeError, ShapeError


def detuplify_pg(d):
    res = {}
    for k, v in d.items():
        if k == "params":
            continue
        if is_listy(v):
            res.update(**{f"{k}__{i}": v_ for i, v_ in enumerate(v)})
        else:
            res[k] = v
    return res


def set_item_pg(pg, k, v):
    if "__" not in k:
        pg[k] = v
    else:
        name, idx = k.split("__")
        pg[name] = tuple(v if i == int(idx) else pg[name][i] for i in range_of(pg[name]))
    return pg


pytorch_hp_map = {"momentum": "mom", "weight_decay": "wd"}


class OptimWrapper(GetAttr):
    "Wrap a `torch.optim` optimizer so hyper-parameters are read and set by fastai names (`lr`, `mom`, `wd`)"
    _xtra = ["zero_grad", "step", "state_dict", "load_state_dict"]
    _default = "opt"

    def __init__(self, opt, hp_map=None):
        self.opt = opt
        if hp_map is None:
            hp_map = pytorch_hp_map
        self.fwd_map = {
            k: hp_map[k] if k in hp_map else k for k in detuplify_pg(opt.param_groups[0]).keys()
        }
        self.bwd_map = {v: k for k, v in self.fwd_map.items()}

    @property
    def hypers(self):
        return [
            {self.fwd_map[k]: v for k, v in detuplify_pg(pg).items() if k != "params"}
            for pg in self.opt.param_groups
        ]

    def set_hyper(self, k, v):
        "Set the value(s) in `v` for hyper-parameter `k`"
        v = L(v, use_list=None)
        if len(v) == 1:
            v = v * len(self.param_lists)
        if len(v) != len(self.param_lists):
            raise ShapeError(
                f"trying to set {len(v)} values for {k} but there are {len(self.param_lists)} parameter groups"
            )
        for pg, v_ in zip(self.opt.param_groups, v):
            set_item_pg(pg, self.bwd_map[k], v_)

    def set_hypers(self, **kwargs):
        L(kwargs.items()).starmap(self.set_hyper)

    @property
    def param_lists(self):
        return [pg["params"] for pg in self.opt.param_groups]


@delegates(optim.SGD)
def SGD(params, **kwargs):
    "Convenience function to make a SGD optimizer compatible with `Learner`"
    return OptimWrapper(optim.SGD(params, **kwargs))


@torch.no_grad()
def sgd_step(params, grads, lr, momentum, velocity):
    "One momentum-SGD update in place: `v = momentum*v + g`, `p -= lr*v`"
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError(
            f"sgd_step got {len(params)} params, {len(grads)} grads, {len(velocity)} velocities"
        )
    for p, g, v in zip(params, grads, velocity):
        if not (p.shape == g.shape == v.shape):
            raise ShapeError(f"sgd_step shapes {tuple(p.shape)}, {tuple(g.shape)}, {tuple(v.shape)}")
        v.mul_(momentum).add_(g)
        p.sub_(lr * v)
    return params, velocity


def lr_schedule(ep, n_epoch, lr_o, power=0.9):
    "Polynomial decay `lr_o * (1 - ep/n_epoch)**power` over the completed-epoch count `ep`"
    if n_epoch < 1 or not 0 <= ep <= n_epoch:
        raise RangeError(f"epoch {ep} outside [0, {n_epoch}]")
    return lr_o * (1.0 - ep / n_epoch) ** power


@dataclass
class Checkpoint:
    "Named f32 parameters captured after `epoch` completed epochs"
    epoch: int
    params: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    config_hash: Optional[str] = None

    @classmethod
    def capture(cls, state, epoch, config_hash=None):
        "Detached CPU float copies of `state`"
        params = OrderedDict((k, v.detach().cpu().float().clone()) for k, v in state.items())
        return cls(int(epoch), params, config_hash)

    def save(self, path):
        return save_params(self.params, path, epoch=self.epoch, config_hash=self.config_hash)

    @classmethod
    def load(cls, path):
        state, manifest = load_params(path)
        return cls(manifest.get("epoch"), state, manifest.get("config_hash"))


def swa_average(checkpoints):
    "Elementwise mean of each named parameter across `checkpoints`, independent of their order"
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise RangeError("swa_average needs at least one checkpoint")
    first = checkpoints[0].params
    for c in checkpoints[1:]:
        if list(c.params) != list(first) and set(c.params) != set(first):
            raise ShapeError(
                f"checkpoint at epoch {c.epoch} has parameters {sorted(set(c.params) ^ set(first))} not shared by all"
            )
    res = OrderedDict()
    for k, ref in first.items():
        stack = []
        for c in checkpoints:
            if tuple(c.params[k].shape) != tuple(ref.shape):
                raise ShapeError(f"parameter {k} has shape {tuple(c.params[k].shape)} at epoch {c.epoch}")
            stack.append(c.params[k].detach().cpu().double().numpy())
        # sorted summation keeps the float64 total independent of checkpoint order
        mean = np.sort(np.stack(stack), axis=0).sum(axis=0) / len(stack)
        res[k] = torch.from_numpy(mean.astype(np.float32))
    return res
