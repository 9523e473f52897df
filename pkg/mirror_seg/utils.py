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

__all__ = [
    "defaults",
    "noop",
    "params",
    "trainable_params",
    "apply",
    "to_detach",
    "find_bs",
    "item_find",
    "tensor",
    "set_seed",
    "configure_threads",
    "derive_seed",
]

import os
import random
from types import SimpleNamespace

import numpy as np
import torch
from fastcore.dispatch import retain_type
from fastcore.xtras import is_listy
from torch import Tensor

defaults = SimpleNamespace()
defaults.__doc__ = "mirror_seg defaults"
defaults.threads_env = "MIRRORSEG_NUM_THREADS"


def noop(x=None, *args, **kwargs):
    "Do nothing"
    return x


def params(m):
    "Return all parameters of `m`"
    return [p for p in m.parameters()]


def trainable_params(m):
    "Return all trainable parameters of `m`"
    return [p for p in m.parameters() if p.requires_grad]


def apply(func, x, *args, **kwargs):
    "Apply `func` recursively to `x`, passing on args"
    if is_listy(x):
        return type(x)([apply(func, o, *args, **kwargs) for o in x])
    if isinstance(x, dict):
        return {k: apply(func, v, *args, **kwargs) for k, v in x.items()}
    res = func(x, *args, **kwargs)
    return res if x is None else retain_type(res, x)


def to_detach(b, cpu=True):
    "Recursively detach lists of tensors in `b `; put them on the CPU if `cpu=True`."

    def _inner(x, cpu=True):
        if not isinstance(x, Tensor):
            return x
        x = x.detach()
        return x.cpu() if cpu else x

    return apply(_inner, b, cpu=cpu)


def item_find(x, idx=0):
    "Recursively takes the `idx`-th element of `x`"
    if is_listy(x):
        return item_find(x[idx])
    if isinstance(x, dict):
        key = list(x.keys())[idx] if isinstance(idx, int) else idx
        return item_find(x[key])
    return x


def find_bs(b):
    "Recursively search the batch size of `b`."
    return item_find(b).shape[0]


def tensor(x, dtype=None):
    "Like `torch.as_tensor`, but numpy float64 and uint arrays land as float32/int64 tensors"
    if isinstance(x, Tensor):
        return x if dtype is None else x.to(dtype)
    x = np.ascontiguousarray(x)
    if dtype is None:
        if x.dtype == np.float64:
            x = x.astype(np.float32)
        elif x.dtype in (np.uint16, np.uint32):
            x = x.astype(np.int64)
    res = torch.from_numpy(x)
    return res if dtype is None else res.to(dtype)


def set_seed(s, reproducible=True):
    "Set the random seed in `random`, `numpy` and `torch`; optionally force deterministic kernels"
    s = int(s) % 2**32
    random.seed(s)
    np.random.seed(s)
    torch.manual_seed(s)
    if reproducible:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


def derive_seed(*keys):
    "A 63-bit seed derived deterministically from integer `keys`"
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def configure_threads(n=None):
    "Set torch intra-op threads from `n` or the `MIRRORSEG_NUM_THREADS` environment variable"
    if n is None:
        n = os.environ.get(defaults.threads_env)
    if n:
        torch.set_num_threads(int(n))
    return torch.get_num_threads()
