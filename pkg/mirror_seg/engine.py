"""Checked N,C,D,H,W primitives for the mirror network, a finite-difference
gradient checker, and the raw parameter checkpoint format.

Forward and backward passes come from torch autograd; these wrappers add the
shape contracts the network relies on and turn violations into `ShapeError`.
"""

__all__ = [
    "ConvSpec",
    "conv3d",
    "downsample_max2",
    "upsample_nearest2",
    "instance_norm",
    "relu",
    "sigmoid",
    "softmax_channels",
    "concat_channels",
    "GradCheckReport",
    "grad_check",
    "save_params",
    "load_params",
]

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from fastcore.xtras import Path
from torch import nn

from .errors import NonFiniteError, ShapeError, VolumeFormatError

ConvSpec = nn.Conv3d


def _check_5d(x, name="input"):
    if x.ndim != 5:
        raise ShapeError(f"{name} must be N,C,D,H,W, got shape {tuple(x.shape)}")


def conv3d(x, spec: ConvSpec):
    "Cross-correlate `x` with the weights and bias held by `spec`"
    _check_5d(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d expects {spec.in_channels} input channels, got {x.shape[1]}")
    out = [
        (d + 2 * p - k) // s + 1
        for d, p, k, s in zip(x.shape[2:], spec.padding, spec.kernel_size, spec.stride)
    ]
    if min(out) <= 0:
        raise ShapeError(f"conv3d output dims {tuple(out)} for input {tuple(x.shape)}")
    return F.conv3d(x, spec.weight, spec.bias, spec.stride, spec.padding)


def downsample_max2(x):
    "2x2x2 max pooling; ties resolve to the lowest index in each window"
    _check_5d(x)
    if any(d % 2 for d in x.shape[2:]):
        raise ShapeError(f"downsample_max2 needs even spatial dims, got {tuple(x.shape[2:])}")
    return F.max_pool3d(x, 2)


def upsample_nearest2(x):
    "2x nearest-neighbour upsampling"
    _check_5d(x)
    return F.interpolate(x, scale_factor=2, mode="nearest")


def instance_norm(x, gamma=None, beta=None, eps=1e-5):
    "Per-sample, per-channel standardization over D,H,W followed by an optional affine map"
    _check_5d(x)
    if int(np.prod(x.shape[2:])) < 2:
        raise ShapeError(f"instance_norm needs >= 2 voxels per channel, got {tuple(x.shape[2:])}")
    # float64 moments; a constant channel maps to beta
    dbl = lambda t: None if t is None else t.double()
    res = F.instance_norm(x.double(), weight=dbl(gamma), bias=dbl(beta), use_input_stats=True, eps=eps)
    return res.to(x.dtype)


def relu(x):
    return F.relu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def softmax_channels(x):
    "Softmax over dim 1"
    return torch.softmax(x, dim=1)


def concat_channels(a, b):
    "Stack `a` and `b` along the channel axis"
    _check_5d(a, "a")
    _check_5d(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {tuple(a.shape)} and {tuple(b.shape)} along channels")
    return torch.cat([a, b], dim=1)


@dataclass
class GradCheckReport:
    "Outcome of `grad_check`"
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    tol: float
    passed: bool


def _finite(t, what):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite {what} during gradient check")


def grad_check(f, x, eps=1e-3, tol=1e-4):
    """Compare the autograd gradient of scalar `f` at `x` with central differences.

    Both are computed in float64. The relative error of each element is
    `|a - n| / max(|a|, |n|, 1e-2 * max|a|)`, so elements whose gradient is
    tiny compared with the largest one are judged on an absolute scale.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {tuple(y.shape)}")
    _finite(y, "function value")
    (analytic,) = torch.autograd.grad(y, x)
    _finite(analytic, "analytic gradient")
    numeric = torch.zeros_like(x)
    flat, nflat = x.detach().view(-1), numeric.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
    _finite(numeric, "numeric gradient")
    err = (analytic - numeric).abs()
    floor = max(1e-2 * analytic.abs().max().item(), 1e-12)
    rel = err / torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor))
    worst = int(rel.view(-1).argmax())
    max_rel = rel.view(-1)[worst].item()
    return GradCheckReport(
        max_rel_error=max_rel,
        max_abs_error=err.max().item(),
        worst_index=tuple(int(i) for i in np.unravel_index(worst, tuple(x.shape))),
        tol=tol,
        passed=max_rel < tol,
    )


# Parameter checkpoints: <name>.json manifest + <name>.bin little-endian f32 blob


def _base(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def save_params(state, path, epoch=None, config_hash=None):
    "Write the tensors of `state` (a name -> tensor mapping) as a manifest plus raw f32 blob"
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        buf = arr.tobytes(order="C")
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
        )
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "format": "mirror_seg-params",
        "dtype": "f32",
        "epoch": epoch,
        "config_hash": config_hash,
        "tensors": entries,
    }
    base.with_suffix(".bin").write_bytes(b"".join(chunks))
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    return base


def load_params(path):
    "Read a checkpoint written by `save_params`; returns `(state, manifest)`"
    base = _base(path)
    man, blob = base.with_suffix(".json"), base.with_suffix(".bin")
    for f in (man, blob):
        if not f.exists():
            raise VolumeFormatError(f"missing checkpoint file {f}")
    manifest = json.loads(man.read_text())
    payload = blob.read_bytes()
    state = OrderedDict()
    for e in manifest["tensors"]:
        shape, lo, n = tuple(e["shape"]), e["offset"], e["nbytes"]
        if lo + n > len(payload) or n != int(np.prod(shape, dtype=np.int64)) * 4:
            raise VolumeFormatError(f"{blob}: tensor {e['name']} does not fit the blob")
        arr = np.frombuffer(payload[lo : lo + n], dtype="<f4").astype(np.float32).reshape(shape)
        state[e["name"]] = torch.from_numpy(arr.copy())
    return state, manifest
