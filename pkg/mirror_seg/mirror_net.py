"""The two-branch mirror UNet-3D: a CT branch segmenting tissue groups and a
PET branch segmenting lesions that also sees the CT encoder bottleneck."""

__all__ = [
    "BranchConfig",
    "ConvBlock",
    "UNetBranch",
    "MirrorNet",
    "CTSegmenter",
    "freeze_ct",
    "unfreeze_ct",
    "branch_params",
    "checkpoint_state",
    "load_checkpoint_state",
    "CHALLENGE_TISSUE_GROUPS",
    "TissueGrouping",
    "group_tissues",
]

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import torch
from fastcore.basics import store_attr
from torch import nn

from .engine import (
    concat_channels,
    conv3d,
    downsample_max2,
    instance_norm,
    relu,
    upsample_nearest2,
)
from .errors import ConfigError, GroupingError, ShapeError
from .volumes import LabelKind, LabelMap


@dataclass
class BranchConfig:
    "Depth and width of one UNet-3D branch"
    out_channels: int = 1
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1

    def __post_init__(self):
        for k in ("out_channels", "levels", "base_channels", "in_channels"):
            if int(getattr(self, k)) < 1:
                raise ConfigError(f"BranchConfig.{k} must be >= 1, got {getattr(self, k)}")

    @property
    def bottleneck_channels(self):
        return self.base_channels * 2**self.levels

    def check_patch(self, shape):
        "Raise `ShapeError` unless every spatial dim in `shape` is divisible by 2**levels"
        f = 2**self.levels
        if any(int(d) % f for d in shape):
            raise ShapeError(f"spatial dims {tuple(shape)} must be divisible by 2**levels = {f}")


class ConvBlock(nn.Module):
    "Two rounds of 3x3x3 conv, instance norm, relu"

    def __init__(self, ni, nf):
        super().__init__()
        self.conv1, self.norm1 = nn.Conv3d(ni, nf, 3, padding=1), nn.InstanceNorm3d(nf, affine=True)
        self.conv2, self.norm2 = nn.Conv3d(nf, nf, 3, padding=1), nn.InstanceNorm3d(nf, affine=True)

    def forward(self, x):
        for conv, norm in ((self.conv1, self.norm1), (self.conv2, self.norm2)):
            x = relu(instance_norm(conv3d(x, conv), norm.weight, norm.bias, norm.eps))
        return x


class UNetBranch(nn.Module):
    """One UNet-3D: `levels` encoder blocks with max-pool, a bottleneck block, and a
    decoder of nearest upsampling + skip concat + `ConvBlock`, ending in a 1x1 head.

    `bottleneck_extra` widens the first decoder block so that foreign features can
    be concatenated onto the bottleneck before decoding.
    """

    def __init__(self, cfg: BranchConfig, bottleneck_extra=0):
        super().__init__()
        store_attr("cfg,bottleneck_extra")
        L, b = cfg.levels, cfg.base_channels
        chans = [b * 2**i for i in range(L)]
        self.encoder = nn.ModuleList(
            [ConvBlock(cfg.in_channels if i == 0 else chans[i - 1], chans[i]) for i in range(L)]
        )
        self.bottleneck = ConvBlock(chans[-1], cfg.bottleneck_channels)
        ups = [cfg.bottleneck_channels + bottleneck_extra] + chans[:0:-1]
        self.decoder = nn.ModuleList(
            [ConvBlock(up + skip, skip) for up, skip in zip(ups, chans[::-1])]
        )
        self.head = nn.Conv3d(b, cfg.out_channels, 1)

    def encode(self, x):
        "Returns `(bottleneck, skips)` with skips ordered from finest to coarsest"
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"branch expects N,{self.cfg.in_channels},D,H,W input, got {tuple(x.shape)}"
            )
        self.cfg.check_patch(x.shape[2:])
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = downsample_max2(x)
        return self.bottleneck(x), skips

    def decode(self, x, skips):
        for block, skip in zip(self.decoder, reversed(skips)):
            x = block(concat_channels(upsample_nearest2(x), skip))
        return conv3d(x, self.head)

    def forward(self, x):
        return self.decode(*self.encode(x))


class MirrorNet(nn.Module):
    "CT branch `ct` and PET branch `pet`; the CT bottleneck is concatenated onto the PET bottleneck"

    def __init__(self, ct_cfg: BranchConfig, pet_cfg: BranchConfig):
        super().__init__()
        if ct_cfg.levels != pet_cfg.levels:
            raise ConfigError(
                f"both branches need the same depth, got ct={ct_cfg.levels} pet={pet_cfg.levels}"
            )
        self.ct = UNetBranch(ct_cfg)
        self.pet = UNetBranch(pet_cfg, bottleneck_extra=ct_cfg.bottleneck_channels)
        self.ct_frozen, self.ablate_ct = False, False

    def forward_ct(self, ct):
        "Returns `(tissue_logits, bottleneck)`"
        bn, skips = self.ct.encode(ct)
        return self.ct.decode(bn, skips), bn

    def forward_pet(self, pet, ct_bottleneck):
        bn, skips = self.pet.encode(pet)
        if ct_bottleneck.shape[0] != bn.shape[0] or ct_bottleneck.shape[2:] != bn.shape[2:]:
            raise ShapeError(
                f"CT bottleneck {tuple(ct_bottleneck.shape)} does not match PET bottleneck {tuple(bn.shape)}"
            )
        if ct_bottleneck.shape[1] != self.pet.bottleneck_extra:
            raise ShapeError(
                f"CT bottleneck has {ct_bottleneck.shape[1]} channels, expected {self.pet.bottleneck_extra}"
            )
        if self.ablate_ct:
            ct_bottleneck = torch.zeros_like(ct_bottleneck)
        return self.pet.decode(concat_channels(bn, ct_bottleneck), skips)

    def forward_full(self, ct, pet):
        "Lesion logits for aligned CT and PET patches"
        if ct.shape != pet.shape:
            raise ShapeError(f"CT patch {tuple(ct.shape)} and PET patch {tuple(pet.shape)} differ")
        return self.forward_pet(pet, self.ct.encode(ct)[0])

    def forward(self, ct, pet):
        return self.forward_full(ct, pet)

    @contextmanager
    def ablated_ct(self):
        "Within this context the PET branch receives an all-zero CT bottleneck"
        old, self.ablate_ct = self.ablate_ct, True
        try:
            yield self
        finally:
            self.ablate_ct = old


class CTSegmenter(nn.Module):
    "Exposes `net.forward_ct` logits as a single-input model for CT-stage training"

    def __init__(self, net: MirrorNet):
        super().__init__()
        self.net = net

    def forward(self, ct):
        return self.net.forward_ct(ct)[0]


def freeze_ct(net: MirrorNet):
    "Stop gradients to every CT-branch parameter"
    for p in net.ct.parameters():
        p.requires_grad_(False)
    net.ct_frozen = True


def unfreeze_ct(net: MirrorNet):
    for p in net.ct.parameters():
        p.requires_grad_(True)
    net.ct_frozen = False


def branch_params(net: MirrorNet, branch="all"):
    "Parameters of the `ct` branch, the `pet` branch or `all`, in registration order"
    if branch == "ct":
        return list(net.ct.parameters())
    if branch == "pet":
        return list(net.pet.parameters())
    if branch == "all":
        return list(net.parameters())
    raise ConfigError(f"unknown branch {branch!r}, expected 'ct', 'pet' or 'all'")


def checkpoint_state(net: nn.Module):
    "State of `net` keyed by checkpoint names, e.g. `ct/encoder.0.conv1.weight`"
    return OrderedDict((k.replace(".", "/", 1), v) for k, v in net.state_dict().items())


def load_checkpoint_state(net: nn.Module, state):
    "Inverse of `checkpoint_state`; names and shapes must match exactly"
    state = OrderedDict((k.replace("/", ".", 1), v) for k, v in state.items())
    own = net.state_dict()
    missing, extra = set(own) - set(state), set(state) - set(own)
    if missing or extra:
        raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise ShapeError(f"checkpoint tensor {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
    net.load_state_dict(state)
    return net


CHALLENGE_TISSUE_GROUPS = (
    "brain",
    "trachea",
    "lungs",
    "adrenal glands",
    "thyroid",
    "spleen",
    "liver",
    "gallbladder",
    "pancreas",
    "urinary system",
    "cardiovascular system",
    "gastrointestinal tract",
    "bones",
    "muscles",
    "fat",
    "others",
)


@dataclass
class TissueGrouping:
    "Group names plus a fine-label -> group-index table; unlabelled voxels (0) go to `others`"
    names: Tuple[str, ...] = CHALLENGE_TISSUE_GROUPS
    mapping: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.names = tuple(self.names)
        self.mapping = {int(k): int(v) for k, v in self.mapping.items()}
        bad = {k: v for k, v in self.mapping.items() if k < 0 or not 0 <= v < len(self.names)}
        if bad:
            raise ConfigError(f"grouping entries out of range: {bad}")

    @property
    def others(self):
        return self.names.index("others") if "others" in self.names else None

    @classmethod
    def identity(cls, n, names=None):
        "Every label maps to itself, as for phantom tissue maps"
        names = tuple(names) if names is not None else tuple(f"tissue{i}" for i in range(n))
        return cls(names, {i: i for i in range(n)})

    def lookup_table(self, max_label):
        lut = np.full(int(max_label) + 1, -1, dtype=np.int64)
        for k, v in self.mapping.items():
            if k <= max_label:
                lut[k] = v
        if lut[0] < 0 and self.others is not None:
            lut[0] = self.others
        return lut


def group_tissues(fine_labels: LabelMap, grouping: TissueGrouping) -> LabelMap:
    "Remap fine tissue labels to group indices"
    data = fine_labels.data
    lut = grouping.lookup_table(int(data.max()) if data.size else 0)
    present = np.unique(data)
    unmapped = [int(l) for l in present if lut[l] < 0]
    if unmapped:
        raise GroupingError(f"fine labels without a group: {unmapped}")
    dtype = np.uint8 if len(grouping.names) <= 256 else np.uint16
    return fine_labels.new(lut[data].astype(dtype), kind=LabelKind.TISSUES)
