"The two training stages: CT tissue segmentation, then lesion segmentation with the CT branch frozen"

__all__ = ["Stage", "TrainConfig", "TrainResult", "train_stage"]

from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import List, Optional

import pandas as pd
from fastcore.foundation import L
from fastcore.xtras import Path

from .callback.progress import CSVLogger, NonFiniteLossCallback
from .callback.schedule import ParamScheduler, SchedPoly
from .callback.swa import SWACallback
from .errors import ConfigError, StageError
from .learner import DataLoaders, Learner
from .losses import CTLoss, PETLoss
from .metrics import Dice, DiceMulti, tissue_accuracy
from .mirror_net import CTSegmenter, MirrorNet, branch_params
from .optimizer import SGD, Checkpoint
from .sampler import AugmentConfig, PatchLoader
from .utils import set_seed


class Stage(str, Enum):
    CT = "ct"
    PET = "pet"


@dataclass
class TrainConfig:
    "Hyper-parameters of one training stage; `lr` is the initial rate of the polynomial decay"
    stage: Stage = Stage.PET
    n_epoch: int = 40
    lr: float = 0.004
    poly_power: float = 0.9
    momentum: float = 0.9
    batch_size: int = 2
    patch_size: int = 32
    swa_keep_every: int = 5
    swa_average_last: int = 3
    seed: int = 0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.n_epoch < 1:
            raise ConfigError(f"n_epoch must be >= 1, got {self.n_epoch}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.patch_size < 2:
            raise ConfigError(f"batch_size >= 1 and patch_size >= 2 required, got {self.batch_size}, {self.patch_size}")
        if self.swa_keep_every < 1 or self.swa_average_last < 1:
            raise ConfigError("swa_keep_every and swa_average_last must be >= 1")
        if self.stage is Stage.PET and self.swa_keep_every * self.swa_average_last > self.n_epoch:
            raise ConfigError(
                f"cannot average {self.swa_average_last} checkpoints kept every {self.swa_keep_every} "
                f"epochs within {self.n_epoch} epochs"
            )

    @classmethod
    def full_scale(cls, stage):
        "Full-scale settings: 100 CT epochs at 0.01, 200 PET epochs at 0.004, 64-voxel patches"
        if Stage(stage) is Stage.CT:
            return cls(Stage.CT, n_epoch=100, lr=0.01, patch_size=64, swa_keep_every=10, swa_average_last=6)
        return cls(Stage.PET, n_epoch=200, lr=0.004, patch_size=64, swa_keep_every=10, swa_average_last=6)


@dataclass
class TrainResult:
    net: MirrorNet
    checkpoints: List[Checkpoint]
    log: pd.DataFrame
    learn: Optional[Learner] = None


def _check_stage(net, train, cfg):
    if cfg.stage is Stage.CT:
        if net.ct_frozen:
            raise StageError("CT stage started on a frozen CT branch")
        missing = [s.id for s in train if s.tissues is None]
        if missing:
            raise StageError(f"CT stage needs tissue labels, missing for {missing}")
    else:
        if not net.ct_frozen:
            raise StageError("PET stage requires a frozen CT branch, call freeze_ct first")
        missing = [s.id for s in train if s.lesions is None]
        if missing:
            raise StageError(f"PET stage needs lesion masks, missing for {missing}")


def train_stage(net, train, valid, cfg: TrainConfig, path=".", augment_cfg=None, cbs=None, progress=True, logger=print, config_hash=None):
    """Train one stage of `net` on `train` studies, validating on `valid` each epoch.

    The learning rate follows the polynomial decay once per epoch, checkpoints are
    kept every `swa_keep_every` epochs (written under `path/models`) and, for the
    PET stage, the last `swa_average_last` of them are averaged into `net`.
    The per-epoch loss log is written to `path/<stage>_loss.csv`.
    """
    _check_stage(net, train, cfg)
    set_seed(cfg.seed)
    path = Path(path)
    stage = cfg.stage.value
    mk = partial(PatchLoader, patch_size=cfg.patch_size, batch_size=cfg.batch_size, stage=stage, seed=cfg.seed)
    dls = DataLoaders(
        mk(train, train=True, augment_cfg=augment_cfg if augment_cfg is not None else AugmentConfig()),
        mk(valid, train=False, augment_cfg=AugmentConfig.off()),
        path=path,
    )
    if cfg.stage is Stage.CT:
        model, loss, metrics = CTSegmenter(net), CTLoss(), [tissue_accuracy, DiceMulti()]
    else:
        model, loss, metrics = net, PETLoss(), [Dice()]
    swa = SWACallback(
        keep_every=cfg.swa_keep_every,
        average_last=cfg.swa_average_last,
        stage=stage,
        save_dir=path / "models",
        average=cfg.stage is Stage.PET,
        config_hash=config_hash,
    )
    learn = Learner(
        dls,
        model,
        loss,
        opt_func=partial(SGD, momentum=cfg.momentum),
        lr=cfg.lr,
        splitter=lambda m: branch_params(net, stage),
        metrics=metrics,
        path=path,
        cbs=L(
            NonFiniteLossCallback(),
            ParamScheduler({"lr": SchedPoly(cfg.lr, cfg.n_epoch, cfg.poly_power)}),
            CSVLogger(path / f"{stage}_loss.csv", stage),
            swa,
        )
        + L(cbs),
    )
    learn.logger = logger
    if progress:
        learn.fit(cfg.n_epoch)
    else:
        with learn.no_bar():
            learn.fit(cfg.n_epoch)
    return TrainResult(net, list(swa.checkpoints), learn.recorder.log_frame(), learn)
