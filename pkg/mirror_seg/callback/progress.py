__all__ = ["ProgressCallback", "no_bar", "CSVLogger", "NonFiniteLossCallback"]

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

from contextlib import contextmanager

import pandas as pd
import torch
from fastcore.basics import patch, store_attr
from fastcore.xtras import Path
from fastprogress.fastprogress import master_bar, progress_bar

from ..errors import NonFiniteError
from ..learner import Learner
from ..utils import defaults, noop
from .core import Callback


class ProgressCallback(Callback):
    "A `Callback` to handle the display of progress bars"
    order, _stateattrs = 60, ("mbar", "pbar")

    def before_fit(self):
        "Setup the master bar over the epochs"
        assert hasattr(self.learn, "recorder")
        if self.create_mbar:
            self.mbar = master_bar(list(range(self.n_epoch)))
        if self.learn.logger != noop:
            self.old_logger, self.learn.logger = self.logger, self._write_stats
            self._write_stats(self.recorder.metric_names)
        else:
            self.old_logger = noop

    def before_epoch(self):
        if getattr(self, "mbar", False):
            self.mbar.update(self.epoch)

    def before_train(self):
        self._launch_pbar()

    def before_validate(self):
        self._launch_pbar()

    def after_train(self):
        self.pbar.on_iter_end()

    def after_validate(self):
        self.pbar.on_iter_end()

    def after_batch(self):
        self.pbar.update(self.iter + 1)
        if hasattr(self, "smooth_loss"):
            self.pbar.comment = f"{self.smooth_loss:.4f}"

    def _launch_pbar(self):
        self.pbar = progress_bar(self.dl, parent=getattr(self, "mbar", None), leave=False)
        self.pbar.update(0)

    def after_fit(self):
        if getattr(self, "mbar", False):
            self.mbar.on_iter_end()
            delattr(self, "mbar")
        if hasattr(self, "old_logger"):
            self.learn.logger = self.old_logger

    def _write_stats(self, log):
        if getattr(self, "mbar", False):
            self.mbar.write([f"{l:.6f}" if isinstance(l, float) else str(l) for l in log], table=True)


if ProgressCallback not in defaults.callbacks:
    defaults.callbacks.append(ProgressCallback)


@patch
@contextmanager
def no_bar(self: Learner):
    "Context manager that deactivates the use of progress bars"
    has_progress = hasattr(self, "progress")
    if has_progress:
        self.remove_cb(self.progress)
    try:
        yield self
    finally:
        if has_progress:
            self.add_cb(ProgressCallback())


class CSVLogger(Callback):
    "Rewrite `fname` after every epoch with columns `epoch, stage, train_loss, val_loss, lr`"
    order = 55

    def __init__(self, fname, stage):
        store_attr("stage")
        self.fname = Path(fname)

    def before_fit(self):
        self.rows = []
        self.fname.parent.mkdir(parents=True, exist_ok=True)

    def after_epoch(self):
        train_loss, val_loss, lr = self.learn.final_record[:3]
        self.rows.append(
            dict(epoch=self.epoch, stage=self.stage, train_loss=train_loss, val_loss=val_loss, lr=lr)
        )
        pd.DataFrame(self.rows, columns=["epoch", "stage", "train_loss", "val_loss", "lr"]).to_csv(
            self.fname, index=False
        )


class NonFiniteLossCallback(Callback):
    "Abort training with `NonFiniteError` as soon as a batch loss is NaN or infinite"
    order = -5

    def after_loss(self):
        if not torch.isfinite(self.learn.loss).all():
            part = "train" if self.training else "valid"
            raise NonFiniteError(
                f"non-finite {part} loss {self.learn.loss.item()} at epoch {self.epoch} batch {self.iter}"
            )
