__all__ = ["SchedPoly", "ParamScheduler"]

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

from fastcore.basics import store_attr

from ..optimizer import lr_schedule
from .core import Callback


class SchedPoly:
    "Polynomial decay from `start` to 0 over `n_epoch` epochs, evaluated at a completed-epoch count"

    def __init__(self, start, n_epoch, power=0.9):
        store_attr("start,n_epoch,power")

    def __call__(self, ep):
        return lr_schedule(ep, self.n_epoch, self.start, self.power)


class ParamScheduler(Callback):
    "Set hyper-parameters once per epoch from `scheds`, a dict of name -> f(completed_epochs)"
    order, run_valid = 60, False

    def __init__(self, scheds):
        self.scheds = scheds

    def before_fit(self):
        self.hps = {p: [] for p in self.scheds.keys()}

    def before_epoch(self):
        for n, f in self.scheds.items():
            self.opt.set_hyper(n, f(self.epoch))
            self.hps[n].append(self.opt.hypers[-1][n])

    def after_fit(self):
        "Save the hyper-parameters in the recorder if there is one"
        if hasattr(self.learn, "recorder") and hasattr(self, "hps"):
            self.recorder.hps = self.hps
