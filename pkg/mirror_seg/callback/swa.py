"Checkpoint keeping on an epoch grid and stochastic weight averaging of the last few"

__all__ = ["SWACallback"]

from warnings import warn

from fastcore.basics import store_attr
from fastcore.xtras import Path

from ..mirror_net import checkpoint_state, load_checkpoint_state
from ..optimizer import Checkpoint, swa_average
from .core import Callback


class SWACallback(Callback):
    """Keep a `Checkpoint` whenever the completed-epoch count is a multiple of
    `keep_every` (and after the final epoch). After fit, when `average` is set,
    load the mean of the last `average_last` grid checkpoints into the model.

    Checkpoints are written to `save_dir/<stage>_ep<NNN>` when `save_dir` is given.
    """

    order = 70

    def __init__(self, keep_every=10, average_last=6, stage="pet", save_dir=None, average=True, config_hash=None):
        store_attr("keep_every,average_last,stage,average,config_hash")
        self.save_dir = None if save_dir is None else Path(save_dir)

    @property
    def net(self):
        return getattr(self.learn.model, "net", self.learn.model)

    def before_fit(self):
        self.checkpoints, self.averaged = [], None

    def after_epoch(self):
        done = self.epoch + 1
        if done % self.keep_every and done != self.n_epoch:
            return
        ckpt = Checkpoint.capture(checkpoint_state(self.net), done, self.config_hash)
        self.checkpoints.append(ckpt)
        if self.save_dir is not None:
            ckpt.save(self.save_dir / f"{self.stage}_ep{done:03d}")

    def after_fit(self):
        if not self.average:
            return
        grid = [c for c in self.checkpoints if c.epoch % self.keep_every == 0]
        if not grid:
            warn("no checkpoint on the keep grid, SWA skipped")
            return
        if len(grid) < self.average_last:
            warn(f"only {len(grid)} checkpoints available, averaging fewer than {self.average_last}")
        self.averaged = grid[-self.average_last :]
        load_checkpoint_state(self.net, swa_average(self.averaged))
