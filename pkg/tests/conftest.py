import os

import matplotlib
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mirror_seg.config import DatasetConfig, InferenceConfig, RunConfig
from mirror_seg.mirror_net import BranchConfig
from mirror_seg.sampler import AugmentConfig
from mirror_seg.train import Stage, TrainConfig
from mirror_seg.volumes import PhantomConfig, generate_phantom

matplotlib.use("Agg")

settings.register_profile("ci", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("dev", max_examples=10, deadline=None)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_phantom_cfg():
    return PhantomConfig(shape=(32, 32, 32), spacing=(2.0, 2.0, 2.0), lesion_count_range=(1, 2), lesion_radius_range_mm=(3.0, 5.0), seed=7)


@pytest.fixture(scope="session")
def small_phantom(small_phantom_cfg):
    return generate_phantom(small_phantom_cfg)


@pytest.fixture
def smoke_cfg(tmp_path):
    "A run config small enough for a full phantom -> train -> infer -> eval pass in seconds"
    branch = dict(levels=2, base_channels=2)
    return RunConfig(
        data_dir=str(tmp_path / "data"),
        output_dir=str(tmp_path / "run"),
        phantom=PhantomConfig(shape=(24, 24, 24), lesion_count_range=(1, 1), lesion_radius_range_mm=(4.0, 5.0)),
        dataset=DatasetConfig(n_train=2, n_val=1, n_test=1, n_lesion_free=1),
        ct_branch=BranchConfig(out_channels=4, **branch),
        pet_branch=BranchConfig(out_channels=1, **branch),
        train_ct=TrainConfig(Stage.CT, n_epoch=1, lr=0.01, patch_size=16, batch_size=2, swa_keep_every=1, swa_average_last=1),
        train_pet=TrainConfig(Stage.PET, n_epoch=2, lr=0.004, patch_size=16, batch_size=2, swa_keep_every=1, swa_average_last=2),
        augment=AugmentConfig.off(),
        inference=InferenceConfig(patch_size=16, tta=True, tta_mode="single", batch_size=2),
    )
