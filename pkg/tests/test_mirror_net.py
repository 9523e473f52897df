import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mirror_seg.engine import grad_check
from mirror_seg.errors import ConfigError, GroupingError, ShapeError
from mirror_seg.losses import PETLoss
from mirror_seg.mirror_net import (
    CHALLENGE_TISSUE_GROUPS,
    BranchConfig,
    CTSegmenter,
    MirrorNet,
    TissueGrouping,
    branch_params,
    checkpoint_state,
    freeze_ct,
    group_tissues,
    load_checkpoint_state,
    unfreeze_ct,
)
from mirror_seg.optimizer import SGD
from mirror_seg.volumes import LabelKind, LabelMap


def _net(levels=2, base=2, n_tissues=4, seed=0):
    torch.manual_seed(seed)
    return MirrorNet(
        BranchConfig(out_channels=n_tissues, levels=levels, base_channels=base),
        BranchConfig(out_channels=1, levels=levels, base_channels=base),
    )


def test_forward_ct_shapes():
    net = _net()
    logits, bn = net.forward_ct(torch.randn(3, 1, 8, 8, 8))
    assert logits.shape == (3, 4, 8, 8, 8)
    assert bn.shape == (3, 8, 2, 2, 2)


def test_identical_patches_identical_outputs():
    net = _net()
    x = torch.randn(1, 1, 8, 8, 8)
    logits, _ = net.forward_ct(torch.cat([x, x]))
    assert torch.equal(logits[0], logits[1])


def test_bad_patch_shapes():
    net = _net()
    with pytest.raises(ShapeError, match="divisible"):
        net.forward_ct(torch.randn(1, 1, 6, 8, 8))
    with pytest.raises(ShapeError):
        net.forward_ct(torch.randn(1, 2, 8, 8, 8))
    with pytest.raises(ShapeError):
        net(torch.randn(1, 1, 8, 8, 8), torch.randn(1, 1, 16, 16, 16))
    with pytest.raises(ShapeError):
        net.forward_pet(torch.randn(1, 1, 8, 8, 8), torch.randn(1, 8, 4, 4, 4))
    with pytest.raises(ShapeError, match="channels"):
        net.forward_pet(torch.randn(1, 1, 8, 8, 8), torch.randn(1, 3, 2, 2, 2))


def test_mismatched_depths():
    with pytest.raises(ConfigError):
        MirrorNet(BranchConfig(levels=2), BranchConfig(levels=3))


def test_forward_full_composes():
    net = _net()
    ct, pet = torch.randn(2, 1, 8, 8, 8), torch.randn(2, 1, 8, 8, 8)
    full = net.forward_full(ct, pet)
    assert full.shape == (2, 1, 8, 8, 8)
    assert torch.equal(full, net.forward_pet(pet, net.forward_ct(ct)[1]))
    assert torch.equal(full, net(ct, pet))


def test_fusion_is_not_degenerate():
    net = _net()
    ct, pet = torch.randn(1, 1, 8, 8, 8), torch.randn(1, 1, 8, 8, 8)
    full = net(ct, pet)
    with net.ablated_ct():
        ablated = net(ct, pet)
    assert not torch.equal(full, ablated)
    assert not net.ablate_ct
    assert torch.equal(net(ct, pet), full)


def test_not_flip_equivariant():
    net = _net()
    ct, pet = torch.randn(1, 1, 8, 8, 8), torch.randn(1, 1, 8, 8, 8)
    flipped = net(ct.flip(2), pet.flip(2)).flip(2)
    assert not torch.allclose(flipped, net(ct, pet))


def test_frozen_ct_gets_no_gradient():
    net = _net()
    freeze_ct(net)
    assert net.ct_frozen
    out = net(torch.randn(1, 1, 8, 8, 8), torch.randn(1, 1, 8, 8, 8))
    PETLoss()(out, torch.zeros_like(out)).backward()
    assert all(p.grad is None for p in net.ct.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in net.pet.parameters())
    unfreeze_ct(net)
    assert not net.ct_frozen and all(p.requires_grad for p in net.ct.parameters())


def test_pet_step_leaves_ct_unchanged():
    net = _net()
    freeze_ct(net)
    before = {k: v.clone() for k, v in net.ct.state_dict().items()}
    opt = SGD(branch_params(net, "pet"), lr=0.1, momentum=0.9)
    out = net(torch.randn(1, 1, 8, 8, 8), torch.randn(1, 1, 8, 8, 8))
    PETLoss()(out, torch.ones_like(out)).backward()
    opt.step()
    for k, v in net.ct.state_dict().items():
        assert torch.equal(v, before[k])


def test_branch_params_partition():
    net = _net()
    ct, pet, all_ = (branch_params(net, b) for b in ("ct", "pet", "all"))
    ids = lambda ps: [id(p) for p in ps]
    assert not set(ids(ct)) & set(ids(pet))
    assert sorted(ids(all_)) == sorted(ids(ct) + ids(pet))
    assert ids(pet) == ids(branch_params(net, "pet"))
    with pytest.raises(ConfigError):
        branch_params(net, "mri")


def test_checkpoint_state_round_trip():
    a, b = _net(seed=0), _net(seed=1)
    state = checkpoint_state(a)
    assert all(k.split("/")[0] in ("ct", "pet") for k in state)
    load_checkpoint_state(b, state)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    with pytest.raises(ShapeError):
        load_checkpoint_state(_net(base=4), state)
    state.popitem()
    with pytest.raises(ShapeError, match="missing"):
        load_checkpoint_state(b, state)


def test_ct_segmenter():
    net = _net()
    x = torch.randn(1, 1, 8, 8, 8)
    seg = CTSegmenter(net)
    assert torch.equal(seg(x), net.forward_ct(x)[0])
    assert {id(p) for p in seg.parameters()} == {id(p) for p in net.parameters()}


def test_full_net_grad_check():
    net = _net(levels=2, base=2).double()
    torch.manual_seed(3)
    ct = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
    pet = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
    target = (torch.rand(1, 1, 8, 8, 8) > 0.8).double()
    rep = grad_check(lambda t: PETLoss()(net(ct, t), target), pet, eps=1e-6, tol=1e-3)
    assert rep.passed, rep


def test_challenge_groups():
    assert len(CHALLENGE_TISSUE_GROUPS) == 16
    g = TissueGrouping()
    assert g.others == 15 and g.names[-1] == "others"


def test_identity_grouping():
    fine = LabelMap(np.arange(16, dtype=np.uint8).reshape(1, 4, 4).repeat(2, 0), (1, 1, 1), LabelKind.TISSUES)
    out = group_tissues(fine, TissueGrouping.identity(16, CHALLENGE_TISSUE_GROUPS))
    np.testing.assert_array_equal(out.data, fine.data)
    assert out.kind is LabelKind.TISSUES


def test_zero_labels_go_to_others():
    fine = LabelMap(np.zeros((3, 3, 3), dtype=np.uint8), (1, 1, 1), LabelKind.TISSUES)
    out = group_tissues(fine, TissueGrouping(mapping={5: 0}))
    assert (out.data == 15).all()


def test_unmapped_label_named():
    fine = LabelMap(np.array([1, 2, 9], dtype=np.uint8).reshape(1, 1, 3), (1, 1, 1), LabelKind.TISSUES)
    with pytest.raises(GroupingError, match=r"\[9\]"):
        group_tissues(fine, TissueGrouping(mapping={1: 0, 2: 1}))


@given(arrays(np.uint8, (3, 3, 3), elements=st.integers(0, 20)), st.integers(0, 2**16))
def test_grouping_matches_lookup(fine, seed):
    table = np.random.default_rng(seed).integers(0, 16, 21)
    grouping = TissueGrouping(mapping={i: int(table[i]) for i in range(21)})
    out = group_tissues(LabelMap(fine, (1, 1, 1), LabelKind.TISSUES), grouping)
    np.testing.assert_array_equal(out.data, table[fine])
