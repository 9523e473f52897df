import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mirror_seg.errors import (
    ConfigError,
    EmptyMaskError,
    ModalityError,
    NonFiniteError,
    PlacementError,
    RangeError,
    ShapeError,
    VolumeFormatError,
)
from mirror_seg.volumes import (
    BoundingBox,
    LabelKind,
    LabelMap,
    Modality,
    PhantomConfig,
    Volume,
    body_mask,
    crop_to_mask,
    generate_phantom,
    pad_to_size,
    paste_to_parent,
    read_volume,
    resample_nearest,
    resample_trilinear,
    write_volume,
)


def _ct(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float32), spacing, Modality.CT_HU)


def test_volume_is_read_only():
    v = _ct(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_volume_rejects_non_finite_naming_voxel():
    a = np.zeros((3, 3, 3), dtype=np.float32)
    a[1, 2, 0] = np.nan
    with pytest.raises(NonFiniteError, match=r"\(1, 2, 0\)"):
        _ct(a)


def test_volume_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        _ct(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        _ct(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_label_map_checks():
    assert LabelMap(np.ones((2, 2, 2), dtype=bool), (1, 1, 1)).data.dtype == np.uint8
    with pytest.raises(RangeError):
        LabelMap(np.full((2, 2, 2), 2), (1, 1, 1), LabelKind.BINARY)
    with pytest.raises(RangeError):
        LabelMap(np.full((2, 2, 2), -1), (1, 1, 1), LabelKind.TISSUES)
    assert LabelMap(np.full((2, 2, 2), 7), (1, 1, 1), LabelKind.TISSUES).data.max() == 7


def test_round_trip_zeros(tmp_path):
    v = Volume(np.zeros((4, 4, 4)), (1.0, 2.0, 3.0), Modality.PET_SUV)
    r = read_volume(write_volume(v, tmp_path / "z"))
    assert r.shape == v.shape and r.spacing == v.spacing and r.modality is Modality.PET_SUV
    np.testing.assert_array_equal(r.data, v.data)


def test_round_trip_random_bitwise(tmp_path, rng):
    v = Volume(rng.random((10, 10, 10), dtype=np.float32), (2.0, 2.0, 2.0), Modality.PET_SUV)
    write_volume(v, tmp_path / "r")
    assert (tmp_path / "r.raw").read_bytes() == v.data.astype("<f4").tobytes()
    assert read_volume(tmp_path / "r.json").data.tobytes() == v.data.tobytes()


@given(arrays(np.uint8, (3, 4, 5), elements=st.integers(0, 9)))
def test_label_round_trip(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("lab")
    lm = LabelMap(data, (1.5, 1.5, 3.0), LabelKind.TISSUES)
    r = read_volume(write_volume(lm, d / "t"))
    assert isinstance(r, LabelMap) and r.kind is LabelKind.TISSUES
    np.testing.assert_array_equal(r.data, data)


def test_sidecar_fields(tmp_path):
    write_volume(LabelMap(np.zeros((2, 3, 4), dtype=np.uint8), (1, 1, 1)), tmp_path / "m")
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["shape"] == [2, 3, 4]
    assert meta["dtype"] == "u8" and meta["modality"] == "LABEL"
    assert meta["order"] == "DHW-row-major" and meta["semantics"] == "BinaryMask"


def test_read_errors(tmp_path):
    with pytest.raises(VolumeFormatError, match="missing"):
        read_volume(tmp_path / "nope")
    base = write_volume(_ct(np.zeros((4, 4, 4))), tmp_path / "short")
    raw = base.with_suffix(".raw")
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        read_volume(base)
    base = write_volume(_ct(np.zeros((2, 2, 2))), tmp_path / "dt")
    meta = json.loads(base.with_suffix(".json").read_text())
    meta["dtype"] = "f64"
    base.with_suffix(".json").write_text(json.dumps(meta))
    with pytest.raises(VolumeFormatError, match="dtype"):
        read_volume(base)


def test_read_non_finite_names_voxel(tmp_path):
    base = write_volume(_ct(np.zeros((2, 2, 2))), tmp_path / "nan")
    a = np.zeros((2, 2, 2), dtype="<f4")
    a[1, 0, 1] = np.inf
    base.with_suffix(".raw").write_bytes(a.tobytes())
    with pytest.raises(NonFiniteError, match=r"\(1, 0, 1\)"):
        read_volume(base)


def test_body_mask_all_air():
    with pytest.raises(EmptyMaskError):
        body_mask(_ct(np.full((6, 6, 6), -1000.0)))


def test_body_mask_cuboid_and_bubble():
    a = np.full((10, 10, 10), -1000.0)
    a[2:8, 3:7, 1:9] = 0.0
    np.testing.assert_array_equal(body_mask(_ct(a)).data, a > -500)
    a[4, 5, 4] = -1000.0
    m = body_mask(_ct(a)).data
    assert m[4, 5, 4] == 1
    assert m.sum() == 6 * 4 * 8


def test_body_mask_keeps_largest_component():
    a = np.full((12, 12, 12), -1000.0)
    a[1:7, 1:7, 1:7] = 0.0
    a[9:11, 9:11, 9:11] = 0.0
    m = body_mask(_ct(a)).data
    assert m.sum() == 216 and m[10, 10, 10] == 0


def test_body_mask_needs_ct():
    with pytest.raises(ModalityError):
        body_mask(Volume(np.ones((4, 4, 4)), (1, 1, 1), Modality.PET_SUV))


def test_crop_full_and_single_voxel():
    v = _ct(np.arange(512, dtype=np.float32).reshape(8, 8, 8))
    full = LabelMap(np.ones((8, 8, 8), dtype=np.uint8), (1, 1, 1))
    c, box = crop_to_mask(v, full)
    assert box == BoundingBox((0, 0, 0), (8, 8, 8))
    np.testing.assert_array_equal(c.data, v.data)
    m = np.zeros((8, 8, 8), dtype=np.uint8)
    m[2, 2, 2] = 1
    _, box = crop_to_mask(v, LabelMap(m, (1, 1, 1)), margin_vox=1)
    assert box.lo == (1, 1, 1) and box.hi == (4, 4, 4)
    m[:] = 0
    m[0, 0, 0] = 1
    _, box = crop_to_mask(v, LabelMap(m, (1, 1, 1)), margin_vox=2)
    assert box.lo == (0, 0, 0) and box.hi == (3, 3, 3)


def test_crop_empty_mask():
    with pytest.raises(EmptyMaskError):
        crop_to_mask(_ct(np.zeros((4, 4, 4))), LabelMap(np.zeros((4, 4, 4), dtype=np.uint8), (1, 1, 1)))


def test_paste_inverts_crop(rng):
    v = _ct(rng.random((9, 7, 8)))
    m = np.zeros((9, 7, 8), dtype=np.uint8)
    m[3:5, 2:6, 1:4] = 1
    c, box = crop_to_mask(v, LabelMap(m, (1, 1, 1)))
    back = paste_to_parent(c, box, v.shape)
    np.testing.assert_array_equal(back.data[box.slices], v.data[box.slices])
    assert back.data.sum() == pytest.approx(c.data.sum())
    with pytest.raises(ShapeError):
        paste_to_parent(c, box, (4, 4, 4))


def test_pad_to_size():
    a = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    p = pad_to_size(a, (3, 2, 4))
    assert p.shape == (3, 2, 4)
    np.testing.assert_array_equal(p[2], a[1][:, [0, 1, 1, 1]])
    z = pad_to_size(a, (3, 3, 3), mode="constant")
    assert z[2].sum() == 0 and z.sum() == a.sum()
    assert pad_to_size(a, (1, 1, 1)) is a


def test_resample_identity_and_constant():
    v = _ct(np.random.default_rng(1).random((5, 6, 7)), (1.0, 2.0, 3.0))
    same = resample_trilinear(v, v.shape, v.spacing)
    np.testing.assert_array_equal(same.data, v.data)
    c = _ct(np.full((5, 5, 5), 3.25), (2.0, 2.0, 2.0))
    r = resample_trilinear(c, (7, 3, 11), (1.3, 3.1, 0.9))
    np.testing.assert_allclose(r.data, 3.25, atol=1e-6)
    assert r.spacing == (1.3, 3.1, 0.9)


def test_resample_linear_ramp_half_spacing():
    ramp = np.broadcast_to(np.arange(8, dtype=np.float32), (4, 4, 8))
    r = resample_trilinear(_ct(ramp), (8, 8, 16), (0.5, 0.5, 0.5))
    expected = 0.5 * np.arange(16) - 0.25
    np.testing.assert_allclose(r.data[3, 3, 1:-1], expected[1:-1], atol=1e-5)


def test_resample_nearest_keeps_labels():
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    lab[:2] = 3
    r = resample_nearest(LabelMap(lab, (2, 2, 2), LabelKind.TISSUES), (8, 8, 8), (1, 1, 1))
    assert set(np.unique(r.data)) == {0, 3}
    assert r.kind is LabelKind.TISSUES
    assert (r.data[:4] == 3).all() and (r.data[4:] == 0).all()


def test_phantom_deterministic(small_phantom_cfg, small_phantom):
    again = generate_phantom(small_phantom_cfg)
    for a, b in zip(small_phantom, again):
        assert a.data.tobytes() == b.data.tobytes()


def test_phantom_contents(small_phantom, small_phantom_cfg):
    ct, pet, tissues, lesions = small_phantom
    assert ct.modality is Modality.CT_HU and pet.modality is Modality.PET_SUV
    assert tissues.kind is LabelKind.TISSUES and lesions.kind is LabelKind.BINARY
    assert tissues.data.max() < small_phantom_cfg.tissue_class_count
    assert (pet.data >= 0).all()
    assert lesions.data.any()
    body = body_mask(ct).data.astype(bool)
    assert not (lesions.data.astype(bool) & ~body).any()
    assert pet.data[lesions.data == 1].mean() > pet.data[(lesions.data == 0) & body].mean()


def test_phantom_no_lesions(small_phantom_cfg):
    from dataclasses import replace

    _, _, _, lesions = generate_phantom(replace(small_phantom_cfg, lesion_count_range=(0, 0)))
    assert not lesions.data.any()


def test_phantom_sphere_volume():
    cfg = PhantomConfig(shape=(48, 48, 48), lesion_count_range=(1, 1), lesion_radius_range_mm=(5.0, 5.0), seed=3)
    n = int(generate_phantom(cfg)[3].data.sum())
    expected = 4 / 3 * np.pi * 5**3 / 8
    assert abs(n - expected) <= 0.15 * expected


def test_phantom_placement_failure():
    cfg = PhantomConfig(shape=(16, 16, 16), lesion_count_range=(1, 1), lesion_radius_range_mm=(20.0, 20.0), max_placement_tries=5)
    with pytest.raises(PlacementError):
        generate_phantom(cfg)


def test_phantom_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(lesion_suv_range=(1.0, 2.0))
    with pytest.raises(ConfigError):
        PhantomConfig(lesion_count_range=(3, 1))
    with pytest.raises(ConfigError):
        PhantomConfig(tissue_class_count=17)
    assert PhantomConfig(tissue_class_count=6).hu_per_tissue[:2] == (-1000.0, 40.0)
