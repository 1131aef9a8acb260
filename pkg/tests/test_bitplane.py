import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcdnet import bitplane
from bcdnet.bitplane import BitPlaneStack, decompose, reconstruct
from oracles import binary_expansion


def test_all_pixel_values_match_binary_expansion():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    stack = decompose(img)
    for v in range(256):
        y, x = divmod(v, 16)
        for c in range(3):
            assert [int(stack.plane(c, l)[y, x]) for l in range(1, 9)] == binary_expansion(v)


def test_zero_and_full_images():
    zeros = decompose(np.zeros((4, 4, 3), dtype=np.uint8))
    assert not zeros.planes.any()
    full = decompose(np.full((4, 4, 3), 255, dtype=np.uint8))
    assert full.planes.all()


def test_level_128_only_sets_msb():
    stack = decompose(np.full((2, 2, 3), 128, dtype=np.uint8))
    assert stack.level(1).all()
    assert not stack.planes[:, 1:].any()


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_roundtrip_property(img):
    np.testing.assert_array_equal(reconstruct(decompose(img)), img)


def test_roundtrip_fixture_images(natural_images):
    for img in natural_images.values():
        np.testing.assert_array_equal(reconstruct(decompose(img)), img)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        decompose(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        decompose(np.full((2, 2, 3), 300))
    with pytest.raises(ValueError):
        decompose(np.full((2, 2, 3), 1.5))
    planes = np.zeros((3, 8, 2, 2), dtype=np.uint8)
    planes[0, 0, 0, 0] = 2
    with pytest.raises(ValueError):
        reconstruct(BitPlaneStack(planes))


def test_level_layout():
    img = np.random.default_rng(0).integers(0, 256, (5, 6, 3), dtype=np.uint8)
    stack = decompose(img)
    assert stack.planes.shape == (3, 8, 5, 6)
    assert stack.level(3).shape == (3, 5, 6)
    np.testing.assert_array_equal(stack.level(3)[1], (img[:, :, 1] >> 5) & 1)


def test_constant_image_entropies_are_zero():
    report = bitplane.entropy_report(np.full((8, 8, 3), 77, dtype=np.uint8))
    for ch in report["channels"]:
        assert ch["plane_sum"] == 0.0 and ch["image_entropy"] == 0.0
    assert report["holds"]


def test_random_image_planes_near_one_bit():
    img = np.random.default_rng(2).integers(0, 256, (128, 128, 3), dtype=np.uint8)
    report = bitplane.entropy_report(img)
    for ch in report["channels"]:
        np.testing.assert_allclose(ch["plane_entropies"], 1.0, atol=2e-3)


def test_plane_entropy_sum_bounds_pixel_entropy(natural_images):
    for img in natural_images.values():
        report = bitplane.entropy_report(img)
        assert report["holds"]
        for ch in report["channels"]:
            assert ch["plane_sum"] >= ch["image_entropy"]


def test_image_entropy_is_channel_mean():
    img = np.random.default_rng(3).integers(0, 4, (16, 16, 3), dtype=np.uint8)
    per = [bitplane.channel_entropy(img[:, :, c]) for c in range(3)]
    assert bitplane.image_entropy(img) == pytest.approx(np.mean(per))
