import struct

import numpy as np
import pytest

from bcdnet import codec, container, entropy
from bcdnet.codec import BranchCodes, CodecConfig, CodecModel
from bcdnet.container import ContainerError, LevelUnavailable

SMALL = CodecConfig(channels=(8, 8, 8, 8))


@pytest.fixture(scope="module")
def model():
    return CodecModel.init(SMALL, seed=5)


def _image(seed, h=32, w=32):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def _random_codes(rng, n=8, shape=(1, 8, 2, 2), active=None):
    active = active or (True,) * n
    codes = [np.where(rng.random(shape) < 0.5, 1.0, -1.0) if a else np.zeros(shape) for a in active]
    return BranchCodes(codes, tuple(active))


def test_header_layout_is_bit_exact():
    codes = _random_codes(np.random.default_rng(0))
    data = container.write_container(codes, 30, 27, (2, 5), 16)
    n = 8
    assert container.header_size(n) == 15 + 4 * n
    magic, version, h, w, ph, pw, nb, b, s, reserved = struct.unpack_from("<4sBHHBBBBBB", data)
    assert (magic, version, h, w, ph, pw, nb, b, s, reserved) == (b"BCD1", 1, 30, 27, 2, 5, 8, 8, 16, 0)
    lengths = struct.unpack_from("<8I", data, 15)
    assert len(data) == 15 + 4 * n + sum(lengths)
    offset = 15 + 4 * n
    for code, length in zip(codes.codes, lengths):
        assert data[offset : offset + length] == entropy.encode_segment(code)
        offset += length


def test_roundtrip_codes_and_metadata():
    rng = np.random.default_rng(1)
    codes = _random_codes(rng, active=(True, True, False, True, False, False, False, False))
    data = container.write_container(codes, 30, 20, (2, 12), 16)
    back, header = container.read_container(data)
    assert back.active == codes.active
    for a, b in zip(codes.codes, back.codes):
        np.testing.assert_array_equal(a, b)
    assert (header.height, header.width, header.branches, header.code_channels, header.spatial_factor) == (30, 20, 8, 8, 16)


def test_all_off_mask_gives_minimal_segments():
    codes = _random_codes(np.random.default_rng(2), active=(False,) * 8)
    data = container.write_container(codes, 32, 32)
    header = container.read_header(data)
    assert header.lengths == (entropy.minimal_segment_size(),) * 8


def test_dimension_limits():
    codes = _random_codes(np.random.default_rng(3), shape=(1, 8, 4097, 1))
    with pytest.raises(ContainerError):
        container.write_container(codes, 65552, 16)


def test_truncate_to_n_is_identity_and_to_one_is_minimal():
    data = container.write_container(_random_codes(np.random.default_rng(4)), 32, 32)
    header = container.read_header(data)
    assert container.truncate_to_level(data, 8) == data
    one = container.truncate_to_level(data, 1)
    assert len(one) == header.size + header.lengths[0]
    assert container.read_header(one).lengths == (header.lengths[0],) + (0,) * 7
    with pytest.raises(ContainerError):
        container.truncate_to_level(data, 0)
    with pytest.raises(ContainerError):
        container.truncate_to_level(data, 9)


def test_truncated_file_sizes_are_monotone():
    data = container.write_container(_random_codes(np.random.default_rng(5)), 32, 32)
    sizes = [len(container.truncate_to_level(data, l)) for l in range(1, 9)]
    assert all(a < b for a, b in zip(sizes, sizes[1:]))


def test_level_beyond_truncation_is_unavailable():
    data = container.write_container(_random_codes(np.random.default_rng(6)), 32, 32)
    cut = container.truncate_to_level(data, 3)
    with pytest.raises(LevelUnavailable, match="level unavailable"):
        container.read_container(cut, 5)
    codes, _ = container.read_container(cut)
    assert codes.active[:3] == (True,) * 3 and not any(codes.active[3:])


def test_prefix_property_reads_only_needed_bytes(model):
    data = container.encode_image(_image(7), model)
    header = container.read_header(data)
    for level in range(1, 9):
        prefix = data[: header.size + sum(header.lengths[:level])]
        np.testing.assert_array_equal(
            container.decode_image(prefix, model, level), container.decode_image(data, model, level)
        )
    with pytest.raises(ContainerError):
        container.decode_image(data[: header.size + header.lengths[0] - 1], model, 1)


def test_decode_after_truncation_matches(model):
    data = container.encode_image(_image(8, 40, 35), model)
    for l in range(1, 9):
        cut = container.truncate_to_level(data, l)
        for k in range(1, l + 1):
            np.testing.assert_array_equal(container.decode_image(cut, model, k), container.decode_image(data, model, k))


def test_padding_is_cropped(model):
    img = _image(9, 40, 35)
    data = container.encode_image(img, model)
    header = container.read_header(data)
    assert (header.height, header.width, header.pad_h, header.pad_w) == (40, 35, 8, 13)
    assert container.decode_image(data, model, 8).shape == (40, 35, 3)


def test_measured_bpp_arithmetic():
    codes = BranchCodes([np.zeros((1, 8, 2, 2))], (False,))
    data = container.write_container(codes, 32, 32)
    header = container.read_header(data)
    fake = header.__class__(**{**header.__dict__, "lengths": (32,)}).pack() + bytes(32)
    assert container.measured_bpp(fake) == 0.25
    assert container.measured_bpp(fake, include_header=True) == 8 * (32 + header.size) / 1024


def test_all_zero_codes_far_below_basic_bitrate():
    codes = BranchCodes([-np.ones((1, 8, 8, 8)) for _ in range(8)], (True,) * 8)
    data = container.write_container(codes, 128, 128)
    assert container.measured_bpp(data, 1) < 0.25 * codec.basic_bitrate(SMALL)


def test_random_codes_near_basic_bitrate():
    rng = np.random.default_rng(10)
    codes = _random_codes(rng, shape=(1, 8, 16, 16))
    data = container.write_container(codes, 256, 256)
    basic = codec.basic_bitrate(SMALL)
    for level in (1, 4, 8):
        assert basic * level <= container.measured_bpp(data, level) <= 1.03 * basic * level


def test_corrupt_headers_rejected():
    data = container.write_container(_random_codes(np.random.default_rng(11)), 32, 32)
    with pytest.raises(ContainerError):
        container.read_container(b"XXXX" + data[4:])
    with pytest.raises(ContainerError):
        container.read_container(data[:10])
    with pytest.raises(ContainerError):
        container.read_container(data + b"\x00")
    bad = bytearray(data)
    bad[4] = 2
    with pytest.raises(ContainerError):
        container.read_header(bytes(bad))


def test_model_mismatch_rejected(model):
    data = container.encode_image(_image(12), model)
    other = CodecModel.init(SMALL.replace(code_channels=4), seed=0)
    with pytest.raises(ContainerError):
        container.decode_image(data, other, 1)
