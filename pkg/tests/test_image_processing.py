import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
import numpy as np
import pytest
from utils import image_processing
from utils.errors import MalformedHeaderError, TruncatedImageError, UnsupportedMaxvalError, ValidationError


def test_decode_pgm_two_pixels():
    image = image_processing.decode_netpbm(b"P5\n2 1\n255\n\x00\xff")
    assert (image.width, image.height, image.channels) == (2, 1, 1)
    assert image.data[:, :, 0].tolist() == [[0, 255]]


def test_decode_ppm_with_comments():
    raw = b"P6\n# made by hand\n1 1 # one pixel\n255\n\x01\x02\x03"
    image = image_processing.decode_netpbm(raw)
    assert image.channels == 3
    assert image.data[0, 0].tolist() == [1, 2, 3]


def test_decode_rejects_sixteen_bit():
    with pytest.raises(UnsupportedMaxvalError):
        image_processing.decode_netpbm(b"P5\n2 1\n65535\n\x00\x00\x00\x00")


def test_decode_rejects_truncated_payload():
    with pytest.raises(TruncatedImageError):
        image_processing.decode_netpbm(b"P5\n2 2\n255\n\x00\x00\x00")


def test_decode_rejects_bad_header():
    with pytest.raises(MalformedHeaderError):
        image_processing.decode_netpbm(b"P2\n2 1\n255\n0 0")
    with pytest.raises(MalformedHeaderError):
        image_processing.decode_netpbm(b"P5\n2 x\n255\n\x00\x00")
    with pytest.raises(MalformedHeaderError):
        image_processing.decode_netpbm(b"P5\n2")


def test_save_and_load(tmp_path):
    array = np.arange(12, dtype=np.uint8).reshape(2, 2, 3) * 20
    path = tmp_path / "small.ppm"
    image_processing.save_image(image_processing.Image.from_array(array), path)
    loaded = image_processing.load_image(path)
    assert np.array_equal(loaded.data, array)


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        image_processing.load_image(tmp_path / "absent.pgm")


def test_to_gray_luma_weights():
    rgb = image_processing.Image.from_array(np.array([[[255, 0, 0], [255, 255, 255], [0, 0, 0]]]))
    gray = image_processing.to_gray(rgb)
    assert gray.channels == 1
    assert gray.data[0, :, 0].tolist() == [76, 255, 0]
    assert image_processing.to_gray(gray) is gray


def test_from_array_rejects_bad_shape():
    with pytest.raises(ValidationError):
        image_processing.Image.from_array(np.zeros((2, 2, 2)))


def test_gray_ramp_probe():
    probe = image_processing.gen_probe("gray_ramp", 256, 4)
    assert probe.data.shape == (4, 256, 3)
    assert probe.data[0, :, 0].tolist() == list(range(256))
    assert np.array_equal(probe.data[0], probe.data[3])


def test_hue_spectrum_probe_endpoints():
    probe = image_processing.gen_probe("hue_spectrum", 10, 2)
    assert probe.data[0, 0].tolist() == [255, 0, 0]
    assert probe.data[0, -1].tolist() == [128, 0, 255]


def test_probe_validation():
    with pytest.raises(ValidationError):
        image_processing.gen_probe("checkerboard", 10, 2)
    with pytest.raises(ValidationError):
        image_processing.gen_probe("gray_ramp", 1, 2)
