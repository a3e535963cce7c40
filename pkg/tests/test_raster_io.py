"""Netpbm and BMP codecs: round-trips, header handling, byte stability."""

import numpy as np
import pytest

from soilref.core import IGNORE, Image, LabelMap
from soilref.raster_io import (
    decode_bmp,
    decode_pgm,
    decode_ppm,
    encode_bmp,
    encode_pgm,
    encode_ppm,
    read_pgm,
    read_ppm,
    u8_to_unit,
    unit_to_u8,
    write_pgm,
    write_ppm,
)


def rand_image(h=16, w=20, seed=0):
    rng = np.random.default_rng(seed)
    # quantized values survive the u8 round-trip exactly
    return Image(rng.integers(0, 256, size=(h, w, 3)).astype(np.float64) / 255.0)


class TestUnitConversion:
    def test_u8_round_trip_is_exact(self):
        u8 = np.arange(256, dtype=np.uint8)
        assert (unit_to_u8(u8_to_unit(u8)) == u8).all()

    def test_rounding_is_nearest(self):
        assert unit_to_u8(np.array([0.0, 1.0, 0.5 / 255 + 1e-9])).tolist() == [0, 255, 1]


class TestPpm:
    def test_round_trip(self):
        img = rand_image()
        back = decode_ppm(encode_ppm(img))
        assert np.array_equal(back.data, img.data)

    def test_canonical_header(self):
        data = encode_ppm(rand_image(h=16, w=20))
        assert data.startswith(b"P6\n20 16\n255\n")
        assert len(data) == len(b"P6\n20 16\n255\n") + 16 * 20 * 3

    def test_encoding_is_byte_stable(self):
        img = rand_image(seed=4)
        assert encode_ppm(img) == encode_ppm(img)

    def test_reader_tolerates_comments_and_whitespace(self):
        img = rand_image(h=16, w=16, seed=2)
        raw = encode_ppm(img)
        pixels = raw[len(b"P6\n16 16\n255\n") :]
        hacked = b"P6 # comment\n# another\n 16\t16\n# again\n255\n" + pixels
        back = decode_ppm(hacked)
        assert np.array_equal(back.data, img.data)

    def test_truncated_pixels_rejected(self):
        raw = encode_ppm(rand_image())
        with pytest.raises(ValueError):
            decode_ppm(raw[:-1])

    def test_wrong_magic_rejected(self):
        raw = encode_ppm(rand_image())
        with pytest.raises(ValueError):
            decode_ppm(b"P3" + raw[2:])

    def test_file_round_trip(self, tmp_path):
        img = rand_image(seed=9)
        p = tmp_path / "img.ppm"
        write_ppm(p, img)
        assert np.array_equal(read_ppm(p).data, img.data)


class TestPgm:
    def test_round_trip_with_ignore(self):
        rng = np.random.default_rng(1)
        data = rng.integers(0, 4, size=(12, 8)).astype(np.uint8)
        data[0, 0] = IGNORE
        m = LabelMap(data)
        back = decode_pgm(encode_pgm(m))
        assert np.array_equal(back.data, m.data)

    def test_canonical_header(self):
        m = LabelMap(np.zeros((4, 8), dtype=np.uint8))
        raw = encode_pgm(m)
        assert raw.startswith(b"P5\n8 4\n255\n")
        assert len(raw) == len(b"P5\n8 4\n255\n") + 32

    def test_file_round_trip(self, tmp_path):
        m = LabelMap(np.full((6, 6), 3, dtype=np.uint8))
        p = tmp_path / "m.pgm"
        write_pgm(p, m)
        assert np.array_equal(read_pgm(p).data, m.data)

    def test_invalid_codes_rejected_on_read(self):
        raw = b"P5\n2 2\n255\n" + bytes([0, 1, 9, 3])
        with pytest.raises(ValueError):
            decode_pgm(raw)


class TestBmp:
    def test_round_trip_unpadded_width(self):
        rng = np.random.default_rng(3)
        rgb = rng.integers(0, 256, size=(7, 8, 3), dtype=np.uint8)
        assert np.array_equal(decode_bmp(encode_bmp(rgb)), rgb)

    def test_round_trip_padded_width(self):
        # width 5 -> 15 bytes/row, padded to 16
        rng = np.random.default_rng(4)
        rgb = rng.integers(0, 256, size=(3, 5, 3), dtype=np.uint8)
        raw = encode_bmp(rgb)
        assert np.array_equal(decode_bmp(raw), rgb)

    def test_header_fields(self):
        rgb = np.zeros((3, 5, 3), dtype=np.uint8)
        raw = encode_bmp(rgb)
        assert raw[:2] == b"BM"
        assert int.from_bytes(raw[2:6], "little") == len(raw)
        assert int.from_bytes(raw[10:14], "little") == 54  # pixel offset
        assert int.from_bytes(raw[18:22], "little") == 5
        assert int.from_bytes(raw[22:26], "little") == 3
        assert int.from_bytes(raw[28:30], "little") == 24
        row_bytes = (5 * 3 + 3) // 4 * 4
        assert len(raw) == 54 + row_bytes * 3

    def test_bottom_up_bgr_layout(self):
        rgb = np.zeros((2, 1, 3), dtype=np.uint8)
        rgb[0, 0] = [255, 0, 0]  # top row red
        rgb[1, 0] = [0, 0, 255]  # bottom row blue
        raw = encode_bmp(rgb)
        first_stored = raw[54:57]  # bottom image row first, BGR order
        assert bytes(first_stored) == bytes([255, 0, 0])  # blue pixel as BGR
        second_stored = raw[58:61]
        assert bytes(second_stored) == bytes([0, 0, 255])  # red pixel as BGR


class TestDeterminism:
    def test_same_content_same_bytes_across_objects(self):
        rng = np.random.default_rng(11)
        arr = rng.integers(0, 256, size=(8, 8, 3)).astype(np.float64) / 255.0
        assert encode_ppm(Image(arr)) == encode_ppm(Image(arr.copy()))
