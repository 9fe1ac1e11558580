import numpy as np
import pytest

from changedet.pgm import PgmError, read_pgm, write_pgm


def test_roundtrip_16bit(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.integers(0, 65536, size=(7, 11), dtype=np.uint16)
    path = tmp_path / "band.pgm"
    write_pgm(path, values, maxval=65535)
    back = read_pgm(path)
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, values)


def test_roundtrip_8bit(tmp_path):
    values = np.array([[0, 255], [128, 7]], dtype=np.uint8)
    path = tmp_path / "cm.pgm"
    write_pgm(path, values, maxval=255)
    back = read_pgm(path)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, values)


def test_big_endian_layout(tmp_path):
    path = tmp_path / "x.pgm"
    write_pgm(path, np.array([[0x0102]]), maxval=65535)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n1 1\n65535\n")
    assert raw[-2:] == b"\x01\x02"  # most significant byte first


def test_reads_comments_and_whitespace(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5 # comment\n# another\n 2\t1 \n255\n\x05\x06")
    np.testing.assert_array_equal(read_pgm(path), [[5, 6]])


def test_write_is_deterministic(tmp_path):
    values = np.arange(12, dtype=np.uint16).reshape(3, 4) * 999
    write_pgm(tmp_path / "a.pgm", values)
    write_pgm(tmp_path / "b.pgm", values)
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_truncated_raster_rejected(tmp_path):
    path = tmp_path / "t.pgm"
    write_pgm(path, np.zeros((4, 4)), maxval=65535)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(PgmError, match="truncated"):
        read_pgm(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "p6.pgm"
    path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(PgmError):
        read_pgm(path)


def test_out_of_range_values_rejected(tmp_path):
    with pytest.raises(PgmError, match="outside"):
        write_pgm(tmp_path / "o.pgm", np.array([[300]]), maxval=255)
