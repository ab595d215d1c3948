import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udl.errors import FormatError
from udl.io import (
    RecordWriter,
    read_matrix,
    read_pgm,
    read_record,
    record_body,
    spec_hash,
    write_matrix,
    write_pgm,
)


@settings(max_examples=40, deadline=None)
@given(shape=st.lists(st.integers(0, 4), min_size=0, max_size=4), seed=st.integers(0, 1000))
def test_matrix_round_trip(tmp_path_factory, shape, seed):
    a = np.random.default_rng(seed).standard_normal(shape)
    path = tmp_path_factory.mktemp("m") / "a.udl"
    write_matrix(path, a)
    b = read_matrix(path)
    assert b.shape == a.shape
    np.testing.assert_array_equal(a, b)


class TestMatrixErrors:
    def write(self, tmp_path, data):
        p = tmp_path / "bad.udl"
        p.write_bytes(data)
        return p

    def test_bad_magic(self, tmp_path):
        p = self.write(tmp_path, b"NOPE\n" * 8)
        with pytest.raises(FormatError) as e:
            read_matrix(p)
        assert e.value.offset == 0

    def test_truncated_data_reports_offset(self, tmp_path):
        good = tmp_path / "g.udl"
        write_matrix(good, np.ones((2, 2)))
        raw = good.read_bytes()
        p = self.write(tmp_path, raw[:-3])
        with pytest.raises(FormatError) as e:
            read_matrix(p)
        assert e.value.offset == len(raw) - 32

    def test_truncated_header(self, tmp_path):
        with pytest.raises(FormatError):
            read_matrix(self.write(tmp_path, b"UDLMAT1\nfloat64\n"))

    def test_bad_dtype(self, tmp_path):
        with pytest.raises(FormatError) as e:
            read_matrix(self.write(tmp_path, b"UDLMAT1\nint32\n0\n\n\n\n\n\n"))
        assert e.value.offset == 8

    def test_too_many_dims(self, tmp_path):
        with pytest.raises(ValueError):
            write_matrix(tmp_path / "x", np.zeros((1,) * 6))


class TestPGM:
    def test_round_trip_with_comment(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n# a comment\n4 3\n255\n" + img.tobytes())
        out, maxval = read_pgm(p)
        np.testing.assert_array_equal(out, img)
        assert maxval == 255

    def test_writer(self, tmp_path):
        img = np.array([[0, 128], [255, 7]])
        write_pgm(tmp_path / "b.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm")[0], img)

    def test_ascii_pgm_rejected(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(FormatError):
            read_pgm(p)

    def test_16_bit_rejected(self, tmp_path):
        p = tmp_path / "d.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError):
            read_pgm(p)

    def test_truncated_pixels(self, tmp_path):
        p = tmp_path / "e.pgm"
        p.write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(FormatError) as e:
            read_pgm(p)
        assert e.value.offset == len(b"P5\n2 2\n255\n")


class TestRecords:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "r.csv"
        with RecordWriter(p, ["a", "b"], {"spec_hash": "x"}) as w:
            w.write({"a": 1, "b": 0.1})
            w.write([2, None])
        meta, cols, rows = read_record(p)
        assert meta == {"spec_hash": "x"} and cols == ["a", "b"]
        assert rows == [["1", "0.1"], ["2", ""]]
        assert record_body(p).startswith(b"a,b\r\n")

    def test_floats_round_trip_exactly(self, tmp_path):
        p = tmp_path / "f.csv"
        vals = [0.1 + 0.2, 1e-300, np.pi]
        with RecordWriter(p, ["v"], {}) as w:
            for v in vals:
                w.write([v])
        rows = read_record(p)[2]
        assert [float(r[0]) for r in rows] == vals

    def test_unknown_column(self, tmp_path):
        with RecordWriter(tmp_path / "u.csv", ["a"], {}) as w:
            with pytest.raises(KeyError):
                w.write({"zz": 1})

    def test_missing_metadata_line(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("a,b\n")
        with pytest.raises(FormatError):
            read_record(p)


def test_spec_hash_is_order_independent():
    assert spec_hash({"a": 1, "b": [1, 2]}) == spec_hash({"b": [1, 2], "a": 1})
    assert spec_hash({"a": 1}) != spec_hash({"a": 2})
    assert len(spec_hash({})) == 64
