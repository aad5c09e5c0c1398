import json

import numpy as np
import pytest

from poseloop.errors import FormatError, ParseError, ValidationError
from poseloop.tensorio import (
    AnnotationRecord,
    read_annotations,
    read_tensor,
    read_tensors,
    write_annotations,
    write_tensor,
    write_tensors,
)


class TestTensorContainer:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((3, 64, 48)).astype(np.float32)
        path = tmp_path / "t.tns"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.dtype == np.float32
        assert back.shape == (3, 64, 48)
        assert np.array_equal(back.view(np.uint32), t.view(np.uint32))

    def test_write_read_is_deterministic(self, tmp_path):
        t = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_tensor(tmp_path / "a.tns", t)
        write_tensor(tmp_path / "b.tns", t)
        assert (tmp_path / "a.tns").read_bytes() == (tmp_path / "b.tns").read_bytes()

    def test_float64_roundtrip(self, tmp_path):
        t = np.random.default_rng(1).standard_normal((5, 5))
        write_tensor(tmp_path / "t.tns", t)
        back = read_tensor(tmp_path / "t.tns")
        assert back.dtype == np.float64
        assert np.array_equal(back, t)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.tns"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones((4, 4), dtype=np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(FormatError, match="payload length"):
            read_tensor(path)

    def test_dims_overflow_vs_payload(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones((4, 4), dtype=np.float32))
        data = bytearray(path.read_bytes())
        # enlarge the first dim so the declared payload exceeds the actual
        data[11:15] = (100).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="payload length"):
            read_tensor(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones((4, 4), dtype=np.float32))
        data = bytearray(path.read_bytes())
        data[9] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="dtype"):
            read_tensor(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones((4, 4), dtype=np.float32))
        data = bytearray(path.read_bytes())
        data[8] = 7
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            read_tensor(path)

    def test_multi_tensor_file(self, tmp_path):
        ts = [np.ones((2, 2), np.float32), np.zeros((3,), np.float32)]
        path = tmp_path / "m.tns"
        write_tensors(path, ts)
        back = read_tensors(path)
        assert len(back) == 2
        np.testing.assert_array_equal(back[0], ts[0])
        np.testing.assert_array_equal(back[1], ts[1])
        with pytest.raises(FormatError):
            read_tensors(path, count=3)


class TestAnnotations:
    def make_record(self, k=17):
        return AnnotationRecord(
            id="000001",
            keypoints=[(float(i), float(i * 2), 2) for i in range(k)],
            bbox=(1.0, 2.0, 30.0, 40.0),
            skeleton_name="coco17",
        )

    def test_roundtrip(self, tmp_path):
        records = [self.make_record() for _ in range(3)]
        path = tmp_path / "ann.ndjson"
        write_annotations(path, records)
        back = read_annotations(path)
        assert len(back) == 3
        assert back[0] == records[0]

    def test_wrong_keypoint_count(self, tmp_path):
        path = tmp_path / "ann.ndjson"
        write_annotations(path, [self.make_record(k=16)])
        with pytest.raises(ValidationError, match="keypoints") as e:
            read_annotations(path)
        assert e.value.line == 1

    def test_bad_visibility(self, tmp_path):
        rec = self.make_record()
        rec.keypoints[3] = (1.0, 2.0, 7)
        path = tmp_path / "ann.ndjson"
        path.write_text(rec.to_json() + "\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="visibility"):
            read_annotations(path)

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "ann.ndjson"
        good = self.make_record().to_json()
        path.write_text(good + "\n{not json\n", encoding="utf-8")
        with pytest.raises(ParseError) as e:
            read_annotations(path)
        assert e.value.line == 2

    def test_confidences_validated(self, tmp_path):
        rec = self.make_record()
        rec.confidences = [0.5] * 16  # wrong length
        path = tmp_path / "ann.ndjson"
        path.write_text(rec.to_json() + "\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="confidences"):
            read_annotations(path)
