"""Binary tensor container and newline-delimited annotation records.

Container layout (little-endian throughout):

    magic   8 bytes  b"SCIOTNSR"
    version 1 byte   (currently 1)
    dtype   1 byte   0 = float32, 1 = float64
    ndim    1 byte
    dims    ndim x uint32
    payload prod(dims) x itemsize bytes, row-major

Multiple containers may be concatenated in one file; readers consume them
in order. All interchange files produced by the pipeline use dtype 0.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError, ValidationError

MAGIC = b"SCIOTNSR"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

_MAX_ELEMENTS = 1 << 32  # guards absurd dims before allocating


def write_tensor_stream(f, tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor)
    code = _DTYPE_CODES.get(tensor.dtype)
    if code is None:
        raise FormatError("dtype", f"unsupported dtype {tensor.dtype}")
    if tensor.ndim > 255:
        raise FormatError("ndim", f"{tensor.ndim} dimensions")
    f.write(MAGIC)
    f.write(bytes([VERSION, code, tensor.ndim]))
    f.write(np.asarray(tensor.shape, dtype="<u4").tobytes())
    f.write(np.ascontiguousarray(tensor).astype(tensor.dtype, copy=False).tobytes())


def read_tensor_stream(f) -> np.ndarray:
    magic = f.read(8)
    if len(magic) < 8 or magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    header = f.read(3)
    if len(header) < 3:
        raise FormatError("version", "truncated header")
    version, dtype_code, ndim = header
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if dtype_code not in _DTYPES:
        raise FormatError("dtype", f"unknown dtype code {dtype_code}")
    dims_raw = f.read(4 * ndim)
    if len(dims_raw) < 4 * ndim:
        raise FormatError("dims", "truncated dims")
    dims = tuple(int(d) for d in np.frombuffer(dims_raw, dtype="<u4"))
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise FormatError("dims", f"element count {count} too large")
    dtype = _DTYPES[dtype_code]
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            "payload length",
            f"expected {count * dtype.itemsize} bytes, got {len(payload)}",
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_tensor(path, tensor: np.ndarray) -> None:
    """Write a single tensor container to ``path``."""
    with open(path, "wb") as f:
        write_tensor_stream(f, tensor)


def read_tensor(path) -> np.ndarray:
    """Read a single tensor container from ``path``."""
    with open(path, "rb") as f:
        return read_tensor_stream(f)


def write_tensors(path, tensors) -> None:
    """Write several tensors back-to-back into one file."""
    with open(path, "wb") as f:
        for t in tensors:
            write_tensor_stream(f, t)


def read_tensors(path, count: int | None = None) -> list[np.ndarray]:
    """Read ``count`` tensors (or all until EOF) from a concatenated file."""
    out = []
    with open(path, "rb") as f:
        while count is None or len(out) < count:
            if count is None:
                probe = f.peek(1) if hasattr(f, "peek") else b""
                if not probe:
                    pos = f.tell()
                    if not f.read(1):
                        break
                    f.seek(pos)
            out.append(read_tensor_stream(f))
    if count is not None and len(out) != count:
        raise FormatError("payload length", f"expected {count} tensors, got {len(out)}")
    return out


# --- annotation records ------------------------------------------------------


@dataclass
class AnnotationRecord:
    """COCO-style single-person record: keypoint triples plus a box."""

    id: str
    keypoints: list[tuple[float, float, int]]  # (x, y, v) with v in {0, 1, 2}
    bbox: tuple[float, float, float, float]    # (x, y, w, h)
    skeleton_name: str
    confidences: list[float] | None = None     # per-keypoint, predictions only

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "skeleton": self.skeleton_name,
            "bbox": list(self.bbox),
            "keypoints": [[x, y, v] for x, y, v in self.keypoints],
        }
        if self.confidences is not None:
            obj["confidences"] = list(self.confidences)
        return json.dumps(obj, sort_keys=True)


def _expected_k(skeleton_name: str, skeletons) -> int | None:
    if skeletons is None:
        from .skeleton import PRESETS

        maker = PRESETS.get(skeleton_name)
        return maker().num_keypoints if maker else None
    spec = skeletons.get(skeleton_name)
    return spec.num_keypoints if spec else None


def parse_annotation(obj: dict, lineno: int, skeletons=None) -> AnnotationRecord:
    for key in ("id", "skeleton", "bbox", "keypoints"):
        if key not in obj:
            raise ValidationError("missing", line=lineno, field=key)
    skeleton_name = str(obj["skeleton"])
    kps = obj["keypoints"]
    expected = _expected_k(skeleton_name, skeletons)
    if expected is not None and len(kps) != expected:
        raise ValidationError(
            f"expected {expected} keypoints, got {len(kps)}", line=lineno, field="keypoints"
        )
    triples = []
    for t in kps:
        if not isinstance(t, (list, tuple)) or len(t) != 3:
            raise ValidationError("keypoint must be [x, y, v]", line=lineno, field="keypoints")
        x, y, v = t
        if v not in (0, 1, 2):
            raise ValidationError(f"visibility {v} not in {{0, 1, 2}}", line=lineno, field="visibility")
        triples.append((float(x), float(y), int(v)))
    bbox = obj["bbox"]
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise ValidationError("bbox must be [x, y, w, h]", line=lineno, field="bbox")
    confidences = None
    if "confidences" in obj:
        confidences = [float(c) for c in obj["confidences"]]
        if len(confidences) != len(triples):
            raise ValidationError("confidences length mismatch", line=lineno, field="confidences")
        if any(not (0.0 <= c <= 1.0) for c in confidences):
            raise ValidationError("confidence outside [0, 1]", line=lineno, field="confidences")
    return AnnotationRecord(
        id=str(obj["id"]),
        keypoints=triples,
        bbox=tuple(float(v) for v in bbox),
        skeleton_name=skeleton_name,
        confidences=confidences,
    )


def read_annotations(path, skeletons=None) -> list[AnnotationRecord]:
    """Read newline-delimited JSON annotation records.

    ``skeletons`` may map skeleton names to SkeletonSpec for keypoint-count
    validation of non-preset skeletons; preset names validate automatically.
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line=lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("record must be a JSON object", line=lineno)
            records.append(parse_annotation(obj, lineno, skeletons))
    return records


def write_annotations(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json())
            f.write("\n")
