"""Bit-exact tensor serialization and manifest JSON parsing.

Tensor file layout (little-endian throughout):

    bytes 0..3    magic "AENT"
    u32           version (1)
    u32           ndim
    u64 * ndim    dims
    u32           dtype code (1 = f32, 2 = f64)
    payload       raw row-major values

Manifests are strict JSON: unknown keys are rejected and every invariant is
checked at load, with errors naming the offending field path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from tapgen.errors import InvalidInputError, ManifestValidationError, TensorFormatError
from tapgen.timeline import GroundTruthAction, VideoMeta, build_grid

MAGIC = b"AENT"
VERSION = 1
_DTYPE_CODES = {"f32": 1, "f64": 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_MAX_DIM = 2**32  # sanity cap per axis; desk-scale files are far smaller

__all__ = [
    "Tensor",
    "SnippetEntry",
    "Manifest",
    "write_tensor",
    "read_tensor",
    "read_manifest",
    "write_manifest",
    "atomic_write_bytes",
]


@dataclass(frozen=True)
class Tensor:
    """Dense finite real tensor with an explicit storage dtype."""

    dims: tuple[int, ...]
    dtype: str  # "f32" | "f64"
    data: np.ndarray  # flat, row-major, float64 in memory

    @staticmethod
    def from_array(arr: np.ndarray, dtype: str = "f64") -> "Tensor":
        if dtype not in _DTYPE_CODES:
            raise InvalidInputError(f"unknown dtype {dtype!r}")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            raise InvalidInputError("tensor must have at least one dimension")
        if any(d < 1 for d in arr.shape):
            raise InvalidInputError(f"dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("tensor values must be finite")
        return Tensor(dims=tuple(arr.shape), dtype=dtype, data=arr.ravel().copy())

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write to a temp file in the destination directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_bytes(t: Tensor) -> bytes:
    """Serialize a tensor to its binary representation."""
    np_dtype = _CODE_DTYPES[_DTYPE_CODES[t.dtype]]
    payload = np.ascontiguousarray(t.data, dtype=np_dtype).tobytes()
    header = MAGIC + struct.pack("<II", VERSION, len(t.dims))
    header += struct.pack(f"<{len(t.dims)}Q", *t.dims)
    header += struct.pack("<I", _DTYPE_CODES[t.dtype])
    return header + payload


def write_tensor(t: Tensor, destination: str | os.PathLike) -> None:
    atomic_write_bytes(destination, tensor_bytes(t))


def read_tensor(source: str | os.PathLike) -> Tensor:
    with open(source, "rb") as fh:
        blob = fh.read()
    return tensor_from_bytes(blob, name=os.fspath(source))


def tensor_from_bytes(blob: bytes, name: str = "<bytes>") -> Tensor:
    if len(blob) < 12:
        raise TensorFormatError(f"{name}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"{name}: bad magic {blob[:4]!r}")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"{name}: unsupported version {version}")
    if ndim == 0:
        raise TensorFormatError(f"{name}: zero-dimensional tensor")
    off = 12
    if len(blob) < off + 8 * ndim + 4:
        raise TensorFormatError(f"{name}: truncated dims block")
    dims = struct.unpack_from(f"<{ndim}Q", blob, off)
    off += 8 * ndim
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{name}: zero-sized dimension in {dims}")
    if any(d > _MAX_DIM for d in dims):
        raise TensorFormatError(f"{name}: dimension overflow in {dims}")
    (code,) = struct.unpack_from("<I", blob, off)
    off += 4
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"{name}: unknown dtype code {code}")
    np_dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    expected = off + count * np_dtype.itemsize
    if len(blob) != expected:
        raise TensorFormatError(
            f"{name}: payload size mismatch, expected {expected} bytes, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype=np_dtype, count=count, offset=off).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError(f"{name}: non-finite values in payload")
    dtype = "f32" if code == 1 else "f64"
    return Tensor(dims=tuple(int(d) for d in dims), dtype=dtype, data=data)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SnippetEntry:
    """Per-snippet detector output: optional feature file and agent boxes."""

    index: int
    feature_file: str | None
    agent_boxes: tuple[tuple[float, float, float, float], ...] = ()


@dataclass(frozen=True)
class Manifest:
    """One video's metadata, annotations, and per-snippet agent boxes."""

    video: VideoMeta
    annotations: tuple[GroundTruthAction, ...]
    snippets: tuple[SnippetEntry, ...] = ()

    def snippet_map(self) -> dict[int, SnippetEntry]:
        return {s.index: s for s in self.snippets}


def _require_keys(obj: dict, allowed: set[str], required: set[str], path: str) -> None:
    for k in obj:
        if k not in allowed:
            raise ManifestValidationError(f"{path}.{k}", "unknown field")
    for k in required:
        if k not in obj:
            raise ManifestValidationError(f"{path}.{k}", "missing required field")


def _check_number(v, path: str, *, integer: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ManifestValidationError(path, f"expected a number, got {type(v).__name__}")
    if integer and not isinstance(v, int):
        raise ManifestValidationError(path, f"expected an integer, got {v!r}")
    return v


def manifest_from_dict(doc: dict, name: str = "manifest") -> Manifest:
    """Validate a parsed manifest document and build the Manifest."""
    if not isinstance(doc, dict):
        raise ManifestValidationError(name, "document must be a JSON object")
    _require_keys(doc, {"video", "annotations", "snippets"}, {"video", "annotations"}, name)

    v = doc["video"]
    vpath = f"{name}.video"
    if not isinstance(v, dict):
        raise ManifestValidationError(vpath, "must be an object")
    _require_keys(
        v,
        {"video_id", "num_frames", "fps", "snippet_len", "duration_seconds"},
        {"video_id", "num_frames", "fps", "snippet_len"},
        vpath,
    )
    if not isinstance(v["video_id"], str) or not v["video_id"]:
        raise ManifestValidationError(f"{vpath}.video_id", "must be a non-empty string")
    try:
        video = VideoMeta(
            video_id=v["video_id"],
            num_frames=int(_check_number(v["num_frames"], f"{vpath}.num_frames", integer=True)),
            fps=float(_check_number(v["fps"], f"{vpath}.fps")),
            snippet_len=int(_check_number(v["snippet_len"], f"{vpath}.snippet_len", integer=True)),
            duration_seconds=(
                float(_check_number(v["duration_seconds"], f"{vpath}.duration_seconds"))
                if "duration_seconds" in v
                else None
            ),
        )
    except InvalidInputError as e:
        raise ManifestValidationError(vpath, str(e)) from e
    T = build_grid(video).T

    anns = doc["annotations"]
    if not isinstance(anns, list):
        raise ManifestValidationError(f"{name}.annotations", "must be a list")
    annotations = []
    for i, a in enumerate(anns):
        apath = f"{name}.annotations[{i}]"
        if not isinstance(a, dict):
            raise ManifestValidationError(apath, "must be an object")
        _require_keys(a, {"label", "start_sec", "end_sec"}, {"label", "start_sec", "end_sec"}, apath)
        if not isinstance(a["label"], str):
            raise ManifestValidationError(f"{apath}.label", "must be a string")
        start = float(_check_number(a["start_sec"], f"{apath}.start_sec"))
        end = float(_check_number(a["end_sec"], f"{apath}.end_sec"))
        try:
            gt = GroundTruthAction(label=a["label"], start_sec=start, end_sec=end)
        except InvalidInputError as e:
            raise ManifestValidationError(apath, str(e)) from e
        if gt.end_sec > video.duration_seconds + 1e-9:
            raise ManifestValidationError(
                f"{apath}.end_sec",
                f"annotation ends at {gt.end_sec}, beyond video duration "
                f"{video.duration_seconds}",
            )
        annotations.append(gt)

    snippets = []
    seen: set[int] = set()
    for i, s in enumerate(doc.get("snippets", [])):
        spath = f"{name}.snippets[{i}]"
        if not isinstance(s, dict):
            raise ManifestValidationError(spath, "must be an object")
        _require_keys(s, {"index", "feature_file", "agent_boxes"}, {"index"}, spath)
        idx = int(_check_number(s["index"], f"{spath}.index", integer=True))
        if not 0 <= idx < T:
            raise ManifestValidationError(f"{spath}.index", f"index {idx} outside [0, {T})")
        if idx in seen:
            raise ManifestValidationError(f"{spath}.index", f"duplicate snippet index {idx}")
        seen.add(idx)
        feature_file = s.get("feature_file")
        if feature_file is not None and not isinstance(feature_file, str):
            raise ManifestValidationError(f"{spath}.feature_file", "must be a string path")
        boxes = []
        raw_boxes = s.get("agent_boxes", [])
        if not isinstance(raw_boxes, list):
            raise ManifestValidationError(f"{spath}.agent_boxes", "must be a list")
        for j, b in enumerate(raw_boxes):
            bpath = f"{spath}.agent_boxes[{j}]"
            if not isinstance(b, list) or len(b) != 4:
                raise ManifestValidationError(bpath, "box must be [x1, y1, x2, y2]")
            x1, y1, x2, y2 = (float(_check_number(c, f"{bpath}[{k}]")) for k, c in enumerate(b))
            if not all(0.0 <= c <= 1.0 for c in (x1, y1, x2, y2)):
                raise ManifestValidationError(bpath, f"coordinates outside [0, 1]: {b}")
            if not x1 < x2:
                raise ManifestValidationError(bpath, f"x1 >= x2 in {b}")
            if not y1 < y2:
                raise ManifestValidationError(bpath, f"y1 >= y2 in {b}")
            boxes.append((x1, y1, x2, y2))
        snippets.append(SnippetEntry(index=idx, feature_file=feature_file, agent_boxes=tuple(boxes)))

    return Manifest(video=video, annotations=tuple(annotations), snippets=tuple(snippets))


def read_manifest(source: str | os.PathLike) -> Manifest:
    name = os.fspath(source)
    try:
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ManifestValidationError(name, f"invalid JSON: {e}") from e
    return manifest_from_dict(doc, name=name)


def manifest_to_dict(m: Manifest) -> dict:
    return {
        "video": {
            "video_id": m.video.video_id,
            "num_frames": m.video.num_frames,
            "fps": m.video.fps,
            "snippet_len": m.video.snippet_len,
            "duration_seconds": m.video.duration_seconds,
        },
        "annotations": [
            {"label": a.label, "start_sec": a.start_sec, "end_sec": a.end_sec}
            for a in m.annotations
        ],
        "snippets": [
            {
                "index": s.index,
                "feature_file": s.feature_file,
                "agent_boxes": [list(b) for b in s.agent_boxes],
            }
            for s in m.snippets
        ],
    }


def write_manifest(m: Manifest, destination: str | os.PathLike) -> None:
    payload = json.dumps(manifest_to_dict(m), indent=2, sort_keys=True).encode("utf-8")
    atomic_write_bytes(destination, payload + b"\n")
