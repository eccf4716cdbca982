import json
import struct

import numpy as np
import pytest

from tapgen.errors import InvalidInputError, ManifestValidationError, TensorFormatError
from tapgen.tensorio import (
    Manifest,
    Tensor,
    manifest_from_dict,
    manifest_to_dict,
    read_manifest,
    read_tensor,
    tensor_bytes,
    tensor_from_bytes,
    write_manifest,
    write_tensor,
)


def minimal_manifest_doc():
    return {
        "video": {"video_id": "v1", "num_frames": 160, "fps": 16.0, "snippet_len": 16},
        "annotations": [{"label": "jump", "start_sec": 1.0, "end_sec": 4.0}],
        "snippets": [{"index": 0, "agent_boxes": []}],
    }


class TestTensorFormat:
    def test_file_layout_size(self, tmp_path):
        # header 4+4+4, dims 2*8, dtype 4, payload 6*8 -> 80 bytes
        t = Tensor.from_array(np.zeros((2, 3)), dtype="f64")
        path = tmp_path / "z.aent"
        write_tensor(t, path)
        assert path.stat().st_size == 80

    def test_roundtrip_f32_bytes_identical(self, tmp_path):
        rng = np.random.default_rng(5)
        t = Tensor.from_array(
            rng.random((7, 5, 3)).astype(np.float32).astype(np.float64), dtype="f32"
        )
        blob1 = tensor_bytes(t)
        t2 = tensor_from_bytes(blob1)
        assert tensor_bytes(t2) == blob1
        assert t2.dims == (7, 5, 3)

    def test_roundtrip_f64_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        arr = rng.standard_normal((4, 9))
        path = tmp_path / "t.aent"
        write_tensor(Tensor.from_array(arr), path)
        back = read_tensor(path)
        assert back.dtype == "f64"
        np.testing.assert_array_equal(back.to_array(), arr)

    def test_randomized_roundtrips(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(30):
            ndim = int(rng.integers(1, 4))
            dims = tuple(int(d) for d in rng.integers(1, 6, ndim))
            dtype = "f32" if i % 2 else "f64"
            arr = rng.standard_normal(dims)
            if dtype == "f32":
                arr = arr.astype(np.float32).astype(np.float64)
            t = Tensor.from_array(arr, dtype=dtype)
            assert tensor_bytes(tensor_from_bytes(tensor_bytes(t))) == tensor_bytes(t)

    def test_empty_dims_rejected(self):
        with pytest.raises(InvalidInputError):
            Tensor.from_array(np.array(3.0))

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            Tensor.from_array(np.array([1.0, np.inf]))

    def test_bad_magic(self):
        blob = tensor_bytes(Tensor.from_array(np.ones(3)))
        with pytest.raises(TensorFormatError, match="magic"):
            tensor_from_bytes(b"XXXX" + blob[4:])

    def test_truncated_payload(self):
        blob = tensor_bytes(Tensor.from_array(np.ones(3)))
        with pytest.raises(TensorFormatError, match="size mismatch"):
            tensor_from_bytes(blob[:-4])

    def test_trailing_garbage(self):
        blob = tensor_bytes(Tensor.from_array(np.ones(3)))
        with pytest.raises(TensorFormatError, match="size mismatch"):
            tensor_from_bytes(blob + b"\x00")

    def test_bad_version(self):
        blob = bytearray(tensor_bytes(Tensor.from_array(np.ones(3))))
        blob[4:8] = struct.pack("<I", 9)
        with pytest.raises(TensorFormatError, match="version"):
            tensor_from_bytes(bytes(blob))

    def test_bad_dtype_code(self):
        blob = bytearray(tensor_bytes(Tensor.from_array(np.ones(3))))
        blob[20:24] = struct.pack("<I", 7)  # dtype sits after one u64 dim
        with pytest.raises(TensorFormatError, match="dtype"):
            tensor_from_bytes(bytes(blob))

    def test_zero_dim(self):
        blob = bytearray(tensor_bytes(Tensor.from_array(np.ones(3))))
        blob[12:20] = struct.pack("<Q", 0)
        with pytest.raises(TensorFormatError, match="zero-sized"):
            tensor_from_bytes(bytes(blob))

    def test_nonfinite_payload(self):
        blob = bytearray(tensor_bytes(Tensor.from_array(np.ones(1))))
        blob[-8:] = struct.pack("<d", float("nan"))
        with pytest.raises(TensorFormatError, match="non-finite"):
            tensor_from_bytes(bytes(blob))


class TestManifest:
    def test_minimal_valid(self):
        m = manifest_from_dict(minimal_manifest_doc())
        assert len(m.annotations) == 1
        assert m.video.duration_seconds == pytest.approx(10.0)

    def test_roundtrip(self, tmp_path):
        m = manifest_from_dict(minimal_manifest_doc())
        path = tmp_path / "m.json"
        write_manifest(m, path)
        back = read_manifest(path)
        assert manifest_to_dict(back) == manifest_to_dict(m)

    def test_annotation_beyond_duration(self):
        doc = minimal_manifest_doc()
        doc["annotations"][0]["end_sec"] = 99.0
        with pytest.raises(ManifestValidationError, match=r"annotations\[0\]"):
            manifest_from_dict(doc)

    def test_malformed_box(self):
        doc = minimal_manifest_doc()
        doc["snippets"][0]["agent_boxes"] = [[0.5, 0.5, 0.4, 0.9]]
        with pytest.raises(ManifestValidationError, match=r"agent_boxes\[0\]"):
            manifest_from_dict(doc)

    def test_box_outside_unit_square(self):
        doc = minimal_manifest_doc()
        doc["snippets"][0]["agent_boxes"] = [[0.1, 0.1, 1.2, 0.9]]
        with pytest.raises(ManifestValidationError, match=r"\[0, 1\]"):
            manifest_from_dict(doc)

    def test_unknown_field_rejected(self):
        doc = minimal_manifest_doc()
        doc["extra"] = 1
        with pytest.raises(ManifestValidationError, match="unknown field"):
            manifest_from_dict(doc)
        doc = minimal_manifest_doc()
        doc["video"]["typo_field"] = 1
        with pytest.raises(ManifestValidationError, match="typo_field"):
            manifest_from_dict(doc)

    def test_duplicate_snippet_index(self):
        doc = minimal_manifest_doc()
        doc["snippets"].append({"index": 0, "agent_boxes": []})
        with pytest.raises(ManifestValidationError, match="duplicate"):
            manifest_from_dict(doc)

    def test_snippet_index_out_of_range(self):
        doc = minimal_manifest_doc()
        doc["snippets"][0]["index"] = 10  # T = 10, valid range [0, 10)
        with pytest.raises(ManifestValidationError, match="outside"):
            manifest_from_dict(doc)

    def test_invariant_breaking_mutations_all_rejected(self):
        mutations = [
            lambda d: d["video"].pop("fps"),
            lambda d: d["video"].update(fps=-1.0),
            lambda d: d["video"].update(num_frames=0),
            lambda d: d["annotations"].__setitem__(0, {"label": "x", "start_sec": 3.0, "end_sec": 1.0}),
            lambda d: d["annotations"].__setitem__(0, {"label": 5, "start_sec": 0.0, "end_sec": 1.0}),
            lambda d: d["snippets"][0].update(index=-1),
            lambda d: d["snippets"][0].update(agent_boxes=[[0.1, 0.5, 0.4]]),
            lambda d: d["snippets"][0].update(agent_boxes=[[0.1, 0.9, 0.4, 0.2]]),
        ]
        for mutate in mutations:
            doc = minimal_manifest_doc()
            mutate(doc)
            with pytest.raises(ManifestValidationError):
                manifest_from_dict(doc)

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ManifestValidationError, match="invalid JSON"):
            read_manifest(path)
