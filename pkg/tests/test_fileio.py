import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from sfgrad.errors import DataError
from sfgrad.fileio import (
    append_metric_row,
    export_obj,
    load_camera,
    load_params,
    read_mask,
    read_pfm,
    save_camera,
    save_params,
    write_mask,
    write_pfm,
)
from sfgrad.fno import init_params, named_arrays
from sfgrad.geometry import CameraModel, DepthMap


class TestPfm:
    def test_single_value_payload_bytes(self, tmp_path):
        path = tmp_path / "one.pfm"
        write_pfm(path, np.array([[2.5]], dtype=np.float32))
        blob = path.read_bytes()
        assert blob.startswith(b"Pf\n1 1\n")
        assert blob.endswith(bytes([0x00, 0x00, 0x20, 0x40]))

    def test_roundtrip_three_channel(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((17, 9, 3)).astype(np.float32)
        path = tmp_path / "img.pfm"
        write_pfm(path, img)
        back = read_pfm(path)
        assert back.dtype == np.float32
        assert (back == img).all()

    def test_roundtrip_single_channel(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((5, 8)).astype(np.float32)
        path = tmp_path / "gray.pfm"
        write_pfm(path, img)
        assert (read_pfm(path) == img).all()

    def test_big_endian_read(self, tmp_path):
        img = np.arange(12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "be.pfm"
        write_pfm(path, img, little_endian=False)
        assert (read_pfm(path) == img).all()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "not.pfm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(DataError):
            read_pfm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "trunc.pfm"
        write_pfm(path, np.ones((4, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(DataError):
            read_pfm(path)

    def test_zero_scale_rejected(self, tmp_path):
        path = tmp_path / "zs.pfm"
        path.write_bytes(b"Pf\n1 1\n0.0\n" + b"\x00" * 4)
        with pytest.raises(DataError):
            read_pfm(path)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, h, w, seed):
        rng = np.random.default_rng(seed)
        img = rng.standard_normal((h, w)).astype(np.float32)
        import io as _io
        import tempfile, os
        fd, path = tempfile.mkstemp(suffix=".pfm")
        os.close(fd)
        try:
            write_pfm(path, img)
            assert (read_pfm(path) == img).all()
        finally:
            os.unlink(path)


class TestMask:
    def test_threshold_semantics(self, tmp_path):
        img = np.array([[0, 127], [128, 255]], dtype=np.uint8)
        path = tmp_path / "m.png"
        Image.fromarray(img, mode="L").save(path)
        mask = read_mask(path)
        assert mask.tolist() == [[False, False], [True, True]]

    def test_write_read_roundtrip(self, tmp_path):
        mask = np.array([[True, False], [False, True]])
        path = tmp_path / "m2.png"
        write_mask(path, mask)
        assert (read_mask(path) == mask).all()


class TestParamContainer:
    def params(self):
        return init_params(seed=0, width=4, attention_width=2, k_max=2, n_layers=2)

    def test_roundtrip_values(self, tmp_path):
        params = self.params()
        path = tmp_path / "params.bin"
        save_params(path, params)
        loaded = load_params(path)
        for (name, a), (_, b) in zip(named_arrays(params), named_arrays(loaded)):
            if np.iscomplexobj(a):
                assert (a.astype(np.complex64).astype(np.complex128) == b).all(), name
            else:
                assert (a.astype(np.float32).astype(np.float64) == b).all(), name

    def test_double_roundtrip_bytes_identical(self, tmp_path):
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_params(p1, self.params())
        save_params(p2, load_params(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def _patch_header(self, path, mutate):
        blob = path.read_bytes()
        n = struct.unpack("<Q", blob[:8])[0]
        header = json.loads(blob[8:8 + n])
        mutate(header)
        new = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(struct.pack("<Q", len(new)) + new + blob[8 + n:])

    def test_layer_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "p.bin"
        save_params(path, self.params())
        self._patch_header(path, lambda h: h["hyperparameters"].update(T=3))
        with pytest.raises(DataError, match="T=3"):
            load_params(path)

    def test_format_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "p.bin"
        save_params(path, self.params())
        self._patch_header(path, lambda h: h.update(format_version=99))
        with pytest.raises(DataError, match="version"):
            load_params(path)

    def test_unknown_keys_preserved(self, tmp_path):
        path = tmp_path / "p.bin"
        save_params(path, self.params())
        self._patch_header(path, lambda h: h.update(note="trained on desk"))
        loaded = load_params(path)
        out = tmp_path / "q.bin"
        save_params(out, loaded)
        blob = out.read_bytes()
        n = struct.unpack("<Q", blob[:8])[0]
        assert json.loads(blob[8:8 + n])["note"] == "trained on desk"

    def test_overlapping_ranges_rejected(self, tmp_path):
        path = tmp_path / "p.bin"
        save_params(path, self.params())

        def clash(h):
            names = sorted(h["tensors"])
            h["tensors"][names[1]]["offset"] = h["tensors"][names[0]]["offset"]

        self._patch_header(path, clash)
        with pytest.raises(DataError):
            load_params(path)


class TestCamera:
    def test_roundtrip(self, tmp_path):
        cam = CameraModel("perspective", 64, 48, f=1.4, mu=520.0)
        path = tmp_path / "cam.json"
        save_camera(path, cam)
        back = load_camera(path)
        assert back == cam

    def test_missing_key(self, tmp_path):
        path = tmp_path / "cam.json"
        path.write_text(json.dumps({"projection": "orthographic", "width": 4}))
        with pytest.raises(DataError):
            load_camera(path)


class TestObjExport:
    def read_obj(self, path):
        verts, faces = [], []
        for line in open(path):
            if line.startswith("v "):
                verts.append([float(x) for x in line.split()[1:]])
            elif line.startswith("f "):
                faces.append([int(x) for x in line.split()[1:]])
        return np.asarray(verts), faces

    def test_2x2_full_mask(self, tmp_path):
        z = DepthMap(np.ones((2, 2)), np.ones((2, 2), bool))
        path = tmp_path / "quad.obj"
        export_obj(path, z, CameraModel("orthographic", 2, 2))
        verts, faces = self.read_obj(path)
        assert len(verts) == 4 and len(faces) == 2

    def test_l_shape_no_faces(self, tmp_path):
        mask = np.array([[True, True], [True, False]])
        z = DepthMap(np.ones((2, 2)), mask)
        path = tmp_path / "l.obj"
        export_obj(path, z, CameraModel("orthographic", 2, 2))
        verts, faces = self.read_obj(path)
        assert len(verts) == 3 and len(faces) == 0

    def test_plane_mesh_face_normals_parallel(self, tmp_path):
        cam = CameraModel("orthographic", 6, 6, mu=10.0)
        from sfgrad.geometry import normalized_coords
        grid = normalized_coords(cam)
        z = DepthMap(1.0 + 0.2 * grid[..., 0] - 0.1 * grid[..., 1],
                     np.ones((6, 6), bool))
        path = tmp_path / "plane.obj"
        export_obj(path, z, cam)
        verts, faces = self.read_obj(path)
        normals = []
        for f in faces:
            a, b, c = (verts[i - 1] for i in f)
            n = np.cross(b - a, c - a)
            normals.append(n / np.linalg.norm(n))
        normals = np.asarray(normals)
        assert np.abs(normals - normals[0]).max() < 1e-6
        assert normals[0, 2] > 0  # wound toward the camera


def test_metric_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    append_metric_row(path, "cup", "dct", 1.25, 0.5)
    append_metric_row(path, "cup", "fnin", 0.75, 1.0)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "object,method,MAE_mm,runtime_s"
    assert len(lines) == 3
