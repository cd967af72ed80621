"""PLY/OBJ serialization: exact round trips and strict parse errors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from causalmesh.cohort import icosphere_template
from causalmesh.mesh.io import (
    MeshIOError,
    read_obj,
    read_ply,
    read_surface,
    write_obj,
    write_ply,
    write_surface,
)

FACES = np.array([[0, 1, 2], [1, 2, 3]], dtype=np.int64)
VERTS = np.array(
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.25]]
)


class TestPlyRoundTrip:
    def test_exact_vertices_and_faces(self, tmp_path):
        path = tmp_path / "m.ply"
        write_ply(path, VERTS, FACES)
        verts, faces, scalars = read_ply(path)
        assert np.array_equal(verts, VERTS)
        assert np.array_equal(faces, FACES)
        assert scalars is None

    @given(
        hnp.arrays(
            np.float64,
            (4, 3),
            elements=st.floats(-1e12, 1e12, allow_nan=False, width=64),
        )
    )
    @settings(max_examples=30)
    def test_bit_exact_for_arbitrary_doubles(self, verts):
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/m.ply"
            write_ply(path, verts, FACES)
            got, _, _ = read_ply(path)
        assert np.array_equal(got, verts)

    def test_scalar_channel_round_trip(self, tmp_path):
        path = tmp_path / "m.ply"
        disp = np.array([0.5, -1.25, 3.0, 1e-17])
        write_ply(path, VERTS, FACES, scalars=disp)
        verts, faces, scalars = read_ply(path)
        assert np.array_equal(scalars, disp)
        assert "signed_disp_mm" in path.read_text()

    def test_custom_scalar_name(self, tmp_path):
        path = tmp_path / "m.ply"
        write_ply(path, VERTS, FACES, scalars=np.zeros(4), scalar_name="thickness")
        assert "property double thickness" in path.read_text()

    def test_icosphere_round_trip(self, tmp_path):
        mesh = icosphere_template(2)
        path = tmp_path / "ico.ply"
        write_ply(path, mesh.vertices, mesh.topology.faces)
        verts, faces, _ = read_ply(path)
        assert np.array_equal(verts, mesh.vertices)
        assert np.array_equal(faces, mesh.topology.faces)


class TestPlyErrors:
    def _write_then_corrupt(self, tmp_path, mutate):
        path = tmp_path / "m.ply"
        write_ply(path, VERTS, FACES)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(mutate(lines)) + "\n")
        return path

    def test_bad_magic(self, tmp_path):
        path = self._write_then_corrupt(tmp_path, lambda ls: ["plz"] + ls[1:])
        with pytest.raises(MeshIOError):
            read_ply(path)

    def test_binary_format_rejected(self, tmp_path):
        path = self._write_then_corrupt(
            tmp_path,
            lambda ls: [ls[0], "format binary_little_endian 1.0", *ls[2:]],
        )
        with pytest.raises(MeshIOError):
            read_ply(path)

    def test_non_triangle_face_rejected(self, tmp_path):
        def mutate(lines):
            lines[-1] = "4 0 1 2 3"
            return lines

        path = self._write_then_corrupt(tmp_path, mutate)
        with pytest.raises(MeshIOError):
            read_ply(path)

    def test_face_index_out_of_range(self, tmp_path):
        def mutate(lines):
            lines[-1] = "3 0 1 9"
            return lines

        path = self._write_then_corrupt(tmp_path, mutate)
        with pytest.raises(MeshIOError):
            read_ply(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.ply"
        write_ply(path, VERTS, FACES)
        path.write_text("\n".join(path.read_text().splitlines()[:-2]) + "\n")
        with pytest.raises(MeshIOError):
            read_ply(path)


class TestObj:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.obj"
        write_obj(path, VERTS, FACES)
        verts, faces = read_obj(path)
        assert np.array_equal(verts, VERTS)
        assert np.array_equal(faces, FACES)

    def test_one_based_indices_on_disk(self, tmp_path):
        path = tmp_path / "m.obj"
        write_obj(path, VERTS, FACES)
        face_lines = [l for l in path.read_text().splitlines() if l.startswith("f ")]
        assert face_lines[0] == "f 1 2 3"

    def test_quad_rejected(self, tmp_path):
        path = tmp_path / "m.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n")
        with pytest.raises(MeshIOError):
            read_obj(path)


class TestDispatch:
    def test_suffix_dispatch(self, tmp_path):
        mesh = icosphere_template(1)
        for name in ("m.ply", "m.obj"):
            path = tmp_path / name
            write_surface(path, mesh)
            got = read_surface(path)
            assert np.array_equal(got.vertices, mesh.vertices)
            assert got.topology.same_as(mesh.topology)

    def test_unknown_suffix(self, tmp_path):
        mesh = icosphere_template(1)
        with pytest.raises(MeshIOError):
            write_surface(tmp_path / "m.stl", mesh)
        with pytest.raises(MeshIOError):
            read_surface(tmp_path / "m.stl")

    def test_obj_cannot_carry_scalars(self, tmp_path):
        mesh = icosphere_template(1)
        with pytest.raises(MeshIOError):
            write_surface(tmp_path / "m.obj", mesh, scalars=np.zeros(42))
