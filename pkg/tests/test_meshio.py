import numpy as np
import pytest
from hypothesis import given, strategies as st

from specssm.geomcore import DataError, Mesh, VoxelGrid
from specssm.meshio import (atomic_write_text, read_mesh, read_off, read_ply, read_voxels, write_mesh,
                            write_off, write_ply, write_voxels)


@pytest.mark.parametrize("suffix", [".ply", ".off"])
def test_mesh_roundtrip_is_exact(tmp_path, ellipsoid, suffix):
    path = tmp_path / f"m{suffix}"
    write_mesh(path, ellipsoid)
    back = read_mesh(path)
    np.testing.assert_array_equal(back.vertices, ellipsoid.vertices)
    np.testing.assert_array_equal(back.faces, ellipsoid.faces)


def test_ply_layout_is_binary_little_endian_double_uint(tmp_path):
    mesh = Mesh([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    write_ply(tmp_path / "t.ply", mesh)
    raw = (tmp_path / "t.ply").read_bytes()
    head, body = raw.split(b"end_header\n")
    assert b"format binary_little_endian 1.0" in head
    assert b"property double x" in head and b"property list uchar uint vertex_indices" in head
    assert len(body) == 3 * 3 * 8 + 1 + 3 * 4
    assert np.frombuffer(body[-12:], "<u4").tolist() == [0, 1, 2]


def test_point_cloud_ply_has_no_faces(tmp_path, rng):
    cloud = Mesh(rng.normal(size=(7, 3)))
    write_ply(tmp_path / "c.ply", cloud)
    back = read_ply(tmp_path / "c.ply")
    assert back.n == 7 and not back.has_faces


def test_off_polygons_are_fan_triangulated(tmp_path):
    (tmp_path / "q.off").write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert read_off(tmp_path / "q.off").faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_rejects_foreign_files(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"not a mesh")
    (tmp_path / "x.off").write_text("COFF\n")
    (tmp_path / "x.obj").write_text("")
    (tmp_path / "x.vox").write_bytes(b"nope")
    for name in ("x.ply", "x.off", "x.obj"):
        with pytest.raises(DataError):
            read_mesh(tmp_path / name)
    with pytest.raises(DataError):
        read_voxels(tmp_path / "x.vox")


@given(st.sampled_from(["<f8", "<f4", "|u1", "<i2"]), st.integers(0, 2**31))
def test_voxel_roundtrip(tmp_path_factory, dtype, seed):
    rng = np.random.default_rng(seed)
    vol = (rng.random((3, 4, 5)) * 100).astype(dtype)
    grid = VoxelGrid.from_array(vol, (0.5, 1.0, 2.5))
    path = tmp_path_factory.mktemp("vox") / "g.vox"
    write_voxels(path, grid)
    back = read_voxels(path)
    assert back.dims == grid.dims and back.spacing == grid.spacing
    assert back.data.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(back.to_array(), vol)


def test_voxel_header_is_documented_text(tmp_path):
    write_voxels(tmp_path / "g.vox", VoxelGrid.from_array(np.zeros((2, 2, 2), dtype=np.uint8)))
    head = (tmp_path / "g.vox").read_bytes().split(b"end_header\n")[0].decode()
    assert head.splitlines() == ["VOXR 1", "dims 2 2 2", "spacing 1.0 1.0 1.0", "dtype |u1"]


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write_text(tmp_path / "sub" / "a.txt", "hello")
    assert (tmp_path / "sub" / "a.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.txt"]
