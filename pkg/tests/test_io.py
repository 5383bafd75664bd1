import numpy as np
import pytest

from pariconv.errors import ParameterError, ParseError
from pariconv.geom import PointCloud, generate_shape
from pariconv.io import FORMATS, format_cloud, load_cloud, save_cloud


@pytest.mark.parametrize("fmt,ext", [("xyz", "xyz"), ("ply_ascii", "ply"), ("off", "off")])
@pytest.mark.parametrize("with_normals", [True, False])
def test_round_trip_bit_exact(tmp_path, rng, fmt, ext, with_normals):
    c = generate_shape("capsule", 200, rng, noise_sigma=0.01)
    if not with_normals:
        c = PointCloud(c.positions)
    path = tmp_path / f"c.{ext}"
    save_cloud(c, path)
    back = load_cloud(path)
    assert np.array_equal(back.positions, c.positions)
    if with_normals:
        assert np.array_equal(back.normals, c.normals)
    else:
        assert back.normals is None
    assert fmt in FORMATS


def test_xyz_six_columns_gives_normals(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0 0 0 1\n1 0 0 0 0 2\n")
    c = load_cloud(p)
    assert np.allclose(c.normals, [[0, 0, 1], [0, 0, 1]])


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("# header\n\n1 2 3  # trailing\n4 5 6\n")
    assert load_cloud(p).positions.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_ply_skips_faces_and_reads_vertex_properties(tmp_path):
    p = tmp_path / "m.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\n"
                 "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
                 "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
                 "0 0 0 255\n1 0 0 255\n0 1 0 255\n3 0 1 2\n")
    c = load_cloud(p)
    assert c.positions.tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    assert c.normals is None


def test_off_with_faces(tmp_path):
    p = tmp_path / "m.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    assert len(load_cloud(p)) == 3


@pytest.mark.parametrize("name,text,line", [
    ("bad.ply", "ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n", 2),
    ("bad.off", "COFF\n1 0 0\n0 0 0\n", 1),
    ("bad.xyz", "0 0 0\n1 1\n", 2),
    ("bad2.xyz", "0 0 x\n", 1),
    ("short.off", "OFF\n3 0 0\n0 0 0\n", 4),  # end of file
])
def test_parse_errors_name_the_line(tmp_path, name, text, line):
    p = tmp_path / name
    p.write_text(text)
    with pytest.raises(ParseError) as err:
        load_cloud(p)
    assert err.value.line == line
    assert str(err.value).startswith(f"line {line}:")


def test_unknown_format(tmp_path):
    with pytest.raises(ParameterError):
        load_cloud(tmp_path / "a.obj")
    with pytest.raises(ParameterError):
        format_cloud(PointCloud(np.zeros((1, 3))), "las")
