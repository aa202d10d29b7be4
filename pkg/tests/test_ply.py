import numpy as np
import pytest

from canonvote.errors import ParseError
from canonvote.ply import read_point_cloud, write_point_cloud


@pytest.fixture
def cloud():
    rng = np.random.default_rng(0)
    positions = rng.uniform(-5, 5, (64, 3)).astype(np.float32)
    props = {
        "red": rng.integers(0, 256, 64, dtype=np.uint8),
        "green": rng.integers(0, 256, 64, dtype=np.uint8),
        "blue": rng.integers(0, 256, 64, dtype=np.uint8),
        "instance": rng.integers(-1, 4, 64).astype(np.int32),
        "vote": rng.uniform(0, 100, 64).astype(np.float32),
    }
    return positions, props


@pytest.mark.parametrize("binary", [True, False])
def test_roundtrip(tmp_path, cloud, binary):
    positions, props = cloud
    path = tmp_path / "cloud.ply"
    write_point_cloud(path, positions, props, binary=binary)
    got_pos, got_props = read_point_cloud(path)
    np.testing.assert_allclose(got_pos, positions, atol=1e-5)
    assert set(got_props) == set(props)
    np.testing.assert_array_equal(got_props["instance"], props["instance"])
    np.testing.assert_array_equal(got_props["red"], props["red"])
    np.testing.assert_allclose(got_props["vote"], props["vote"], rtol=1e-6)


def test_binary_roundtrip_exact(tmp_path, cloud):
    positions, _ = cloud
    path = tmp_path / "c.ply"
    write_point_cloud(path, positions, binary=True)
    got, _ = read_point_cloud(path)
    np.testing.assert_array_equal(got.astype(np.float32), positions)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"obj\n")
    with pytest.raises(ParseError, match="byte offset 0"):
        read_point_cloud(path)


def test_truncated_binary_cites_offset(tmp_path, cloud):
    positions, _ = cloud
    path = tmp_path / "t.ply"
    write_point_cloud(path, positions, binary=True)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ParseError, match="byte offset"):
        read_point_cloud(path)


def test_ascii_bad_token(tmp_path):
    path = tmp_path / "a.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n1 oops 1\n"
    )
    with pytest.raises(ParseError, match="row 1"):
        read_point_cloud(path)


def test_missing_coordinate_property(tmp_path):
    path = tmp_path / "m.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nend_header\n0 0\n"
    )
    with pytest.raises(ParseError, match="'z'"):
        read_point_cloud(path)


def test_unsupported_format(tmp_path):
    path = tmp_path / "b.ply"
    path.write_text("ply\nformat binary_big_endian 1.0\nend_header\n")
    with pytest.raises(ParseError, match="binary_big_endian"):
        read_point_cloud(path)
