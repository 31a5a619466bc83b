import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtforge.errors import ParseError, UnsupportedFormat
from gtforge.pointcloud import (
    PointCloud,
    has_neighbor_within,
    keep_first_echo,
    load_cloud,
    nearest_within,
    remove_isolated,
    write_ply,
    write_xyz,
)


def cloud_of(positions, echo=None, intensity=None):
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if echo is None:
        echo = np.ones(len(positions), dtype=np.int32)
    return PointCloud(positions, np.asarray(echo, dtype=np.int32), intensity)


class TestXyz:
    def test_three_line_file(self, tmp_path):
        p = tmp_path / "pts.xyz"
        p.write_text("1 2 3\n4 5 6\n# comment line\n7 8 9.5\n")
        c = load_cloud(p)
        assert len(c) == 3
        lo, hi = c.bounds
        assert np.array_equal(lo, [1, 2, 3])
        assert np.array_equal(hi, [7, 8, 9.5])
        assert np.all(c.echo == 1)

    def test_optional_echo_and_intensity(self, tmp_path):
        p = tmp_path / "pts.xyz"
        p.write_text("0 0 0 2 100.5\n1 1 1 1 7\n")
        c = load_cloud(p)
        assert list(c.echo) == [2, 1]
        assert list(c.intensity) == [100.5, 7.0]

    def test_bad_line_reports_byte_offset(self, tmp_path):
        p = tmp_path / "pts.xyz"
        p.write_text("1 2 3\nbroken line here oops x\n")
        with pytest.raises(ParseError) as exc:
            load_cloud(p)
        assert exc.value.byte_offset == 6

    def test_round_trip(self, tmp_path):
        c = cloud_of([[1.25, -2.5, 3.0625], [4, 5, 6]], echo=[2, 1], intensity=[9.5, 1.0])
        write_xyz(c, tmp_path / "out.xyz")
        back = load_cloud(tmp_path / "out.xyz")
        assert np.array_equal(back.positions, c.positions)
        assert np.array_equal(back.echo, c.echo)
        assert np.array_equal(back.intensity, c.intensity)


class TestPly:
    def test_binary_matches_ascii_twin(self, tmp_path):
        rng = np.random.default_rng(0)
        c = cloud_of(rng.uniform(-100, 100, (1000, 3)), echo=rng.integers(1, 4, 1000))
        write_ply(c, tmp_path / "a.ply", binary=False)
        write_ply(c, tmp_path / "b.ply", binary=True)
        ascii_back = load_cloud(tmp_path / "a.ply")
        binary_back = load_cloud(tmp_path / "b.ply")
        assert np.array_equal(ascii_back.positions, binary_back.positions)
        assert np.array_equal(ascii_back.echo, binary_back.echo)
        assert np.array_equal(binary_back.positions, c.positions)

    def test_float32_properties(self, tmp_path):
        body = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n" \
               b"property float x\nproperty float y\nproperty float z\nend_header\n"
        body += np.array([1, 2, 3, 4, 5, 6], dtype="<f4").tobytes()
        p = tmp_path / "f32.ply"
        p.write_bytes(body)
        c = load_cloud(p)
        assert np.array_equal(c.positions, [[1, 2, 3], [4, 5, 6]])

    def test_truncated_body(self, tmp_path):
        header = b"ply\nformat binary_little_endian 1.0\nelement vertex 5\n" \
                 b"property double x\nproperty double y\nproperty double z\nend_header\n"
        p = tmp_path / "trunc.ply"
        p.write_bytes(header + b"\x00" * 16)
        with pytest.raises(ParseError):
            load_cloud(p)

    def test_big_endian_unsupported(self, tmp_path):
        p = tmp_path / "be.ply"
        p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                      b"property float x\nproperty float y\nproperty float z\nend_header\n")
        with pytest.raises(UnsupportedFormat):
            load_cloud(p)


def make_las(points, fmt=0, scale=0.01, offset=(100.0, 200.0, 10.0), returns=None):
    """Minimal LAS 1.2 writer for tests."""
    n = len(points)
    sizes = {0: 20, 1: 28, 2: 26, 3: 34}
    rec_len = sizes[fmt]
    header = bytearray(227)
    header[0:4] = b"LASF"
    header[24] = 1  # version major
    header[25] = 2
    struct.pack_into("<H", header, 94, 227)  # header size
    struct.pack_into("<I", header, 96, 227)  # offset to point data
    header[104] = fmt
    struct.pack_into("<H", header, 105, rec_len)
    struct.pack_into("<I", header, 107, n)
    struct.pack_into("<3d", header, 131, scale, scale, scale)
    struct.pack_into("<3d", header, 155, *offset)
    body = bytearray()
    for i, (x, y, z) in enumerate(points):
        rec = bytearray(rec_len)
        struct.pack_into("<3i", rec, 0, round((x - offset[0]) / scale),
                         round((y - offset[1]) / scale), round((z - offset[2]) / scale))
        struct.pack_into("<H", rec, 12, 500 + i)
        rec[14] = (returns[i] if returns else 1) & 0x07
        body += rec
    return bytes(header) + bytes(body)


class TestLas:
    def test_reads_scaled_points(self, tmp_path):
        pts = [(101.25, 202.5, 11.0), (105.0, 201.0, 12.75)]
        p = tmp_path / "a.las"
        p.write_bytes(make_las(pts, returns=[1, 2]))
        c = load_cloud(p)
        assert np.allclose(c.positions, pts, atol=1e-9)
        assert list(c.echo) == [1, 2]
        assert list(c.intensity) == [500.0, 501.0]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.las"
        data = bytearray(make_las([(100.0, 200.0, 10.0)]))
        data[0:4] = b"NOPE"
        p.write_bytes(bytes(data))
        with pytest.raises(ParseError) as exc:
            load_cloud(p)
        assert exc.value.byte_offset == 0

    def test_unsupported_format(self, tmp_path):
        data = bytearray(make_las([(100.0, 200.0, 10.0)]))
        data[104] = 6
        p = tmp_path / "fmt6.las"
        p.write_bytes(bytes(data))
        with pytest.raises(UnsupportedFormat):
            load_cloud(p)

    def test_truncated_points(self, tmp_path):
        data = make_las([(100.0, 200.0, 10.0)] * 3)
        p = tmp_path / "short.las"
        p.write_bytes(data[:-10])
        with pytest.raises(ParseError):
            load_cloud(p)


class TestFirstEcho:
    def test_mixed_echoes(self):
        c = cloud_of([[i, 0, 0] for i in range(4)], echo=[1, 2, 1, 3])
        out = keep_first_echo(c)
        assert len(out) == 2
        assert np.array_equal(out.positions[:, 0], [0, 2])

    def test_identity_on_all_first(self):
        c = cloud_of([[i, 0, 0] for i in range(5)])
        out = keep_first_echo(c)
        assert np.array_equal(out.positions, c.positions)

    def test_empty(self):
        out = keep_first_echo(cloud_of(np.zeros((0, 3))))
        assert len(out) == 0

    def test_idempotent(self):
        c = cloud_of([[i, 0, 0] for i in range(6)], echo=[1, 2, 1, 3, 1, 1])
        once = keep_first_echo(c)
        twice = keep_first_echo(once)
        assert np.array_equal(once.positions, twice.positions)


class TestRemoveIsolated:
    def test_pair_kept_loner_removed(self):
        c = cloud_of([[0, 0, 0], [2.9, 0, 0], [100, 0, 0]])
        out = remove_isolated(c, 3.0)
        assert len(out) == 2
        assert out.positions[:, 0].max() == 2.9

    def test_dense_grid_all_kept(self):
        g = np.arange(10, dtype=float)
        xx, yy = np.meshgrid(g, g)
        pts = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(100)])
        assert len(remove_isolated(cloud_of(pts), 3.0)) == 100

    def test_single_point_removed(self):
        assert len(remove_isolated(cloud_of([[1, 2, 3]]), 3.0)) == 0

    def test_boundary_inclusive(self):
        kept = remove_isolated(cloud_of([[0, 0, 0], [3.0, 0, 0]]), 3.0)
        assert len(kept) == 2
        dropped = remove_isolated(cloud_of([[0, 0, 0], [3.0000001, 0, 0]]), 3.0)
        assert len(dropped) == 0

    def test_acceptance_thresholds(self):
        # lone points at 3.01 m removed, 2.99 m kept
        assert len(remove_isolated(cloud_of([[0, 0, 0], [0, 3.01, 0]]), 3.0)) == 0
        assert len(remove_isolated(cloud_of([[0, 0, 0], [0, 2.99, 0]]), 3.0)) == 2

    def test_distance_is_3d(self):
        # 2D distance 0, 3D distance 5: isolated under the 3D rule
        assert len(remove_isolated(cloud_of([[0, 0, 0], [0, 0, 5.0]]), 3.0)) == 0

    def test_idempotent(self):
        # the witness relation is symmetric: every survivor's neighbor survives
        rng = np.random.default_rng(4)
        c = cloud_of(rng.uniform(0, 60, (500, 3)))
        once = remove_isolated(c, 3.0)
        twice = remove_isolated(once, 3.0)
        assert np.array_equal(once.positions, twice.positions)

    def test_grid_agrees_with_bruteforce_5k(self):
        rng = np.random.default_rng(123)
        pts = rng.uniform(0, 120, (5000, 3))
        mask = has_neighbor_within(pts, 3.0)
        d2 = ((pts[None, :, :] - pts[:, None, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        brute = (d2 <= 9.0).any(axis=1)
        assert np.array_equal(mask, brute)

    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 60))
    @settings(max_examples=30, deadline=None)
    def test_grid_agrees_with_bruteforce_random(self, seed, n):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-10, 10, (n, 3))
        mask = has_neighbor_within(pts, 3.0)
        d2 = ((pts[None, :, :] - pts[:, None, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        assert np.array_equal(mask, (d2 <= 9.0).any(axis=1))


class TestNearest:
    def test_basic_match(self):
        idx, dist = nearest_within(np.array([[0.0, 0.0, 0.1]]), np.array([[0.0, 0.0, 0.0], [5, 5, 5]]), 1.0)
        assert idx[0] == 0
        assert dist[0] == pytest.approx(0.1)

    def test_beyond_max_dist(self):
        idx, _ = nearest_within(np.array([[10.0, 0, 0]]), np.array([[0.0, 0, 0]]), 1.0)
        assert idx[0] == -1

    def test_tie_breaks_to_lowest_index(self):
        positions = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 2.0, 0]])
        idx, dist = nearest_within(np.array([[0.0, 0, 0]]), positions, 3.0)
        assert idx[0] == 0
        assert dist[0] == pytest.approx(1.0)

    def test_exact_nearest_vs_bruteforce(self):
        rng = np.random.default_rng(77)
        pts = rng.uniform(0, 20, (400, 3))
        queries = rng.uniform(0, 20, (100, 3))
        idx, dist = nearest_within(queries, pts, 2.0)
        for qi in range(len(queries)):
            d = np.linalg.norm(pts - queries[qi], axis=1)
            j = int(np.argmin(d))
            if d[j] <= 2.0:
                assert idx[qi] == j
                assert dist[qi] == pytest.approx(d[j])
            else:
                assert idx[qi] == -1


class TestCloudInvariants:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            cloud_of([[np.nan, 0, 0]])

    def test_rejects_zero_echo(self):
        with pytest.raises(ValueError):
            cloud_of([[0, 0, 0]], echo=[0])

    def test_bounds_enclose_points(self):
        rng = np.random.default_rng(8)
        c = cloud_of(rng.normal(0, 50, (100, 3)))
        lo, hi = c.bounds
        assert np.all(c.positions >= lo) and np.all(c.positions <= hi)

    def test_unsupported_extension(self, tmp_path):
        p = tmp_path / "cloud.abc"
        p.write_text("")
        with pytest.raises(UnsupportedFormat):
            load_cloud(p)
