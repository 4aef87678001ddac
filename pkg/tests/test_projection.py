"""Tests for virtual projection, PE lookup, and encoding assignment."""

import hashlib

import numpy as np
import pytest
import torch

from pointbridge.errors import GeometryMismatch, IOFormatError, ModeMismatch
from pointbridge.pointcloud import PointCloud, normalize_to_unit_sphere
from pointbridge.projection import (
    LINE1D,
    PLANE2D,
    PETable,
    ProjectionConfig,
    assign_positional_encoding,
    build_sinusoid_pe,
    gather_pe,
    line_position,
    load_pe_table,
    make_view_basis,
    pe_lookup,
    project_1d,
    project_2d,
    project_positions,
    save_pe_table,
)
from pointbridge.tokenizer import TokenSet


def cfg_1d(**kw):
    base = dict(mode=LINE1D, m_views=6, line_length=77, segment_size=2)
    base.update(kw)
    return ProjectionConfig(**base)


def cfg_2d(**kw):
    base = dict(mode=PLANE2D, m_views=6, plane_extent=(512, 512), patch_size=26)
    base.update(kw)
    return ProjectionConfig(**base)


def random_coords(n, seed):
    rng = np.random.default_rng(seed)
    pts = normalize_to_unit_sphere(PointCloud(rng.normal(size=(n, 3)))).points
    return pts


class TestViewBasis:
    def test_1d_four_views(self):
        """M=4 gives the four axis directions in the horizontal plane."""
        basis = make_view_basis(cfg_1d(m_views=4))
        expected = np.array(
            [[1, 0, 0], [0, 0, 1], [-1, 0, 0], [0, 0, -1]], dtype=np.float64
        )
        np.testing.assert_allclose(basis.directions, expected, atol=1e-12)

    def test_unit_norm(self):
        for m in (1, 3, 6, 8):
            basis = make_view_basis(cfg_1d(m_views=m))
            np.testing.assert_allclose(
                np.linalg.norm(basis.directions, axis=1), 1.0, atol=1e-9
            )

    def test_uniform_spacing_m6(self):
        """Consecutive directions are 60 degrees apart."""
        basis = make_view_basis(cfg_1d(m_views=6))
        for j in range(6):
            a, b = basis.directions[j], basis.directions[(j + 1) % 6]
            angle = np.degrees(np.arccos(np.clip(a @ b, -1, 1)))
            assert abs(angle - 60.0) < 1e-9

    def test_2d_rotations_orthonormal(self):
        basis = make_view_basis(cfg_2d(m_views=5))
        for rot in basis.rotations:
            np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(rot) - 1.0) < 1e-12

    def test_zero_elevation_view0_is_identity(self):
        basis = make_view_basis(cfg_2d(elevation_deg=0.0))
        np.testing.assert_allclose(basis.rotations[0], np.eye(3), atol=1e-12)


class TestProject1d:
    def test_axis_projection(self):
        basis = make_view_basis(cfg_1d(m_views=4))
        assert abs(project_1d(np.array([0.3, 0.4, 0.5]), basis, 0) - 0.3) < 1e-15

    def test_origin(self):
        basis = make_view_basis(cfg_1d(m_views=5))
        for j in range(5):
            assert project_1d(np.zeros(3), basis, j) == 0.0

    def test_linearity(self):
        """project_1d(a p + b q) == a project_1d(p) + b project_1d(q)."""
        basis = make_view_basis(cfg_1d(m_views=6))
        rng = np.random.default_rng(42)
        for _ in range(500):
            a, b = rng.normal(size=2)
            p, q = rng.normal(size=(2, 3))
            j = int(rng.integers(6))
            lhs = project_1d(a * p + b * q, basis, j)
            rhs = a * project_1d(p, basis, j) + b * project_1d(q, basis, j)
            assert abs(lhs - rhs) < 1e-12


class TestProject2d:
    def test_center_maps_to_center(self):
        basis = make_view_basis(cfg_2d(elevation_deg=0.0))
        uv = project_2d(np.zeros(3), basis, 0, cfg_2d())
        np.testing.assert_allclose(uv, [256.0, 256.0], atol=1e-12)

    def test_edge_clamped(self):
        """p=(1,0,0) under the identity view lands just inside the edge."""
        basis = make_view_basis(cfg_2d(elevation_deg=0.0))
        uv = project_2d(np.array([1.0, 0.0, 0.0]), basis, 0, cfg_2d())
        assert 511.99 < uv[0] < 512.0
        assert abs(uv[1] - 256.0) < 1e-12

    def test_beyond_extent_clamped(self):
        basis = make_view_basis(cfg_2d(elevation_deg=0.0))
        uv = project_2d(np.array([1.7, -1.7, 0.0]), basis, 0, cfg_2d())
        assert 511.99 < uv[0] < 512.0
        assert uv[1] == 0.0

    def test_cloud_rotation_equals_view_change(self):
        """Rotating the cloud by a view azimuth reproduces that view."""
        cfg = cfg_2d(m_views=6)
        basis = make_view_basis(cfg)
        pts = random_coords(40, 1)
        for j in range(6):
            theta = 2.0 * np.pi * j / 6
            c, s = np.cos(theta), np.sin(theta)
            rot_y = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
            rotated = pts @ rot_y.T
            np.testing.assert_allclose(
                project_2d(rotated, basis, 0, cfg),
                project_2d(pts, basis, j, cfg),
                atol=1e-9,
            )


class TestPeLookup:
    def test_floor_rule_1d(self):
        table = PETable(LINE1D, torch.arange(77.0)[:, None].repeat(1, 4))
        row = pe_lookup(table, 5.9)
        np.testing.assert_allclose(row.numpy(), [5.0] * 4)

    def test_origin_patch_2d(self):
        gh, gw = cfg_2d().grid_shape()
        data = torch.arange(gh * gw, dtype=torch.float64).reshape(gh, gw, 1)
        table = PETable(PLANE2D, data, patch_size=26)
        assert pe_lookup(table, np.array([0.0, 0.0])).item() == 0.0

    def test_clamp_beyond_extent(self):
        table = PETable(LINE1D, torch.arange(77.0)[:, None])
        assert pe_lookup(table, 500.0).item() == 76.0
        assert pe_lookup(table, -3.0).item() == 0.0
        gh, gw = cfg_2d().grid_shape()
        data = torch.arange(gh * gw, dtype=torch.float64).reshape(gh, gw, 1)
        table2 = PETable(PLANE2D, data, patch_size=26)
        assert pe_lookup(table2, np.array([1e5, 1e5])).item() == gh * gw - 1.0

    def test_vectorized_matches_scalar(self):
        table = PETable(LINE1D, torch.randn(77, 8, dtype=torch.float64))
        pos = np.random.default_rng(3).uniform(0, 77, size=11)
        batch = pe_lookup(table, pos)
        for i, p in enumerate(pos):
            assert torch.equal(batch[i], pe_lookup(table, p))


class TestProjectPositions:
    def test_pe_index_valid_random_clouds(self):
        """Every pe_index addresses a real table entry, both modes."""
        for seed in range(5):
            pts = random_coords(64, seed)
            pos1 = project_positions(pts, make_view_basis(cfg_1d()), cfg_1d())
            assert pos1.values.shape == (6, 64)
            assert pos1.pe_index.min() >= 0 and pos1.pe_index.max() <= 76
            cfg = cfg_2d()
            gh, gw = cfg.grid_shape()
            pos2 = project_positions(pts, make_view_basis(cfg), cfg)
            assert pos2.values.shape == (6, 64, 2)
            assert pos2.pe_index[..., 0].max() < gh
            assert pos2.pe_index[..., 1].max() < gw
            assert pos2.pe_index.min() >= 0

    def test_line_positions_in_range(self):
        pts = random_coords(32, 9)
        cfg = cfg_1d()
        pos = project_positions(pts, make_view_basis(cfg), cfg)
        assert pos.values.min() >= 0.0
        assert pos.values.max() < cfg.line_length

    def test_matches_pairwise_ops(self):
        """The bulk path agrees with per-point project_1d / project_2d."""
        pts = random_coords(16, 10)
        cfg1, cfg2 = cfg_1d(), cfg_2d()
        b1, b2 = make_view_basis(cfg1), make_view_basis(cfg2)
        pos1 = project_positions(pts, b1, cfg1)
        for j in range(cfg1.m_views):
            np.testing.assert_allclose(
                pos1.values[j], line_position(project_1d(pts, b1, j), cfg1), atol=0
            )
        pos2 = project_positions(pts, b2, cfg2)
        for j in range(cfg2.m_views):
            np.testing.assert_allclose(
                pos2.values[j], project_2d(pts, b2, j, cfg2), atol=0
            )

    def test_batched_leading_dim(self):
        pts = np.stack([random_coords(16, 11), random_coords(16, 12)])
        cfg = cfg_1d()
        pos = project_positions(pts, make_view_basis(cfg), cfg)
        assert pos.values.shape == (2, 6, 16)
        single = project_positions(pts[1], make_view_basis(cfg), cfg)
        np.testing.assert_array_equal(pos.values[1], single.values)


class TestAssignPE:
    def _tokens(self, n=20, d=16, seed=0):
        feats = torch.from_numpy(np.random.default_rng(seed).normal(size=(n, d)))
        coords = torch.from_numpy(random_coords(n, seed + 100))
        return TokenSet(feats, coords)

    def test_single_view_exact(self):
        """M=1 adds exactly the one looked-up PE row."""
        cfg = cfg_1d(m_views=1)
        basis = make_view_basis(cfg)
        table = PETable(LINE1D, torch.randn(77, 16, dtype=torch.float64))
        tokens = self._tokens()
        out, pos = assign_positional_encoding(tokens, basis, cfg, table)
        expected = tokens.features + pe_lookup(table, pos.values[0])
        np.testing.assert_allclose(out.features.numpy(), expected.numpy(), atol=0)

    def test_zero_table(self):
        cfg = cfg_1d()
        table = PETable(LINE1D, torch.zeros(77, 16, dtype=torch.float64))
        tokens = self._tokens()
        out, _ = assign_positional_encoding(tokens, make_view_basis(cfg), cfg, table)
        assert torch.equal(out.features, tokens.features)
        assert torch.equal(out.coords, tokens.coords)

    def test_brute_force_average(self):
        """Encoded feature equals T_i plus the mean of per-view PE lookups."""
        for cfg in (cfg_1d(), cfg_2d()):
            if cfg.mode == PLANE2D:
                gh, gw = cfg.grid_shape()
                table = PETable(
                    PLANE2D,
                    torch.randn(gh, gw, 16, dtype=torch.float64),
                    patch_size=cfg.patch_size,
                )
            else:
                table = PETable(LINE1D, torch.randn(77, 16, dtype=torch.float64))
            basis = make_view_basis(cfg)
            tokens = self._tokens()
            out, pos = assign_positional_encoding(tokens, basis, cfg, table)
            acc = torch.zeros_like(tokens.features)
            for j in range(cfg.m_views):
                acc = acc + pe_lookup(table, pos.values[j])
            expected = tokens.features + acc / cfg.m_views
            np.testing.assert_allclose(
                out.features.numpy(), expected.numpy(), atol=1e-12
            )

    def test_view_order_invariance(self):
        """Averaging is invariant to permuting the view axis."""
        cfg = cfg_1d()
        basis = make_view_basis(cfg)
        table = PETable(LINE1D, torch.randn(77, 16, dtype=torch.float64))
        tokens = self._tokens()
        out, pos = assign_positional_encoding(tokens, basis, cfg, table)
        perm = np.random.default_rng(5).permutation(6)
        shuffled = type(pos)(pos.mode, pos.values[perm], pos.pe_index[perm])
        pe = gather_pe(table, shuffled).mean(dim=0)
        np.testing.assert_allclose(
            out.features.numpy(), (tokens.features + pe).numpy(), atol=1e-12
        )

    def test_table_not_mutated(self):
        cfg = cfg_1d()
        table = PETable(LINE1D, torch.randn(77, 16, dtype=torch.float64))
        assert table.frozen
        digest = hashlib.sha256(table.data.numpy().tobytes()).hexdigest()
        tokens = self._tokens()
        assign_positional_encoding(tokens, make_view_basis(cfg), cfg, table)
        assert hashlib.sha256(table.data.numpy().tobytes()).hexdigest() == digest
        assert table.frozen

    def test_mode_mismatch(self):
        cfg = cfg_1d()
        gh, gw = cfg_2d().grid_shape()
        table = PETable(PLANE2D, torch.zeros(gh, gw, 16), patch_size=26)
        with pytest.raises(ModeMismatch):
            assign_positional_encoding(
                self._tokens(), make_view_basis(cfg), cfg, table
            )

    def test_geometry_mismatch(self):
        cfg = cfg_1d(line_length=77)
        table = PETable(LINE1D, torch.zeros(50, 16))
        with pytest.raises(GeometryMismatch):
            assign_positional_encoding(
                self._tokens(), make_view_basis(cfg), cfg, table
            )


class TestSinusoidTables:
    def test_row_norms(self):
        """Sinusoid rows have norm sqrt(D/2) in both modes."""
        t1 = build_sinusoid_pe(cfg_1d(), 64)
        np.testing.assert_allclose(
            np.linalg.norm(t1.data.numpy(), axis=-1),
            np.sqrt(64 / 2),
            rtol=1e-5,
        )
        t2 = build_sinusoid_pe(cfg_2d(), 64)
        np.testing.assert_allclose(
            np.linalg.norm(t2.data.numpy(), axis=-1),
            np.sqrt(64 / 2),
            rtol=1e-5,
        )

    def test_geometry(self):
        assert build_sinusoid_pe(cfg_1d(), 16).data.shape == (77, 16)
        gh, gw = cfg_2d().grid_shape()
        assert (gh, gw) == (20, 20)
        assert build_sinusoid_pe(cfg_2d(), 16).data.shape == (20, 20, 16)


class TestPeTableIO:
    def test_round_trip_1d(self, tmp_path):
        table = PETable(LINE1D, torch.randn(77, 8))
        path = str(tmp_path / "t.a2pe")
        save_pe_table(path, table)
        back = load_pe_table(path)
        assert back.mode == LINE1D
        assert torch.equal(back.data, table.data)

    def test_round_trip_2d(self, tmp_path):
        table = PETable(PLANE2D, torch.randn(20, 20, 8), patch_size=26)
        path = str(tmp_path / "t.a2pe")
        save_pe_table(path, table)
        back = load_pe_table(path, patch_size=26)
        assert back.mode == PLANE2D
        assert back.patch_size == 26
        assert torch.equal(back.data, table.data)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.a2pe"
        p.write_bytes(b"JUNK" + bytes(20))
        with pytest.raises(IOFormatError):
            load_pe_table(str(p))

    def test_truncated_payload(self, tmp_path):
        table = PETable(LINE1D, torch.randn(10, 4))
        path = str(tmp_path / "t.a2pe")
        save_pe_table(path, table)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-7])
        with pytest.raises(IOFormatError):
            load_pe_table(path)

    def test_unknown_mode_byte(self, tmp_path):
        p = tmp_path / "x.a2pe"
        p.write_bytes(b"A2PE\x07" + bytes(16))
        with pytest.raises(IOFormatError):
            load_pe_table(str(p))
