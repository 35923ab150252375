"""Metric formulas against brute-force oracles, plus invariances."""

import itertools

import numpy as np
import pytest

from tars import extraction as ex
from tars import metrics as mt


def rand_cloud(rng, n):
    return rng.uniform(-1, 1, (n, 3))


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def test_chamfer_identical_zero():
    rng = np.random.default_rng(0)
    c = rand_cloud(rng, 20)
    assert mt.chamfer(c, c) == (0.0, 0.0, 0.0)


def test_chamfer_single_points():
    acc, cov, overall = mt.chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
    assert (acc, cov, overall) == (1.0, 1.0, 1.0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rand_cloud(rng, 32), rand_cloud(rng, 32)
        acc, cov, overall = mt.chamfer(a, b)
        d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        acc_b = d.min(axis=1).mean()
        cov_b = d.min(axis=0).mean()
        assert abs(acc - acc_b) < 1e-12
        assert abs(cov - cov_b) < 1e-12
        assert abs(overall - (acc_b + cov_b) / 2) < 1e-12


def test_chamfer_symmetry_swap():
    rng = np.random.default_rng(2)
    a, b = rand_cloud(rng, 17), rand_cloud(rng, 23)
    acc, cov, overall = mt.chamfer(a, b)
    acc2, cov2, overall2 = mt.chamfer(b, a)
    assert acc == cov2 and cov == acc2 and overall == overall2


# ---------------------------------------------------------------------------
# emd
# ---------------------------------------------------------------------------

def test_emd_identical_zero():
    rng = np.random.default_rng(3)
    c = rand_cloud(rng, 16)
    assert mt.emd(c, c) == 0.0


def test_emd_permutation_zero():
    rng = np.random.default_rng(4)
    c = rand_cloud(rng, 10)
    assert mt.emd(c, c[::-1]) < 1e-15


def test_emd_matches_permutation_oracle():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b = rand_cloud(rng, 8), rand_cloud(rng, 8)
        d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        best = min(d[range(8), perm].sum()
                   for perm in itertools.permutations(range(8)))
        assert abs(mt.emd(a, b) - best / 8) < 1e-12


def test_emd_requires_equal_counts():
    with pytest.raises(ValueError, match="equal cardinality"):
        mt.emd(np.zeros((3, 3)), np.zeros((4, 3)))


def test_emd_size_cap():
    big = np.zeros((600, 3))
    with pytest.raises(ValueError, match="512"):
        mt.emd(big, big)


# ---------------------------------------------------------------------------
# precision / recall / F
# ---------------------------------------------------------------------------

def test_prf_identical():
    rng = np.random.default_rng(6)
    c = rand_cloud(rng, 12)
    assert mt.precision_recall_f(c, c) == (1.0, 1.0, 1.0)


def test_prf_all_far():
    a = np.zeros((4, 3))
    b = np.full((4, 3), 10.0)
    assert mt.precision_recall_f(a, b, 0.1) == (0.0, 0.0, 0.0)


def test_prf_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a, b = rand_cloud(rng, 32), rand_cloud(rng, 32)
        p, r, f = mt.precision_recall_f(a, b, 0.4)
        d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        p_b = (d.min(axis=1) <= 0.4).mean()
        r_b = (d.min(axis=0) <= 0.4).mean()
        assert p == p_b and r == r_b
        f_b = 0.0 if p_b + r_b == 0 else 2 * p_b * r_b / (p_b + r_b)
        assert abs(f - f_b) < 1e-15


def test_prf_swap_invariance():
    rng = np.random.default_rng(8)
    a, b = rand_cloud(rng, 20), rand_cloud(rng, 25)
    p, r, f = mt.precision_recall_f(a, b, 0.3)
    p2, r2, f2 = mt.precision_recall_f(b, a, 0.3)
    assert p == r2 and r == p2 and abs(f - f2) < 1e-15


def test_prf_rejects_bad_threshold():
    with pytest.raises(ValueError):
        mt.precision_recall_f(np.zeros((2, 3)), np.zeros((2, 3)), 0.0)


# ---------------------------------------------------------------------------
# normalization and rigid invariance
# ---------------------------------------------------------------------------

def test_normalize_cube_corners_unchanged():
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1)
                        for z in (-1, 1)], dtype=float)
    np.testing.assert_allclose(mt.normalize_to_unit_cube(corners), corners,
                               atol=1e-12)


def test_normalize_scale_invariance():
    rng = np.random.default_rng(9)
    c = rand_cloud(rng, 40)
    np.testing.assert_allclose(mt.normalize_to_unit_cube(c * 5.0),
                               mt.normalize_to_unit_cube(c), atol=1e-12)


def test_normalize_long_axis_hits_one():
    rng = np.random.default_rng(10)
    c = rand_cloud(rng, 40) * np.array([3.0, 1.0, 0.5])
    out = mt.normalize_to_unit_cube(c)
    assert abs(np.abs(out).max() - 1.0) < 1e-12


def test_normalize_rejects_degenerate():
    with pytest.raises(ValueError):
        mt.normalize_to_unit_cube(np.zeros((5, 3)))


def _random_rigid(rng):
    q = rng.normal(size=(3, 3))
    u, _, vt = np.linalg.svd(q)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        rot[:, 0] *= -1
    return rot, rng.normal(size=3)


def test_metrics_rigid_motion_invariant():
    rng = np.random.default_rng(11)
    a, b = rand_cloud(rng, 24), rand_cloud(rng, 24)
    rot, t = _random_rigid(rng)
    a2, b2 = a @ rot.T + t, b @ rot.T + t
    c1 = mt.chamfer(a, b)
    c2 = mt.chamfer(a2, b2)
    np.testing.assert_allclose(c1, c2, atol=1e-9)
    assert abs(mt.emd(a, b) - mt.emd(a2, b2)) < 1e-9
    p1 = mt.precision_recall_f(a, b, 0.5)
    p2 = mt.precision_recall_f(a2, b2, 0.5)
    np.testing.assert_allclose(p1, p2, atol=1e-9)


# ---------------------------------------------------------------------------
# mesh-level evaluation and reports
# ---------------------------------------------------------------------------

def _sphere_mesh(res=32, r=0.5):
    def f(p):
        return np.linalg.norm(p, axis=-1) - r
    return ex.marching_cubes(ex.sample_grid(f, res))


def test_evaluate_meshes_self_is_exact():
    mesh = _sphere_mesh()
    report = mt.evaluate_meshes(mesh, mesh, n_points=512, emd_points=128,
                                seed=5)
    assert report.chamfer_overall == 0.0
    assert report.emd == 0.0
    assert report.precision == 1.0 and report.recall == 1.0
    assert report.fscore == 1.0


def test_write_reports_csv_layout(tmp_path):
    mesh = _sphere_mesh(24)
    rep = mt.evaluate_meshes(mesh, mesh, n_points=256, emd_points=64, seed=1)
    reports = {"inst_0001": rep, "inst_0000": rep}
    jp, cp = tmp_path / "r.json", tmp_path / "r.csv"
    mt.write_reports(reports, jp, cp, config_hash="abc123")
    lines = cp.read_text().strip().splitlines()
    assert lines[0] == ("instance,chamfer_acc,chamfer_cov,chamfer_overall,"
                        "emd,precision,recall,fscore")
    assert lines[1].startswith("inst_0000,")
    assert lines[-1].startswith("mean,")
    assert len(lines) == 4
    import json
    blob = json.loads(jp.read_text())
    assert blob["config_hash"] == "abc123"
    assert "mean" in blob
