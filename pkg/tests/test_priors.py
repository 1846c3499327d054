import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapegrasp.errors import ResolutionTooLow
from shapegrasp.geometry import chamfer_bidirectional, watertight_check
from shapegrasp.geometry.bvh import build_bvh, closest_distances, inside_by_parity
from shapegrasp.priors import (
    CATEGORIES,
    FAMILIES,
    LatentShape,
    latent_mesh,
    latent_mesh_voxel,
    latent_sdf,
    sample_latent,
    sd_ellipse,
    sd_polygon,
)


def test_sample_latent_determinism_and_bounds():
    a = sample_latent("box", np.random.default_rng(11))
    b = sample_latent("box", np.random.default_rng(11))
    assert a.params == b.params
    rng = np.random.default_rng(0)
    boxes = np.array([sample_latent("box", rng).params for _ in range(1000)])
    assert np.all((boxes[:, :3] >= 20) & (boxes[:, :3] <= 80))
    bottles = np.array([sample_latent("bottle", rng).params for _ in range(1000)])
    assert np.all(bottles[:, 2] < bottles[:, 0])


def test_schema_bounds_match_documented_ranges():
    expect = {
        "apple": ([30, 0.8], [60, 1.1]),
        "bottle": ([25, 120, 8, 20, 5], [45, 220, 18, 60, 20]),
        "bowl": ([50, 40, 3], [90, 80, 8]),
        "box": ([20, 20, 20, 0], [80, 80, 80, 5]),
        "can": ([25, 80, 0], [40, 150, 3]),
        "hammer": ([200, 10, 60, 15, 15], [300, 15, 100, 25, 25]),
    }
    for cat, (lo, hi) in expect.items():
        assert np.array_equal(FAMILIES[cat].lo, lo) and np.array_equal(FAMILIES[cat].hi, hi)


def test_latent_validation_and_json():
    with pytest.raises(ValueError):
        LatentShape("box", (10.0, 30, 30, 1))
    with pytest.raises(ValueError):
        LatentShape("box", (30.0, 30, 30))
    with pytest.raises(ValueError):
        LatentShape("mug", (1.0,))
    s = LatentShape("can", (30.0, 100.0, 1.0))
    assert LatentShape.from_dict(s.to_dict()) == s


def test_latent_sdf_examples():
    assert latent_sdf(LatentShape("apple", (40.0, 1.0)), [0, 0, 0]) == pytest.approx(-40.0)
    can = LatentShape("can", (30.0, 100.0, 0.0))
    assert latent_sdf(can, [60, 0, 50]) == pytest.approx(30.0)


def _box_sdf(p, c, h):
    q = np.abs(p - c) - h
    return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)


def test_hammer_far_field_is_min_of_boxes():
    from shapegrasp.priors import hammer_parts

    ham = LatentShape("hammer", (250.0, 12.0, 80.0, 20.0, 20.0))
    parts = hammer_parts(ham.as_array())
    p = np.array([[600.0, 400.0, 300.0], [-500.0, 10.0, -200.0]])
    expect = np.minimum(*[_box_sdf(p, c, h) for c, h in parts])
    assert np.allclose(latent_sdf(ham, p), expect)


def _ellipse_brute(px, py, a, b, n=200_000):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ex, ey = a * np.cos(t), b * np.sin(t)
    d = np.hypot(px[:, None] - ex, py[:, None] - ey).min(axis=1)
    inside = (px / a) ** 2 + (py / b) ** 2 < 1
    return np.where(inside, -d, d)


def test_ellipse_distance_matches_dense_boundary():
    rng = np.random.default_rng(1)
    px, py = rng.uniform(-90, 90, 300), rng.uniform(-90, 90, 300)
    got = sd_ellipse(px, py, 50.0, 35.0)
    assert np.allclose(got, _ellipse_brute(px, py, 50.0, 35.0), atol=5e-3)


def _polygon_brute(px, py, verts):
    a, b = verts, np.roll(verts, -1, axis=0)
    p = np.stack([px, py], axis=1)[:, None, :]
    ab = b - a
    t = np.clip(np.einsum("nkj,kj->nk", p - a, ab) / np.einsum("kj,kj->k", ab, ab), 0, 1)
    d = np.linalg.norm(p - (a + t[..., None] * ab), axis=2).min(axis=1)
    # even-odd crossing count along +x
    inside = np.zeros(len(px), bool)
    for (x0, y0), (x1, y1) in zip(a, b):
        cross = ((y0 > py) != (y1 > py)) & (px < x0 + (py - y0) * (x1 - x0) / (y1 - y0 + 1e-300))
        inside ^= cross
    return np.where(inside, -d, d)


def test_polygon_distance_matches_brute_force():
    verts = np.array([[0, 0], [40, 0], [40, 10], [15, 10], [15, 60], [0, 60]], float)
    rng = np.random.default_rng(2)
    px, py = rng.uniform(-20, 70, 500), rng.uniform(-20, 80, 500)
    assert np.allclose(sd_polygon(px, py, verts), _polygon_brute(px, py, verts), atol=1e-9)


def test_latent_mesh_examples():
    apple = LatentShape("apple", (40.0, 1.0))
    m = latent_mesh(apple)
    v = latent_mesh_voxel(apple)
    assert np.all(np.abs(np.linalg.norm(m.vertices, axis=1) - 40) <= v)
    box = LatentShape("box", (40.0, 30.0, 20.0, 0.0))
    lo, hi = latent_mesh(box).bounds()
    assert np.allclose(hi - lo, [80, 60, 40], atol=2 * latent_mesh_voxel(box))
    with pytest.raises(ResolutionTooLow):
        latent_mesh(apple, 16)


@pytest.mark.parametrize("category", CATEGORIES)
def test_sampled_meshes_watertight(category):
    rng = np.random.default_rng(5)
    for _ in range(4):
        assert watertight_check(latent_mesh(sample_latent(category, rng))).valid


@pytest.mark.parametrize("category", CATEGORIES)
def test_lipschitz(category):
    rng = np.random.default_rng(6)
    shape = sample_latent(category, rng)
    lo, hi = shape.aabb()
    span = hi - lo
    p = rng.uniform(lo - 0.3 * span, hi + 0.3 * span, size=(10_000, 3))
    q = p + rng.normal(scale=0.1 * span.max(), size=p.shape)
    gap = np.abs(latent_sdf(shape, p) - latent_sdf(shape, q))
    assert np.all(gap <= np.linalg.norm(p - q, axis=1) + 1e-9)


@pytest.mark.parametrize("category", CATEGORIES)
def test_sign_matches_parity_at_96(category):
    rng = np.random.default_rng(7)
    shape = sample_latent(category, rng)
    mesh = latent_mesh(shape, 96)
    voxel = latent_mesh_voxel(shape, 96)
    lo, hi = shape.aabb()
    pts = rng.uniform(lo - 10, hi + 10, size=(4000, 3))
    d = latent_sdf(shape, pts)
    pts, d = pts[np.abs(d) > voxel][:1000], d[np.abs(d) > voxel][:1000]
    assert len(pts) == 1000
    bvh = build_bvh(mesh.vertices, mesh.triangles)
    assert np.array_equal(inside_by_parity(bvh, pts), d < 0)


def _root_samples(shape, n, rng):
    """Zero-set points found by bisection along rays cast from far outside toward the AABB."""
    lo, hi = shape.aabb()
    centre, radius = 0.5 * (lo + hi), 0.6 * np.linalg.norm(hi - lo) + 20
    u = rng.normal(size=(n, 3))
    origins = centre + radius * u / np.linalg.norm(u, axis=1, keepdims=True)
    targets = rng.uniform(lo, hi, size=(n, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = []
    for o, d in zip(origins, dirs):
        ts = np.linspace(0, 2 * radius, 4000)
        vals = latent_sdf(shape, o + ts[:, None] * d)
        idx = np.flatnonzero(vals <= 0)
        if len(idx) == 0:
            continue
        a, b = ts[idx[0] - 1], ts[idx[0]]
        for _ in range(50):
            m = 0.5 * (a + b)
            if latent_sdf(shape, o + m * d) > 0:
                a = m
            else:
                b = m
        out.append(o + 0.5 * (a + b) * d)
    return np.array(out)


@pytest.mark.parametrize("category", CATEGORIES)
def test_mesh_matches_analytic_zero_set(category):
    rng = np.random.default_rng(8)
    shape = sample_latent(category, rng)
    mesh = latent_mesh(shape)
    roots = _root_samples(shape, 1500, rng)
    assert np.allclose(latent_sdf(shape, roots), 0, atol=1e-6)
    # the root oracle only sees ray-reachable surface, so compare it against the mesh one way
    # and confirm every mesh sample sits on the analytic zero set
    bvh = build_bvh(mesh.vertices, mesh.triangles)
    roots_to_mesh = closest_distances(bvh, roots)[0].mean()
    mesh_pts = mesh.sample_surface(3000, rng)[0]
    mesh_to_zero = np.abs(latent_sdf(shape, mesh_pts)).mean()
    cd = 0.5 * (roots_to_mesh + mesh_to_zero)
    assert cd <= 2 * latent_mesh_voxel(shape)
    assert chamfer_bidirectional(roots, mesh_pts).direction_a_to_b_mm <= 2 * latent_mesh_voxel(shape)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(CATEGORIES), st.integers(0, 2**32 - 1))
def test_sampled_latents_stay_in_bounds(category, seed):
    s = sample_latent(category, np.random.default_rng(seed))
    fam = s.family
    assert np.all(s.as_array() >= fam.lo) and np.all(s.as_array() <= fam.hi)
    assert fam.constraint(s.as_array())
