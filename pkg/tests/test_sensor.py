import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapegrasp.errors import AmbiguousTie, NoMatch, ObjectNotVisible
from shapegrasp.geometry import RigidTransform, box_mesh, icosphere
from shapegrasp.geometry.bvh import build_bvh, first_hits
from shapegrasp.priors import LatentShape
from shapegrasp.sensor import (
    CameraModel,
    DepthImage,
    Scene,
    SceneObject,
    apply_depth_noise,
    corrupt_mask,
    default_camera,
    extract_object_cloud,
    prompt_category,
    read_depth_pgm,
    read_scene,
    render_depth,
    resolve_prompt,
    write_depth_pgm,
    write_scene,
)

TOP_DOWN = RigidTransform(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, 700.0]))


def small_camera(pose=None, scale=4):
    """The default camera at a quarter of the resolution."""
    w, h = 640 // scale, 480 // scale
    return CameraModel(600.0 / scale, 600.0 / scale, (w - 1) / 2, (h - 1) / 2, w, h,
                       default_camera().pose if pose is None else pose)


def mesh_obj(i, mesh, xyz, category="box", yaw=0.0):
    return SceneObject(i, category, mesh, RigidTransform.from_planar(*xyz, yaw))


def latent_obj(i, category, params, x, y, yaw=0.0):
    shape = LatentShape(category, params)
    return SceneObject(i, category, shape, RigidTransform.from_planar(x, y, -shape.bottom_z(), yaw))


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 1, 1, 4, 4, TOP_DOWN)
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 4, 1, 4, 4, TOP_DOWN)
    cam = default_camera()
    assert CameraModel.from_dict(cam.to_dict()).to_dict() == cam.to_dict()
    assert np.allclose(cam.center, [-600, 0, 600])


def test_depth_image_invariants():
    with pytest.raises(ValueError):
        DepthImage(np.array([[-1.0]]), np.array([[0]]))
    with pytest.raises(ValueError):
        DepthImage(np.array([[0.0]]), np.array([[3]]))


def test_fronto_parallel_face_range():
    # box top face at z = 200 seen straight down from z = 700
    scene = Scene((mesh_obj(1, box_mesh((100, 100, 100)), (0, 0, 100)),))
    cam = CameraModel(300.0, 300.0, 80.0, 60.0, 161, 121, TOP_DOWN)
    img = render_depth(scene, cam)
    assert img.depth[60, 80] == pytest.approx(500.0, abs=1e-3)
    assert img.instance[60, 80] == 1
    rays = cam.pixel_rays()
    face = img.instance == 1
    assert np.allclose(img.depth[face] * rays[face][:, 2], 500.0, atol=1e-3)


def test_total_occlusion():
    cam = default_camera()
    toward = -cam.center[:2] / np.linalg.norm(cam.center[:2])
    sphere = mesh_obj(2, icosphere(30, 3), (*(150 * toward), 30), "apple")
    wall = mesh_obj(1, box_mesh((40, 200, 200)), (*(-50 * toward), 200))
    img = render_depth(Scene((wall, sphere)), small_camera())
    assert img.pixel_count(2) == 0
    assert img.pixel_count(1) > 0


def _ray_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1, t2 = (lo - o) / d, (hi - o) / d
    tn = np.nanmax(np.minimum(t1, t2), axis=1)
    tf = np.nanmin(np.maximum(t1, t2), axis=1)
    return np.where((tn <= tf) & (tf > 0), np.maximum(tn, 0), np.inf)


def test_two_boxes_against_brute_force_raycast():
    a = mesh_obj(1, box_mesh((40, 40, 40)), (0, -60, 40))
    b = mesh_obj(2, box_mesh((30, 30, 60)), (0, 60, 60))
    cam = small_camera(scale=2)
    img = render_depth(Scene((a, b)), cam)
    rays = cam.pose.apply_vectors(cam.pixel_rays().reshape(-1, 3))
    o = np.broadcast_to(cam.center, rays.shape)
    ta = _ray_box(o, rays, np.array([-40, -100, 0]), np.array([40, -20, 80]))
    tb = _ray_box(o, rays, np.array([-30, 30, 0]), np.array([30, 90, 120]))
    tp = np.where(rays[:, 2] < 0, -cam.center[2] / rays[:, 2], np.inf)
    t = np.stack([tp, ta, tb], axis=1)
    truth = np.argmin(t, axis=1)
    srt = np.sort(t, axis=1)
    clear = (srt[:, 1] - srt[:, 0]) > 1e-3     # ignore grazing silhouette pixels
    got = img.instance.ravel()
    assert np.array_equal(got[clear], truth[clear])
    assert np.allclose(img.depth.ravel()[clear], np.where(np.isfinite(srt[:, 0]), srt[:, 0], 0)[clear], atol=1e-6)


def test_equal_range_tie_goes_to_lowest_id():
    # two coincident boxes: every hit must carry the smaller id
    m = box_mesh((30, 30, 30))
    scene = Scene((mesh_obj(5, m, (0, 0, 30)), mesh_obj(3, m, (0, 0, 30))))
    img = render_depth(scene, small_camera())
    assert img.pixel_count(5) == 0 and img.pixel_count(3) > 0


@pytest.fixture(scope="module")
def clutter_scene():
    objs = (
        latent_obj(1, "box", (40.0, 30.0, 25.0, 2.0), 0, 0, 0.4),
        latent_obj(2, "can", (30.0, 110.0, 1.0), -110, 30),
        latent_obj(3, "bowl", (60.0, 50.0, 5.0), 40, 140),
        latent_obj(4, "apple", (35.0, 1.0), 110, -90),
    )
    return Scene(objs)


def test_render_deterministic(clutter_scene):
    a = render_depth(clutter_scene, small_camera())
    b = render_depth(clutter_scene, small_camera())
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.instance, b.instance)


def test_union_of_object_clouds_is_all_labelled_pixels(clutter_scene):
    cam = small_camera()
    img = render_depth(clutter_scene, cam)
    union = np.vstack([extract_object_cloud(img, cam, i).points for i in img.visible_counts()])
    allpix = (cam.pixel_rays() * img.depth[..., None])[img.instance > 0]
    key = lambda p: set(map(tuple, np.round(p, 9)))
    assert key(union) == key(allpix)


def test_line_of_sight(clutter_scene):
    cam = small_camera()
    img = render_depth(clutter_scene, cam)
    rng = np.random.default_rng(0)
    for obj in clutter_scene.objects:
        others = [o.world_mesh for o in clutter_scene.objects if o.id != obj.id]
        verts = np.vstack([m.vertices for m in others])
        offs = np.cumsum([0] + [m.n_vertices for m in others[:-1]])
        tris = np.vstack([m.triangles + k for m, k in zip(others, offs)])
        bvh = build_bvh(verts, tris)
        pix = np.argwhere(img.instance == obj.id)
        if len(pix) == 0:
            continue
        pick = pix[rng.choice(len(pix), min(200, len(pix)), replace=False)]
        r = cam.pose.apply_vectors(cam.pixel_rays()[pick[:, 0], pick[:, 1]])
        rng_mm = img.depth[pick[:, 0], pick[:, 1]]
        t, _ = first_hits(bvh, np.broadcast_to(cam.center, r.shape), r, 1e-9, np.inf)
        assert np.all(t >= rng_mm - 1e-6)


@settings(max_examples=15, deadline=None)
@given(st.floats(-150, 150), st.floats(-150, 150), st.floats(20, 60))
def test_adding_an_object_never_reveals_others(clutter_scene, x, y, half):
    cam = small_camera(scale=8)
    before = render_depth(clutter_scene, cam).visible_counts()
    extra = mesh_obj(9, box_mesh((half, half, half)), (x, y, half))
    after = render_depth(Scene(clutter_scene.objects + (extra,)), cam).visible_counts()
    assert all(after.get(i, 0) <= n for i, n in before.items())


# --- noise ----------------------------------------------------------------------------


def _flat_image(n=120, depth=500.0):
    return DepthImage(np.full((n, n), depth), np.ones((n, n), dtype=np.int64))


def test_noise_identity_and_determinism():
    img = _flat_image(10)
    assert apply_depth_noise(img, 0.0, 0.0, np.random.default_rng(0)) is img
    a = apply_depth_noise(img, 2.0, 0.1, np.random.default_rng(3))
    b = apply_depth_noise(img, 2.0, 0.1, np.random.default_rng(3))
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.instance, b.instance)


def test_noise_statistics():
    img = _flat_image(120)      # 14400 hit pixels
    noisy = apply_depth_noise(img, 2.0, 0.0, np.random.default_rng(1))
    assert 1.8 <= noisy.depth.std() <= 2.2
    eps = 0.02
    n = img.depth.size
    dropped = apply_depth_noise(img, 0.0, 1 - eps, np.random.default_rng(2))
    surviving = int((dropped.depth > 0).sum())
    sd = np.sqrt(n * eps * (1 - eps))
    assert abs(surviving - eps * n) <= 4 * sd
    assert np.all(dropped.instance[dropped.depth == 0] == 0)


def test_corrupt_mask():
    inst = np.zeros((20, 20), dtype=np.int64)
    inst[5:15, 5:15] = 1
    img = DepthImage(np.full((20, 20), 300.0), inst)
    assert corrupt_mask(img, 1, 1).pixel_count(1) == 12 * 12 - 4
    assert corrupt_mask(img, 1, -1).pixel_count(1) == 8 * 8


# --- extraction -----------------------------------------------------------------------


def test_extract_fronto_parallel_plane():
    cam = CameraModel(100.0, 100.0, 39.5, 29.5, 80, 60, TOP_DOWN)
    img = render_depth(Scene(()), cam)
    # relabel the plane so it can be extracted as an object
    img = DepthImage(img.depth, np.where(img.depth > 0, 7, 0))
    cloud = extract_object_cloud(img, cam, 7)
    assert len(cloud.points) == img.pixel_count(7)
    z = np.array([0.0, 0.0, -1.0])      # plane normal in the camera frame faces the camera
    ang = np.degrees(np.arccos(np.clip(cloud.normals @ z, -1, 1)))
    assert ang.max() <= 5.0


def test_extract_geometry_contracts(clutter_scene):
    cam = small_camera()
    img = render_depth(clutter_scene, cam)
    cloud = extract_object_cloud(img, cam, 1)
    pix = np.argwhere(img.instance == 1)
    assert len(cloud.points) == len(pix)
    uv = cam.project(cloud.points)
    assert np.all(np.abs(uv[:, 0] - pix[:, 1]) <= 0.5) and np.all(np.abs(uv[:, 1] - pix[:, 0]) <= 0.5)
    rays = cam.pixel_rays()[pix[:, 0], pix[:, 1]]
    unit = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
    assert np.all(np.linalg.norm(unit - rays, axis=1) <= 1e-6)
    assert np.all(np.einsum("ij,ij->i", cloud.normals, cloud.points) <= 0)
    with pytest.raises(ObjectNotVisible):
        extract_object_cloud(img, cam, 42)


# --- prompts --------------------------------------------------------------------------


def test_prompt_examples(clutter_scene):
    assert resolve_prompt("red bowl", clutter_scene) == (3, "bowl")
    assert resolve_prompt("pringles can", clutter_scene) == (2, "can")
    assert resolve_prompt("the Wooden Block", clutter_scene) == (1, "box")
    with pytest.raises(NoMatch):
        resolve_prompt("stapler", clutter_scene)
    with pytest.raises(NoMatch):
        resolve_prompt("hammer", clutter_scene)
    assert prompt_category("green mug", {"mug": "bowl"}) == "bowl"


def test_prompt_picks_most_visible_and_reports_ties():
    near = latent_obj(1, "can", (30.0, 100.0, 0.0), -100, 0)
    far = latent_obj(2, "can", (30.0, 100.0, 0.0), 150, 0)
    assert resolve_prompt("can", Scene((near, far)))[0] == 1
    # mirror images about the camera's vertical plane
    left = latent_obj(1, "can", (30.0, 100.0, 0.0), 0, 120)
    right = latent_obj(2, "can", (30.0, 100.0, 0.0), 0, -120)
    scene = Scene((left, right))
    img = render_depth(scene)
    if img.pixel_count(1) == img.pixel_count(2):
        with pytest.raises(AmbiguousTie):
            resolve_prompt("can", scene, img)
    fake = DepthImage(np.ones((2, 2)), np.array([[1, 1], [2, 2]]))
    with pytest.raises(AmbiguousTie):
        resolve_prompt("can", scene, fake)


# --- files ----------------------------------------------------------------------------


def test_pgm_round_trip(tmp_path, clutter_scene):
    img = render_depth(clutter_scene, small_camera())
    write_depth_pgm(tmp_path / "d.pgm", tmp_path / "i.pgm", img)
    back = read_depth_pgm(tmp_path / "d.pgm", tmp_path / "i.pgm")
    assert np.all(np.abs(back.depth - img.depth) <= 0.05 + 1e-9)
    assert np.array_equal(back.instance, img.instance)
    assert (tmp_path / "d.pgm").read_bytes().startswith(b"P5\n160 120\n65535\n")


def test_scene_json_round_trip(tmp_path, clutter_scene):
    mesh_scene = Scene(clutter_scene.objects + (mesh_obj(5, box_mesh((20, 20, 20)), (-150, -150, 20)),),
                       aliases=(("block", "box"),))
    write_scene(tmp_path / "s.json", mesh_scene)
    back = read_scene(tmp_path / "s.json")
    assert [o.id for o in back.objects] == [o.id for o in mesh_scene.objects]
    a = render_depth(mesh_scene, small_camera(scale=8))
    b = render_depth(back, small_camera(scale=8))
    assert np.allclose(a.depth, b.depth, atol=1e-6) and np.array_equal(a.instance, b.instance)
    write_scene(tmp_path / "t.json", back)
    assert (tmp_path / "s.json").read_text() == (tmp_path / "t.json").read_text()


def test_scene_validation(clutter_scene):
    assert clutter_scene.validation_errors() == []
    sunk = SceneObject(7, "box", box_mesh((20, 20, 20)), RigidTransform.from_planar(200, 200, 10, 0))
    overlap = SceneObject(8, "box", box_mesh((20, 20, 20)), RigidTransform.from_planar(0, 0, 20, 0))
    errs = Scene(clutter_scene.objects + (sunk, overlap)).validation_errors()
    assert any("sinks" in e for e in errs) and any("interpenetrate" in e for e in errs)
    with pytest.raises(ValueError):
        Scene((overlap, overlap))


def test_shipped_scene_schema_matches_code():
    import json
    from pathlib import Path

    from shapegrasp.priors import CATEGORIES, family

    schema = json.loads((Path(__file__).parents[1] / "docs" / "scene_schema.json").read_text())
    for cat in CATEGORIES:
        fam = family(cat)
        entry = schema["x-latent-families"][cat]
        assert entry["param_order"] == list(fam.param_names)
        assert entry["lo_mm"] == [float(x) for x in fam.lo] and entry["hi_mm"] == [float(x) for x in fam.hi]
    d = Scene((SceneObject(1, "can", LatentShape("can", (30.0, 100.0, 1.0)), RigidTransform.identity()),)).to_dict()
    assert set(d) <= set(schema["properties"])
    assert set(d["objects"][0]) <= set(schema["properties"]["objects"]["items"]["properties"])
    assert set(d["camera"]) == set(schema["properties"]["camera"]["required"])
