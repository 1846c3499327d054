import json

import numpy as np
import pytest

from shapegrasp.errors import ConfigError, ObjectNotVisibleAlone
from shapegrasp.geometry import RigidTransform, box_mesh
from shapegrasp.harness import (
    CLUTTER_LEVELS,
    MODES,
    CellStats,
    ExperimentConfig,
    SceneSpec,
    TrialConfig,
    TrialRecord,
    aggregate,
    generate_scene,
    occlusion_fraction,
    partial_surface_mesh,
    reconstruction_report,
    report_csv,
    run_experiment,
    run_trial,
    trial_seeds,
    write_run,
)
from shapegrasp.priors import CATEGORIES, LatentShape
from shapegrasp.sensor import CameraModel, Scene, SceneObject, default_camera, render_depth

TOP_DOWN = RigidTransform(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, 700.0]))
QUIET = TrialConfig(depth_noise_sigma=0.0)


def top_camera() -> CameraModel:
    return CameraModel(600.0, 600.0, 319.5, 239.5, 640, 480, TOP_DOWN)


def block(obj_id, category, half, centre) -> SceneObject:
    return SceneObject(obj_id, category, box_mesh(half, centre, "world"), RigidTransform.identity())


# --- scenes ----------------------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec("medium", ("apple",), 0)
    with pytest.raises(ConfigError):
        SceneSpec("easy", (), 0)
    with pytest.raises(ConfigError):
        SceneSpec("easy", ("apple",) * 13, 0)
    with pytest.raises(ConfigError):
        SceneSpec("easy", ("mug",), 0)


def test_single_apple_rests_on_table():
    scene = generate_scene(SceneSpec("easy", ("apple",), 3))
    assert len(scene.objects) == 1
    assert scene.objects[0].world_mesh.vertices[:, 2].min() == pytest.approx(0.0, abs=1.0)
    assert not scene.validation_errors()


def test_hard_scene_has_occluded_object():
    spec = SceneSpec("hard", ("bottle", "can", "box", "bowl", "apple", "hammer"), 11)
    scene = generate_scene(spec)
    assert len(scene.objects) == 6
    assert not scene.validation_errors()
    fractions = [occlusion_fraction(scene, o.id) for o in scene.objects]
    assert max(fractions) >= 0.3


def test_scene_generation_deterministic():
    spec = SceneSpec("normal", ("can", "box", "apple"), 5)
    a = json.dumps(generate_scene(spec).to_dict(), sort_keys=True)
    b = json.dumps(generate_scene(spec).to_dict(), sort_keys=True)
    assert a == b


def test_clearance_respected():
    from shapegrasp.harness import CLUTTER, _surface_gap

    for level in CLUTTER_LEVELS:
        scene = generate_scene(SceneSpec(level, ("can", "box", "apple"), 21))
        objs = scene.objects
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                assert _surface_gap(objs[i], objs[j]) >= CLUTTER[level].clearance_mm


# --- occlusion -------------------------------------------------------------------------


def test_occlusion_isolated_and_hidden():
    target = block(1, "box", (30.0, 30.0, 10.0), (0.0, 0.0, 10.0))
    scene = Scene((target,), camera=top_camera())
    assert occlusion_fraction(scene, 1) == 0.0
    lid = block(2, "can", (60.0, 60.0, 30.0), (0.0, 0.0, 30.0))
    assert occlusion_fraction(Scene((target, lid), camera=top_camera()), 1) == 1.0


def test_half_blocked_box():
    target = block(1, "box", (30.0, 30.0, 10.0), (0.0, 0.0, 10.0))
    # a taller block over the x > 0 half: seen from straight above, rays to x > 0 hit it first
    cover = block(2, "can", (20.0, 40.0, 30.0), (20.0, 0.0, 30.0))
    frac = occlusion_fraction(Scene((target, cover), camera=top_camera()), 1)
    assert frac == pytest.approx(0.5, abs=0.05)


def test_out_of_view_target():
    far = block(1, "box", (10.0, 10.0, 10.0), (5000.0, 0.0, 10.0))
    with pytest.raises(ObjectNotVisibleAlone):
        occlusion_fraction(Scene((far,), camera=top_camera()), 1)


@pytest.mark.slow
def test_occlusion_ordering_across_levels():
    seeds = trial_seeds(99, ("apple", "bottle", "bowl", "box", "can", "hammer"), 5)
    means = []
    for level in CLUTTER_LEVELS:
        fracs = []
        for (cat, t), seed in sorted(seeds.items()):
            rng = np.random.default_rng(seed)
            others = tuple(c for c in CATEGORIES if c != cat)[:3]
            scene = generate_scene(SceneSpec(level, (cat,) + others, seed), rng)
            fracs.append(occlusion_fraction(scene, 1))
        assert len(fracs) >= 30
        means.append(float(np.mean(fracs)))
    assert means[0] <= means[1] <= means[2]


# --- trials ----------------------------------------------------------------------------


def cube_scene() -> Scene:
    cube = LatentShape("box", (30.0, 30.0, 30.0, 0.0))
    return Scene((SceneObject(1, "box", cube, RigidTransform.from_planar(0.0, 0.0, 30.0, 0.4)),))


def test_oracle_on_isolated_cube_succeeds():
    rec = run_trial(cube_scene(), "the box", "oracle_gt", QUIET, np.random.default_rng(0))
    assert rec.outcome == "success", rec.reason
    assert 1 <= rec.attempts <= QUIET.top_k
    assert rec.chamfer_mm is None and rec.occlusion_fraction == 0.0


def test_completion_on_isolated_cube():
    rec = run_trial(cube_scene(), "box", "completion", QUIET, np.random.default_rng(0))
    assert rec.chamfer_mm is not None and rec.chamfer_mm <= 8.0
    assert rec.reconstruction_valid
    assert rec.outcome == "success", rec.reason


def test_hidden_target_records_failure():
    target = block(1, "box", (15.0, 15.0, 10.0), (100.0, 0.0, 10.0))
    wall = block(2, "can", (20.0, 80.0, 80.0), (-50.0, 0.0, 80.0))
    scene = Scene((target, wall))
    assert render_depth(scene).pixel_count(1) == 0
    for mode in ("completion", "no_completion"):
        rec = run_trial(scene, "box", mode, QUIET, np.random.default_rng(0))
        assert rec.outcome == "failure" and rec.reason == "ObjectNotVisible"
        assert rec.occlusion_fraction == 1.0


def test_unknown_prompt_records_failure():
    rec = run_trial(cube_scene(), "stapler", "oracle_gt", QUIET, np.random.default_rng(0))
    assert rec.outcome == "failure" and rec.reason == "NoMatch"


def test_trial_determinism():
    scene = cube_scene()
    a = run_trial(scene, "box", "no_completion", TrialConfig(), np.random.default_rng(4), scene_seed=9)
    b = run_trial(scene, "box", "no_completion", TrialConfig(), np.random.default_rng(4), scene_seed=9)
    assert a == b


def test_partial_surface_mesh_faces_camera():
    cam = top_camera()
    slab = block(1, "box", (40.0, 40.0, 10.0), (0.0, 0.0, 10.0))
    step = block(2, "can", (20.0, 20.0, 40.0), (100.0, 0.0, 40.0))
    image = render_depth(Scene((slab, step), camera=cam), cam)
    mesh = partial_surface_mesh(image, cam, 1)
    assert len(mesh.triangles) > 0
    # every triangle of the visible top lies on z = 20 and faces up toward the camera
    assert np.allclose(mesh.vertices[:, 2], 20.0, atol=1e-6)
    assert np.all(mesh.face_normals()[:, 2] > 0.99)
    # the 60 mm top of the second block never joins the first
    assert mesh.vertices[:, 0].max() < 41.0


# --- experiments and reports -----------------------------------------------------------


def test_trial_seeds_unique_and_stable():
    a = trial_seeds(0, CATEGORIES, 10)
    assert len(set(a.values())) == 60
    assert a == trial_seeds(0, CATEGORIES, 10)
    assert all(0 <= v < 2**63 for v in a.values())


def fake_records(categories, trials, modes, rng):
    recs = []
    for cat in categories:
        for t in range(trials):
            for m in modes:
                ok = bool(rng.random() < 0.6)
                recs.append(TrialRecord(t, cat, "normal", t, m, 1, 0.2, None, None, None, 1,
                                        "success" if ok else "failure", None if ok else "NoContact"))
    return recs


def test_counting_and_percentages():
    recs = fake_records(CATEGORIES, 10, ("completion", "no_completion"), np.random.default_rng(0))
    assert len(recs) == 120
    cells, avg = aggregate(recs, CATEGORIES, ("completion", "no_completion"))
    assert len(cells) == 12
    for c in cells:
        assert c.successes + c.failures == 10
        assert c.success_pct == 100.0 * c.successes / 10
    for m in ("completion", "no_completion"):
        assert avg[m] == pytest.approx(np.mean([c.success_pct for c in cells if c.mode == m]))
    assert CellStats("bowl", "completion", 9, 1, 0).success_pct == 90.0


def test_invalid_cells_excluded_from_average():
    cells, avg = aggregate(
        [TrialRecord(0, "can", "hard", 0, "completion", None, None, None, None, None, 0, "invalid", "PlacementFailed"),
         TrialRecord(1, "box", "hard", 0, "completion", 1, 0.4, 3.0, True, None, 1, "success")],
        ("can", "box"), ("completion",))
    assert [c.valid for c in cells] == [False, True]
    assert cells[0].invalid == 1
    assert avg["completion"] == 100.0


@pytest.fixture(scope="module")
def small_run():
    config = ExperimentConfig(categories=("can", "box"), trials=2, clutter=("easy",),
                              modes=("no_completion", "oracle_gt"), seed=3)
    return config, run_experiment(config)


def test_experiment_pairing_and_aggregation(small_run):
    config, report = small_run
    assert len(report.records) == 2 * 2 * 2
    by_cell = {}
    for r in report.records:
        by_cell.setdefault((r.category, r.trial), set()).add(r.scene_seed)
        assert r.attempts <= config.trial.top_k
        assert (r.chamfer_mm is None) or r.mode == "completion"
    assert all(len(s) == 1 for s in by_cell.values())
    cells, avg = aggregate(report.records, config.categories, config.modes)
    assert cells == report.cells and avg == report.mode_average_pct


def test_report_files_deterministic(small_run, tmp_path):
    config, report = small_run
    again = run_experiment(config)
    a = write_run(tmp_path / "a", report)
    b = write_run(tmp_path / "b", again)
    for name in ("config.json", "records.jsonl", "report.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = report_csv(report).splitlines()
    assert rows[0].startswith("kind,category,mode")
    assert sum(r.startswith("grasp,") for r in rows) == 4


def test_experiment_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(modes=("magic",))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"trails": 3})
    cfg = ExperimentConfig(categories=("can",), modes=MODES)
    assert ExperimentConfig.from_dict({k: v for k, v in cfg.to_dict().items()}).to_dict() == cfg.to_dict()


def test_reconstruction_single_trial_matches_record():
    rep = reconstruction_report(("can",), ("easy",), 1, 4, QUIET)
    (cell,) = rep["cells"]
    (rec,) = rep["records"]
    assert cell["trials"] == 1
    assert cell["mean_chamfer_mm"] == rec["chamfer_mm"]
    assert cell["success_pct"] == (100.0 if rec["valid_mesh"] else 0.0)


@pytest.mark.slow
def test_easy_box_reconstruction():
    rep = reconstruction_report(("box",), ("easy",), 10, 0, QUIET)
    (cell,) = rep["cells"]
    assert cell["mean_chamfer_mm"] <= 8.0
    assert cell["success_pct"] == 100.0
