"""Scene tests: geometry predicates against hand-computed points, seeding
invariants, the PLY round trip with its parser diagnostics, and the run
configuration (strict keys, round trip, build products)."""

import json

import numpy as np
import pytest

import morphmpm as mm
from morphmpm.scene import (Box, Extrusion, FrameRecord, PointCloud, SceneConfig,
                            Sphere, Union, _usable_band, fit_geometry,
                            geometry_from_dict, geometry_to_dict, load_point_cloud,
                            particles_from_cloud, recenter, seed_particles,
                            write_frame)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def test_sphere_bounds_and_contains():
    s = Sphere((5.0, 5.0), 2.0)
    lo, hi = s.bounds()
    np.testing.assert_array_equal(lo, [3.0, 3.0])
    np.testing.assert_array_equal(hi, [7.0, 7.0])
    pts = np.array([[5.0, 5.0], [7.0, 5.0], [7.01, 5.0], [6.5, 6.5]])
    np.testing.assert_array_equal(s.contains(pts), [True, True, False, False])


def test_box_size_is_full_extent():
    b = Box((5.0, 5.0), (4.0, 2.0))
    lo, hi = b.bounds()
    np.testing.assert_array_equal(lo, [3.0, 4.0])
    np.testing.assert_array_equal(hi, [7.0, 6.0])
    pts = np.array([[3.0, 4.0], [7.0, 6.0], [5.0, 6.01], [2.99, 5.0]])
    np.testing.assert_array_equal(b.contains(pts), [True, True, False, False])


def test_extrusion_pattern_orientation():
    # row 0 is the TOP of the stencil; column 0 is low x
    e = Extrusion(("X.", ".X"), (5.0, 5.0), (2.0, 2.0))
    pts = np.array([[4.5, 5.5],   # top-left     -> 'X'
                    [5.5, 5.5],   # top-right    -> '.'
                    [5.5, 4.5],   # bottom-right -> 'X'
                    [4.5, 4.5]])  # bottom-left  -> '.'
    np.testing.assert_array_equal(e.contains(pts), [True, False, True, False])


def test_extrusion_extends_through_z():
    e = Extrusion(("X",), (5.0, 5.0, 5.0), (2.0, 2.0, 4.0))
    pts = np.array([[5.0, 5.0, 3.5], [5.0, 5.0, 6.5], [5.0, 5.0, 7.5]])
    np.testing.assert_array_equal(e.contains(pts), [True, True, False])


def test_union_and_scaled():
    u = Union((Sphere((2.0, 2.0), 1.0), Sphere((8.0, 8.0), 1.0)))
    lo, hi = u.bounds()
    np.testing.assert_array_equal(lo, [1.0, 1.0])
    np.testing.assert_array_equal(hi, [9.0, 9.0])
    pts = np.array([[2.0, 2.0], [8.0, 8.0], [5.0, 5.0]])
    np.testing.assert_array_equal(u.contains(pts), [True, True, False])
    s = Sphere((4.0, 6.0), 1.5).scaled(2.0, np.array([4.0, 6.0]), np.array([7.0, 7.0]))
    assert s.radius == 3.0
    np.testing.assert_array_equal(s.center, [7.0, 7.0])


@pytest.mark.parametrize("spec", [
    {"type": "sphere", "center": [5.0, 5.0, 5.0], "radius": 2.0},
    {"type": "box", "center": [5.0, 5.0], "size": [3.0, 2.0]},
    {"type": "extrusion", "pattern": ["X.", ".X"], "center": [5.0, 5.0],
     "size": [2.0, 2.0]},
    {"type": "union", "parts": [
        {"type": "sphere", "center": [2.0, 2.0], "radius": 1.0},
        {"type": "box", "center": [8.0, 8.0], "size": [1.0, 1.0]}]},
    {"type": "point_cloud", "path": "cloud.ply", "center": True},
])
def test_geometry_dict_round_trip(spec):
    geom = geometry_from_dict(spec)
    again = geometry_from_dict(geometry_to_dict(geom))
    assert again == geom


def test_geometry_from_dict_rejects_garbage():
    with pytest.raises(mm.ConfigError):
        geometry_from_dict(["sphere"])
    with pytest.raises(mm.ConfigError):
        geometry_from_dict({"type": "torus", "center": [0, 0]})
    with pytest.raises(mm.ConfigError):
        geometry_from_dict({"type": "sphere", "center": [0, 0], "radius": 1,
                            "colour": "red"})
    with pytest.raises(mm.ConfigError):
        geometry_from_dict({"type": "sphere", "center": [0, 0]})


def test_fit_geometry_targets_usable_band():
    params = mm.SimParams(dim=2, grid_res=16, f_ext=(0.0, 0.0))
    lo, hi = _usable_band(params)
    assert (lo, hi) == (3.0, 12.0)
    fitted = fit_geometry(Sphere((100.0, 100.0), 5.0), params, fraction=0.7)
    flo, fhi = fitted.bounds()
    np.testing.assert_allclose(0.5 * (flo + fhi), 7.5)
    np.testing.assert_allclose(np.max(fhi - flo), 0.7 * 9.0)
    with pytest.raises(mm.EmptyGeometry):
        fit_geometry(Sphere((5.0, 5.0), 0.0), params)


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("dim", [2, 3])
def test_seed_particles_density_and_determinism(dim):
    params = mm.SimParams(dim=dim, grid_res=16, f_ext=(0.0,) * dim)
    geom = Sphere((7.5,) * dim, 3.0)
    ps = seed_particles(geom, params, seed=5)
    again = seed_particles(geom, params, seed=5)
    np.testing.assert_array_equal(ps.x, again.x)
    other = seed_particles(geom, params, seed=6)
    assert ps.n != other.n or np.abs(ps.x - other.x).max() > 0
    assert geom.contains(ps.x).all()
    sub = 2 if dim == 3 else 3
    assert ps.m.sum() == pytest.approx(params.rho * ps.n * (params.dx / sub) ** dim,
                                       rel=1e-12)
    assert ps.V0.sum() == pytest.approx(ps.n * (params.dx / sub) ** dim, rel=1e-12)
    assert np.all(ps.m == ps.m[0])  # uniform per-particle mass
    # roughly 8-9 samples per covered cell means n tracks the volume
    vol = (4.0 / 3.0 * np.pi if dim == 3 else np.pi) * 3.0 ** dim
    assert ps.n == pytest.approx(vol / (params.dx / sub) ** dim, rel=0.1)


def test_seed_particles_mass_scale():
    params = mm.SimParams(dim=2, grid_res=16, f_ext=(0.0, 0.0))
    a = seed_particles(Sphere((7.5, 7.5), 2.0), params, seed=1)
    b = seed_particles(Sphere((7.5, 7.5), 2.0), params, seed=1, mass_scale=2.5)
    np.testing.assert_allclose(b.m, 2.5 * a.m)
    np.testing.assert_array_equal(b.V0, a.V0)


def test_seed_particles_empty_cases():
    params = mm.SimParams(dim=2, grid_res=16, f_ext=(0.0, 0.0))
    with pytest.raises(mm.EmptyGeometry):
        seed_particles(Sphere((-50.0, -50.0), 1.0), params, seed=0)
    with pytest.raises(mm.EmptyGeometry):
        seed_particles(Sphere((7.123, 7.456), 1e-9), params, seed=0)


def test_particles_from_cloud():
    params = mm.SimParams(dim=2, grid_res=16, f_ext=(0.0, 0.0))
    rng = np.random.default_rng(3)
    pts = 7.0 + rng.random((40, 2))
    ps = particles_from_cloud(pts, None, params)
    np.testing.assert_array_equal(ps.x, pts)
    assert np.all(ps.m == ps.m[0]) and np.all(ps.m > 0)
    given = 0.5 + rng.random(40)
    ps2 = particles_from_cloud(pts, given, params, mass_scale=3.0)
    np.testing.assert_allclose(ps2.m, 3.0 * given)
    with pytest.raises(mm.EmptyGeometry):
        particles_from_cloud(np.zeros((0, 2)), None, params)


# ---------------------------------------------------------------------------
# PLY files
# ---------------------------------------------------------------------------

def test_frame_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    pos = 5.0 + rng.random((7, 3))
    ch = rng.random(7)
    path = write_frame(FrameRecord(3, pos, ch), str(tmp_path))
    assert path.endswith("frame_000003.ply")
    head = open(path).read().splitlines()
    assert head[:2] == ["ply", "format ascii 1.0"]
    assert head[2] == "element vertex 7"
    assert head[3:8] == ["property float x", "property float y",
                         "property float z", "property float loss"][:5] + ["end_header"]
    loaded, masses = load_point_cloud(path)
    np.testing.assert_allclose(loaded, pos, atol=1e-7)
    assert masses is None  # the extra channel is "loss", not "mass"


def test_frame_2d_gets_zero_z(tmp_path):
    pos = np.array([[5.0, 6.0], [6.0, 7.0]])
    path = write_frame(FrameRecord(0, pos, np.zeros(2)), str(tmp_path))
    loaded, _ = load_point_cloud(path)
    np.testing.assert_allclose(loaded[:, :2], pos, atol=1e-7)
    np.testing.assert_array_equal(loaded[:, 2], 0.0)


def test_empty_frame_round_trip(tmp_path):
    path = write_frame(FrameRecord(1, np.zeros((0, 3)), np.zeros(0)), str(tmp_path))
    loaded, masses = load_point_cloud(path)
    assert loaded.shape == (0, 3) and masses is None


def test_write_frame_io_error(tmp_path):
    with pytest.raises(mm.IoError):
        write_frame(FrameRecord(0, np.zeros((1, 3)), np.zeros(1)),
                    str(tmp_path / "missing" / "nested"))


def test_load_cloud_with_masses(tmp_path):
    p = tmp_path / "c.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment hand made\n"
                 "element vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nproperty float mass\nend_header\n"
                 "1 2 3 0.5\n4 5 6 1.5\n")
    pos, masses = load_point_cloud(str(p))
    np.testing.assert_array_equal(pos, [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(masses, [0.5, 1.5])


@pytest.mark.parametrize("text,line", [
    ("plop\nformat ascii 1.0\n", 1),                       # bad magic
    ("ply\nformat binary_little_endian 1.0\n", 2),         # unsupported format
    ("ply\nformat ascii 1.0\nelement vertex n\n", 3),      # bad count
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty x\nend_header\n0\n", 4),
    ("ply\nformat ascii 1.0\nwat 3\n", 3),                 # unexpected header
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
     "property float y\nproperty float z\nend_header\n1 2 3\n1 2 3\n"[:-9], 8),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
     "property float y\nproperty float z\nend_header\n1 2\n", 8),   # short row
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
     "property float y\nproperty float z\nend_header\n1 2 zz\n", 8),
])
def test_load_cloud_parse_errors(tmp_path, text, line):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    with pytest.raises(mm.ParseError) as ei:
        load_point_cloud(str(p))
    assert ei.value.line == line
    assert f":{line}:" in str(ei.value) or str(ei.value).endswith(str(line))


def test_load_cloud_structural_errors(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                 "property float a\nproperty float b\nproperty float c\n"
                 "end_header\n1 2 3\n")
    with pytest.raises(mm.ParseError, match="x/y/z"):
        load_point_cloud(str(p))
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n")
    with pytest.raises(mm.ParseError, match="end_header"):
        load_point_cloud(str(p))
    with pytest.raises(mm.ParseError, match="cannot read"):
        load_point_cloud(str(tmp_path / "nope.ply"))


def test_recenter():
    params = mm.SimParams(dim=2, grid_res=16, f_ext=(0.0, 0.0))
    pts = np.array([[0.0, 0.0], [2.0, 4.0]])
    moved = recenter(pts, params)
    np.testing.assert_allclose(moved.mean(axis=0), [7.5, 7.5])
    np.testing.assert_allclose(moved[1] - moved[0], [2.0, 4.0])


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def minimal_config(**extra):
    d = {"source": {"type": "sphere", "center": [0.0, 0.0], "radius": 1.0},
         "target": {"type": "box", "center": [0.0, 0.0], "size": [1.0, 1.0]},
         "params": {"dim": 2, "grid_res": 16}}
    d.update(extra)
    return d


def test_config_round_trip():
    cfg = SceneConfig.from_dict(minimal_config(seed=7, total_frames=30,
                                               mass_scale=2.0))
    again = SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert cfg.params.dim == 2 and cfg.params.f_ext == (0.0, 0.0)
    assert cfg.seed == 7 and cfg.total_frames == 30


def test_config_rejects_unknown_and_missing_keys():
    with pytest.raises(mm.ConfigError, match="unknown config keys"):
        SceneConfig.from_dict(minimal_config(colour="red"))
    with pytest.raises(mm.ConfigError, match="missing 'target'"):
        SceneConfig.from_dict({"source": {"type": "sphere", "center": [0, 0],
                                          "radius": 1.0}})
    with pytest.raises(mm.ConfigError, match="unknown params keys"):
        SceneConfig.from_dict(minimal_config(params={"dim": 2, "dts": 0.1}))
    with pytest.raises(mm.ConfigError, match="unknown plan keys"):
        SceneConfig.from_dict(minimal_config(plan={"pass": 3}))
    with pytest.raises(mm.ConfigError, match="loss kind"):
        SceneConfig.from_dict(minimal_config(plan={"loss_kind": "huber"}))
    with pytest.raises(mm.ConfigError, match="bad params"):
        SceneConfig.from_dict(minimal_config(params={"dim": 5}))
    with pytest.raises(mm.ConfigError):
        SceneConfig.from_dict([1, 2])


def test_config_from_file_errors(tmp_path):
    with pytest.raises(mm.ConfigError, match="cannot read"):
        SceneConfig.from_file(str(tmp_path / "none.json"))
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(mm.ConfigError, match="not valid JSON"):
        SceneConfig.from_file(str(p))


def test_config_validate():
    cfg = SceneConfig.from_dict(minimal_config(total_frames=5,
                                               plan={"segment_len": 10}))
    with pytest.raises(mm.ConfigError, match="total_frames"):
        cfg.validate()
    cfg2 = SceneConfig.from_dict(minimal_config(
        source={"type": "point_cloud", "path": "/nowhere/x.ply"}))
    with pytest.raises(mm.ConfigError, match="not found"):
        cfg2.validate()


def test_config_build_mass_target_normalized():
    cfg = SceneConfig.from_dict(minimal_config(total_frames=10))
    source, target = cfg.build()
    assert isinstance(target, mm.TargetMassField)
    assert target.m_star.sum() == pytest.approx(source.m.sum(), rel=1e-12)
    cfg_raw = SceneConfig.from_dict(minimal_config(total_frames=10,
                                                   normalize_target_mass=False))
    _, target_raw = cfg_raw.build()
    assert target_raw.m_star.sum() != pytest.approx(source.m.sum(), rel=1e-3)


def _write_cloud(path, pts):
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\nelement vertex %d\n" % len(pts))
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in pts:
            f.write("%g %g %g\n" % tuple(p))


def test_config_build_position_loss_from_clouds(tmp_path):
    rng = np.random.default_rng(11)
    a = tmp_path / "a.ply"
    b = tmp_path / "b.ply"
    _write_cloud(a, rng.random((30, 3)))
    _write_cloud(b, rng.random((30, 3)) + 0.2)
    d = minimal_config(total_frames=10, plan={"loss_kind": "position"})
    d["source"] = {"type": "point_cloud", "path": str(a), "center": True}
    d["target"] = {"type": "point_cloud", "path": str(b), "center": True}
    source, target = SceneConfig.from_dict(d).build()
    assert source.n == 30 and target.shape == (30, 2)  # dim-2 slice
    np.testing.assert_allclose(target.mean(axis=0), 7.5, atol=1e-12)

    _write_cloud(b, rng.random((29, 3)))
    with pytest.raises(mm.SizeMismatch):
        SceneConfig.from_dict(d).build()
