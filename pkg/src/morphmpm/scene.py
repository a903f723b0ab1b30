"""Scenes: geometry specs, particle seeding, point-cloud and frame files,
and the JSON run configuration.

Geometry arrives either as analytic primitives (sphere, box, bitmap
extrusion, unions of those) or as an ASCII PLY point cloud; meshes are out of
scope. Primitives are seeded on a jittered sub-cell lattice at a target
density of 8 particles per grid cell in 3-D (2x2x2 subdivisions; 3x3 in 2-D),
and the seeded volume is estimated as kept_count * subcell_volume, which is
unbiased because membership is tested at the jittered sample point.

Frames are ASCII PLY files named frame_%06d.ply with properties x y z loss
(%.9g formatting); the loss channel is normalized to [0, 1] per frame.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (ConfigError, EmptyGeometry, IoError, OutOfDomain,
                     ParseError, SizeMismatch)
from .losses import rasterize_target
from .optimize import MorphPlan
from .sim import BC_MARGIN, ParticleSet, SimParams


# ---------------------------------------------------------------------------
# geometry primitives
# ---------------------------------------------------------------------------

@dataclass
class Sphere:
    center: tuple
    radius: float

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius

    def contains(self, pts):
        c = np.asarray(self.center)
        return np.sum((pts - c) ** 2, axis=1) <= self.radius ** 2

    def scaled(self, s, pivot, shift):
        c = (np.asarray(self.center) - pivot) * s + shift
        return Sphere(tuple(c), self.radius * s)


@dataclass
class Box:
    center: tuple
    size: tuple  # full extents per axis

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = 0.5 * np.asarray(self.size, dtype=np.float64)
        return c - h, c + h

    def contains(self, pts):
        lo, hi = self.bounds()
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def scaled(self, s, pivot, shift):
        c = (np.asarray(self.center) - pivot) * s + shift
        return Box(tuple(c), tuple(np.asarray(self.size) * s))


@dataclass
class Extrusion:
    """Bitmap region: rows of 'X'/'.' mapped onto the x/y extent of a box
    (row 0 at the top), extruded through the z extent in 3-D."""
    pattern: tuple
    center: tuple
    size: tuple

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = 0.5 * np.asarray(self.size, dtype=np.float64)
        return c - h, c + h

    def contains(self, pts):
        lo, hi = self.bounds()
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        local = (pts - lo) / (hi - lo)
        rows = len(self.pattern)
        cols = len(self.pattern[0])
        cx = np.clip((local[:, 0] * cols).astype(int), 0, cols - 1)
        cy = np.clip(((1.0 - local[:, 1]) * rows).astype(int), 0, rows - 1)
        lit = np.array([[ch == "X" for ch in row] for row in self.pattern])
        return inside & lit[cy, cx]

    def scaled(self, s, pivot, shift):
        c = (np.asarray(self.center) - pivot) * s + shift
        return Extrusion(self.pattern, tuple(c), tuple(np.asarray(self.size) * s))


@dataclass
class Union:
    parts: tuple

    def bounds(self):
        los, his = zip(*(p.bounds() for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)

    def contains(self, pts):
        mask = np.zeros(pts.shape[0], dtype=bool)
        for p in self.parts:
            mask |= p.contains(pts)
        return mask

    def scaled(self, s, pivot, shift):
        return Union(tuple(p.scaled(s, pivot, shift) for p in self.parts))


@dataclass
class PointCloud:
    """Pre-sampled geometry: particles sit exactly at the loaded points."""
    path: str
    center: bool = False

    def load(self):
        return load_point_cloud(self.path)


_GEOM_KEYS = {
    "sphere": {"type", "center", "radius"},
    "box": {"type", "center", "size"},
    "extrusion": {"type", "pattern", "center", "size"},
    "union": {"type", "parts"},
    "point_cloud": {"type", "path", "center"},
}


def geometry_from_dict(spec):
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError("geometry spec must be an object with a 'type' key")
    kind = spec["type"]
    allowed = _GEOM_KEYS.get(kind)
    if allowed is None:
        raise ConfigError(f"unknown geometry type {kind!r}")
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {kind} spec: {sorted(unknown)}")
    try:
        if kind == "sphere":
            return Sphere(tuple(spec["center"]), float(spec["radius"]))
        if kind == "box":
            return Box(tuple(spec["center"]), tuple(spec["size"]))
        if kind == "extrusion":
            return Extrusion(tuple(spec["pattern"]), tuple(spec["center"]),
                             tuple(spec["size"]))
        if kind == "union":
            return Union(tuple(geometry_from_dict(p) for p in spec["parts"]))
        return PointCloud(spec["path"], bool(spec.get("center", False)))
    except KeyError as e:
        raise ConfigError(f"{kind} spec is missing key {e}") from None


def geometry_to_dict(geom):
    if isinstance(geom, Sphere):
        return {"type": "sphere", "center": list(geom.center), "radius": geom.radius}
    if isinstance(geom, Box):
        return {"type": "box", "center": list(geom.center), "size": list(geom.size)}
    if isinstance(geom, Extrusion):
        return {"type": "extrusion", "pattern": list(geom.pattern),
                "center": list(geom.center), "size": list(geom.size)}
    if isinstance(geom, Union):
        return {"type": "union", "parts": [geometry_to_dict(p) for p in geom.parts]}
    return {"type": "point_cloud", "path": geom.path, "center": geom.center}


def _usable_band(params):
    # keep a one-cell cushion inside the sticky margin so particles can move
    lo = (BC_MARGIN + 1) * params.dx
    hi = (params.grid_res - 2 - BC_MARGIN) * params.dx
    return lo, hi


def fit_geometry(geom, params, fraction=0.7):
    """Scale and center a geometry to cover `fraction` of the usable domain
    (the part a particle may occupy without tripping the boundary margin)."""
    lo, hi = geom.bounds()
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise EmptyGeometry("geometry has no extent")
    band_lo, band_hi = _usable_band(params)
    s = fraction * (band_hi - band_lo) / extent
    pivot = 0.5 * (lo + hi)
    shift = np.full(params.dim, 0.5 * (band_lo + band_hi))
    return geom.scaled(s, pivot, shift)


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def seed_particles(geom, params, seed, mass_scale=1.0):
    """Sample a primitive on a jittered sub-cell lattice (8 particles per
    covered cell in 3-D, 9 in 2-D). m_p = rho V_total / n, V0 = V_total / n
    with V_total the unbiased subcell-volume estimate."""
    dim = params.dim
    sub = 2 if dim == 3 else 3
    lo, hi = geom.bounds()
    lo_cell = np.maximum(np.floor(lo / params.dx).astype(int) - 1, 0)
    hi_cell = np.minimum(np.ceil(hi / params.dx).astype(int) + 1, params.grid_res - 1)
    axes = [np.arange(lo_cell[a], hi_cell[a]) for a in range(dim)]
    if any(ax.size == 0 for ax in axes):
        raise EmptyGeometry("geometry lies outside the grid")
    cells = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    subs = np.stack(np.meshgrid(*([np.arange(sub)] * dim), indexing="ij"),
                    axis=-1).reshape(-1, dim)
    # candidate = (cell + (sub + u)/s) dx with u ~ U[0,1) per axis
    cand = (cells[:, None, :] + (subs[None, :, :] + 0.0) / sub).reshape(-1, dim)
    rng = np.random.default_rng(seed)
    cand = (cand + rng.random(cand.shape) / sub) * params.dx
    kept = cand[geom.contains(cand)]
    if kept.shape[0] == 0:
        raise EmptyGeometry("no particles landed inside the geometry")
    n = kept.shape[0]
    v_total = n * (params.dx / sub) ** dim
    m = np.full(n, params.rho * v_total / n * mass_scale)
    v0 = np.full(n, v_total / n)
    ps = ParticleSet.rest(np.ascontiguousarray(kept), m, v0)
    ps.validate(params)
    return ps


def particles_from_cloud(points, masses, params, mass_scale=1.0):
    """Turn loaded point-cloud positions into a rest-state particle set. The
    represented volume is estimated by sub-cell occupancy on the grid."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise EmptyGeometry("point cloud is empty")
    n = pts.shape[0]
    sub = 2 if params.dim == 3 else 3
    keys = np.unique((pts * sub / params.dx).astype(np.int64), axis=0)
    v_total = keys.shape[0] * (params.dx / sub) ** params.dim
    if masses is None:
        m = np.full(n, params.rho * v_total / n)
    else:
        m = np.asarray(masses, dtype=np.float64).copy()
    m *= mass_scale
    v0 = np.full(n, v_total / n)
    ps = ParticleSet.rest(pts, m, v0)
    ps.validate(params)
    return ps


# ---------------------------------------------------------------------------
# point-cloud / frame files (ASCII PLY)
# ---------------------------------------------------------------------------

@dataclass
class FrameRecord:
    index: int
    positions: np.ndarray
    channel: np.ndarray  # per-particle scalar in [0, 1]


def write_frame(record, out_dir):
    """Write one ASCII PLY frame (properties x y z loss) and return its path."""
    pos = np.asarray(record.positions, dtype=np.float64)
    ch = np.asarray(record.channel, dtype=np.float64)
    n, dim = pos.shape
    path = os.path.join(out_dir, f"frame_{record.index:06d}.ply")
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z",
             "property float loss", "end_header"]
    try:
        with open(path, "w") as f:
            f.write("\n".join(lines))
            f.write("\n")
            for p in range(n):
                z = pos[p, 2] if dim == 3 else 0.0
                f.write(f"{pos[p, 0]:.9g} {pos[p, 1]:.9g} {z:.9g} {ch[p]:.9g}\n")
    except OSError as e:
        raise IoError(f"cannot write frame {path}: {e}") from e
    return path


def load_point_cloud(path):
    """Read an ASCII PLY vertex cloud. Returns (positions (n,3), masses or
    None). Raises ParseError naming the offending line."""
    try:
        with open(path) as f:
            raw = f.read().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    if not raw or raw[0].strip() != "ply":
        raise ParseError(f"{path}:1: not a PLY file (missing 'ply' magic)", line=1)
    n_vertex = None
    props = []
    body_at = None
    in_vertex = False
    for i, line in enumerate(raw[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                raise ParseError(f"{path}:{i}: only 'format ascii 1.0' is supported",
                                 line=i)
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}:{i}: bad element vertex count", line=i)
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3:
                    raise ParseError(f"{path}:{i}: bad property line", line=i)
                props.append(tok[2])
        elif tok[0] == "end_header":
            body_at = i
            break
        else:
            raise ParseError(f"{path}:{i}: unexpected header line {line!r}", line=i)
    if body_at is None or n_vertex is None:
        raise ParseError(f"{path}: header has no end_header/element vertex", line=len(raw))
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{path}: vertex element lacks x/y/z properties",
                         line=body_at)
    mass_col = props.index("mass") if "mass" in props else None
    body = raw[body_at:]
    if len(body) < n_vertex:
        raise ParseError(f"{path}: expected {n_vertex} vertex rows, found {len(body)}",
                         line=len(raw))
    pos = np.empty((n_vertex, 3))
    masses = np.empty(n_vertex) if mass_col is not None else None
    for r in range(n_vertex):
        lineno = body_at + 1 + r
        tok = body[r].split()
        if len(tok) != len(props):
            raise ParseError(f"{path}:{lineno}: expected {len(props)} columns, "
                             f"got {len(tok)}", line=lineno)
        try:
            vals = [float(t) for t in tok]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric vertex data", line=lineno)
        pos[r] = [vals[c] for c in cols]
        if masses is not None:
            masses[r] = vals[mass_col]
    return pos, masses


def recenter(points, params):
    """Translate a cloud so its centroid sits at the usable-domain center."""
    pts = np.asarray(points, dtype=np.float64)
    band_lo, band_hi = _usable_band(params)
    shift = np.full(params.dim, 0.5 * (band_lo + band_hi)) - pts.mean(axis=0)
    return pts + shift


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"source", "target", "params", "plan", "seed", "output_dir",
             "total_frames", "auto_fit", "mass_scale", "normalize_target_mass"}


@dataclass
class SceneConfig:
    source: object
    target: object
    params: SimParams = field(default_factory=SimParams)
    plan: MorphPlan = field(default_factory=MorphPlan)
    seed: int = 0
    output_dir: str = "out"
    total_frames: int = 120
    auto_fit: bool = True
    mass_scale: float = 1.0
    normalize_target_mass: bool = True

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("source", "target"):
            if key not in d:
                raise ConfigError(f"config is missing '{key}'")
        p = dict(d.get("params", {}))
        unknown = set(p) - set(SimParams.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown params keys: {sorted(unknown)}")
        if "f_ext" in p:
            p["f_ext"] = tuple(p["f_ext"])
        elif int(p.get("dim", 3)) == 2:
            p["f_ext"] = (0.0, 0.0)
        try:
            params = SimParams(**p)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad params: {e}") from e
        pl = dict(d.get("plan", {}))
        unknown = set(pl) - set(MorphPlan.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        try:
            plan = MorphPlan(**pl)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad plan: {e}") from e
        if plan.loss_kind not in ("position", "mass", "log_mass"):
            raise ConfigError(f"unknown loss kind {plan.loss_kind!r}")
        try:
            return cls(source=geometry_from_dict(d["source"]),
                       target=geometry_from_dict(d["target"]),
                       params=params, plan=plan,
                       seed=int(d.get("seed", 0)),
                       output_dir=str(d.get("output_dir", "out")),
                       total_frames=int(d.get("total_frames", 120)),
                       auto_fit=bool(d.get("auto_fit", True)),
                       mass_scale=float(d.get("mass_scale", 1.0)),
                       normalize_target_mass=bool(d.get("normalize_target_mass", True)))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad config value: {e}") from e

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def to_dict(self):
        params = asdict(self.params)
        params["f_ext"] = list(params["f_ext"])
        return {"source": geometry_to_dict(self.source),
                "target": geometry_to_dict(self.target),
                "params": params,
                "plan": asdict(self.plan),
                "seed": self.seed,
                "output_dir": self.output_dir,
                "total_frames": self.total_frames,
                "auto_fit": self.auto_fit,
                "mass_scale": self.mass_scale,
                "normalize_target_mass": self.normalize_target_mass}

    def validate(self):
        if self.total_frames < self.plan.segment_len:
            raise ConfigError("total_frames must be at least plan.segment_len")
        for geom in (self.source, self.target):
            for pc in _clouds(geom):
                if not os.path.exists(pc.path):
                    raise ConfigError(f"point cloud file not found: {pc.path}")
        return self

    def _materialize(self, geom, seed):
        """Geometry -> particle set (primitives seeded, clouds loaded)."""
        if isinstance(geom, PointCloud):
            pts, masses = geom.load()
            pts = pts[:, : self.params.dim]
            if geom.center:
                pts = recenter(pts, self.params)
            return particles_from_cloud(pts, masses, self.params,
                                        mass_scale=self.mass_scale)
        fitted = fit_geometry(geom, self.params) if self.auto_fit else geom
        return seed_particles(fitted, self.params, seed,
                              mass_scale=self.mass_scale)

    def build(self):
        """Produce (source ParticleSet, loss target). The target is a
        corresponded position array for the position loss and a
        TargetMassField otherwise."""
        self.validate()
        source = self._materialize(self.source, self.seed)
        target_ps = self._materialize(self.target, self.seed + 1)
        if self.plan.loss_kind == "position":
            if target_ps.n != source.n:
                raise SizeMismatch(
                    f"position loss needs equal counts; source has {source.n}, "
                    f"target has {target_ps.n} (use point clouds with matched rows)")
            return source, target_ps.x
        masses = target_ps.m
        if self.normalize_target_mass:
            masses = masses * (float(source.m.sum()) / float(masses.sum()))
        return source, rasterize_target(target_ps.x, masses, self.params)


def _clouds(geom):
    if isinstance(geom, PointCloud):
        yield geom
    elif isinstance(geom, Union):
        for p in geom.parts:
            yield from _clouds(p)
