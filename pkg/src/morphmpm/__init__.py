"""Differentiable MLS-MPM elastic simulator with per-particle deformation
control, plus the optimization pipeline that morphs one shape into another
by adjusting those controls layer by layer.

Typical use::

    from morphmpm import SceneConfig, chain_segments

    cfg = SceneConfig.from_file("scene.json")
    source, target = cfg.build()
    final, L0, L1 = chain_segments(source, target, cfg.plan,
                                   cfg.total_frames, params=cfg.params)
"""

from . import runtime  # noqa: F401  (sets thread pool size before numba loads)
from .errors import (ConfigError, EmptyGeometry, IoError, LatticeMismatch,
                     LineSearchFailed, MorphError, NegativeMass,
                     OptimizationError, OutOfDomain, ParseError,
                     SingularDeformation, SizeMismatch, VanishingGradient)
from .losses import (LOSS_KINDS, LossReport, MassLoss, PositionLoss,
                     TargetMassField, accuracy_pct, log_mass_loss,
                     make_evaluator, mass_gradient_to_positions, mass_loss,
                     position_loss, rasterize_target)
from .optimize import (AdamState, ControlSchedule, MorphPlan, Segment,
                       chain_segments, compute_step_size, optimize_layer,
                       optimize_segment, run_pass)
from .runtime import (deterministic, get_threads, max_threads,
                      set_deterministic, set_threads)
from .scene import (Box, Extrusion, FrameRecord, PointCloud, SceneConfig,
                    Sphere, Union, fit_geometry, geometry_from_dict,
                    load_point_cloud, particles_from_cloud, seed_particles,
                    write_frame)
from .sim import (BC_MARGIN, DET_FLOOR, Grid, ParticleSet, SimParams,
                  StressResult, advance, bspline_weight, default_params, g2p,
                  grid_update, p2_update, p2g, pk1_stress, step)
from .tape import (GradientBundle, Tape, backprop, fd_gradient, live_states,
                   peak_states, record_segment, reset_peak)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BC_MARGIN", "Box", "ConfigError", "ControlSchedule",
    "DET_FLOOR", "EmptyGeometry", "Extrusion", "FrameRecord",
    "GradientBundle", "Grid", "IoError", "LOSS_KINDS", "LatticeMismatch",
    "LineSearchFailed", "LossReport", "MassLoss", "MorphError", "MorphPlan",
    "NegativeMass", "OptimizationError", "OutOfDomain", "ParseError",
    "ParticleSet", "PointCloud", "PositionLoss", "SceneConfig", "Segment",
    "SimParams", "SingularDeformation", "SizeMismatch", "Sphere",
    "StressResult", "Tape", "TargetMassField", "Union", "VanishingGradient",
    "accuracy_pct", "advance", "backprop", "bspline_weight", "chain_segments",
    "compute_step_size", "default_params", "deterministic", "fd_gradient",
    "fit_geometry", "g2p", "geometry_from_dict", "get_threads",
    "grid_update", "live_states", "load_point_cloud", "log_mass_loss",
    "make_evaluator", "mass_gradient_to_positions", "mass_loss",
    "max_threads", "optimize_layer", "optimize_segment", "p2_update", "p2g",
    "particles_from_cloud", "peak_states", "pk1_stress", "position_loss",
    "rasterize_target", "record_segment", "reset_peak", "run_pass",
    "seed_particles", "set_deterministic", "set_threads", "step",
    "write_frame",
]
