"""Exception taxonomy for the morphing simulator.

Everything raised on purpose derives from MorphError so callers can catch one
base type at pipeline boundaries (the CLI maps subtypes to exit codes).
"""


class MorphError(Exception):
    """Base class for all errors raised by this package."""


class SingularDeformation(MorphError):
    """A deformation gradient became inverted or collapsed (det below floor).

    Attributes:
        particle: index of the first offending particle, or None.
        det: the offending determinant value, or None.
        timestep: simulation step at which it happened, attached by the tape.
    """

    def __init__(self, msg, particle=None, det=None, timestep=None):
        super().__init__(msg)
        self.particle = particle
        self.det = det
        self.timestep = timestep


class OutOfDomain(MorphError):
    """A particle's kernel support left the grid (or a position failed the
    domain-margin validation)."""

    def __init__(self, msg, particle=None, timestep=None):
        super().__init__(msg)
        self.particle = particle
        self.timestep = timestep


class SizeMismatch(MorphError):
    """Two corresponded arrays (e.g. point clouds) differ in length."""


class LatticeMismatch(MorphError):
    """Nodal fields live on different grid lattices."""


class NegativeMass(MorphError):
    """A mass field contains negative entries where nonnegative ones are
    required (log-mass loss domain)."""


class LineSearchFailed(MorphError):
    """Bisection line search hit the halving cap without finding a
    non-increasing step; signals a non-descent direction or noisy loss."""

    def __init__(self, msg, halvings=None, last_alpha=None):
        super().__init__(msg)
        self.halvings = halvings
        self.last_alpha = last_alpha


class OptimizationError(MorphError):
    """The optimization loop produced a non-finite loss or gradient and
    cannot continue."""


class EmptyGeometry(MorphError):
    """Particle seeding produced no particles (geometry has no volume inside
    the domain)."""


class ParseError(MorphError):
    """A point-cloud or config file failed to parse.

    Attributes:
        line: 1-based line number of the offending line when known.
    """

    def __init__(self, msg, line=None):
        super().__init__(msg)
        self.line = line


class ConfigError(MorphError):
    """A run configuration is semantically invalid (unknown keys, bad values,
    missing files)."""


class IoError(MorphError):
    """Frame or artifact output could not be written."""


class VanishingGradient(UserWarning):
    """Backprop produced a gradient with norm below 1e-14; the control layer
    is probably too far from the loss horizon."""
