"""Exception hierarchy shared across the toolkit."""


class MasivError(Exception):
    """Base class for all toolkit errors."""


class OutOfDomainError(MasivError):
    """A particle left the safe interior of the background grid."""

    def __init__(self, particle_index, position, step=None):
        self.particle_index = int(particle_index)
        self.position = position
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"particle {particle_index} outside safe grid domain{where}: {position}"
        )


class InversionError(MasivError):
    """det(F) dropped to zero or below for some particle."""

    def __init__(self, particle_index, det, step=None):
        self.particle_index = int(particle_index)
        self.det = float(det)
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"deformation gradient of particle {particle_index} inverted{where} "
            f"(det={det:.3e})"
        )


class CFLError(MasivError):
    """Particle speed violated the max|v|*dt/dx < 1 stability bound."""

    def __init__(self, cfl, step=None):
        self.cfl = float(cfl)
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"CFL number {cfl:.3f} >= 1{where}; reduce dt or velocities")


class NumericalError(MasivError):
    """A numerical routine (SVD, network forward) produced garbage."""


class FormatError(MasivError):
    """A serialized file failed validation."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"bad {field}: {message}")


class DivergedError(MasivError):
    """An optimization run diverged beyond recovery."""
