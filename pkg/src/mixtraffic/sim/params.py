from dataclasses import dataclass, fields, replace

VEHICLE_LENGTH = 5.0
B_CAP = 9.0  # hard braking cap of the safety clip (m/s^2)


class ConfigurationError(ValueError):
    """Invalid network or environment configuration."""


class ContractViolation(RuntimeError):
    """A caller broke an operation precondition."""


class DomainError(ValueError):
    """Input outside the domain of a model function."""


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters (SI units)."""

    a_max: float = 2.6
    b_comf: float = 4.5
    v0: float = 30.0
    s0: float = 2.5
    tau: float = 1.0
    delta_exp: float = 4.0
    noise_std: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "noise_std":
                if value < 0:
                    raise ConfigurationError("noise_std must be >= 0")
            elif not value > 0:
                raise ConfigurationError(f"{f.name} must be > 0, got {value}")

    def with_(self, **changes) -> "IdmParams":
        return replace(self, **changes)
