"""Exception types raised by the DP-Hype toolkit."""

from pathlib import Path
from typing import Any, Iterable, Optional


class DPHypeError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(DPHypeError, ValueError):
    """A parameter violates an operation's precondition."""

    def __init__(self, parameter: str, value: Any, reason: str) -> None:
        self.parameter = parameter
        self.value = value
        self.reason = reason
        super().__init__(f"Invalid {parameter}={value!r}: {reason}")


class CalibrationError(DPHypeError):
    """No noise scale inside the search bracket reaches the target epsilon."""

    def __init__(
        self,
        epsilon: float,
        delta: float,
        k: int,
        bracket: tuple[float, float],
    ) -> None:
        self.epsilon = epsilon
        self.delta = delta
        self.k = k
        self.bracket = bracket

        details = [
            "Noise calibration failed",
            f"Target: epsilon={epsilon}, delta={delta}, k={k}",
            f"Bracket: sigma in [{bracket[0]:g}, {bracket[1]:g}]",
        ]
        super().__init__("\n".join(details))


class ProtocolSetupError(DPHypeError):
    """Pairwise masking cannot start (e.g. a pair has no shared seed)."""

    def __init__(self, message: str, pair: Optional[tuple[int, int]] = None) -> None:
        self.pair = pair
        if pair is not None:
            message = f"{message} (pair {pair[0]}-{pair[1]})"
        super().__init__(message)


class RoundAbortError(DPHypeError):
    """A secure-summation round lost contributions and was aborted."""

    def __init__(self, round_id: str, dropouts: Iterable[int]) -> None:
        self.round_id = round_id
        self.dropouts = frozenset(dropouts)
        # set by the coordinator to the aborted attempt's transcript
        self.transcript = None
        super().__init__(
            f"Round {round_id} aborted: missing contributions from "
            f"{sorted(self.dropouts)}"
        )


class RoundFailureError(DPHypeError):
    """A round aborted again after its single re-run."""

    def __init__(self, round_id: str, first: RoundAbortError, second: RoundAbortError) -> None:
        self.round_id = round_id
        self.first = first
        self.second = second

        details = [
            f"Round {round_id} failed after re-run",
            f"First abort dropouts: {sorted(first.dropouts)}",
            f"Re-run dropouts: {sorted(second.dropouts)}",
        ]
        super().__init__("\n".join(details))


class OracleError(DPHypeError):
    """A loss oracle produced a non-finite value."""

    def __init__(self, client_id: int, candidate: int, value: float) -> None:
        self.client_id = client_id
        self.candidate = candidate
        self.value = value
        super().__init__(
            f"Loss oracle returned {value!r} for client {client_id}, candidate {candidate}"
        )


class FrameError(DPHypeError, ValueError):
    """A wire frame is malformed or uses an unsupported version."""


class ConfigError(DPHypeError):
    """An experiment config could not be parsed or validated."""

    def __init__(
        self,
        message: str,
        path: Optional[Path] = None,
        line: Optional[int] = None,
        field: Optional[str] = None,
    ) -> None:
        self.message = message
        self.path = path
        self.line = line
        self.field = field

        location = str(path) if path is not None else "<config>"
        if line is not None:
            location = f"{location}:{line}"
        prefix = f"{location}: {field}" if field else location
        super().__init__(f"{prefix}: {message}")


class ReportError(DPHypeError, OSError):
    """A report could not be written."""

    def __init__(self, path: Path, cause: OSError) -> None:
        self.path = path
        self.cause = cause
        super().__init__(f"Failed to write report {path}: {cause}")
