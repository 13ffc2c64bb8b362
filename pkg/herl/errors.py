"""Exception types shared across the simulator."""

from typing import List, Optional


class HerlError(Exception):
    """Root of every error raised by the simulator."""


class InputError(HerlError, ValueError):
    """Bad argument or degenerate input to an operation."""


class ConfigError(HerlError, ValueError):
    """Invalid configuration. Carries every violation found, not just the first."""

    def __init__(self, message: str, violations: Optional[List[str]] = None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + "\n" + "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(message)


class PlanError(ConfigError):
    """A parameter plan or security-table lookup that the active table cannot serve."""


class TraceParseError(InputError):
    """Malformed row in a device trace file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def violations_from(exc, prefix: str = "") -> List[str]:
    """Flatten a pydantic ValidationError into 'dotted.path: message' lines."""
    lines = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err.get("loc", ()))
        if prefix:
            loc = f"{prefix}.{loc}" if loc else prefix
        msg = err.get("msg", "invalid value")
        if err.get("type") == "extra_forbidden":
            msg = "unknown key"
        lines.append(f"{loc}: {msg}" if loc else msg)
    return lines
