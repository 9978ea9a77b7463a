from __future__ import annotations


class OrgFamilyError(Exception):
    pass


class ConfigError(OrgFamilyError):
    """Invalid configuration; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str] | str):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IngestError(OrgFamilyError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class AsnNotFound(OrgFamilyError, LookupError):
    pass


class HarvestError(OrgFamilyError):
    def __init__(self, message: str, query: str | None = None):
        self.query = query
        super().__init__(message)


class VerdictParseError(OrgFamilyError, ValueError):
    pass


class BackendError(OrgFamilyError):
    pass


class StageOrderError(OrgFamilyError):
    pass


class ConfigMismatchError(OrgFamilyError):
    def __init__(self, diff: list[str]):
        self.diff = diff
        super().__init__("config differs from the run manifest:\n  " + "\n  ".join(diff))
