"""Error types shared by every layer.

Each concrete error carries a stable machine ``code`` and the HTTP status the
gateway answers with, so the mapping from module errors to API errors is a
property of the class itself and cannot drift.
"""

from __future__ import annotations

from typing import Any


class ScirepError(Exception):
    code = "InternalError"
    http_status = 500

    def __init__(self, message: str = "", **detail: Any) -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "detail": self.detail}


class UsageError(ScirepError):
    code = "UsageError"
    http_status = 400


# project_store


class EmptyName(ScirepError):
    code = "EmptyName"
    http_status = 400


class SeedMissingForAiKind(ScirepError):
    code = "SeedMissingForAiKind"
    http_status = 400


class ProjectNotFound(ScirepError):
    code = "ProjectNotFound"
    http_status = 404


class InvalidPath(ScirepError):
    code = "InvalidPath"
    http_status = 400


class ParentNotADirectory(ScirepError):
    code = "ParentNotADirectory"
    http_status = 409


class PathNotFound(ScirepError):
    code = "PathNotFound"
    http_status = 404


class DestinationExists(ScirepError):
    code = "DestinationExists"
    http_status = 409


class CorruptArchive(ScirepError):
    code = "CorruptArchive"
    http_status = 400


class ZipSlipDetected(ScirepError):
    code = "ZipSlipDetected"
    http_status = 400


class RemoteUnreachable(ScirepError):
    code = "RemoteUnreachable"
    http_status = 502


class UnsupportedRepositoryKind(ScirepError):
    code = "UnsupportedRepositoryKind"
    http_status = 400


# inference_engine


class ManifestParseError(ScirepError):
    code = "ManifestParseError"
    http_status = 422

    def __init__(self, path: str, message: str, line: int | None = None) -> None:
        super().__init__(f"{path}: {message}", path=path, line=line)
        self.path = path
        self.line = line


class UnknownLanguage(ScirepError):
    code = "UnknownLanguage"
    http_status = 400


# environment_generator


class UnregisteredLanguage(ScirepError):
    code = "UnregisteredLanguage"
    http_status = 422


class MissingCredentials(ScirepError):
    code = "MissingCredentials"
    http_status = 400


class InvalidDatabaseConfig(ScirepError):
    code = "InvalidDatabaseConfig"
    http_status = 400


# container_backend


class EngineUnreachable(ScirepError):
    code = "EngineUnreachable"
    http_status = 503


class EngineError(ScirepError):
    code = "EngineError"
    http_status = 502


class InvalidTag(ScirepError):
    code = "InvalidTag"
    http_status = 400


class BuildFailed(ScirepError):
    code = "BuildFailed"
    http_status = 422

    def __init__(self, step: str, log_excerpt: str) -> None:
        super().__init__(f"build failed at: {step}", step=step, log_excerpt=log_excerpt)
        self.step = step
        self.log_excerpt = log_excerpt


class ImageNotFound(ScirepError):
    code = "ImageNotFound"
    http_status = 404


class DbStartupTimeout(ScirepError):
    code = "DbStartupTimeout"
    http_status = 504


# experiment_runner


class ExecutionNotFound(ScirepError):
    code = "ExecutionNotFound"
    http_status = 404


class StaleImage(ScirepError):
    code = "StaleImage"
    http_status = 409


# artifact_packager


class CorruptPackage(ScirepError):
    code = "CorruptPackage"
    http_status = 400


class LayoutViolation(ScirepError):
    code = "LayoutViolation"
    http_status = 422


# gateway


class PortInUse(ScirepError):
    code = "PortInUse"


class StorageUnwritable(ScirepError):
    code = "StorageUnwritable"


class JobNotFound(ScirepError):
    code = "JobNotFound"
    http_status = 404


def all_error_classes() -> list[type[ScirepError]]:
    seen: list[type[ScirepError]] = []
    stack = [ScirepError]
    while stack:
        cls = stack.pop()
        seen.append(cls)
        stack.extend(cls.__subclasses__())
    return seen
