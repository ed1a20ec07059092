"""Exception hierarchy shared by every rolecycle module.

Each class carries the CLI exit code it maps to, so the dispatcher never
needs a translation table of its own.
"""

from __future__ import annotations

from typing import Any, Iterable

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_NOT_AUTHORIZED = 3
EXIT_INTEGRITY = 4


class RolecycleError(Exception):
    """Base class for all rolecycle errors."""

    exit_code = EXIT_USAGE


# core model

class ModelError(RolecycleError):
    pass


class DuplicateId(ModelError):
    pass


class DanglingReference(ModelError):
    pass


class CycleDetected(ModelError):
    pass


class UnknownRole(ModelError):
    pass


class UnknownUser(ModelError):
    pass


class UnknownPermission(ModelError):
    pass


class InvalidEntity(ModelError):
    """Entity violates a structural invariant (empty id, empty set, bad enum)."""


class InactiveRole(ModelError):
    pass


class DuplicateAssignment(ModelError):
    pass


class NoSuchAssignment(ModelError):
    pass


class SodViolationError(ModelError):
    """An operation was refused because it would breach segregation of duties."""

    exit_code = EXIT_FINDINGS

    def __init__(self, message: str, violations: Iterable[Any] = (), users: Iterable[str] = ()):
        super().__init__(message)
        self.violations = list(violations)
        self.users = sorted(set(users))


class NotAuthorized(RolecycleError):
    exit_code = EXIT_NOT_AUTHORIZED


# analysis

class CyclicOrgStructure(RolecycleError):
    pass


class VersionMismatch(RolecycleError):
    pass


# engineering

class EmptyPermissionSelection(RolecycleError):
    pass


class InvalidStatus(RolecycleError):
    pass


class ImmutableEntry(RolecycleError):
    """Attempt to overwrite a signed-off concept entry."""


# management

class EmptyCatalogue(RolecycleError):
    pass


class NotAPartition(RolecycleError):
    pass


class IntegrityFailure(RolecycleError):
    exit_code = EXIT_INTEGRITY


# maintenance

class UnknownCatalogueVersion(RolecycleError):
    pass


class InputError(RolecycleError):
    """Malformed input document (org file, usage log, change payload)."""


# store

class StoreError(RolecycleError):
    exit_code = EXIT_INTEGRITY


class StoreWriteFailure(StoreError):
    pass


class UnknownVersion(StoreError):
    pass


class DigestMismatch(StoreError):
    pass


class InvariantViolation(StoreError):
    pass


class NonCanonicalizable(StoreError):
    pass
