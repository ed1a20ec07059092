"""Versioned on-disk persistence and the hash-chained audit log.

Layout under the store root::

    analysis/00000001.json
    concept/00000001.json
    roles/00000001.json
    environment/<name>/00000001.json
    audit.log
    .lock

Version files are written once (temp file + hard link) and never rewritten.
Each file is canonical JSON ``{"header": ..., "body": ...}``; the header
carries a digest of the body and a digest of the header itself, so any
single-byte change anywhere in the file is detected on load.
"""

from __future__ import annotations

import contextlib
import fcntl
import os
import re
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Optional

from .canonical import GENESIS_HASH, canonicalize, digest, parse_canonical, sha256_hex
from .errors import (
    DigestMismatch,
    InvariantViolation,
    RolecycleError,
    StoreWriteFailure,
    UnknownVersion,
)

FORMAT_VERSION = 1
KINDS = ("analysis", "concept", "roles", "environment")
HEADER_KEYS = {
    "format_version",
    "kind",
    "name",
    "version",
    "parent_version",
    "created_at",
    "body_digest",
    "header_digest",
}
AUDIT_KEYS = {
    "seq",
    "actor",
    "operation",
    "subjects",
    "before_digest",
    "after_digest",
    "prev_record_hash",
    "record_hash",
}
_VERSION_FILE = re.compile(r"^(\d{8})\.json$")


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    actor: str
    operation: str
    subjects: tuple[str, ...]
    before_digest: Optional[str]
    after_digest: Optional[str]
    prev_record_hash: str
    record_hash: str

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["subjects"] = list(self.subjects)
        return d


@dataclass(frozen=True)
class ChainStatus:
    valid: bool
    records: int
    broken_at: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        if self.valid:
            return {"valid": True, "records": self.records}
        return {"valid": False, "records": self.records, "broken_at": self.broken_at}


def _record_hash(fields: dict[str, Any]) -> str:
    return digest({k: v for k, v in fields.items() if k != "record_hash"})


def _header_digest(header: dict[str, Any]) -> str:
    return digest({k: v for k, v in header.items() if k != "header_digest"})


def _validate_body(kind: str, body: Any) -> None:
    """Run the owning module's invariants over *body* before it is persisted."""
    if not isinstance(body, dict):
        raise InvariantViolation(f"{kind} body must be a JSON object")
    try:
        if kind == "environment":
            from .management import environment_from_dict

            environment_from_dict(body)
        elif kind == "roles":
            from .management import catalogue_from_dict

            catalogue_from_dict(body)
        elif kind == "concept":
            from .engineering import concept_model_from_dict

            concept_model_from_dict(body)
        elif kind == "analysis":
            from .analysis import catalogue_body_check

            catalogue_body_check(body)
    except InvariantViolation:
        raise
    except (RolecycleError, KeyError, TypeError, ValueError) as exc:
        raise InvariantViolation(f"{kind} body rejected: {exc}") from exc


class Store:
    def __init__(self, root: os.PathLike | str, clock: Callable[[], float] = time.time):
        self.root = Path(root)
        self.clock = clock

    # -- paths ---------------------------------------------------------------

    def _dir(self, kind: str, name: Optional[str]) -> Path:
        if kind not in KINDS:
            raise UnknownVersion(f"unknown catalogue kind {kind!r}")
        if kind == "environment":
            if not name or "/" in name or name.startswith("."):
                raise UnknownVersion(f"invalid environment name {name!r}")
            return self.root / kind / name
        return self.root / kind

    def path_for(self, kind: str, version: int, name: Optional[str] = None) -> Path:
        return self._dir(kind, name) / f"{version:08d}.json"

    @property
    def audit_path(self) -> Path:
        return self.root / "audit.log"

    def versions(self, kind: str, name: Optional[str] = None) -> list[int]:
        d = self._dir(kind, name)
        if not d.is_dir():
            return []
        out = []
        for entry in d.iterdir():
            m = _VERSION_FILE.match(entry.name)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def latest_version(self, kind: str, name: Optional[str] = None) -> Optional[int]:
        vs = self.versions(kind, name)
        return vs[-1] if vs else None

    def environments(self) -> list[str]:
        d = self.root / "environment"
        return sorted(p.name for p in d.iterdir() if p.is_dir()) if d.is_dir() else []

    # -- locking -------------------------------------------------------------

    @contextlib.contextmanager
    def writer(self) -> Iterator["Store"]:
        """Hold the advisory single-writer lock for the store root."""
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ".lock", "a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield self
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    # -- versions ------------------------------------------------------------

    def save(
        self,
        kind: str,
        body: dict[str, Any],
        *,
        name: Optional[str] = None,
        created_at: Optional[int] = None,
    ) -> int:
        """Persist *body* as the next version of *kind*; returns the version id."""
        _validate_body(kind, body)
        directory = self._dir(kind, name)
        parent = self.latest_version(kind, name)
        version = 1 if parent is None else parent + 1
        header = {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "name": name if kind == "environment" else None,
            "version": version,
            "parent_version": parent,
            "created_at": int(self.clock() if created_at is None else created_at),
            "body_digest": digest(body),
        }
        header["header_digest"] = _header_digest(header)
        data = canonicalize({"header": header, "body": body})
        try:
            directory.mkdir(parents=True, exist_ok=True)
            self._commit(directory, self.path_for(kind, version, name), data)
        except OSError as exc:
            raise StoreWriteFailure(f"could not write {kind} v{version}: {exc}") from exc
        return version

    def _commit(self, directory: Path, final: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            # link() refuses to replace an existing file, which keeps
            # published versions immutable even under a rogue second writer.
            os.link(tmp, final)
        finally:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)

    def load_with_header(
        self, kind: str, version: Optional[int] = None, *, name: Optional[str] = None
    ) -> tuple[dict[str, Any], dict[str, Any]]:
        if version is None:
            version = self.latest_version(kind, name)
            if version is None:
                raise UnknownVersion(f"no {kind} versions stored")
        if not isinstance(version, int) or version < 1:
            raise UnknownVersion(f"{kind} version {version!r} does not exist")
        path = self.path_for(kind, version, name)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise UnknownVersion(f"{kind} version {version} does not exist") from None
        try:
            doc = parse_canonical(raw)
            header, body = doc["header"], doc["body"]
            ok = (
                set(doc) == {"header", "body"}
                and set(header) == HEADER_KEYS
                and header["format_version"] == FORMAT_VERSION
                and header["kind"] == kind
                and header["name"] == (name if kind == "environment" else None)
                and header["version"] == version
                and header["parent_version"] == (version - 1 if version > 1 else None)
                and header["header_digest"] == _header_digest(header)
                and header["body_digest"] == digest(body)
            )
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise DigestMismatch(f"{path} is corrupt: {exc}") from exc
        if not ok:
            raise DigestMismatch(f"{path} failed digest verification")
        return header, body

    def load(self, kind: str, version: Optional[int] = None, *, name: Optional[str] = None) -> dict[str, Any]:
        """Body of the requested version (latest when omitted), digest-verified."""
        return self.load_with_header(kind, version, name=name)[1]

    # -- audit log -----------------------------------------------------------

    def _read_audit(self) -> bytes:
        try:
            return self.audit_path.read_bytes()
        except FileNotFoundError:
            return b""

    def append_audit(
        self,
        actor: str,
        operation: str,
        subjects: list[str] | tuple[str, ...] = (),
        before_digest: Optional[str] = None,
        after_digest: Optional[str] = None,
    ) -> AuditRecord:
        raw = self._read_audit()
        if raw:
            lines = raw.split(b"\n")
            if lines[-1] != b"":
                raise StoreWriteFailure("audit log is not newline terminated")
            try:
                last = parse_canonical(lines[-2] + b"\n")
                seq, prev = last["seq"] + 1, last["record_hash"]
            except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
                raise StoreWriteFailure(f"audit log tail is unreadable: {exc}") from exc
        else:
            seq, prev = 1, GENESIS_HASH
        fields = {
            "seq": seq,
            "actor": actor,
            "operation": operation,
            "subjects": sorted(set(subjects)),
            "before_digest": before_digest,
            "after_digest": after_digest,
            "prev_record_hash": prev,
        }
        fields["record_hash"] = _record_hash(fields)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            with open(self.audit_path, "ab") as fh:
                fh.write(canonicalize(fields))
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StoreWriteFailure(f"could not append audit record: {exc}") from exc
        return AuditRecord(**{**fields, "subjects": tuple(fields["subjects"])})

    def audit_records(self) -> list[AuditRecord]:
        """Parsed audit records; raises DigestMismatch when the chain is broken."""
        status = self.verify_chain()
        if not status.valid:
            raise DigestMismatch(f"audit chain broken at seq {status.broken_at}")
        raw = self._read_audit()
        out = []
        for line in raw.split(b"\n")[:-1]:
            d = parse_canonical(line + b"\n")
            out.append(AuditRecord(**{**d, "subjects": tuple(d["subjects"])}))
        return out

    def verify_chain(self) -> ChainStatus:
        """Recompute every record hash and link; report the first broken seq."""
        raw = self._read_audit()
        if not raw:
            return ChainStatus(True, 0)
        segments = raw.split(b"\n")
        terminated = segments[-1] == b""
        lines = segments[:-1] if terminated else segments
        prev = GENESIS_HASH
        for i, line in enumerate(lines, start=1):
            try:
                rec = parse_canonical(line + b"\n")
                good = (
                    isinstance(rec, dict)
                    and set(rec) == AUDIT_KEYS
                    and rec["seq"] == i
                    and rec["prev_record_hash"] == prev
                    and rec["record_hash"] == _record_hash(rec)
                )
            except (ValueError, UnicodeDecodeError, TypeError):
                good = False
            if not good or (not terminated and i == len(lines)):
                return ChainStatus(False, i - 1, broken_at=i)
            prev = rec["record_hash"]
        return ChainStatus(True, len(lines))

    # -- introspection -------------------------------------------------------

    def history(self) -> list[dict[str, Any]]:
        """Headers of every stored version across all kinds."""
        out = []
        for kind in KINDS:
            names = self.environments() if kind == "environment" else [None]
            for name in names:
                for v in self.versions(kind, name):
                    header, _ = self.load_with_header(kind, v, name=name)
                    out.append(header)
        return out

    def tree_digest(self) -> str:
        """Digest over every committed file (used to prove immutability in tests)."""
        parts = []
        for path in sorted(self.root.rglob("*")):
            if path.is_file() and path.name != ".lock" and not path.name.startswith(".tmp-"):
                parts.append(f"{path.relative_to(self.root)}:{sha256_hex(path.read_bytes())}")
        return sha256_hex("\n".join(parts).encode())
