"""Role engineering: design, prototype, verify and sign off role concepts.

Concept entries move strictly draft -> prototyped -> verified -> signed_off.
Editing anything past draft forks a new version back at draft, and signed-off
entries can never be replaced in a :class:`RoleConceptModel`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable, Mapping, Optional
import uuid

from . import admin, model, sod
from .analysis import CandidateRole
from .catalogue import GrantSpec, RoleDefinition, install_definition, support_for
from .errors import (
    DanglingReference,
    EmptyPermissionSelection,
    ImmutableEntry,
    InvalidEntity,
    InvalidStatus,
    ModelError,
)
from .model import DirectoryState, Role, User

DRAFT = "draft"
PROTOTYPED = "prototyped"
VERIFIED = "verified"
SIGNED_OFF = "signed_off"
STATUSES = (DRAFT, PROTOTYPED, VERIFIED, SIGNED_OFF)


@dataclass(frozen=True)
class MembershipQualifier:
    """Conjunction of org-unit equality and optional job-function equality."""

    org_unit: str
    job_function: Optional[str] = None

    def matches(self, user: User) -> bool:
        if user.org_unit != self.org_unit:
            return False
        return self.job_function is None or user.job_function == self.job_function

    def to_dict(self) -> dict[str, Any]:
        return {"org_unit": self.org_unit, "job_function": self.job_function}


@dataclass(frozen=True)
class Lineage:
    candidate_id: str
    analysis_version: Optional[int] = None


@dataclass(frozen=True)
class ConceptEntry:
    id: str
    version: int
    role: Role
    permissions: frozenset[str]
    juniors: frozenset[str] = frozenset()
    candidate_users: frozenset[str] = frozenset()
    membership_qualifier: Optional[MembershipQualifier] = None
    sod_tags: frozenset[str] = frozenset()
    status: str = DRAFT
    lineage: Optional[Lineage] = None
    history: tuple[str, ...] = (DRAFT,)

    @property
    def key(self) -> tuple[str, int]:
        return (self.id, self.version)

    @property
    def grant(self) -> GrantSpec:
        return GrantSpec(f"{self.role.id}.grant", f"{self.role.id}.ps", self.permissions)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "version": self.version,
            "role": model.role_to_dict(self.role),
            "permissions": sorted(self.permissions),
            "juniors": sorted(self.juniors),
            "candidate_users": sorted(self.candidate_users),
            "membership_qualifier": self.membership_qualifier.to_dict() if self.membership_qualifier else None,
            "sod_tags": sorted(self.sod_tags),
            "status": self.status,
            "lineage": (
                {"candidate_id": self.lineage.candidate_id, "analysis_version": self.lineage.analysis_version}
                if self.lineage
                else None
            ),
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ConceptEntry":
        q, lin = d.get("membership_qualifier"), d.get("lineage")
        status = d.get("status", DRAFT)
        if status not in STATUSES:
            raise InvalidEntity(f"concept status {status!r}")
        return cls(
            id=d["id"],
            version=int(d["version"]),
            role=model.role_from_dict(d["role"]),
            permissions=frozenset(d["permissions"]),
            juniors=frozenset(d.get("juniors", ())),
            candidate_users=frozenset(d.get("candidate_users", ())),
            membership_qualifier=MembershipQualifier(q["org_unit"], q.get("job_function")) if q else None,
            sod_tags=frozenset(d.get("sod_tags", ())),
            status=status,
            lineage=Lineage(lin["candidate_id"], lin.get("analysis_version")) if lin else None,
            history=tuple(d.get("history", (status,))),
        )


def _advance(entry: ConceptEntry, status: str) -> ConceptEntry:
    return replace(entry, status=status, history=entry.history + (status,))


def _default_sod_tags(state: DirectoryState, role_id: str, perms: frozenset[str], juniors: frozenset[str]) -> frozenset[str]:
    roles = {role_id} | set(juniors)
    for j in juniors:
        if j in state.roles:
            roles |= model.role_closure(state, j)
    held_perms = _entry_permissions_from(state, perms, juniors)
    tags = set()
    for rule in state.sod_rules.values():
        held = roles if rule.scope == model.ROLE_LEVEL else held_perms
        if held & rule.conflict_set:
            tags.add(rule.id)
    return frozenset(tags)


def _entry_permissions_from(state: DirectoryState, perms: frozenset[str], juniors: frozenset[str]) -> frozenset[str]:
    out = set(perms)
    for j in juniors:
        if j in state.roles:
            out |= model.effective_permissions(state, j)
    return frozenset(out)


def entry_permissions(entry: ConceptEntry, reference: DirectoryState) -> frozenset[str]:
    """Selected permissions plus everything inherited from the designed juniors."""
    return _entry_permissions_from(reference, entry.permissions, entry.juniors)


def check_references(entry: ConceptEntry, reference: DirectoryState) -> None:
    if not entry.permissions:
        raise EmptyPermissionSelection(f"concept {entry.id!r} selects no permissions")
    if not entry.role.id:
        raise InvalidEntity("concept role needs an id")
    for p in sorted(entry.permissions):
        if p not in reference.permissions:
            raise DanglingReference(f"permission {p!r} does not exist")
    for u in sorted(entry.candidate_users):
        if u not in reference.users:
            raise DanglingReference(f"candidate user {u!r} does not exist")
    for j in sorted(entry.juniors):
        if j not in reference.roles:
            raise DanglingReference(f"junior role {j!r} does not exist")
    for r in sorted(entry.role.responsibilities):
        if r not in reference.responsibilities:
            raise DanglingReference(f"responsibility {r!r} does not exist")
    for ou in sorted(entry.role.org_scope or ()):
        if ou not in reference.org_units:
            raise DanglingReference(f"org unit {ou!r} does not exist")
    for t in sorted(entry.sod_tags):
        if t not in reference.sod_rules:
            raise DanglingReference(f"SOD rule {t!r} does not exist")
    q = entry.membership_qualifier
    if q is not None and q.org_unit not in reference.org_units:
        raise DanglingReference(f"qualifier org unit {q.org_unit!r} does not exist")


def design_role(
    source: CandidateRole | Mapping[str, Any],
    reference_state: DirectoryState,
    *,
    entry_id: Optional[str] = None,
    role_id: Optional[str] = None,
    name: str = "",
    category: str = "",
    juniors: Iterable[str] = (),
    qualifier: Optional[MembershipQualifier] = None,
    analysis_version: Optional[int] = None,
) -> ConceptEntry:
    """Start a draft concept from a mined candidate or a manual payload.

    Manual payloads use the serialized entry layout (``role``,
    ``permissions``, ``juniors``, ``candidate_users``,
    ``membership_qualifier``, ``sod_tags``); anything omitted defaults to empty.
    """
    entry_id = entry_id or f"CE-{uuid.uuid4().hex[:12]}"
    if isinstance(source, CandidateRole):
        rid = role_id or f"ROLE_{source.id.replace('-', '_')}"
        entry = ConceptEntry(
            id=entry_id,
            version=1,
            role=Role(rid, name or rid, category),
            permissions=frozenset(source.permissions),
            juniors=frozenset(juniors),
            candidate_users=frozenset(source.members),
            membership_qualifier=qualifier,
            lineage=Lineage(source.id, analysis_version),
        )
        tags = None
    else:
        payload = dict(source)
        role_d = dict(payload.get("role") or {})
        if role_id:
            role_d["id"] = role_id
        role_d.setdefault("id", "")
        q = payload.get("membership_qualifier")
        entry = ConceptEntry(
            id=entry_id,
            version=1,
            role=replace(model.role_from_dict(role_d), status=model.ACTIVE),
            permissions=frozenset(payload.get("permissions", ())),
            juniors=frozenset(payload.get("juniors", ())) | frozenset(juniors),
            candidate_users=frozenset(payload.get("candidate_users", ())),
            membership_qualifier=(
                MembershipQualifier(q["org_unit"], q.get("job_function")) if q else qualifier
            ),
        )
        tags = payload.get("sod_tags")
    check_references(entry, reference_state)
    if tags is None:
        sod_tags = _default_sod_tags(reference_state, entry.role.id, entry.permissions, entry.juniors)
    else:
        sod_tags = frozenset(tags)
    entry = replace(entry, sod_tags=sod_tags)
    check_references(entry, reference_state)
    return entry


def edit_entry(entry: ConceptEntry, next_version: Optional[int] = None, **changes: Any) -> ConceptEntry:
    """Apply design changes. Drafts change in place; anything later forks a new draft version."""
    allowed = {"role", "permissions", "juniors", "candidate_users", "membership_qualifier", "sod_tags"}
    unknown = set(changes) - allowed
    if unknown:
        raise InvalidEntity(f"cannot edit {sorted(unknown)}")
    for k in ("permissions", "juniors", "candidate_users", "sod_tags"):
        if k in changes:
            changes[k] = frozenset(changes[k])
    if "permissions" in changes and not changes["permissions"]:
        raise EmptyPermissionSelection("an edit cannot empty the permission selection")
    if entry.status == DRAFT:
        return replace(entry, **changes)
    version = next_version if next_version is not None else entry.version + 1
    if version <= entry.version:
        raise InvalidEntity("a fork must carry a higher version")
    return replace(entry, version=version, status=DRAFT, history=(DRAFT,), **changes)


def role_definition(entry: ConceptEntry, reference: DirectoryState, source: Optional[str] = None) -> RoleDefinition:
    return RoleDefinition(
        role=replace(entry.role, status=model.ACTIVE),
        grants=(entry.grant,),
        juniors=entry.juniors,
        sod_tags=entry.sod_tags,
        source=source or f"concept:{entry.id}@{entry.version}",
        support=support_for(reference, entry.role, entry.permissions),
    )


def build_sandbox(entry: ConceptEntry, reference_state: DirectoryState) -> DirectoryState:
    """Copy of the reference with the designed role, grant and candidate assignments applied."""
    check_references(entry, reference_state)
    sandbox = install_definition(reference_state, role_definition(entry, reference_state))
    model.validate(sandbox)
    for u in sorted(entry.candidate_users):
        a = sandbox.assignments.get((u, entry.role.id))
        if a is None or not a.active:
            sandbox = model.assign_role(sandbox, u, entry.role.id)
    return sandbox


def prototype_role(entry: ConceptEntry, reference_state: DirectoryState) -> tuple[DirectoryState, ConceptEntry]:
    if entry.status != DRAFT:
        raise InvalidStatus(f"only draft entries can be prototyped (entry is {entry.status})")
    sandbox = build_sandbox(entry, reference_state)
    return sandbox, _advance(entry, PROTOTYPED)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    details: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "details": dict(self.details)}


@dataclass(frozen=True)
class VerificationReport:
    entry_id: str
    version: int
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry": self.entry_id,
            "version": self.version,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
        }

    def to_text(self) -> str:
        lines = [f"verification of {self.entry_id} v{self.version}: {'PASSED' if self.passed else 'FAILED'}"]
        for c in self.checks:
            lines.append(f"  [{'ok' if c.passed else 'FAIL'}] {c.name}")
            for k, v in sorted(c.details.items()):
                lines.append(f"      {k}: {v}")
        return "\n".join(lines) + "\n"


def _comparison_sets(
    entry: ConceptEntry, reference: DirectoryState, signed_off: Iterable[ConceptEntry]
) -> list[tuple[str, frozenset[str]]]:
    out = []
    for rid in sorted(reference.roles):
        role = reference.roles[rid]
        if rid == entry.role.id or role.status != model.ACTIVE:
            continue
        out.append((f"role:{rid}", model.effective_permissions(reference, rid)))
    for other in signed_off:
        if other.id == entry.id or other.role.id == entry.role.id:
            continue
        out.append((f"concept:{other.id}@{other.version}", entry_permissions(other, reference)))
    return out


def jaccard(a: frozenset[str], b: frozenset[str]) -> Fraction:
    union = a | b
    return Fraction(len(a & b), len(union)) if union else Fraction(1)


def similarity_ranking(
    entry: ConceptEntry, reference: DirectoryState, signed_off: Iterable[ConceptEntry] = ()
) -> tuple[Fraction, list[str]]:
    """Highest Jaccard similarity against deployed and signed-off roles, with the subjects attaining it."""
    mine = entry_permissions(entry, reference)
    best, who = Fraction(0), []
    for subject, perms in _comparison_sets(entry, reference, signed_off):
        s = jaccard(mine, perms)
        if s > best:
            best, who = s, [subject]
        elif s == best and s > 0:
            who.append(subject)
    return best, who


def _new_violations(sandbox: DirectoryState, reference: DirectoryState) -> list[sod.SodViolation]:
    before = {v.key for v in sod.audit_sod(reference)}
    return [v for v in sod.audit_sod(sandbox) if v.key not in before]


def run_checks(
    entry: ConceptEntry,
    sandbox: DirectoryState,
    reference_state: DirectoryState,
    signed_off: Iterable[ConceptEntry] = (),
) -> VerificationReport:
    checks = []
    new = _new_violations(sandbox, reference_state)
    checks.append(CheckResult("sod", not new, {"new_violations": [v.to_dict() for v in new]} if new else {}))

    best, who = similarity_ranking(entry, reference_state, signed_off)
    checks.append(
        CheckResult("duplicate", best < 1, {"max_similarity": str(best), "most_similar": who} if who else {})
    )

    q = entry.membership_qualifier
    if q is None:
        checks.append(CheckResult("membership_qualifier", True, {"qualifier": None}))
    else:
        satisfying = frozenset(u.id for u in reference_state.users.values() if q.matches(u))
        missing = sorted(entry.candidate_users - satisfying)
        extra = sorted(satisfying - entry.candidate_users)
        details = {}
        if missing:
            details["candidates_not_matching"] = missing
        if extra:
            details["non_candidates_matching"] = extra
        checks.append(CheckResult("membership_qualifier", not missing and not extra, details))

    unknown = sorted(p for p in entry.permissions if p not in reference_state.permissions)
    bad_kind = sorted(
        p
        for p in entry.permissions
        if p in reference_state.permissions and reference_state.permissions[p].kind not in model.PERMISSION_KINDS
    )
    details = {}
    if unknown:
        details["unknown"] = unknown
    if bad_kind:
        details["bad_kind"] = bad_kind
    checks.append(CheckResult("permissions", not unknown and not bad_kind, details))
    return VerificationReport(entry.id, entry.version, tuple(checks))


def verify_role(
    entry: ConceptEntry,
    sandbox: DirectoryState,
    reference_state: DirectoryState,
    signed_off: Iterable[ConceptEntry] = (),
) -> tuple[VerificationReport, ConceptEntry]:
    """Review a prototyped entry; it advances to verified only if every check passes."""
    if entry.status != PROTOTYPED:
        raise InvalidStatus(f"only prototyped entries can be verified (entry is {entry.status})")
    report = run_checks(entry, sandbox, reference_state, signed_off)
    return report, (_advance(entry, VERIFIED) if report.passed else entry)


def signoff(
    entry: ConceptEntry,
    acting_user: str,
    state: DirectoryState,
    concept_model: Optional["RoleConceptModel"] = None,
) -> tuple[ConceptEntry, "RoleConceptModel"]:
    """Sign off a verified entry and append it to the concept model."""
    admin.require(state, acting_user, admin.FUNCTIONAL_ADMINISTRATOR)
    if entry.status != VERIFIED:
        raise InvalidStatus(f"only verified entries can be signed off (entry is {entry.status})")
    signed = _advance(entry, SIGNED_OFF)
    cm = concept_model if concept_model is not None else RoleConceptModel()
    return signed, cm.put(signed)


def signoff_finding(entry: ConceptEntry) -> dict[str, Any]:
    """Cross-reference written back into the analysis catalogue on sign-off."""
    return {
        "type": "signoff",
        "concept": entry.id,
        "version": entry.version,
        "role": entry.role.id,
        "candidate": entry.lineage.candidate_id if entry.lineage else None,
        "analysis_version": entry.lineage.analysis_version if entry.lineage else None,
        "permissions": sorted(entry.permissions),
        "candidate_users": sorted(entry.candidate_users),
    }


@dataclass(frozen=True)
class QualityMetrics:
    user_count: int
    permission_count: int
    hierarchy_depth: int
    max_similarity: Fraction
    sod_adjacent: bool
    violation_count: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_count": self.user_count,
            "permission_count": self.permission_count,
            "hierarchy_depth": self.hierarchy_depth,
            "max_similarity": f"{self.max_similarity.numerator}/{self.max_similarity.denominator}",
            "sod_adjacent": self.sod_adjacent,
            "violation_count": self.violation_count,
        }


def compute_quality_metrics(
    entry: ConceptEntry, reference_state: DirectoryState, signed_off: Iterable[ConceptEntry] = ()
) -> QualityMetrics:
    signed_off = list(signed_off)
    perms = entry_permissions(entry, reference_state)
    depth = 0
    for j in entry.juniors:
        role = reference_state.roles.get(j)
        if role is not None and role.status == model.ACTIVE:
            depth = max(depth, 1 + model.hierarchy_depth(reference_state, j))
    best, _ = similarity_ranking(entry, reference_state, signed_off)
    roles = {entry.role.id} | set(entry.juniors)
    for j in entry.juniors:
        if j in reference_state.roles:
            roles |= model.role_closure(reference_state, j)
    adjacent = any(
        rule.conflict_set & (roles if rule.scope == model.ROLE_LEVEL else perms)
        for rule in reference_state.sod_rules.values()
    )
    try:
        violations = len(_new_violations(build_sandbox(entry, reference_state), reference_state))
    except (ModelError, EmptyPermissionSelection):
        violations = 0
    return QualityMetrics(
        user_count=len(entry.candidate_users),
        permission_count=len(perms),
        hierarchy_depth=depth,
        max_similarity=best,
        sod_adjacent=adjacent,
        violation_count=violations,
    )


@dataclass(frozen=True)
class RoleConceptModel:
    """Every concept entry version, keyed by (id, version)."""

    entries: Mapping[tuple[str, int], ConceptEntry] = field(default_factory=dict)

    def put(self, entry: ConceptEntry) -> "RoleConceptModel":
        if not entry.history or entry.history[-1] != entry.status:
            raise InvalidStatus(f"{entry.id} v{entry.version}: status {entry.status} does not match its history")
        if entry.status == SIGNED_OFF and entry.history[-2:] != (VERIFIED, SIGNED_OFF):
            raise InvalidStatus(f"{entry.id} v{entry.version} cannot be signed off without verification")
        current = self.entries.get(entry.key)
        if current is not None and current.status == SIGNED_OFF and current != entry:
            raise ImmutableEntry(f"{entry.id} v{entry.version} is signed off and immutable")
        return RoleConceptModel({**self.entries, entry.key: entry})

    def get(self, entry_id: str, version: Optional[int] = None) -> ConceptEntry:
        if version is None:
            versions = [v for (i, v) in self.entries if i == entry_id]
            if not versions:
                raise DanglingReference(f"no concept entry {entry_id!r}")
            version = max(versions)
        try:
            return self.entries[(entry_id, version)]
        except KeyError:
            raise DanglingReference(f"no concept entry {entry_id!r} v{version}") from None

    def next_version(self, entry_id: str) -> int:
        return max((v for (i, v) in self.entries if i == entry_id), default=0) + 1

    def next_entry_id(self) -> str:
        n = len({i for (i, _) in self.entries}) + 1
        while any(i == f"CE{n:04d}" for (i, _) in self.entries):
            n += 1
        return f"CE{n:04d}"

    def fork(self, entry: ConceptEntry, **changes: Any) -> tuple[ConceptEntry, "RoleConceptModel"]:
        nv = None if entry.status == DRAFT else self.next_version(entry.id)
        edited = edit_entry(entry, nv, **changes)
        return edited, self.put(edited)

    def signed_off(self) -> list[ConceptEntry]:
        """Latest signed-off version of each entry id."""
        latest: dict[str, ConceptEntry] = {}
        for (i, v), e in sorted(self.entries.items()):
            if e.status == SIGNED_OFF:
                latest[i] = e
        return [latest[i] for i in sorted(latest)]

    def for_role(self, role_id: str) -> Optional[ConceptEntry]:
        """Most recent signed-off entry defining *role_id*."""
        hits = [e for e in self.signed_off() if e.role.id == role_id]
        return max(hits, key=lambda e: (e.version, e.id)) if hits else None

    def to_dict(self) -> dict[str, Any]:
        return {"entries": [e.to_dict() for _, e in sorted(self.entries.items())]}


def concept_model_from_dict(d: Mapping[str, Any]) -> RoleConceptModel:
    entries = {}
    for raw in d.get("entries", ()):
        e = ConceptEntry.from_dict(raw)
        if e.key in entries:
            raise InvalidEntity(f"duplicate concept entry {e.id} v{e.version}")
        if e.status == SIGNED_OFF and VERIFIED not in e.history:
            raise InvalidEntity(f"{e.id} v{e.version} is signed off without verification")
        entries[e.key] = e
    return RoleConceptModel(entries)


def load_concept_model(store) -> RoleConceptModel:
    if store.latest_version("concept") is None:
        return RoleConceptModel()
    return concept_model_from_dict(store.load("concept"))


def save_concept_model(store, cm: RoleConceptModel, previous: Optional[RoleConceptModel] = None) -> int:
    """Persist *cm*, refusing to drop or alter any signed-off entry of *previous*."""
    if previous is not None:
        for key, e in previous.entries.items():
            if e.status == SIGNED_OFF and cm.entries.get(key) != e:
                raise ImmutableEntry(f"{e.id} v{e.version} is signed off and immutable")
    return store.save("concept", cm.to_dict())
