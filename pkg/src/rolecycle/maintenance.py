"""Role maintenance: drift detection and re-definition planning.

:func:`detect_deviations` compares a deployed environment with the Roles
Catalogue, the org snapshot and (optionally) usage evidence, and returns a
deterministic :class:`MaintenanceReport`. :func:`plan_redefinition` turns each
deviation into a data-only work item; nothing here mutates an environment.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

from . import admin, model, sod
from .analysis import OrgSnapshot
from .catalogue import RolesCatalogue
from .engineering import ConceptEntry, RoleConceptModel, design_role
from .errors import EmptyPermissionSelection, InputError
from .management import Change, ChangeSet, Environment, diff_catalogue

DEFAULT_UNUSED_WINDOW_SECS = 90 * 24 * 3600

INFO, WARNING, CRITICAL = "info", "warning", "critical"
SEVERITY_RANK = {INFO: 0, WARNING: 1, CRITICAL: 2}

RE_ANALYZE = "re_analyze"
RE_DEFINE = "re_define"
UPDATE_CATALOGUE = "update_catalogue"
ADMINISTRATIVE_FIX = "administrative_fix"

# kind -> (severity, route)
KINDS = {
    "unauthorized_role": (WARNING, RE_DEFINE),
    "unauthorized_grant": (CRITICAL, ADMINISTRATIVE_FIX),
    "missing_role": (WARNING, UPDATE_CATALOGUE),
    "definition_drift": (WARNING, UPDATE_CATALOGUE),
    "duplicate_role": (INFO, RE_DEFINE),
    "unused_role": (INFO, RE_ANALYZE),
    "orphaned_assignment": (INFO, ADMINISTRATIVE_FIX),
    "sod_violation": (CRITICAL, RE_ANALYZE),
}


@dataclass(frozen=True)
class UsageRecord:
    user: str
    permission: str
    ts: int


def parse_usage_log(lines: Iterable[str | bytes]) -> list[UsageRecord]:
    """Parse NDJSON usage records; timestamps must not decrease."""
    out: list[UsageRecord] = []
    last = None
    for n, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = UsageRecord(str(d["user"]), str(d["permission"]), d["ts"])
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"usage log line {n}: {exc}") from None
        if not isinstance(rec.ts, int) or isinstance(rec.ts, bool):
            raise InputError(f"usage log line {n}: ts must be an integer")
        if last is not None and rec.ts < last:
            raise InputError(f"usage log line {n}: timestamp {rec.ts} goes backwards")
        last = rec.ts
        out.append(rec)
    return out


@dataclass(frozen=True)
class Deviation:
    kind: str
    subjects: tuple[str, ...]
    evidence: Mapping[str, Any]

    @property
    def severity(self) -> str:
        return KINDS[self.kind][0]

    @property
    def route(self) -> str:
        return KINDS[self.kind][1]

    @property
    def subject(self) -> str:
        return self.subjects[0] if self.subjects else ""

    @property
    def id(self) -> str:
        return f"{self.kind}:{'+'.join(self.subjects)}"

    def sort_key(self) -> tuple:
        return (-SEVERITY_RANK[self.severity], self.kind, self.subject, self.subjects)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind,
            "severity": self.severity,
            "subjects": list(self.subjects),
            "evidence": dict(self.evidence),
            "recommended_route": self.route,
        }


@dataclass(frozen=True)
class MaintenanceReport:
    trigger: str
    environment: str
    catalogue_versions: Mapping[str, Optional[int]]
    deviations: tuple[Deviation, ...]
    timestamp: int = 0

    @property
    def has_findings(self) -> bool:
        """True when any deviation is at warning or above."""
        return any(SEVERITY_RANK[d.severity] >= SEVERITY_RANK[WARNING] for d in self.deviations)

    def kinds(self) -> list[str]:
        return [d.kind for d in self.deviations]

    def to_dict(self, *, with_timestamp: bool = True) -> dict[str, Any]:
        d = {
            "trigger": self.trigger,
            "environment": self.environment,
            "catalogue_versions": dict(self.catalogue_versions),
            "deviations": [x.to_dict() for x in self.deviations],
        }
        if with_timestamp:
            d["timestamp"] = self.timestamp
        return d


def _catalogue_deviations(env: Environment, catalogue: RolesCatalogue) -> list[Deviation]:
    # Re-use the deployment diff per role so "what detect reports" and
    # "what deploy would change" can never disagree.
    state = env.state
    out: list[Deviation] = []
    for rid, defn in sorted(catalogue.entries.items()):
        current = state.roles.get(rid)
        if current is None or current.status != model.ACTIVE:
            out.append(
                Deviation("missing_role", (rid,), {"role": rid, "status": "absent" if current is None else current.status})
            )
            continue
        changes = diff_catalogue(RolesCatalogue({rid: defn}), replace(env, managed_roles=frozenset()))
        drift: dict[str, Any] = {}
        for c in changes.changes:
            if c.kind == "remove_grant":
                perms = sorted(c.before["grant"]["permissions"])
                out.append(
                    Deviation("unauthorized_grant", (c.subject, rid), {"role": rid, "grant": c.subject, "permissions": perms})
                )
            elif c.kind == "create_grant":
                want = set(c.after["grant"]["permissions"])
                have = set(c.before["grant"]["permissions"]) if c.before else set()
                drift.setdefault("grants", {})[c.subject] = {
                    "deployed": c.before["grant"] if c.before else None,
                    "catalogue": c.after["grant"],
                    "deployed_only": sorted(have - want),
                    "catalogue_only": sorted(want - have),
                }
            elif c.kind in ("add_edge", "remove_edge"):
                edge = (c.after or c.before)["junior"]
                key = "catalogue_only" if c.kind == "add_edge" else "deployed_only"
                drift.setdefault("juniors", {"deployed_only": [], "catalogue_only": []})[key].append(edge)
            elif c.kind == "update_role":
                before, after = c.before["role"], c.after["role"]
                drift["role"] = {k: {"deployed": before[k], "catalogue": after[k]} for k in sorted(after) if before.get(k) != after[k]}
        if drift:
            out.append(Deviation("definition_drift", (rid,), drift))
    return out


def _unused_deviations(
    state: model.DirectoryState, usage: Optional[Sequence[UsageRecord]], window: int
) -> list[Deviation]:
    out = []
    if usage:
        end = max(r.ts for r in usage)
        start = end - window
        recent = [r for r in usage if start <= r.ts <= end]
    for rid, role in sorted(state.roles.items()):
        if role.status != model.ACTIVE or admin.is_seeded_entity("role", rid):
            continue
        members = model.effective_members(state, rid)
        if not members:
            out.append(Deviation("unused_role", (rid,), {"role": rid, "members": 0, "window": None, "usage_records": None}))
            continue
        if usage:
            perms = model.effective_permissions(state, rid)
            hits = sum(1 for r in recent if r.permission in perms)
            if hits == 0:
                out.append(
                    Deviation(
                        "unused_role",
                        (rid,),
                        {"role": rid, "members": len(members), "window": [start, end], "usage_records": 0},
                    )
                )
    return out


def _duplicate_deviations(state: model.DirectoryState) -> list[Deviation]:
    groups: dict[frozenset[str], list[str]] = {}
    for rid, role in state.roles.items():
        if role.status == model.ACTIVE:
            groups.setdefault(model.effective_permissions(state, rid), []).append(rid)
    out = []
    for perms, roles in groups.items():
        if len(roles) > 1:
            roles = sorted(roles)
            out.append(Deviation("duplicate_role", tuple(roles), {"roles": roles, "permissions": sorted(perms)}))
    return out


def detect_deviations(
    environment: Environment,
    roles_catalogue: RolesCatalogue,
    concept_model: Optional[RoleConceptModel] = None,
    org_snapshot: Optional[OrgSnapshot] = None,
    usage_log: Optional[Sequence[UsageRecord]] = None,
    *,
    unused_window_secs: int = DEFAULT_UNUSED_WINDOW_SECS,
    trigger: str = "periodic",
    now: Optional[int] = None,
    concept_version: Optional[int] = None,
) -> MaintenanceReport:
    state = environment.state
    devs: list[Deviation] = []
    for rid, role in sorted(state.roles.items()):
        if role.status == model.ACTIVE and rid not in roles_catalogue.entries and not admin.is_seeded_entity("role", rid):
            perms = sorted(model.effective_permissions(state, rid))
            devs.append(Deviation("unauthorized_role", (rid,), {"role": rid, "permissions": perms}))
    devs += _catalogue_deviations(environment, roles_catalogue)
    devs += _duplicate_deviations(state)
    devs += _unused_deviations(state, usage_log, unused_window_secs)
    if org_snapshot is not None:
        for (user, role), a in sorted(state.assignments.items()):
            if a.active and user not in org_snapshot.users:
                devs.append(
                    Deviation("orphaned_assignment", (user, role), {"user": user, "role": role, "in_org_snapshot": False})
                )
    for v in sod.audit_sod(state):
        devs.append(Deviation("sod_violation", (v.rule, v.user), v.to_dict()))
    devs.sort(key=Deviation.sort_key)
    versions = {"roles": roles_catalogue.version, "concept": concept_version}
    return MaintenanceReport(
        trigger, environment.name, versions, tuple(devs), int(time.time() if now is None else now)
    )


def trigger(
    event: Optional[str],
    environment: Environment,
    roles_catalogue: RolesCatalogue,
    concept_model: Optional[RoleConceptModel],
    org_snapshot: Optional[OrgSnapshot],
    usage_log: Optional[Sequence[UsageRecord]] = None,
    *,
    since: Optional[int] = None,
    **params: Any,
) -> MaintenanceReport:
    """Run detection for a business event (e.g. ``org-change``) or a scheduled sweep."""
    if usage_log is not None and since is not None:
        usage_log = [r for r in usage_log if r.ts >= since]
    return detect_deviations(
        environment,
        roles_catalogue,
        concept_model,
        org_snapshot,
        usage_log,
        trigger="event" if event else "periodic",
        **params,
    )


# ---------------------------------------------------------------------------
# re-definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RedefinitionTask:
    id: str
    deviation: str
    route: str
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "deviation": self.deviation, "route": self.route, "payload": dict(self.payload)}


def _draft_for_role(
    state: model.DirectoryState, cm: RoleConceptModel, role_id: str, entry_id: str
) -> Optional[ConceptEntry]:
    existing = cm.for_role(role_id)
    if existing is not None:
        entry, _ = cm.fork(existing)
        return entry
    role = state.roles.get(role_id)
    if role is None:
        return None
    perms = model.direct_grant_permissions(state, role_id) or model.effective_permissions(state, role_id)
    payload = {
        "role": model.role_to_dict(role),
        "permissions": sorted(perms),
        "juniors": sorted(state.juniors_of.get(role_id, ())),
        "candidate_users": sorted(model.role_members(state, role_id)),
    }
    try:
        return design_role(payload, state, entry_id=entry_id)
    except EmptyPermissionSelection:
        return None


def plan_redefinition(
    report: MaintenanceReport,
    environment: Environment,
    roles_catalogue: RolesCatalogue,
    concept_model: Optional[RoleConceptModel] = None,
) -> list[RedefinitionTask]:
    """One task per deviation, shaped by its recommended route."""
    cm = concept_model or RoleConceptModel()
    state = environment.state
    tasks: list[RedefinitionTask] = []
    for n, dev in enumerate(report.deviations, start=1):
        route = dev.route
        payload: dict[str, Any]
        if route == RE_DEFINE:
            entry = _draft_for_role(state, cm, dev.subject, cm.next_entry_id())
            if entry is None:
                route = RE_ANALYZE
                payload = {"kind": "analysis_request", "reason": dev.kind, "subjects": list(dev.subjects)}
            else:
                cm = cm.put(entry)
                payload = {"kind": "concept_entry", "entry": entry.to_dict()}
                if dev.kind == "duplicate_role":
                    payload["merge_review"] = list(dev.subjects)
        elif route == RE_ANALYZE:
            payload = {
                "kind": "analysis_request",
                "reason": dev.kind,
                "subjects": list(dev.subjects),
                "environment": report.environment,
            }
        elif dev.kind == "unauthorized_grant":
            grant, role = dev.subjects
            g = state.grants[grant]
            before = {"role": role, "grant": {"id": grant, "permission_set": g.permission_set,
                                              "permissions": dev.evidence["permissions"], "instance_set": g.instance_set}}
            payload = {"kind": "change_set", "changes": ChangeSet((Change("remove_grant", grant, before, None),)).to_dict()}
        elif dev.kind == "orphaned_assignment":
            user, role = dev.subjects
            change = Change("revoke_assignment", f"{user}:{role}", {"user": user, "role": role}, None)
            payload = {"kind": "change_set", "changes": ChangeSet((change,)).to_dict()}
        else:
            # missing_role / definition_drift: the changes that would bring the
            # role back in line with its catalogue entry.
            rid = dev.subject
            defn = roles_catalogue.entries[rid]
            cs = diff_catalogue(RolesCatalogue({rid: defn}), replace(environment, managed_roles=frozenset()))
            payload = {"kind": "change_set", "changes": cs.to_dict()}
        tasks.append(RedefinitionTask(f"T{n:04d}", dev.id, route, payload))
    return tasks
