"""Static segregation of duties: rule definitions, assignment checks, directory audit.

All counting happens over closed sets: a user "holds" a role when it is in
their effective roles, and a permission when any effective role or direct
grant provides it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from . import model
from .errors import DuplicateId, InvalidEntity
from .model import PERMISSION_LEVEL, ROLE_LEVEL, DirectoryState, SodRule

__all__ = [
    "SodRule",
    "SodViolation",
    "add_sod_rule",
    "held_members",
    "check_assignment",
    "audit_sod",
    "audit_user",
    "sod_conflicts_between",
]

SCOPES = (ROLE_LEVEL, PERMISSION_LEVEL)


@dataclass(frozen=True)
class SodViolation:
    rule: str
    user: str
    witnesses: frozenset[str]
    via: Mapping[str, tuple[str, ...]] = field(default_factory=dict, compare=False, hash=False)

    @property
    def key(self) -> tuple[str, str, tuple[str, ...]]:
        return (self.rule, self.user, tuple(sorted(self.witnesses)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule": self.rule,
            "user": self.user,
            "witnesses": sorted(self.witnesses),
            "via": {k: list(v) for k, v in self.via.items()},
        }


def add_sod_rule(state: DirectoryState, rule: SodRule) -> DirectoryState:
    if not rule.id:
        raise InvalidEntity("SOD rule id must be non-empty")
    if rule.id in state.sod_rules:
        raise DuplicateId(f"SOD rule {rule.id!r} already exists")
    if rule.scope not in SCOPES:
        raise InvalidEntity(f"SOD scope must be one of {SCOPES}")
    members = frozenset(rule.conflict_set)
    if rule.cardinality < 2 or len(members) < rule.cardinality:
        raise InvalidEntity("SOD rules need |conflict_set| >= cardinality >= 2")
    target = state.roles if rule.scope == ROLE_LEVEL else state.permissions
    for m in sorted(members):
        if m not in target:
            raise model.DanglingReference(f"SOD rule {rule.id!r} references unknown {m!r}")
    rule = SodRule(rule.id, rule.scope, members, rule.cardinality, rule.rationale)
    return model._put(state, "sod_rules", rule.id, rule)


def _role_evidence(state: DirectoryState, user: str, witnesses: frozenset[str]) -> dict[str, tuple[str, ...]]:
    """For each held role, the assigned roles it is reached from."""
    assigned = model.assigned_roles(state, user)
    return {
        w: tuple(sorted(a for a in assigned if w in model.role_closure(state, a)))
        for w in sorted(witnesses)
    }


def _permission_evidence(state: DirectoryState, user: str, witnesses: frozenset[str]) -> dict[str, tuple[str, ...]]:
    """For each held permission, the effective roles or direct grants supplying it."""
    out: dict[str, list[str]] = {w: [] for w in witnesses}
    for r in sorted(model.effective_roles(state, user)):
        for p in model.direct_permissions(state, r):
            if p in out:
                out[p].append(f"role:{r}")
    for g in model.direct_user_grants(state, user):
        ps = state.permission_sets.get(g.permission_set)
        for p in ps.members if ps else ():
            if p in out:
                out[p].append(f"grant:{g.id}")
    return {k: tuple(v) for k, v in sorted(out.items())}


def held_members(state: DirectoryState, rule: SodRule, user: str) -> frozenset[str]:
    if rule.scope == ROLE_LEVEL:
        held = model.effective_roles(state, user)
    else:
        held = model.user_effective_permissions(state, user)
    return frozenset(held & rule.conflict_set)


def audit_user(state: DirectoryState, user: str) -> list[SodViolation]:
    out = []
    for rid in sorted(state.sod_rules):
        rule = state.sod_rules[rid]
        witnesses = held_members(state, rule, user)
        if len(witnesses) >= rule.cardinality:
            if rule.scope == ROLE_LEVEL:
                via = _role_evidence(state, user, witnesses)
            else:
                via = _permission_evidence(state, user, witnesses)
            out.append(SodViolation(rid, user, witnesses, via))
    return out


def audit_sod(state: DirectoryState) -> list[SodViolation]:
    """Every violation in *state*, ordered by rule id then user id."""
    if not state.sod_rules:
        return []
    by_user = {u: audit_user(state, u) for u in state.users}
    out = [v for u in by_user for v in by_user[u]]
    return sorted(out, key=lambda v: (v.rule, v.user))


def check_assignment(state: DirectoryState, user: str, role: str) -> list[SodViolation]:
    """Violations that assigning *role* to *user* would newly introduce.

    Violations the user already has with identical witnesses are not
    repeated, so a dirty brownfield directory does not block unrelated
    assignments.
    """
    model.get_user(state, user)
    model.get_role(state, role)
    if not state.sod_rules:
        return []
    before = {v.key for v in audit_user(state, user)}
    existing = state.assignments.get((user, role))
    if existing is not None and existing.active:
        hypothetical = state
    else:
        hypothetical = model._put(state, "assignments", (user, role), model.Assignment(user, role, True))
    return [v for v in audit_user(hypothetical, user) if v.key not in before]


def _violated_by(state: DirectoryState, rule: SodRule, roles: list[str]) -> bool:
    held: set[str] = set()
    for r in roles:
        if rule.scope == ROLE_LEVEL:
            held |= model.role_closure(state, r)
        else:
            held |= model.effective_permissions(state, r)
    return len(held & rule.conflict_set) >= rule.cardinality


def sod_conflicts_between(state: DirectoryState, role_a: str, role_b: str) -> list[str]:
    """Rules breached by holding both roles together but by neither one alone."""
    model.get_role(state, role_a)
    model.get_role(state, role_b)
    out = []
    for rid in sorted(state.sod_rules):
        rule = state.sod_rules[rid]
        if _violated_by(state, rule, [role_a, role_b]) and not (
            _violated_by(state, rule, [role_a]) or _violated_by(state, rule, [role_b])
        ):
            out.append(rid)
    return out
