"""Role definitions and the Roles Catalogue.

A :class:`RoleDefinition` is everything needed to stand a role up in an
empty environment: the role record, its grants (each with the permission
set it binds), the juniors it inherits from, and the supporting permission,
menu, responsibility and org-unit definitions it references.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional

from . import model
from .errors import DanglingReference, InvalidEntity
from .model import (
    DirectoryState,
    Grant,
    Menu,
    MenuEntry,
    OrgUnit,
    Permission,
    PermissionSet,
    Responsibility,
    Role,
)


@dataclass(frozen=True)
class GrantSpec:
    id: str
    permission_set: str
    permissions: frozenset[str]
    instance_set: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "permission_set": self.permission_set,
            "permissions": sorted(self.permissions),
            "instance_set": self.instance_set,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GrantSpec":
        return cls(d["id"], d["permission_set"], frozenset(d["permissions"]), d.get("instance_set"))


@dataclass(frozen=True)
class RoleDefinition:
    role: Role
    grants: tuple[GrantSpec, ...] = ()
    juniors: frozenset[str] = frozenset()
    sod_tags: frozenset[str] = frozenset()
    source: str = ""
    support: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def id(self) -> str:
        return self.role.id

    @property
    def direct_permissions(self) -> frozenset[str]:
        out: set[str] = set()
        for g in self.grants:
            out |= g.permissions
        return frozenset(out)

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": model.role_to_dict(self.role),
            "grants": [g.to_dict() for g in sorted(self.grants, key=lambda g: g.id)],
            "juniors": sorted(self.juniors),
            "sod_tags": sorted(self.sod_tags),
            "source": self.source,
            "support": dict(self.support),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RoleDefinition":
        return cls(
            model.role_from_dict(d["role"]),
            tuple(sorted((GrantSpec.from_dict(g) for g in d["grants"]), key=lambda g: g.id)),
            frozenset(d.get("juniors", ())),
            frozenset(d.get("sod_tags", ())),
            d.get("source", ""),
            dict(d.get("support", {})),
        )


def support_for(state: DirectoryState, role: Role, permissions: frozenset[str]) -> dict[str, Any]:
    """Serialized definitions of every entity the role relies on."""
    full = model.state_to_dict(state)
    perms = set(permissions)
    menus: set[str] = set()
    resps = set(role.responsibilities)
    for rid in resps:
        if rid not in state.responsibilities:
            raise DanglingReference(f"responsibility {rid!r} does not exist")
        stack = [state.responsibilities[rid].menu]
        while stack:
            mid = stack.pop()
            if mid in menus:
                continue
            menus.add(mid)
            for e in state.menus[mid].entries:
                if e.kind == "permission":
                    perms.add(e.ref)
                else:
                    stack.append(e.ref)
    units: set[str] = set()
    for ou in role.org_scope or ():
        while ou is not None and ou not in units:
            if ou not in state.org_units:
                raise DanglingReference(f"org unit {ou!r} does not exist")
            units.add(ou)
            ou = state.org_units[ou].parent
    for p in perms:
        if p not in state.permissions:
            raise DanglingReference(f"permission {p!r} does not exist")
    return {
        "permissions": {p: full["permissions"][p] for p in sorted(perms)},
        "menus": {m: full["menus"][m] for m in sorted(menus)},
        "responsibilities": {r: full["responsibilities"][r] for r in sorted(resps)},
        "org_units": {u: full["org_units"][u] for u in sorted(units)},
    }


def role_grant_specs(state: DirectoryState, role_id: str) -> tuple[GrantSpec, ...]:
    specs = []
    for g in state.grants_by_grantee.get(("role", role_id), ()):
        ps = state.permission_sets[g.permission_set]
        specs.append(GrantSpec(g.id, g.permission_set, ps.members, g.instance_set))
    return tuple(specs)


def definition_from_state(
    state: DirectoryState, role_id: str, source: str = "", sod_tags: frozenset[str] = frozenset()
) -> RoleDefinition:
    """Capture a deployed role as a definition (grants, juniors, support)."""
    role = model.get_role(state, role_id)
    grants = role_grant_specs(state, role_id)
    perms = frozenset().union(*(g.permissions for g in grants)) if grants else frozenset()
    juniors = frozenset(state.juniors_of.get(role_id, ()))
    return RoleDefinition(
        replace(role, status=model.ACTIVE), grants, juniors, sod_tags, source, support_for(state, role, perms)
    )


def ensure_support(state: DirectoryState, support: Mapping[str, Any]) -> DirectoryState:
    """Create any supporting entity that is missing; existing ones are left alone."""
    units = dict(support.get("org_units", {}))
    pending = sorted(u for u in units if u not in state.org_units)
    while pending:
        progressed = False
        for uid in list(pending):
            d = units[uid]
            if d.get("parent") is None or d["parent"] in state.org_units:
                state = model.add_org_unit(state, OrgUnit(d["id"], d.get("name", ""), d.get("parent")))
                pending.remove(uid)
                progressed = True
        if not progressed:
            raise DanglingReference(f"org units {pending} have unresolved parents")
    for pid, d in sorted(support.get("permissions", {}).items()):
        if pid not in state.permissions:
            state = model.add_permission(
                state,
                Permission(d["id"], d.get("function_name", ""), d.get("kind", model.EXECUTABLE), d.get("description", "")),
            )
    menus = dict(support.get("menus", {}))
    pending = sorted(m for m in menus if m not in state.menus)
    while pending:
        progressed = False
        for mid in list(pending):
            entries = tuple(MenuEntry(k, r) for k, r in menus[mid].get("entries", ()))
            if all(e.kind == "permission" or e.ref in state.menus for e in entries):
                state = model.add_menu(state, Menu(mid, entries))
                pending.remove(mid)
                progressed = True
        if not progressed:
            raise DanglingReference(f"menus {pending} have unresolved submenus")
    for rid, d in sorted(support.get("responsibilities", {}).items()):
        if rid not in state.responsibilities:
            state = model.add_responsibility(state, Responsibility(d["id"], d["menu"], d.get("name", "")))
    return state


def install_grant(state: DirectoryState, role_id: str, spec: GrantSpec) -> DirectoryState:
    state = model.put_permission_set(state, PermissionSet(spec.permission_set, spec.permissions))
    return model.put_grant(state, Grant(spec.id, "role", role_id, spec.permission_set, spec.instance_set))


def install_definition(state: DirectoryState, defn: RoleDefinition) -> DirectoryState:
    """Make *state* carry exactly *defn* for its role (no acyclicity check).

    Callers run :func:`rolecycle.model.validate` on the result.
    """
    state = ensure_support(state, defn.support)
    role = replace(defn.role, status=model.ACTIVE)
    if role.id in state.roles:
        state = model.update_role(state, role)
    else:
        state = model.add_role(state, role)
    wanted = {g.id for g in defn.grants}
    for g in state.grants_by_grantee.get(("role", role.id), ()):
        if g.id not in wanted:
            state = model.remove_grant(state, g.id)
    for spec in defn.grants:
        state = install_grant(state, role.id, spec)
    for j in sorted(defn.juniors):
        if j not in state.roles:
            raise DanglingReference(f"junior role {j!r} does not exist")
    edges = {e for e in state.edges if e[0] != role.id} | {(role.id, j) for j in defn.juniors}
    return replace(state, edges=frozenset(edges))


@dataclass(frozen=True)
class RolesCatalogue:
    """Authoritative role definitions, keyed by role id."""

    entries: Mapping[str, RoleDefinition] = field(default_factory=dict)
    version: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        return {"entries": {k: d.to_dict() for k, d in sorted(self.entries.items())}}

    def supersede(self, defn: RoleDefinition) -> "RolesCatalogue":
        return RolesCatalogue({**self.entries, defn.id: defn}, self.version)

    def remove(self, role_id: str) -> "RolesCatalogue":
        entries = dict(self.entries)
        entries.pop(role_id, None)
        return RolesCatalogue(entries, self.version)


def catalogue_from_dict(d: Mapping[str, Any], version: Optional[int] = None) -> RolesCatalogue:
    entries = {}
    for k, v in d.get("entries", {}).items():
        defn = RoleDefinition.from_dict(v)
        if defn.id != k:
            raise InvalidEntity(f"catalogue key {k!r} does not match role id {defn.id!r}")
        if not defn.source:
            raise InvalidEntity(f"catalogue entry {k!r} has no provenance")
        entries[k] = defn
    return RolesCatalogue(entries, version)


def load_roles_catalogue(store, version: Optional[int] = None) -> RolesCatalogue:
    header, body = store.load_with_header("roles", version)
    return catalogue_from_dict(body, header["version"])


def save_roles_catalogue(store, catalogue: RolesCatalogue) -> RolesCatalogue:
    version = store.save("roles", catalogue.to_dict())
    return RolesCatalogue(catalogue.entries, version)
