"""RBAC kernel: entities, role-hierarchy closure, grant resolution, access decisions.

A :class:`DirectoryState` is an immutable value. Every operation here returns
a new state; the argument is never touched, so snapshots can be shared freely
between readers.

Hierarchy semantics: an edge ``(senior, junior)`` means the senior inherits
everything the junior has. Archived roles are skipped entirely during
traversal, neither contributing permissions nor passing on their juniors'.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, Mapping, Optional

from .errors import (
    CycleDetected,
    DanglingReference,
    DuplicateAssignment,
    DuplicateId,
    InactiveRole,
    InvalidEntity,
    NoSuchAssignment,
    UnknownPermission,
    UnknownRole,
    UnknownUser,
)

EXECUTABLE = "executable"
ABSTRACT = "abstract"
PERMISSION_KINDS = (EXECUTABLE, ABSTRACT)

ACTIVE = "active"
ARCHIVED = "archived"
DISABLED = "disabled"

GRANTEE_KINDS = ("role", "user", "group")

ROLE_LEVEL = "role_level"
PERMISSION_LEVEL = "permission_level"


@dataclass(frozen=True)
class Permission:
    id: str
    function_name: str = ""
    kind: str = EXECUTABLE
    description: str = ""


@dataclass(frozen=True)
class MenuEntry:
    kind: str  # "permission" or "menu"
    ref: str


@dataclass(frozen=True)
class Menu:
    id: str
    entries: tuple[MenuEntry, ...] = ()


@dataclass(frozen=True)
class Responsibility:
    id: str
    menu: str
    name: str = ""


@dataclass(frozen=True)
class PermissionSet:
    id: str
    members: frozenset[str]


@dataclass(frozen=True)
class ObjectInstanceSet:
    """Data-scope tag. The predicate is opaque and never evaluated."""

    id: str
    object_name: str = ""
    predicate_label: str = ""


@dataclass(frozen=True)
class Grant:
    id: str
    grantee_kind: str
    grantee: str
    permission_set: str
    instance_set: Optional[str] = None


@dataclass(frozen=True)
class Role:
    id: str
    name: str = ""
    category: str = ""
    responsibilities: frozenset[str] = frozenset()
    org_scope: Optional[frozenset[str]] = None
    status: str = ACTIVE

    def in_scope(self, org_context: Optional[str]) -> bool:
        """Globally scoped roles match any context; scoped ones need a member unit."""
        if not self.org_scope:
            return True
        return org_context is not None and org_context in self.org_scope


@dataclass(frozen=True)
class User:
    id: str
    display_name: str = ""
    org_unit: Optional[str] = None
    status: str = ACTIVE
    job_function: Optional[str] = None


@dataclass(frozen=True)
class UserGroup:
    id: str
    members: frozenset[str] = frozenset()


@dataclass(frozen=True)
class OrgUnit:
    id: str
    name: str = ""
    parent: Optional[str] = None


@dataclass(frozen=True)
class Assignment:
    user: str
    role: str
    active: bool = True


@dataclass(frozen=True)
class SodRule:
    """No user may hold ``cardinality`` or more members of ``conflict_set``."""

    id: str
    scope: str
    conflict_set: frozenset[str]
    cardinality: int = 2
    rationale: str = ""


@dataclass(frozen=True)
class AccessDecision:
    user: str
    permission: str
    org_context: Optional[str]
    allowed: bool
    role: Optional[str] = None
    source: Optional[str] = None
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "user": self.user,
            "permission": self.permission,
            "org_context": self.org_context,
            "decision": "allow" if self.allowed else "deny",
            "role": self.role,
            "source": self.source,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class DirectoryState:
    permissions: Mapping[str, Permission] = field(default_factory=dict)
    menus: Mapping[str, Menu] = field(default_factory=dict)
    responsibilities: Mapping[str, Responsibility] = field(default_factory=dict)
    permission_sets: Mapping[str, PermissionSet] = field(default_factory=dict)
    instance_sets: Mapping[str, ObjectInstanceSet] = field(default_factory=dict)
    grants: Mapping[str, Grant] = field(default_factory=dict)
    roles: Mapping[str, Role] = field(default_factory=dict)
    users: Mapping[str, User] = field(default_factory=dict)
    groups: Mapping[str, UserGroup] = field(default_factory=dict)
    org_units: Mapping[str, OrgUnit] = field(default_factory=dict)
    edges: frozenset[tuple[str, str]] = frozenset()
    assignments: Mapping[tuple[str, str], Assignment] = field(default_factory=dict)
    sod_rules: Mapping[str, SodRule] = field(default_factory=dict)

    # Derived indexes. cached_property writes straight into __dict__, which
    # is fine on a frozen dataclass; replace() starts with a fresh cache.

    @cached_property
    def juniors_of(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {}
        for senior, junior in self.edges:
            out.setdefault(senior, []).append(junior)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def seniors_of(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {}
        for senior, junior in self.edges:
            out.setdefault(junior, []).append(senior)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def grants_by_grantee(self) -> dict[tuple[str, str], tuple[Grant, ...]]:
        out: dict[tuple[str, str], list[Grant]] = {}
        for g in self.grants.values():
            out.setdefault((g.grantee_kind, g.grantee), []).append(g)
        return {k: tuple(sorted(v, key=lambda g: g.id)) for k, v in out.items()}

    @cached_property
    def groups_of_user(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {}
        for grp in self.groups.values():
            for u in grp.members:
                out.setdefault(u, []).append(grp.id)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def _direct_sources(self) -> dict[str, dict[str, frozenset[str]]]:
        return {}

    @cached_property
    def _closures(self) -> dict[str, frozenset[str]]:
        return {}


# ---------------------------------------------------------------------------
# reads
# ---------------------------------------------------------------------------


def get_role(state: DirectoryState, role_id: str) -> Role:
    try:
        return state.roles[role_id]
    except KeyError:
        raise UnknownRole(f"unknown role {role_id!r}") from None


def get_user(state: DirectoryState, user_id: str) -> User:
    try:
        return state.users[user_id]
    except KeyError:
        raise UnknownUser(f"unknown user {user_id!r}") from None


def menu_permissions(state: DirectoryState, menu_id: str) -> frozenset[str]:
    """Every permission reachable through a menu and its submenus."""
    out: set[str] = set()
    stack = [menu_id]
    seen: set[str] = set()
    while stack:
        mid = stack.pop()
        if mid in seen or mid not in state.menus:
            continue
        seen.add(mid)
        for entry in state.menus[mid].entries:
            if entry.kind == "permission":
                out.add(entry.ref)
            else:
                stack.append(entry.ref)
    return frozenset(out)


def direct_sources(state: DirectoryState, role_id: str) -> dict[str, frozenset[str]]:
    """Map permission id -> source tags attached directly to *role_id*.

    Source tags are ``grant:<id>`` or ``responsibility:<id>``.
    """
    cache = state._direct_sources
    if role_id in cache:
        return cache[role_id]
    role = get_role(state, role_id)
    acc: dict[str, set[str]] = {}
    for g in state.grants_by_grantee.get(("role", role_id), ()):
        ps = state.permission_sets.get(g.permission_set)
        if ps is None:
            continue
        for p in ps.members:
            acc.setdefault(p, set()).add(f"grant:{g.id}")
    for rid in role.responsibilities:
        resp = state.responsibilities.get(rid)
        if resp is None:
            continue
        for p in menu_permissions(state, resp.menu):
            acc.setdefault(p, set()).add(f"responsibility:{rid}")
    result = {p: frozenset(s) for p, s in acc.items()}
    cache[role_id] = result
    return result


def direct_permissions(state: DirectoryState, role_id: str) -> frozenset[str]:
    return frozenset(direct_sources(state, role_id))


def direct_grant_permissions(state: DirectoryState, role_id: str) -> frozenset[str]:
    """Permissions the role gets from its own grants (responsibilities excluded)."""
    get_role(state, role_id)
    out: set[str] = set()
    for g in state.grants_by_grantee.get(("role", role_id), ()):
        ps = state.permission_sets.get(g.permission_set)
        if ps is not None:
            out |= ps.members
    return frozenset(out)


def role_closure(state: DirectoryState, role_id: str) -> frozenset[str]:
    """*role_id* plus every active junior reachable from it."""
    cache = state._closures
    if role_id in cache:
        return cache[role_id]
    get_role(state, role_id)
    seen = {role_id}
    stack = [role_id]
    while stack:
        r = stack.pop()
        for j in state.juniors_of.get(r, ()):
            if j in seen:
                continue
            jr = state.roles.get(j)
            if jr is None or jr.status != ACTIVE:
                continue
            seen.add(j)
            stack.append(j)
    result = frozenset(seen)
    cache[role_id] = result
    return result


def effective_permissions(state: DirectoryState, role_id: str) -> frozenset[str]:
    """Union of direct permissions over the role's hierarchy closure."""
    out: set[str] = set()
    for r in role_closure(state, role_id):
        out |= direct_sources(state, r).keys()
    return frozenset(out)


def assigned_roles(state: DirectoryState, user_id: str) -> frozenset[str]:
    """Roles directly and actively assigned to the user (archived excluded)."""
    get_user(state, user_id)
    return frozenset(
        a.role
        for a in state.assignments.values()
        if a.user == user_id and a.active and state.roles[a.role].status == ACTIVE
    )


def effective_roles(state: DirectoryState, user_id: str) -> frozenset[str]:
    out: set[str] = set()
    for r in assigned_roles(state, user_id):
        out |= role_closure(state, r)
    return frozenset(out)


def role_members(state: DirectoryState, role_id: str) -> frozenset[str]:
    """Users holding an active assignment to *role_id* itself."""
    return frozenset(a.user for a in state.assignments.values() if a.role == role_id and a.active)


def effective_members(state: DirectoryState, role_id: str) -> frozenset[str]:
    """Users whose effective roles include *role_id*."""
    return frozenset(u for u in state.users if role_id in effective_roles(state, u))


def direct_user_grants(state: DirectoryState, user_id: str) -> tuple[Grant, ...]:
    """Grants naming the user directly or one of the user's groups."""
    grants = list(state.grants_by_grantee.get(("user", user_id), ()))
    for gid in state.groups_of_user.get(user_id, ()):
        grants.extend(state.grants_by_grantee.get(("group", gid), ()))
    return tuple(sorted(grants, key=lambda g: g.id))


def user_permission_pool(state: DirectoryState, user_id: str) -> frozenset[str]:
    """Permissions reaching the user outside of roles (user and group grants)."""
    out: set[str] = set()
    for g in direct_user_grants(state, user_id):
        ps = state.permission_sets.get(g.permission_set)
        if ps is not None:
            out |= ps.members
    return frozenset(out)


def user_effective_permissions(state: DirectoryState, user_id: str) -> frozenset[str]:
    """All permissions (any kind, any org scope) the user holds."""
    out = set(user_permission_pool(state, user_id))
    for r in effective_roles(state, user_id):
        out |= effective_permissions(state, r)
    return frozenset(out)


def check_access(
    state: DirectoryState,
    user_id: str,
    permission_id: str,
    org_context: Optional[str] = None,
) -> AccessDecision:
    """Decide whether *user_id* may invoke *permission_id*.

    The trace names the lexicographically smallest witnessing (role, source)
    pair; direct user or group grants are only reported when no role
    witnesses the permission.
    """
    user = get_user(state, user_id)
    if permission_id not in state.permissions:
        raise UnknownPermission(f"unknown permission {permission_id!r}")

    def deny(reason: str) -> AccessDecision:
        return AccessDecision(user_id, permission_id, org_context, False, reason=reason)

    if state.permissions[permission_id].kind != EXECUTABLE:
        return deny("permission is abstract and cannot be invoked")
    if user.status != ACTIVE:
        return deny("user is disabled")

    best: Optional[tuple[str, str]] = None
    for r in sorted(effective_roles(state, user_id)):
        if not state.roles[r].in_scope(org_context):
            continue
        for rr in role_closure(state, r):
            for src in direct_sources(state, rr).get(permission_id, ()):
                if best is None or (r, src) < best:
                    best = (r, src)
        if best is not None and best[0] == r:
            break
    if best is not None:
        return AccessDecision(
            user_id, permission_id, org_context, True, best[0], best[1], f"granted via role {best[0]}"
        )
    for g in direct_user_grants(state, user_id):
        ps = state.permission_sets.get(g.permission_set)
        if ps is not None and permission_id in ps.members:
            return AccessDecision(
                user_id,
                permission_id,
                org_context,
                True,
                None,
                f"grant:{g.id}",
                f"granted directly to {g.grantee_kind} {g.grantee}",
            )
    return deny("no effective role or direct grant provides the permission")


def reachable(state: DirectoryState, start: str, target: str) -> bool:
    """True when *target* is reachable from *start* along edges (any status)."""
    stack = [start]
    seen = set()
    while stack:
        r = stack.pop()
        if r == target:
            return True
        if r in seen:
            continue
        seen.add(r)
        stack.extend(state.juniors_of.get(r, ()))
    return False


def topological_order(state: DirectoryState) -> list[str]:
    """Roles ordered seniors-first; raises CycleDetected if none exists."""
    indeg = {r: 0 for r in state.roles}
    for _, j in state.edges:
        indeg[j] = indeg.get(j, 0) + 1
    ready = sorted(r for r, d in indeg.items() if d == 0)
    order: list[str] = []
    while ready:
        r = ready.pop(0)
        order.append(r)
        for j in state.juniors_of.get(r, ()):
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
        ready.sort()
    if len(order) != len(indeg):
        raise CycleDetected("role hierarchy contains a cycle")
    return order


def hierarchy_depth(state: DirectoryState, role_id: str) -> int:
    """Length of the longest chain of active juniors below *role_id*."""
    memo: dict[str, int] = {}

    def depth(r: str) -> int:
        if r not in memo:
            kids = [
                j for j in state.juniors_of.get(r, ()) if state.roles.get(j) and state.roles[j].status == ACTIVE
            ]
            memo[r] = 1 + max(map(depth, kids)) if kids else 0
        return memo[r]

    return depth(role_id)


# ---------------------------------------------------------------------------
# mutations
# ---------------------------------------------------------------------------


def _put(state: DirectoryState, attr: str, key: Any, value: Any) -> DirectoryState:
    current = getattr(state, attr)
    return replace(state, **{attr: {**current, key: value}})


def _drop(state: DirectoryState, attr: str, key: Any) -> DirectoryState:
    current = dict(getattr(state, attr))
    del current[key]
    return replace(state, **{attr: current})


def _require_id(entity_id: str, what: str) -> None:
    if not isinstance(entity_id, str) or not entity_id:
        raise InvalidEntity(f"{what} id must be a non-empty string")


def _require_new(mapping: Mapping[str, Any], entity_id: str, what: str) -> None:
    _require_id(entity_id, what)
    if entity_id in mapping:
        raise DuplicateId(f"{what} {entity_id!r} already exists")


def _require_ref(mapping: Mapping[str, Any], ref: str, what: str) -> None:
    if ref not in mapping:
        raise DanglingReference(f"{what} {ref!r} does not exist")


def add_permission(state: DirectoryState, permission: Permission) -> DirectoryState:
    _require_new(state.permissions, permission.id, "permission")
    if permission.kind not in PERMISSION_KINDS:
        raise InvalidEntity(f"permission kind must be one of {PERMISSION_KINDS}")
    return _put(state, "permissions", permission.id, permission)


def add_menu(state: DirectoryState, menu: Menu) -> DirectoryState:
    _require_new(state.menus, menu.id, "menu")
    for entry in menu.entries:
        if entry.kind == "permission":
            _require_ref(state.permissions, entry.ref, "permission")
        elif entry.kind == "menu":
            # Submenus must already exist, so a new menu can never close a loop.
            _require_ref(state.menus, entry.ref, "menu")
        else:
            raise InvalidEntity(f"menu entry kind {entry.kind!r} is not permission/menu")
    return _put(state, "menus", menu.id, menu)


def add_responsibility(state: DirectoryState, resp: Responsibility) -> DirectoryState:
    _require_new(state.responsibilities, resp.id, "responsibility")
    _require_ref(state.menus, resp.menu, "menu")
    return _put(state, "responsibilities", resp.id, resp)


def _check_permission_set(state: DirectoryState, ps: PermissionSet) -> None:
    if not ps.members:
        raise InvalidEntity(f"permission set {ps.id!r} is empty")
    for p in sorted(ps.members):
        _require_ref(state.permissions, p, "permission")


def add_permission_set(state: DirectoryState, ps: PermissionSet) -> DirectoryState:
    _require_new(state.permission_sets, ps.id, "permission set")
    _check_permission_set(state, ps)
    return _put(state, "permission_sets", ps.id, PermissionSet(ps.id, frozenset(ps.members)))


def put_permission_set(state: DirectoryState, ps: PermissionSet) -> DirectoryState:
    """Create or replace a permission set."""
    _require_id(ps.id, "permission set")
    _check_permission_set(state, ps)
    return _put(state, "permission_sets", ps.id, PermissionSet(ps.id, frozenset(ps.members)))


def add_object_instance_set(state: DirectoryState, iset: ObjectInstanceSet) -> DirectoryState:
    _require_new(state.instance_sets, iset.id, "object instance set")
    return _put(state, "instance_sets", iset.id, iset)


def _check_grant(state: DirectoryState, grant: Grant) -> None:
    if grant.grantee_kind not in GRANTEE_KINDS:
        raise InvalidEntity(f"grantee kind must be one of {GRANTEE_KINDS}")
    target = {"role": state.roles, "user": state.users, "group": state.groups}[grant.grantee_kind]
    _require_ref(target, grant.grantee, grant.grantee_kind)
    _require_ref(state.permission_sets, grant.permission_set, "permission set")
    if grant.instance_set is not None:
        _require_ref(state.instance_sets, grant.instance_set, "object instance set")


def add_grant(state: DirectoryState, grant: Grant) -> DirectoryState:
    _require_new(state.grants, grant.id, "grant")
    _check_grant(state, grant)
    return _put(state, "grants", grant.id, grant)


def put_grant(state: DirectoryState, grant: Grant) -> DirectoryState:
    """Create or replace a grant."""
    _require_id(grant.id, "grant")
    _check_grant(state, grant)
    return _put(state, "grants", grant.id, grant)


def remove_grant(state: DirectoryState, grant_id: str) -> DirectoryState:
    _require_ref(state.grants, grant_id, "grant")
    return _drop(state, "grants", grant_id)


def _check_role_refs(state: DirectoryState, role: Role) -> None:
    for rid in sorted(role.responsibilities):
        _require_ref(state.responsibilities, rid, "responsibility")
    for ou in sorted(role.org_scope or ()):
        _require_ref(state.org_units, ou, "org unit")


def _normalize_role(role: Role, status: str) -> Role:
    scope = frozenset(role.org_scope) if role.org_scope else None
    return replace(role, responsibilities=frozenset(role.responsibilities), org_scope=scope, status=status)


def add_role(state: DirectoryState, role: Role) -> DirectoryState:
    _require_new(state.roles, role.id, "role")
    _check_role_refs(state, role)
    return _put(state, "roles", role.id, _normalize_role(role, ACTIVE))


def update_role(state: DirectoryState, role: Role) -> DirectoryState:
    """Replace an existing role's definition (status included)."""
    get_role(state, role.id)
    if role.status not in (ACTIVE, ARCHIVED):
        raise InvalidEntity(f"role status {role.status!r}")
    _check_role_refs(state, role)
    return _put(state, "roles", role.id, _normalize_role(role, role.status))


def archive_role(state: DirectoryState, role_id: str) -> DirectoryState:
    role = get_role(state, role_id)
    return _put(state, "roles", role_id, replace(role, status=ARCHIVED))


def add_inheritance(state: DirectoryState, senior: str, junior: str) -> DirectoryState:
    s, j = get_role(state, senior), get_role(state, junior)
    if senior == junior:
        raise CycleDetected(f"role {senior!r} cannot inherit from itself")
    if s.status != ACTIVE or j.status != ACTIVE:
        raise UnknownRole("hierarchy edges require two active roles")
    if (senior, junior) in state.edges:
        return state
    if reachable(state, junior, senior):
        raise CycleDetected(f"edge {senior}->{junior} would close a cycle")
    return replace(state, edges=state.edges | {(senior, junior)})


def remove_inheritance(state: DirectoryState, senior: str, junior: str) -> DirectoryState:
    if (senior, junior) not in state.edges:
        raise DanglingReference(f"no hierarchy edge {senior}->{junior}")
    return replace(state, edges=state.edges - {(senior, junior)})


def add_org_unit(state: DirectoryState, unit: OrgUnit) -> DirectoryState:
    _require_new(state.org_units, unit.id, "org unit")
    if unit.parent is not None:
        _require_ref(state.org_units, unit.parent, "org unit")
    return _put(state, "org_units", unit.id, unit)


def add_user(state: DirectoryState, user: User) -> DirectoryState:
    _require_new(state.users, user.id, "user")
    if user.org_unit is not None:
        _require_ref(state.org_units, user.org_unit, "org unit")
    if user.status not in (ACTIVE, DISABLED):
        raise InvalidEntity(f"user status {user.status!r}")
    return _put(state, "users", user.id, user)


def add_group(state: DirectoryState, group: UserGroup) -> DirectoryState:
    _require_new(state.groups, group.id, "group")
    for u in sorted(group.members):
        _require_ref(state.users, u, "user")
    return _put(state, "groups", group.id, UserGroup(group.id, frozenset(group.members)))


def add_group_member(state: DirectoryState, group_id: str, user_id: str) -> DirectoryState:
    _require_ref(state.groups, group_id, "group")
    get_user(state, user_id)
    grp = state.groups[group_id]
    return _put(state, "groups", group_id, UserGroup(group_id, grp.members | {user_id}))


def assign_role(
    state: DirectoryState, user_id: str, role_id: str, *, enforce_sod: bool = False
) -> DirectoryState:
    """Activate the (user, role) assignment.

    With ``enforce_sod`` the assignment is refused when segregation-of-duties
    rules would be breached; otherwise conflicts are left for the caller to
    report (see :func:`rolecycle.sod.check_assignment`).
    """
    get_user(state, user_id)
    role = get_role(state, role_id)
    if role.status != ACTIVE:
        raise InactiveRole(f"role {role_id!r} is archived")
    existing = state.assignments.get((user_id, role_id))
    if existing is not None and existing.active:
        raise DuplicateAssignment(f"{user_id!r} already holds {role_id!r}")
    if enforce_sod:
        from .sod import check_assignment  # sod builds on this module
        from .errors import SodViolationError

        violations = check_assignment(state, user_id, role_id)
        if violations:
            raise SodViolationError(
                f"assigning {role_id!r} to {user_id!r} violates "
                + ", ".join(sorted({v.rule for v in violations})),
                violations,
                [user_id],
            )
    return _put(state, "assignments", (user_id, role_id), Assignment(user_id, role_id, True))


def revoke_role(state: DirectoryState, user_id: str, role_id: str) -> DirectoryState:
    get_user(state, user_id)
    get_role(state, role_id)
    existing = state.assignments.get((user_id, role_id))
    if existing is None or not existing.active:
        raise NoSuchAssignment(f"{user_id!r} holds no active assignment to {role_id!r}")
    return _put(state, "assignments", (user_id, role_id), Assignment(user_id, role_id, False))


# ---------------------------------------------------------------------------
# integrity and (de)serialization
# ---------------------------------------------------------------------------


def validate(state: DirectoryState) -> None:
    """Full referential-integrity and acyclicity check; raises on the first problem."""
    for pid, p in state.permissions.items():
        if pid != p.id or p.kind not in PERMISSION_KINDS:
            raise InvalidEntity(f"permission {pid!r} is malformed")
    for mid, m in state.menus.items():
        for e in m.entries:
            target = state.permissions if e.kind == "permission" else state.menus
            _require_ref(target, e.ref, e.kind)
    # menu nesting must be a tree: detect cycles by DFS colouring
    colour: dict[str, int] = {}

    def visit(mid: str) -> None:
        colour[mid] = 1
        for e in state.menus[mid].entries:
            if e.kind != "menu":
                continue
            c = colour.get(e.ref, 0)
            if c == 1:
                raise CycleDetected(f"menu {e.ref!r} is reachable from itself")
            if c == 0:
                visit(e.ref)
        colour[mid] = 2

    for mid in sorted(state.menus):
        if colour.get(mid, 0) == 0:
            visit(mid)
    for r in state.responsibilities.values():
        _require_ref(state.menus, r.menu, "menu")
    for ps in state.permission_sets.values():
        _check_permission_set(state, ps)
    for g in state.grants.values():
        _check_grant(state, g)
    for role in state.roles.values():
        _check_role_refs(state, role)
        if role.status not in (ACTIVE, ARCHIVED):
            raise InvalidEntity(f"role {role.id!r} has status {role.status!r}")
    for s, j in state.edges:
        _require_ref(state.roles, s, "role")
        _require_ref(state.roles, j, "role")
        if s == j:
            raise CycleDetected(f"self-loop on {s!r}")
    topological_order(state)
    for u in state.users.values():
        if u.org_unit is not None:
            _require_ref(state.org_units, u.org_unit, "org unit")
    for grp in state.groups.values():
        for u in grp.members:
            _require_ref(state.users, u, "user")
    for ou in state.org_units.values():
        if ou.parent is not None:
            _require_ref(state.org_units, ou.parent, "org unit")
    for (u, r), a in state.assignments.items():
        if (a.user, a.role) != (u, r):
            raise InvalidEntity("assignment key mismatch")
        _require_ref(state.users, u, "user")
        _require_ref(state.roles, r, "role")
    for rule in state.sod_rules.values():
        target = state.roles if rule.scope == ROLE_LEVEL else state.permissions
        for m in rule.conflict_set:
            _require_ref(target, m, "role" if rule.scope == ROLE_LEVEL else "permission")


def role_to_dict(role: Role) -> dict[str, Any]:
    return {
        "id": role.id,
        "name": role.name,
        "category": role.category,
        "responsibilities": sorted(role.responsibilities),
        "org_scope": sorted(role.org_scope) if role.org_scope else None,
        "status": role.status,
    }


def role_from_dict(d: Mapping[str, Any]) -> Role:
    scope = d.get("org_scope")
    return Role(
        id=d["id"],
        name=d.get("name", ""),
        category=d.get("category", ""),
        responsibilities=frozenset(d.get("responsibilities", ())),
        org_scope=frozenset(scope) if scope else None,
        status=d.get("status", ACTIVE),
    )


def grant_to_dict(g: Grant) -> dict[str, Any]:
    return {
        "id": g.id,
        "grantee_kind": g.grantee_kind,
        "grantee": g.grantee,
        "permission_set": g.permission_set,
        "instance_set": g.instance_set,
    }


def grant_from_dict(d: Mapping[str, Any]) -> Grant:
    return Grant(d["id"], d["grantee_kind"], d["grantee"], d["permission_set"], d.get("instance_set"))


def sod_rule_to_dict(rule: SodRule) -> dict[str, Any]:
    return {
        "id": rule.id,
        "scope": rule.scope,
        "conflict_set": sorted(rule.conflict_set),
        "cardinality": rule.cardinality,
        "rationale": rule.rationale,
    }


def sod_rule_from_dict(d: Mapping[str, Any]) -> SodRule:
    return SodRule(d["id"], d["scope"], frozenset(d["conflict_set"]), int(d.get("cardinality", 2)), d.get("rationale", ""))


def state_to_dict(state: DirectoryState) -> dict[str, Any]:
    return {
        "permissions": {
            k: {"id": p.id, "function_name": p.function_name, "kind": p.kind, "description": p.description}
            for k, p in state.permissions.items()
        },
        "menus": {
            k: {"id": m.id, "entries": [[e.kind, e.ref] for e in m.entries]} for k, m in state.menus.items()
        },
        "responsibilities": {
            k: {"id": r.id, "menu": r.menu, "name": r.name} for k, r in state.responsibilities.items()
        },
        "permission_sets": {
            k: {"id": ps.id, "members": sorted(ps.members)} for k, ps in state.permission_sets.items()
        },
        "instance_sets": {
            k: {"id": s.id, "object_name": s.object_name, "predicate_label": s.predicate_label}
            for k, s in state.instance_sets.items()
        },
        "grants": {k: grant_to_dict(g) for k, g in state.grants.items()},
        "roles": {k: role_to_dict(r) for k, r in state.roles.items()},
        "users": {
            k: {
                "id": u.id,
                "display_name": u.display_name,
                "org_unit": u.org_unit,
                "status": u.status,
                "job_function": u.job_function,
            }
            for k, u in state.users.items()
        },
        "groups": {k: {"id": g.id, "members": sorted(g.members)} for k, g in state.groups.items()},
        "org_units": {k: {"id": o.id, "name": o.name, "parent": o.parent} for k, o in state.org_units.items()},
        "edges": sorted([s, j] for s, j in state.edges),
        "assignments": sorted(
            ({"user": a.user, "role": a.role, "active": a.active} for a in state.assignments.values()),
            key=lambda a: (a["user"], a["role"]),
        ),
        "sod_rules": {k: sod_rule_to_dict(r) for k, r in state.sod_rules.items()},
    }


def state_from_dict(d: Mapping[str, Any], *, check: bool = True) -> DirectoryState:
    state = DirectoryState(
        permissions={
            k: Permission(v["id"], v.get("function_name", ""), v.get("kind", EXECUTABLE), v.get("description", ""))
            for k, v in d.get("permissions", {}).items()
        },
        menus={
            k: Menu(v["id"], tuple(MenuEntry(kind, ref) for kind, ref in v.get("entries", ())))
            for k, v in d.get("menus", {}).items()
        },
        responsibilities={
            k: Responsibility(v["id"], v["menu"], v.get("name", "")) for k, v in d.get("responsibilities", {}).items()
        },
        permission_sets={
            k: PermissionSet(v["id"], frozenset(v["members"])) for k, v in d.get("permission_sets", {}).items()
        },
        instance_sets={
            k: ObjectInstanceSet(v["id"], v.get("object_name", ""), v.get("predicate_label", ""))
            for k, v in d.get("instance_sets", {}).items()
        },
        grants={k: grant_from_dict(v) for k, v in d.get("grants", {}).items()},
        roles={k: role_from_dict(v) for k, v in d.get("roles", {}).items()},
        users={
            k: User(v["id"], v.get("display_name", ""), v.get("org_unit"), v.get("status", ACTIVE), v.get("job_function"))
            for k, v in d.get("users", {}).items()
        },
        groups={k: UserGroup(v["id"], frozenset(v.get("members", ()))) for k, v in d.get("groups", {}).items()},
        org_units={
            k: OrgUnit(v["id"], v.get("name", ""), v.get("parent")) for k, v in d.get("org_units", {}).items()
        },
        edges=frozenset((s, j) for s, j in d.get("edges", ())),
        assignments={
            (a["user"], a["role"]): Assignment(a["user"], a["role"], bool(a.get("active", True)))
            for a in d.get("assignments", ())
        },
        sod_rules={k: sod_rule_from_dict(v) for k, v in d.get("sod_rules", {}).items()},
    )
    if check:
        validate(state)
    return state


def build(state: DirectoryState, entities: Iterable[Any]) -> DirectoryState:
    """Add a mixed sequence of entities in order; handy for fixtures and tests."""
    adders = {
        Permission: add_permission,
        Menu: add_menu,
        Responsibility: add_responsibility,
        PermissionSet: add_permission_set,
        ObjectInstanceSet: add_object_instance_set,
        Grant: add_grant,
        Role: add_role,
        User: add_user,
        UserGroup: add_group,
        OrgUnit: add_org_unit,
    }
    for entity in entities:
        if isinstance(entity, SodRule):
            from .sod import add_sod_rule

            state = add_sod_rule(state, entity)
        elif isinstance(entity, tuple) and len(entity) == 2:
            state = add_inheritance(state, *entity)
        elif isinstance(entity, Assignment):
            state = assign_role(state, entity.user, entity.role)
        else:
            state = adders[type(entity)](state, entity)
    return state
