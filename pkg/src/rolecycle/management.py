"""Role management: deployment of catalogued roles and day-to-day administration.

Deployment follows a declarative diff/apply cycle. :func:`export_bundle`
freezes a Roles Catalogue into a canonical, digest-protected bundle;
:func:`diff` computes the atomic changes an environment needs to match it;
:func:`apply` executes them all-or-nothing. Only catalogued roles (plus roles
a previous deployment managed) are ever touched, so environment-local users,
roles and grants survive deployments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Optional

from . import admin, model, sod
from .admin import FUNCTIONAL_ADMINISTRATOR, FUNCTIONAL_DEVELOPER, USER_MANAGEMENT
from .canonical import canonicalize, digest, parse_canonical
from .catalogue import (
    GrantSpec,
    RoleDefinition,
    RolesCatalogue,
    catalogue_from_dict,
    definition_from_state,
    ensure_support,
    install_grant,
    role_grant_specs,
)
from .errors import (
    DanglingReference,
    DigestMismatch,
    DuplicateId,
    EmptyCatalogue,
    IntegrityFailure,
    InvalidEntity,
    NotAPartition,
    RolecycleError,
    SodViolationError,
    UnknownRole,
)
from .model import DirectoryState, Role

__all__ = [
    "Environment",
    "Change",
    "ChangeSet",
    "DeploymentBundle",
    "new_environment",
    "export_bundle",
    "bundle_bytes",
    "parse_bundle",
    "diff",
    "apply",
    "apply_changes",
    "split_role",
    "merge_roles",
    "admin_assign",
    "admin_revoke",
    "admin_edit_relationships",
    "catalogue_from_dict",
    "environment_from_dict",
    "environment_to_dict",
]

BUNDLE_FORMAT_VERSION = 1
ENVIRONMENTS = ("test", "production")

CHANGE_ORDER = (
    "create_role",
    "create_grant",
    "add_edge",
    "update_role",
    "remove_grant",
    "remove_edge",
    "archive_role",
    "revoke_assignment",
)


@dataclass(frozen=True)
class Environment:
    name: str
    state: DirectoryState
    catalogue_version: Optional[int] = None
    managed_roles: frozenset[str] = frozenset()


def new_environment(name: str) -> Environment:
    """A fresh environment holding only the seeded admin roles and bootstrap user."""
    return Environment(name, admin.seeded_state())


def environment_to_dict(env: Environment) -> dict[str, Any]:
    return {
        "name": env.name,
        "catalogue_version": env.catalogue_version,
        "managed_roles": sorted(env.managed_roles),
        "state": model.state_to_dict(env.state),
    }


def environment_from_dict(d: Mapping[str, Any]) -> Environment:
    return Environment(
        d["name"],
        model.state_from_dict(d["state"]),
        d.get("catalogue_version"),
        frozenset(d.get("managed_roles", ())),
    )


def environment_bytes(env: Environment) -> bytes:
    return canonicalize(environment_to_dict(env))


# ---------------------------------------------------------------------------
# change sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Change:
    kind: str
    subject: str
    before: Optional[Mapping[str, Any]] = None
    after: Optional[Mapping[str, Any]] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "subject": self.subject,
            "before": dict(self.before) if self.before is not None else None,
            "after": dict(self.after) if self.after is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Change":
        if d.get("kind") not in CHANGE_ORDER:
            raise InvalidEntity(f"unknown change kind {d.get('kind')!r}")
        return cls(d["kind"], d["subject"], d.get("before"), d.get("after"))


@dataclass(frozen=True)
class ChangeSet:
    changes: tuple[Change, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.changes)

    def __len__(self) -> int:
        return len(self.changes)

    def to_dict(self) -> list[dict[str, Any]]:
        return [c.to_dict() for c in self.changes]

    @classmethod
    def from_dict(cls, items: Iterable[Mapping[str, Any]]) -> "ChangeSet":
        return cls(tuple(Change.from_dict(c) for c in items))


def _edge_subject(senior: str, junior: str) -> str:
    return f"{senior}->{junior}"


def _apply_change(state: DirectoryState, c: Change) -> DirectoryState:
    after = c.after or {}
    if c.kind == "create_role":
        state = ensure_support(state, after.get("support", {}))
        return model.add_role(state, model.role_from_dict(after["role"]))
    if c.kind == "update_role":
        state = ensure_support(state, after.get("support", {}))
        return model.update_role(state, model.role_from_dict(after["role"]))
    if c.kind == "archive_role":
        return model.archive_role(state, c.subject)
    if c.kind == "create_grant":
        state = ensure_support(state, after.get("support", {}))
        return install_grant(state, after["role"], GrantSpec.from_dict(after["grant"]))
    if c.kind == "remove_grant":
        return model.remove_grant(state, c.subject)
    if c.kind in ("add_edge", "remove_edge"):
        edge = (after or c.before or {})
        pair = (edge["senior"], edge["junior"])
        if c.kind == "add_edge":
            for r in pair:
                model.get_role(state, r)
            return replace(state, edges=state.edges | {pair})
        if pair not in state.edges:
            raise DanglingReference(f"no hierarchy edge {c.subject}")
        return replace(state, edges=state.edges - {pair})
    if c.kind == "revoke_assignment":
        a = c.before or {}
        return model.revoke_role(state, a["user"], a["role"])
    raise InvalidEntity(f"unknown change kind {c.kind!r}")


def apply_changes(state: DirectoryState, changes: ChangeSet | Iterable[Change]) -> DirectoryState:
    """Apply changes in order, then run the full integrity check once."""
    items = changes.changes if isinstance(changes, ChangeSet) else tuple(changes)
    for c in items:
        state = _apply_change(state, c)
    model.validate(state)
    return state


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeploymentBundle:
    format_version: int
    source_version: Optional[int]
    digest: str
    body: Mapping[str, Any]

    @property
    def catalogue(self) -> RolesCatalogue:
        return catalogue_from_dict(self.body, self.source_version)

    def verify(self) -> None:
        if self.format_version != BUNDLE_FORMAT_VERSION:
            raise DigestMismatch(f"unsupported bundle format {self.format_version!r}")
        if digest(self.body) != self.digest:
            raise DigestMismatch("bundle digest does not match its content")
        if self.body.get("source_version") != self.source_version:
            raise DigestMismatch("bundle header and body disagree on source version")


def export_bundle(catalogue: RolesCatalogue) -> DeploymentBundle:
    if not catalogue.entries:
        raise EmptyCatalogue("cannot export an empty roles catalogue")
    body = {"source_version": catalogue.version, **catalogue.to_dict()}
    body = parse_canonical(canonicalize(body))  # plain JSON values only
    return DeploymentBundle(BUNDLE_FORMAT_VERSION, catalogue.version, digest(body), body)


def bundle_bytes(bundle: DeploymentBundle) -> bytes:
    header = {
        "format_version": bundle.format_version,
        "source_version": bundle.source_version,
        "digest": bundle.digest,
    }
    return canonicalize({"header": header, "body": bundle.body})


def parse_bundle(raw: bytes) -> DeploymentBundle:
    """Read a bundle file, rejecting any byte-level tampering."""
    try:
        doc = parse_canonical(raw)
        header, body = doc["header"], doc["body"]
        if set(doc) != {"header", "body"} or set(header) != {"format_version", "source_version", "digest"}:
            raise ValueError("unexpected bundle layout")
        bundle = DeploymentBundle(header["format_version"], header["source_version"], header["digest"], body)
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise DigestMismatch(f"bundle is corrupt: {exc}") from exc
    bundle.verify()
    try:
        bundle.catalogue
    except (RolecycleError, KeyError, TypeError) as exc:
        raise DigestMismatch(f"bundle content is malformed: {exc}") from exc
    return bundle


def _role_payload(defn: RoleDefinition) -> dict[str, Any]:
    # Grant-only permissions travel with the grant change instead.
    grant_only = defn.direct_permissions
    menu_perms = set()
    for mid, menu in defn.support.get("menus", {}).items():
        menu_perms |= {ref for kind, ref in menu.get("entries", ()) if kind == "permission"}
    support = dict(defn.support)
    support["permissions"] = {
        p: d for p, d in defn.support.get("permissions", {}).items() if p in menu_perms or p not in grant_only
    }
    return {"role": model.role_to_dict(replace(defn.role, status=model.ACTIVE)), "support": support}


def _grant_payload(role_id: str, spec: GrantSpec, defn: Optional[RoleDefinition] = None) -> dict[str, Any]:
    out: dict[str, Any] = {"role": role_id, "grant": spec.to_dict()}
    if defn is not None:
        perms = defn.support.get("permissions", {})
        out["support"] = {"permissions": {p: perms[p] for p in sorted(spec.permissions) if p in perms}}
    return out


def diff_catalogue(catalogue: RolesCatalogue, env: Environment) -> ChangeSet:
    state = env.state
    buckets: dict[str, list[Change]] = {k: [] for k in CHANGE_ORDER}
    for rid in sorted(catalogue.entries):
        defn = catalogue.entries[rid]
        current = state.roles.get(rid)
        wanted_role = model.role_to_dict(replace(defn.role, status=model.ACTIVE))
        if current is None:
            buckets["create_role"].append(Change("create_role", rid, None, _role_payload(defn)))
            have_specs: dict[str, GrantSpec] = {}
            have_juniors: frozenset[str] = frozenset()
        else:
            if model.role_to_dict(current) != wanted_role:
                buckets["update_role"].append(
                    Change("update_role", rid, {"role": model.role_to_dict(current)}, _role_payload(defn))
                )
            have_specs = {g.id: g for g in role_grant_specs(state, rid)}
            have_juniors = frozenset(state.juniors_of.get(rid, ()))
        for spec in defn.grants:
            have = have_specs.get(spec.id)
            if have != spec:
                before = _grant_payload(rid, have) if have is not None else None
                buckets["create_grant"].append(Change("create_grant", spec.id, before, _grant_payload(rid, spec, defn)))
        wanted_ids = {g.id for g in defn.grants}
        for gid, have in have_specs.items():
            if gid not in wanted_ids:
                buckets["remove_grant"].append(Change("remove_grant", gid, _grant_payload(rid, have), None))
        for j in sorted(defn.juniors - have_juniors):
            buckets["add_edge"].append(Change("add_edge", _edge_subject(rid, j), None, {"senior": rid, "junior": j}))
        for j in sorted(have_juniors - defn.juniors):
            buckets["remove_edge"].append(
                Change("remove_edge", _edge_subject(rid, j), {"senior": rid, "junior": j}, None)
            )
    for rid in sorted(env.managed_roles - set(catalogue.entries)):
        role = state.roles.get(rid)
        if role is not None and role.status == model.ACTIVE:
            buckets["archive_role"].append(Change("archive_role", rid, {"role": model.role_to_dict(role)}, None))
    ordered = []
    for kind in CHANGE_ORDER:
        ordered.extend(sorted(buckets[kind], key=lambda c: c.subject))
    return ChangeSet(tuple(ordered))


def diff(bundle: DeploymentBundle, environment: Environment) -> ChangeSet:
    """Minimal ordered changes to make *environment* match the bundle's roles."""
    bundle.verify()
    return diff_catalogue(bundle.catalogue, environment)


def apply(
    bundle: DeploymentBundle, environment: Environment, acting_user: str
) -> tuple[Environment, ChangeSet]:
    """Deploy a bundle all-or-nothing; a failure leaves *environment* as it was."""
    admin.require(environment.state, acting_user, FUNCTIONAL_ADMINISTRATOR)
    changes = diff(bundle, environment)
    try:
        state = apply_changes(environment.state, changes)
    except RolecycleError as exc:
        raise IntegrityFailure(f"apply to {environment.name!r} rolled back: {exc}") from exc
    catalogue = bundle.catalogue
    return (
        replace(
            environment,
            state=state,
            catalogue_version=bundle.source_version,
            managed_roles=frozenset(catalogue.entries),
        ),
        changes,
    )


# ---------------------------------------------------------------------------
# administration
# ---------------------------------------------------------------------------

# Admin authority each mutating operation in this module requires.
REQUIRED_ROLE = {
    "apply": FUNCTIONAL_ADMINISTRATOR,
    "split_role": FUNCTIONAL_ADMINISTRATOR,
    "merge_roles": FUNCTIONAL_ADMINISTRATOR,
    "admin_assign": USER_MANAGEMENT,
    "admin_revoke": USER_MANAGEMENT,
}

# Relationship edits, by the authority that owns them.
EDIT_OPS = {
    "add_permission": FUNCTIONAL_DEVELOPER,
    "add_object_instance_set": FUNCTIONAL_DEVELOPER,
    "add_menu": FUNCTIONAL_DEVELOPER,
    "add_responsibility": FUNCTIONAL_DEVELOPER,
    "add_permission_set": FUNCTIONAL_ADMINISTRATOR,
    "add_grant": FUNCTIONAL_ADMINISTRATOR,
    "remove_grant": FUNCTIONAL_ADMINISTRATOR,
    "add_role": FUNCTIONAL_ADMINISTRATOR,
    "archive_role": FUNCTIONAL_ADMINISTRATOR,
    "add_inheritance": FUNCTIONAL_ADMINISTRATOR,
    "remove_inheritance": FUNCTIONAL_ADMINISTRATOR,
    "add_sod_rule": FUNCTIONAL_ADMINISTRATOR,
    "add_org_unit": USER_MANAGEMENT,
    "add_user": USER_MANAGEMENT,
    "add_group": USER_MANAGEMENT,
    "add_group_member": USER_MANAGEMENT,
    "assign": USER_MANAGEMENT,
    "revoke": USER_MANAGEMENT,
}


@dataclass(frozen=True)
class AdminResult:
    environment: Environment
    advisories: tuple[sod.SodViolation, ...] = ()
    subjects: tuple[str, ...] = ()


def admin_assign(
    environment: Environment, user: str, role: str, acting_user: str, *, enforce_sod: bool = False
) -> AdminResult:
    """Assign a role; SOD conflicts are returned as advisories unless enforced."""
    admin.require(environment.state, acting_user, USER_MANAGEMENT)
    advisories = tuple(sod.check_assignment(environment.state, user, role))
    state = model.assign_role(environment.state, user, role, enforce_sod=enforce_sod)
    return AdminResult(replace(environment, state=state), advisories, (user, role))


def admin_revoke(environment: Environment, user: str, role: str, acting_user: str) -> AdminResult:
    admin.require(environment.state, acting_user, USER_MANAGEMENT)
    state = model.revoke_role(environment.state, user, role)
    return AdminResult(replace(environment, state=state), (), (user, role))


def _active_role(state: DirectoryState, role_id: str) -> Role:
    role = model.get_role(state, role_id)
    if role.status != model.ACTIVE:
        raise UnknownRole(f"role {role_id!r} is archived")
    return role


def admin_edit_relationships(
    environment: Environment, change: Mapping[str, Any], acting_user: str
) -> AdminResult:
    """Apply one relationship or definition edit, gated by the authority that owns it.

    ``change`` is ``{"op": <name>, ...fields}``; see :data:`EDIT_OPS`.
    """
    op = change.get("op")
    if op not in EDIT_OPS:
        raise InvalidEntity(f"unknown edit op {op!r}; expected one of {sorted(EDIT_OPS)}")
    state = environment.state
    admin.require(state, acting_user, EDIT_OPS[op])
    c = dict(change)
    try:
        if op == "add_permission":
            p = model.Permission(c["id"], c.get("function_name", ""), c.get("kind", model.EXECUTABLE), c.get("description", ""))
            state, subjects = model.add_permission(state, p), (p.id,)
        elif op == "add_object_instance_set":
            s = model.ObjectInstanceSet(c["id"], c.get("object_name", ""), c.get("predicate_label", ""))
            state, subjects = model.add_object_instance_set(state, s), (s.id,)
        elif op == "add_menu":
            entries = tuple(model.MenuEntry(k, r) for k, r in c.get("entries", ()))
            state, subjects = model.add_menu(state, model.Menu(c["id"], entries)), (c["id"],)
        elif op == "add_responsibility":
            r = model.Responsibility(c["id"], c["menu"], c.get("name", ""))
            state, subjects = model.add_responsibility(state, r), (r.id,)
        elif op == "add_permission_set":
            ps = model.PermissionSet(c["id"], frozenset(c.get("members", ())))
            state, subjects = model.add_permission_set(state, ps), (ps.id,)
        elif op == "add_grant":
            g = model.Grant(c["id"], c["grantee_kind"], c["grantee"], c["permission_set"], c.get("instance_set"))
            if g.grantee_kind == "role":
                _active_role(state, g.grantee)
            state, subjects = model.add_grant(state, g), (g.id, g.grantee)
        elif op == "remove_grant":
            g = state.grants.get(c["id"])
            if g is not None and g.grantee_kind == "role":
                _active_role(state, g.grantee)
            state, subjects = model.remove_grant(state, c["id"]), (c["id"],)
        elif op == "add_role":
            role = model.role_from_dict({**c, "status": model.ACTIVE})
            state, subjects = model.add_role(state, role), (role.id,)
        elif op == "archive_role":
            _active_role(state, c["id"])
            state, subjects = model.archive_role(state, c["id"]), (c["id"],)
        elif op == "add_inheritance":
            _active_role(state, c["senior"])
            _active_role(state, c["junior"])
            state, subjects = model.add_inheritance(state, c["senior"], c["junior"]), (c["senior"], c["junior"])
        elif op == "remove_inheritance":
            _active_role(state, c["senior"])
            state = model.remove_inheritance(state, c["senior"], c["junior"])
            subjects = (c["senior"], c["junior"])
        elif op == "add_sod_rule":
            rule = model.sod_rule_from_dict(c)
            state, subjects = sod.add_sod_rule(state, rule), (rule.id,)
        elif op == "add_org_unit":
            u = model.OrgUnit(c["id"], c.get("name", ""), c.get("parent"))
            state, subjects = model.add_org_unit(state, u), (u.id,)
        elif op == "add_user":
            u = model.User(c["id"], c.get("display_name", ""), c.get("org_unit"), c.get("status", model.ACTIVE), c.get("job_function"))
            state, subjects = model.add_user(state, u), (u.id,)
        elif op == "add_group":
            grp = model.UserGroup(c["id"], frozenset(c.get("members", ())))
            state, subjects = model.add_group(state, grp), (grp.id,)
        elif op == "add_group_member":
            state, subjects = model.add_group_member(state, c["group"], c["user"]), (c["group"], c["user"])
        elif op == "assign":
            return admin_assign(environment, c["user"], c["role"], acting_user, enforce_sod=bool(c.get("enforce_sod")))
        else:  # revoke
            return admin_revoke(environment, c["user"], c["role"], acting_user)
    except KeyError as exc:
        raise InvalidEntity(f"edit {op!r} is missing field {exc}") from None
    return AdminResult(replace(environment, state=state), (), tuple(subjects))


def _repoint_catalogue(
    catalogue: Optional[RolesCatalogue],
    state: DirectoryState,
    removed: Iterable[str],
    added: Iterable[str],
    source: str,
) -> Optional[RolesCatalogue]:
    """Replace *removed* catalogue entries with definitions of *added* roles."""
    if catalogue is None:
        return None
    removed, added = set(removed), list(added)
    if not removed & set(catalogue.entries):
        return catalogue
    cat = catalogue
    tags = frozenset().union(*(cat.entries[r].sod_tags for r in removed if r in cat.entries))
    for r in removed:
        cat = cat.remove(r)
    for rid in added:
        cat = cat.supersede(definition_from_state(state, rid, source, tags))
    for rid, defn in sorted(cat.entries.items()):
        if defn.juniors & removed:
            juniors = (defn.juniors - removed) | frozenset(added)
            cat = cat.supersede(replace(defn, juniors=juniors))
    return cat


@dataclass(frozen=True)
class SplitResult:
    environment: Environment
    roles: tuple[str, str]
    catalogue: Optional[RolesCatalogue] = None


def split_role(
    environment: Environment,
    role_id: str,
    partition: tuple[Iterable[str], Iterable[str]],
    acting_user: str,
    membership_map: Optional[Mapping[str, str]] = None,
    names: Optional[tuple[str, str]] = None,
    catalogue: Optional[RolesCatalogue] = None,
) -> SplitResult:
    """Split a role's direct grant permissions into two new roles.

    Members keep both halves unless ``membership_map`` sends them to exactly
    one. Responsibilities travel with the first half. Hierarchy edges are
    re-pointed at both halves and the original is archived.
    """
    state = environment.state
    admin.require(state, acting_user, FUNCTIONAL_ADMINISTRATOR)
    role = _active_role(state, role_id)
    p1, p2 = frozenset(partition[0]), frozenset(partition[1])
    direct = model.direct_grant_permissions(state, role_id)
    if not p1 or not p2 or p1 & p2 or (p1 | p2) != direct:
        raise NotAPartition(
            f"{sorted(p1)} / {sorted(p2)} is not a two-way partition of {role_id}'s permissions {sorted(direct)}"
        )
    r1, r2 = names or (f"{role_id}_1", f"{role_id}_2")
    if r1 == r2:
        raise InvalidEntity("split halves need distinct ids")
    for r in (r1, r2):
        if r in state.roles:
            raise DuplicateId(f"role {r!r} already exists")
    members = sorted(model.role_members(state, role_id))
    membership_map = dict(membership_map or {})
    for u, target in membership_map.items():
        if u not in members or target not in (r1, r2):
            raise InvalidEntity(f"membership map entry {u!r} -> {target!r} is not a member/half pair")

    juniors = state.juniors_of.get(role_id, ())
    seniors = state.seniors_of.get(role_id, ())
    state = model.add_role(state, replace(role, id=r1, name=f"{role.name or role_id} (part 1)"))
    state = model.add_role(
        state, replace(role, id=r2, name=f"{role.name or role_id} (part 2)", responsibilities=frozenset())
    )
    for rid, perms in ((r1, p1), (r2, p2)):
        state = install_grant(state, rid, GrantSpec(f"{rid}.grant", f"{rid}.ps", perms))
    edges = {e for e in state.edges if role_id not in e}
    for rid in (r1, r2):
        edges |= {(rid, j) for j in juniors} | {(s, rid) for s in seniors}
    state = replace(state, edges=frozenset(edges))
    for u in members:
        state = model.revoke_role(state, u, role_id)
        for rid in (r1, r2):
            if membership_map.get(u, rid) == rid:
                state = model.assign_role(state, u, rid)
    state = model.archive_role(state, role_id)
    model.validate(state)

    conflicts = sod.sod_conflicts_between(state, r1, r2)
    if conflicts:
        both = [u for u in members if {r1, r2} <= model.assigned_roles(state, u)]
        if both:
            raise SodViolationError(
                f"users {both} would hold both halves of {role_id} under rules {conflicts}", (), both
            )
    managed = environment.managed_roles
    if role_id in managed:
        managed = (managed - {role_id}) | {r1, r2}
    env = replace(environment, state=state, managed_roles=managed)
    cat = _repoint_catalogue(catalogue, state, [role_id], [r1, r2], f"split:{role_id}")
    return SplitResult(env, (r1, r2), cat)


@dataclass(frozen=True)
class MergeResult:
    environment: Environment
    role: str
    catalogue: Optional[RolesCatalogue] = None


def merge_roles(
    environment: Environment,
    roles: Iterable[str],
    new_id: str,
    acting_user: str,
    catalogue: Optional[RolesCatalogue] = None,
) -> MergeResult:
    """Fold several active roles into one new role and archive the sources."""
    state = environment.state
    admin.require(state, acting_user, FUNCTIONAL_ADMINISTRATOR)
    sources = list(dict.fromkeys(roles))
    if len(sources) < 2:
        raise InvalidEntity("merge needs at least two distinct roles")
    src_roles = [_active_role(state, r) for r in sources]
    if new_id in state.roles:
        raise DuplicateId(f"role {new_id!r} already exists")
    src = set(sources)

    perms = frozenset().union(*(model.direct_grant_permissions(state, r) for r in sources))
    scopes = [r.org_scope for r in src_roles]
    merged = Role(
        new_id,
        new_id,
        src_roles[0].category,
        frozenset().union(*(r.responsibilities for r in src_roles)),
        None if any(not s for s in scopes) else frozenset().union(*scopes),
    )
    members = sorted(set().union(*(model.role_members(state, r) for r in sources)))
    juniors = {j for r in sources for j in state.juniors_of.get(r, ())} - src
    seniors = {s for r in sources for s in state.seniors_of.get(r, ())} - src

    before = {u: {v.key for v in sod.audit_user(state, u)} for u in members}
    state = model.add_role(state, merged)
    if perms:
        state = install_grant(state, new_id, GrantSpec(f"{new_id}.grant", f"{new_id}.ps", perms))
    edges = {e for e in state.edges if not (set(e) & src)}
    edges |= {(new_id, j) for j in juniors} | {(s, new_id) for s in seniors}
    state = replace(state, edges=frozenset(edges))
    model.topological_order(state)
    for u in members:
        for r in sources:
            a = state.assignments.get((u, r))
            if a is not None and a.active:
                state = model.revoke_role(state, u, r)
        state = model.assign_role(state, u, new_id)
    for r in sources:
        state = model.archive_role(state, r)
    model.validate(state)

    offenders = sorted(u for u in members if any(v.key not in before[u] for v in sod.audit_user(state, u)))
    if offenders:
        raise SodViolationError(f"merging {sources} places {offenders} in SOD violation", (), offenders)
    managed = environment.managed_roles
    if managed & src:
        managed = (managed - src) | {new_id}
    env = replace(environment, state=state, managed_roles=managed)
    cat = _repoint_catalogue(catalogue, state, sources, [new_id], "merge:" + "+".join(sources))
    return MergeResult(env, new_id, cat)


def publish(catalogue: RolesCatalogue, definition: RoleDefinition) -> RolesCatalogue:
    """Add or supersede one catalogue entry."""
    return catalogue.supersede(definition)


def load_environment(store, name: str) -> Environment:
    """Latest stored state of *name*, or a freshly seeded environment."""
    if store.latest_version("environment", name) is None:
        return new_environment(name)
    return environment_from_dict(store.load("environment", name=name))


def save_environment(store, env: Environment) -> int:
    return store.save("environment", environment_to_dict(env), name=env.name)
