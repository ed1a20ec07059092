"""Seeded administrative roles and the authorization gate.

A fresh environment carries three administrative roles and one bootstrap
superuser holding all of them. Authority is checked through ordinary access
decisions on the admin permissions, so the engine governs its own
administration with the same machinery it applies to everyone else.
"""

from __future__ import annotations

from .errors import NotAuthorized, RolecycleError
from .model import (
    DirectoryState,
    Grant,
    Permission,
    PermissionSet,
    Role,
    User,
    build,
    check_access,
)

FUNCTIONAL_ADMINISTRATOR = "FUNCTIONAL_ADMINISTRATOR"
FUNCTIONAL_DEVELOPER = "FUNCTIONAL_DEVELOPER"
USER_MANAGEMENT = "USER_MANAGEMENT"
ADMIN_ROLES = (FUNCTIONAL_ADMINISTRATOR, FUNCTIONAL_DEVELOPER, USER_MANAGEMENT)

BOOTSTRAP_USER = "sysadmin"

ADMIN_PERMISSION = {
    FUNCTIONAL_ADMINISTRATOR: "rlm.administer_roles",
    FUNCTIONAL_DEVELOPER: "rlm.develop_objects",
    USER_MANAGEMENT: "rlm.manage_users",
}

_TITLES = {
    FUNCTIONAL_ADMINISTRATOR: "Functional Administrator",
    FUNCTIONAL_DEVELOPER: "Functional Developer",
    USER_MANAGEMENT: "User Management",
}


def seed_entities() -> list:
    entities: list = []
    for role_id in ADMIN_ROLES:
        perm = ADMIN_PERMISSION[role_id]
        entities += [
            Permission(perm, _TITLES[role_id], "executable", f"{_TITLES[role_id]} authority"),
            PermissionSet(f"{role_id}.ps", frozenset({perm})),
            Role(role_id, _TITLES[role_id], "administration"),
            Grant(f"{role_id}.grant", "role", role_id, f"{role_id}.ps"),
        ]
    return entities


def seeded_state() -> DirectoryState:
    """Admin roles, their permissions and the bootstrap superuser."""
    state = build(DirectoryState(), seed_entities())
    state = build(state, [User(BOOTSTRAP_USER, "Bootstrap administrator")])
    from .model import assign_role

    for role_id in ADMIN_ROLES:
        state = assign_role(state, BOOTSTRAP_USER, role_id)
    return state


def is_seeded_entity(kind: str, entity_id: str) -> bool:
    if kind == "role":
        return entity_id in ADMIN_ROLES
    if kind == "permission":
        return entity_id in ADMIN_PERMISSION.values()
    return False


def holds(state: DirectoryState, actor: str, admin_role: str) -> bool:
    if actor not in state.users:
        return False
    try:
        return check_access(state, actor, ADMIN_PERMISSION[admin_role]).allowed
    except RolecycleError:
        return False


def require(state: DirectoryState, actor: str, admin_role: str) -> None:
    """Raise NotAuthorized unless *actor* holds *admin_role* authority in *state*."""
    if not holds(state, actor, admin_role):
        raise NotAuthorized(f"{actor!r} lacks {_TITLES[admin_role]} authority")
