"""Small example directories used by demos and tests.

``purchasing`` is a three-level hierarchy (a manager inherits the buyer role,
which inherits the inquiry role). ``sales`` has two independent roles whose
grants differ only by the approval permission, plus responsibility menus
that include an abstract menu-only permission.
"""

from __future__ import annotations

from typing import Iterable, Optional

from . import admin, model
from .catalogue import RolesCatalogue, definition_from_state
from .model import (
    Assignment,
    DirectoryState,
    Grant,
    Menu,
    MenuEntry,
    OrgUnit,
    Permission,
    PermissionSet,
    Responsibility,
    Role,
    User,
)

ROOT_UNIT = OrgUnit("ACME", "Acme Corp")


def purchasing_entities() -> list:
    perms = {
        "view_po": "Purchase order inquiry",
        "view_requisition": "Requisition inquiry",
        "create_po": "Enter purchase orders",
        "update_po": "Update purchase orders",
        "approve_po": "Approve purchase orders",
    }
    grants = {
        "INQUIRY": {"view_po", "view_requisition"},
        "BUYER": {"create_po", "update_po"},
        "MANAGER": {"approve_po"},
    }
    names = {"INQUIRY": "Purchasing Inquiry", "BUYER": "Buyer", "MANAGER": "Purchasing Manager"}
    out: list = [OrgUnit("PURCHASING", "Purchasing", ROOT_UNIT.id)]
    out += [Permission(p, p, model.EXECUTABLE, d) for p, d in perms.items()]
    for rid, members in grants.items():
        out += [
            PermissionSet(f"{rid}.ps", frozenset(members)),
            Role(rid, names[rid], "purchasing"),
            Grant(f"{rid}.grant", "role", rid, f"{rid}.ps"),
        ]
    out += [("MANAGER", "BUYER"), ("BUYER", "INQUIRY")]
    out += [
        User("erin", "Erin (purchasing clerk)", "PURCHASING", model.ACTIVE, "purchasing_clerk"),
        User("carol", "Carol (buyer)", "PURCHASING", model.ACTIVE, "buyer"),
        User("dave", "Dave (purchasing manager)", "PURCHASING", model.ACTIVE, "purchasing_manager"),
        Assignment("erin", "INQUIRY"),
        Assignment("carol", "BUYER"),
        Assignment("dave", "MANAGER"),
    ]
    return out


def sales_entities() -> list:
    out: list = [
        OrgUnit("SALES", "Sales", ROOT_UNIT.id),
        Permission("view_orders", "view_orders", model.EXECUTABLE, "View sales orders"),
        Permission("approve_orders", "approve_orders", model.EXECUTABLE, "Approve sales orders"),
        Permission("view_payslip", "view_payslip", model.EXECUTABLE, "Employee self service"),
        Permission("orders_menu", "Orders", model.ABSTRACT, "Menu heading only"),
        Menu("EMP_MENU", (MenuEntry("permission", "view_payslip"),)),
        Menu(
            "SALES_MENU",
            (MenuEntry("permission", "orders_menu"), MenuEntry("permission", "view_orders"), MenuEntry("menu", "EMP_MENU")),
        ),
        Responsibility("EMPLOYEES", "EMP_MENU", "Employees"),
        Responsibility("SALES", "SALES_MENU", "Sales"),
        PermissionSet("SALES_PERSON.ps", frozenset({"view_orders"})),
        PermissionSet("SALES_MANAGER.ps", frozenset({"view_orders", "approve_orders"})),
        Role("SALES_PERSON", "Sales Person", "sales", frozenset({"EMPLOYEES"})),
        Role("SALES_MANAGER", "Sales Manager", "sales", frozenset({"EMPLOYEES", "SALES"})),
        Grant("SALES_PERSON.grant", "role", "SALES_PERSON", "SALES_PERSON.ps"),
        Grant("SALES_MANAGER.grant", "role", "SALES_MANAGER", "SALES_MANAGER.ps"),
        User("alice", "Alice (sales manager)", "SALES", model.ACTIVE, "sales_manager"),
        User("bob", "Bob (sales person)", "SALES", model.ACTIVE, "sales_person"),
        Assignment("alice", "SALES_MANAGER"),
        Assignment("bob", "SALES_PERSON"),
    ]
    return out


FIXTURES = {"purchasing": purchasing_entities, "sales": sales_entities}
FIXTURE_ROLES = {
    "purchasing": ("INQUIRY", "BUYER", "MANAGER"),
    "sales": ("SALES_PERSON", "SALES_MANAGER"),
}


def fixture_state(names: Iterable[str] = ("purchasing", "sales"), base: Optional[DirectoryState] = None) -> DirectoryState:
    """Seeded admin state plus the named example directories."""
    state = admin.seeded_state() if base is None else base
    if ROOT_UNIT.id not in state.org_units:
        state = model.add_org_unit(state, ROOT_UNIT)
    for name in names:
        if name not in FIXTURES:
            raise KeyError(f"unknown fixture {name!r}; expected one of {sorted(FIXTURES)}")
        state = model.build(state, FIXTURES[name]())
    return state


def fixture_catalogue(state: DirectoryState, names: Iterable[str] = ("purchasing", "sales")) -> RolesCatalogue:
    """Catalogue entries describing the fixture roles exactly as built."""
    entries = {}
    for name in names:
        for rid in FIXTURE_ROLES[name]:
            entries[rid] = definition_from_state(state, rid, f"fixture:{name}")
    return RolesCatalogue(entries)
