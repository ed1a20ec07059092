from __future__ import annotations

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

import gen
from rolecycle import admin, engineering, fixtures, management, model, sod
from rolecycle.catalogue import RolesCatalogue, definition_from_state
from rolecycle.errors import (
    CycleDetected,
    DigestMismatch,
    EmptyCatalogue,
    IntegrityFailure,
    InvalidEntity,
    NotAPartition,
    NotAuthorized,
    SodViolationError,
    UnknownRole,
)
from rolecycle.model import Grant, PermissionSet, Role, SodRule, User
from rolecycle.store import Store

seeds = st.integers(min_value=0, max_value=2**32 - 1)
SYS = admin.BOOTSTRAP_USER


def fixture_catalogue():
    return fixtures.fixture_catalogue(fixtures.fixture_state())


def deployed(name="test"):
    cat = fixture_catalogue()
    env, _ = management.apply(management.export_bundle(cat), management.new_environment(name), SYS)
    return env, cat


def with_users(env, assignments):
    src = fixtures.fixture_state()
    state = model.build(env.state, [src.org_units[u] for u in ("ACME", "PURCHASING", "SALES")])
    for u in sorted({u for u, _ in assignments}):
        state = model.add_user(state, src.users[u] if u in src.users else User(u))
    for u, r in assignments:
        state = model.assign_role(state, u, r)
    return replace(env, state=state)


def access_table(state):
    return {
        (u, p): model.check_access(state, u, p).allowed for u in sorted(state.users) for p in sorted(state.permissions)
    }


# -- bundles ----------------------------------------------------------------


def test_export_examples():
    cat = fixture_catalogue()
    a, b = management.export_bundle(cat), management.export_bundle(cat)
    assert a.digest == b.digest and management.bundle_bytes(a) == management.bundle_bytes(b)
    changed = cat.supersede(replace(cat.entries["BUYER"], sod_tags=frozenset({"X"})))
    assert management.export_bundle(changed).digest != a.digest
    with pytest.raises(EmptyCatalogue):
        management.export_bundle(RolesCatalogue())


def test_tampered_bundle_rejected():
    raw = bytearray(management.bundle_bytes(management.export_bundle(fixture_catalogue())))
    i = raw.index(b"view_po")
    raw[i] ^= 0x01
    with pytest.raises(DigestMismatch):
        management.parse_bundle(bytes(raw))
    good = management.export_bundle(fixture_catalogue())
    forged = replace(good, body={**good.body, "source_version": 99})
    with pytest.raises(DigestMismatch):
        management.diff(forged, management.new_environment("t"))
    with pytest.raises(DigestMismatch):
        management.apply(forged, management.new_environment("t"), SYS)


# -- diff / apply -----------------------------------------------------------


def test_diff_examples():
    env, cat = deployed()
    bundle = management.export_bundle(cat)
    assert not management.diff(bundle, env)
    gone = replace(env, state=replace(env.state, roles={k: v for k, v in env.state.roles.items() if k != "INQUIRY"},
                                      grants={k: v for k, v in env.state.grants.items() if k != "INQUIRY.grant"},
                                      edges=frozenset(e for e in env.state.edges if "INQUIRY" not in e)))
    kinds = [c.kind for c in management.diff(bundle, gone).changes]
    assert kinds.count("create_role") == 1 and [c.subject for c in management.diff(bundle, gone).changes if c.kind == "create_role"] == ["INQUIRY"]
    extra = model.build(env.state, [PermissionSet("X.ps", frozenset({"approve_orders"})), Grant("X.grant", "role", "BUYER", "X.ps")])
    (c,) = management.diff(bundle, replace(env, state=extra)).changes
    assert (c.kind, c.subject) == ("remove_grant", "X.grant")


def test_apply_examples():
    env, cat = deployed()
    for rid, defn in cat.entries.items():
        assert env.state.roles[rid].status == model.ACTIVE
    assert env.managed_roles == set(cat.entries)
    fresh_roles = set(management.new_environment("t").state.roles)
    assert set(env.state.roles) - fresh_roles == set(cat.entries)
    env2, cs = management.apply(management.export_bundle(cat), env, SYS)
    assert not cs and management.environment_bytes(env2) == management.environment_bytes(env)
    with pytest.raises(NotAuthorized):
        management.apply(management.export_bundle(cat), management.new_environment("t"), "dave")


def test_apply_cycle_with_local_edge_rolls_back():
    env, cat = deployed()
    state = model.build(env.state, [Role("LOCAL")])
    state = model.add_inheritance(state, "INQUIRY", "LOCAL")
    env = replace(env, state=state)
    bad = cat.supersede(replace(cat.entries["INQUIRY"], juniors=frozenset({"MANAGER"})))
    before = management.environment_bytes(env)
    with pytest.raises(IntegrityFailure):
        management.apply(management.export_bundle(bad), env, SYS)
    assert management.environment_bytes(env) == before


def test_apply_leaves_local_entities_alone():
    env, cat = deployed()
    env = with_users(env, [("erin", "INQUIRY")])
    env = replace(env, state=model.build(env.state, [Role("LOCAL_ONLY")]))
    env2, _ = management.apply(management.export_bundle(cat.remove("SALES_PERSON")), env, SYS)
    assert "LOCAL_ONLY" in env2.state.roles and env2.state.roles["LOCAL_ONLY"].status == model.ACTIVE
    # A role the previous deployment managed but the new catalogue dropped is archived.
    assert env2.state.roles["SALES_PERSON"].status == model.ARCHIVED
    assert env2.state.assignments[("erin", "INQUIRY")].active


def test_change_set_reproduces_after_state():
    env, cat = deployed()
    cat2 = cat.supersede(replace(cat.entries["BUYER"], juniors=frozenset()))
    cs = management.diff(management.export_bundle(cat2), env)
    env2, applied = management.apply(management.export_bundle(cat2), env, SYS)
    assert applied == cs
    assert management.apply_changes(env.state, management.ChangeSet.from_dict(cs.to_dict())) == env2.state


def test_environment_persistence(tmp_path):
    store = Store(tmp_path)
    assert management.load_environment(store, "prod").state == management.new_environment("prod").state
    env, _ = deployed("prod")
    management.save_environment(store, env)
    assert management.load_environment(store, "prod") == env


@settings(max_examples=30)
@given(seeds)
def test_round_trip_and_idempotence(seed):
    rng = random.Random(seed)
    src = gen.random_directory(rng, 12, 30, 5, archive_p=0.0)
    roles = sorted(src.roles)
    cat = RolesCatalogue({r: definition_from_state(src, r, "test") for r in roles})
    bundle = management.parse_bundle(management.bundle_bytes(management.export_bundle(cat)))
    env, _ = management.apply(bundle, management.new_environment("t"), SYS)
    for r in roles:
        assert model.effective_permissions(env.state, r) == model.effective_permissions(src, r)
    assert not management.diff(bundle, env)
    env2, cs = management.apply(bundle, env, SYS)
    assert not cs and env2 == env


# -- split / merge ----------------------------------------------------------


def sales_split_env():
    env, cat = deployed()
    return with_users(env, [("alice", "SALES_MANAGER"), ("bob", "SALES_PERSON")]), cat


def test_split_preserves_access():
    env, cat = sales_split_env()
    before = access_table(env.state)
    res = management.split_role(env, "SALES_MANAGER", (["view_orders"], ["approve_orders"]), SYS, catalogue=cat)
    assert res.roles == ("SALES_MANAGER_1", "SALES_MANAGER_2")
    st_ = res.environment.state
    assert st_.roles["SALES_MANAGER"].status == model.ARCHIVED
    assert all(st_.roles[r].status == model.ACTIVE for r in res.roles)
    assert model.effective_roles(st_, "alice") == set(res.roles)
    assert access_table(st_) == before
    assert "SALES_MANAGER" not in res.catalogue.entries
    assert res.catalogue.entries["SALES_MANAGER_1"].source == "split:SALES_MANAGER"


def test_split_with_sod_rule_requires_membership_map():
    env, _ = sales_split_env()
    env = replace(env, state=sod.add_sod_rule(env.state, SodRule("PSOD", model.PERMISSION_LEVEL, frozenset({"view_orders", "approve_orders"}))))
    # alice already violates; the split must refuse to keep her on both halves.
    with pytest.raises(SodViolationError) as err:
        management.split_role(env, "SALES_MANAGER", (["view_orders"], ["approve_orders"]), SYS)
    assert "alice" in str(err.value)
    res = management.split_role(
        env, "SALES_MANAGER", (["view_orders"], ["approve_orders"]), SYS, membership_map={"alice": "SALES_MANAGER_2"}
    )
    assert model.assigned_roles(res.environment.state, "alice") == {"SALES_MANAGER_2"}


def test_split_rejects_non_partitions():
    env, _ = sales_split_env()
    for part in ((["view_orders"], []), (["view_orders"], ["view_orders", "approve_orders"]), (["view_orders"], ["nope"])):
        with pytest.raises(NotAPartition):
            management.split_role(env, "SALES_MANAGER", part, SYS)
    with pytest.raises(NotAPartition):
        management.split_role(env, "SALES_MANAGER", (["view_orders"], ["approve_orders", "extra"]), SYS)
    with pytest.raises(UnknownRole):
        management.split_role(env, "NOPE", (["a"], ["b"]), SYS)
    with pytest.raises(NotAuthorized):
        management.split_role(env, "SALES_MANAGER", (["view_orders"], ["approve_orders"]), "bob")


def test_merge_examples():
    env, cat = sales_split_env()
    original = env.state
    res = management.split_role(env, "SALES_MANAGER", (["view_orders"], ["approve_orders"]), SYS, catalogue=cat)
    m = management.merge_roles(res.environment, res.roles, "SALES_MANAGER_M", SYS, catalogue=res.catalogue)
    st_ = m.environment.state
    assert model.effective_permissions(st_, "SALES_MANAGER_M") == model.effective_permissions(original, "SALES_MANAGER")
    assert model.role_members(st_, "SALES_MANAGER_M") == model.role_members(original, "SALES_MANAGER")
    assert m.catalogue.entries["SALES_MANAGER_M"].source == "merge:SALES_MANAGER_1+SALES_MANAGER_2"
    with pytest.raises(InvalidEntity):
        management.merge_roles(env, ["BUYER"], "X", SYS)
    with pytest.raises(NotAuthorized):
        management.merge_roles(env, ["BUYER", "INQUIRY"], "X", "bob")


def test_merge_sod_conflict():
    env, _ = deployed()
    env = with_users(env, [("carol", "BUYER"), ("bob", "SALES_PERSON")])
    state = model.build(env.state, [Role("C")])
    state = model.assign_role(state, "carol", "C")
    state = sod.add_sod_rule(state, SodRule("SSD", model.ROLE_LEVEL, frozenset({"C", "SALES_PERSON"})))
    state = sod.add_sod_rule(state, SodRule("PSOD", model.PERMISSION_LEVEL, frozenset({"create_po", "approve_orders"})))
    env = replace(env, state=state)
    before = management.environment_bytes(env)
    with pytest.raises(SodViolationError):
        management.merge_roles(env, ["BUYER", "SALES_MANAGER"], "X", SYS)
    assert management.environment_bytes(env) == before


def test_merge_cycle_detected():
    env, _ = deployed()
    state = model.build(env.state, [Role("MID")])
    state = model.add_inheritance(state, "MID", "INQUIRY")
    state = model.remove_inheritance(state, "BUYER", "INQUIRY")
    state = model.add_inheritance(state, "BUYER", "MID")
    env = replace(env, state=state)
    # Merging MANAGER with MID would make the merged role both senior and junior of BUYER.
    with pytest.raises(CycleDetected):
        management.merge_roles(env, ["MANAGER", "MID"], "X", SYS)


@settings(max_examples=30)
@given(seeds, st.data())
def test_split_merge_inversion(seed, data):
    rng = random.Random(seed)
    state = gen.random_directory(rng, 10, 25, 15, archive_p=0.0, seeded=True)
    env = management.Environment("t", state)
    candidates = [r for r in sorted(state.roles) if not admin.is_seeded_entity("role", r) and len(model.direct_grant_permissions(state, r)) >= 2]
    if not candidates:
        return
    rid = data.draw(st.sampled_from(candidates))
    direct = sorted(model.direct_grant_permissions(state, rid))
    p1 = data.draw(st.lists(st.sampled_from(direct), min_size=1, max_size=len(direct) - 1, unique=True))
    p2 = [p for p in direct if p not in p1]
    before = access_table(state)
    split = management.split_role(env, rid, (p1, p2), SYS)
    assert access_table(split.environment.state) == before
    merged = management.merge_roles(split.environment, split.roles, rid + "_m", SYS)
    after = merged.environment.state
    assert model.effective_permissions(after, rid + "_m") == model.effective_permissions(state, rid)
    assert model.role_members(after, rid + "_m") == model.role_members(state, rid)
    assert access_table(after) == before


# -- admin ops --------------------------------------------------------------


def operator_env():
    env, _ = deployed()
    env = with_users(env, [("erin", "INQUIRY")])
    for u, r in (("op_um", admin.USER_MANAGEMENT), ("op_fa", admin.FUNCTIONAL_ADMINISTRATOR), ("op_fd", admin.FUNCTIONAL_DEVELOPER)):
        env = management.admin_edit_relationships(env, {"op": "add_user", "id": u}, SYS).environment
        env = management.admin_assign(env, u, r, SYS).environment
    return env


SAMPLE_EDITS = {
    "add_permission": {"id": "new.perm"},
    "add_object_instance_set": {"id": "OIS", "object_name": "PO"},
    "add_menu": {"id": "MENU", "entries": [["permission", "view_po"]]},
    "add_responsibility": {"id": "RESP", "menu": "EMP_MENU"},
    "add_permission_set": {"id": "PS", "members": ["view_po"]},
    "add_grant": {"id": "G", "grantee_kind": "role", "grantee": "BUYER", "permission_set": "INQUIRY.ps"},
    "remove_grant": {"id": "BUYER.grant"},
    "add_role": {"id": "NEWROLE"},
    "archive_role": {"id": "SALES_PERSON"},
    "add_inheritance": {"senior": "SALES_MANAGER", "junior": "SALES_PERSON"},
    "remove_inheritance": {"senior": "MANAGER", "junior": "BUYER"},
    "add_sod_rule": {"id": "S", "scope": "role_level", "conflict_set": ["BUYER", "SALES_PERSON"], "cardinality": 2},
    "add_org_unit": {"id": "OU_NEW", "parent": "ACME"},
    "add_user": {"id": "zoe"},
    "add_group": {"id": "GRP", "members": ["erin"]},
    "add_group_member": {"group": "GRP0", "user": "erin"},
    "assign": {"user": "erin", "role": "SALES_PERSON"},
    "revoke": {"user": "erin", "role": "INQUIRY"},
}


def test_sample_edits_cover_every_op():
    assert set(SAMPLE_EDITS) == set(management.EDIT_OPS)


@pytest.mark.parametrize("op", sorted(SAMPLE_EDITS))
def test_edit_gate_completeness(op):
    env = operator_env()
    env = replace(env, state=model.build(env.state, [model.UserGroup("GRP0")]))
    required = management.EDIT_OPS[op]
    holders = {admin.USER_MANAGEMENT: "op_um", admin.FUNCTIONAL_ADMINISTRATOR: "op_fa", admin.FUNCTIONAL_DEVELOPER: "op_fd"}
    change = {"op": op, **SAMPLE_EDITS[op]}
    for role, actor in holders.items():
        if role != required:
            with pytest.raises(NotAuthorized):
                management.admin_edit_relationships(env, change, actor)
    with pytest.raises(NotAuthorized):
        management.admin_edit_relationships(env, change, "erin")
    res = management.admin_edit_relationships(env, change, holders[required])
    assert res.environment != env
    res = management.admin_edit_relationships(env, change, SYS)
    assert res.subjects


def test_module_level_gates():
    env = operator_env()
    cat = fixture_catalogue()
    for actor in ("erin", "op_um", "op_fd"):
        with pytest.raises(NotAuthorized):
            management.apply(management.export_bundle(cat), env, actor)
        with pytest.raises(NotAuthorized):
            management.split_role(env, "SALES_MANAGER", (["view_orders"], ["approve_orders"]), actor)
        with pytest.raises(NotAuthorized):
            management.merge_roles(env, ["BUYER", "INQUIRY"], "X", actor)
    for actor in ("erin", "op_fa", "op_fd"):
        with pytest.raises(NotAuthorized):
            management.admin_assign(env, "erin", "BUYER", actor)
        with pytest.raises(NotAuthorized):
            management.admin_revoke(env, "erin", "INQUIRY", actor)
    for name, role in management.REQUIRED_ROLE.items():
        assert role in admin.ADMIN_ROLES, name


def test_um_cannot_create_grants_and_bootstrap_can_delegate():
    env = operator_env()
    with pytest.raises(NotAuthorized):
        management.admin_edit_relationships(env, {"op": "add_grant", **SAMPLE_EDITS["add_grant"]}, "op_um")
    env = management.admin_edit_relationships(env, {"op": "add_user", "id": "op2"}, SYS).environment
    env = management.admin_assign(env, "op2", admin.USER_MANAGEMENT, SYS).environment
    assert admin.holds(env.state, "op2", admin.USER_MANAGEMENT)


def test_edit_on_archived_role():
    env = operator_env()
    env = management.admin_edit_relationships(env, {"op": "archive_role", "id": "SALES_PERSON"}, SYS).environment
    with pytest.raises(UnknownRole):
        management.admin_edit_relationships(env, {"op": "add_inheritance", "senior": "SALES_MANAGER", "junior": "SALES_PERSON"}, SYS)
    with pytest.raises(UnknownRole):
        management.admin_edit_relationships(env, {"op": "add_grant", **{**SAMPLE_EDITS["add_grant"], "grantee": "SALES_PERSON"}}, SYS)


def test_assign_advisories_and_enforcement():
    env = operator_env()
    env = replace(env, state=sod.add_sod_rule(env.state, SodRule("SSD", model.ROLE_LEVEL, frozenset({"INQUIRY", "SALES_PERSON"}))))
    res = management.admin_assign(env, "erin", "SALES_PERSON", "op_um")
    assert [v.rule for v in res.advisories] == ["SSD"]
    with pytest.raises(SodViolationError):
        management.admin_assign(env, "erin", "SALES_PERSON", "op_um", enforce_sod=True)


def test_signoff_gate_uses_same_admin_role():
    env = operator_env()
    e = engineering.design_role({"role": {"id": "Z"}, "permissions": ["view_po", "approve_orders"]}, env.state, entry_id="CE0001")
    sandbox, e = engineering.prototype_role(e, env.state)
    _, e = engineering.verify_role(e, sandbox, env.state)
    for actor in ("op_um", "op_fd", "erin"):
        with pytest.raises(NotAuthorized):
            engineering.signoff(e, actor, env.state)
    engineering.signoff(e, "op_fa", env.state)
