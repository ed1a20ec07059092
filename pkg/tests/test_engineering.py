from __future__ import annotations

import random
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

import gen
from rolecycle import admin, analysis, engineering, fixtures, model, sod
from rolecycle.canonical import canonicalize
from rolecycle.errors import (
    DanglingReference,
    EmptyPermissionSelection,
    ImmutableEntry,
    InvalidStatus,
    NotAuthorized,
)
from rolecycle.model import Grant, PermissionSet, Role, SodRule
from rolecycle.store import Store

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def ref():
    return fixtures.fixture_state()


def payload(rid="PO_VIEW", perms=("view_po", "approve_po"), users=("dave",)):
    return {"role": {"id": rid, "name": rid}, "permissions": list(perms), "candidate_users": list(users)}


def through_verify(entry, state, signed=()):
    sandbox, e = engineering.prototype_role(entry, state)
    report, e = engineering.verify_role(e, sandbox, state, signed)
    return report, e


def p123_state():
    s = gen.directory_from_profiles({"U1": frozenset({"p1", "p2"}), "U2": frozenset({"p2", "p3"})})
    s = model.build(s, [PermissionSet("D.ps", frozenset({"p2", "p3"})), Role("D"), Grant("D.grant", "role", "D", "D.ps")])
    return s


# -- design -----------------------------------------------------------------


def test_design_from_matched_candidate():
    s = p123_state()
    inp = analysis.ingest(s)
    (cand,) = [c for c in analysis.generate_candidates(inp, 2, 1) if c.permissions == {"p2"}]
    e = engineering.design_role(cand, s, entry_id="CE0001", analysis_version=4)
    assert e.status == engineering.DRAFT and e.version == 1
    assert e.candidate_users == {"U1", "U2"}
    assert e.lineage == engineering.Lineage(cand.id, 4)
    e2 = engineering.design_role(cand, s, entry_id="CE0002", analysis_version=4)
    assert e2.id != e.id and e2.lineage == e.lineage
    # Without an explicit id two designs still get distinct ids.
    assert engineering.design_role(cand, s).id != engineering.design_role(cand, s).id


def test_design_rejects_empty_or_dangling():
    with pytest.raises(EmptyPermissionSelection):
        engineering.design_role(payload(perms=()), ref())
    with pytest.raises(DanglingReference):
        engineering.design_role(payload(perms=("nope",)), ref())
    with pytest.raises(DanglingReference):
        engineering.design_role(payload(users=("ghost",)), ref())


# -- prototype --------------------------------------------------------------


def test_prototype_sandbox_and_isolation():
    s = ref()
    before = canonicalize(model.state_to_dict(s))
    e = engineering.design_role(payload(users=("erin",)), s, entry_id="CE0001")
    sandbox, e2 = engineering.prototype_role(e, s)
    assert e2.status == engineering.PROTOTYPED and e2.history == ("draft", "prototyped")
    for p in ("view_po", "approve_po"):
        assert model.check_access(sandbox, "erin", p).allowed
    assert not model.check_access(s, "erin", "approve_po").allowed
    assert canonicalize(model.state_to_dict(s)) == before
    with pytest.raises(InvalidStatus):
        engineering.prototype_role(e2, s)


def test_prototype_signed_off_rejected():
    s = ref()
    e = engineering.design_role(payload(), s, entry_id="CE0001")
    _, e = through_verify(e, s)
    e, _ = engineering.signoff(e, admin.BOOTSTRAP_USER, s)
    with pytest.raises(InvalidStatus):
        engineering.prototype_role(e, s)


# -- verify -----------------------------------------------------------------


def test_clean_design_verifies():
    s = ref()
    report, e = through_verify(engineering.design_role(payload(), s, entry_id="CE0001"), s)
    assert report.passed and e.status == engineering.VERIFIED
    assert [c.name for c in report.checks] == ["sod", "duplicate", "membership_qualifier", "permissions"]


def test_exact_duplicate_fails():
    s = ref()
    e = engineering.design_role(payload(perms=("view_po", "view_requisition"), users=()), s, entry_id="CE0001")
    report, e2 = through_verify(e, s)
    assert not report.passed and e2.status == engineering.PROTOTYPED
    (fail,) = report.failures
    assert fail.name == "duplicate" and fail.details["max_similarity"] == "1"
    assert fail.details["most_similar"] == ["role:INQUIRY"]


def test_candidate_with_conflicting_role_fails_sod():
    s = ref()
    s = sod.add_sod_rule(s, SodRule("SSD", model.PERMISSION_LEVEL, frozenset({"approve_po", "approve_orders"})))
    e = engineering.design_role(payload(perms=("approve_orders", "view_po"), users=("dave",)), s, entry_id="CE0001")
    report, e2 = through_verify(e, s)
    assert [c.name for c in report.failures] == ["sod"]
    (v,) = report.failures[0].details["new_violations"]
    assert v["rule"] == "SSD" and v["user"] == "dave"
    assert e2.status == engineering.PROTOTYPED


def test_membership_qualifier_check():
    s = ref()
    q = {"org_unit": "PURCHASING"}
    p = payload(perms=("view_po", "approve_orders"), users=("erin", "carol", "dave"))
    ok = engineering.design_role({**p, "membership_qualifier": q}, s, entry_id="CE0001")
    report, _ = through_verify(ok, s)
    assert report.passed
    bad = engineering.design_role({**p, "candidate_users": ["erin"], "membership_qualifier": q}, s, entry_id="CE0002")
    report, _ = through_verify(bad, s)
    (fail,) = report.failures
    assert fail.name == "membership_qualifier"
    assert fail.details["non_candidates_matching"] == ["carol", "dave"]


def test_verify_requires_prototyped():
    s = ref()
    e = engineering.design_role(payload(), s, entry_id="CE0001")
    with pytest.raises(InvalidStatus):
        engineering.verify_role(e, s, s)


def test_verification_is_idempotent():
    s = ref()
    e = engineering.design_role(payload(), s, entry_id="CE0001")
    r1, v = through_verify(e, s)
    sandbox = engineering.build_sandbox(v, s)
    assert engineering.run_checks(v, sandbox, s) == r1


# -- signoff ----------------------------------------------------------------


def test_signoff_examples():
    s = ref()
    cm = engineering.RoleConceptModel()
    e = engineering.design_role(payload(), s, entry_id="CE0001")
    with pytest.raises(InvalidStatus):
        engineering.signoff(e, admin.BOOTSTRAP_USER, s, cm)
    _, v = through_verify(e, s)
    with pytest.raises(NotAuthorized):
        engineering.signoff(v, "dave", s, cm)
    signed, cm2 = engineering.signoff(v, admin.BOOTSTRAP_USER, s, cm)
    assert signed.status == engineering.SIGNED_OFF
    assert len(cm2.entries) == len(cm.entries) + 1
    with pytest.raises(ImmutableEntry):
        cm2.put(replace(signed, permissions=frozenset({"view_po"})))
    finding = engineering.signoff_finding(signed)
    assert (finding["concept"], finding["version"], finding["role"]) == ("CE0001", 1, "PO_VIEW")


def test_edits_fork_new_draft_versions():
    s = ref()
    cm = engineering.RoleConceptModel()
    e = engineering.design_role(payload(), s, entry_id="CE0001")
    cm = cm.put(e)
    e, cm = cm.fork(e, permissions=["view_po"])
    assert e.version == 1 and e.status == engineering.DRAFT
    _, v = through_verify(e, s)
    signed, cm = engineering.signoff(v, admin.BOOTSTRAP_USER, s, cm)
    forked, cm = cm.fork(signed, permissions=["view_po", "update_po"])
    assert (forked.version, forked.status, forked.history) == (2, "draft", ("draft",))
    assert cm.get("CE0001", 1) == signed


def test_put_rejects_forged_status():
    e = engineering.design_role(payload(), ref(), entry_id="CE0001")
    with pytest.raises(InvalidStatus):
        engineering.RoleConceptModel().put(replace(e, status=engineering.SIGNED_OFF))
    with pytest.raises(InvalidStatus):
        engineering.RoleConceptModel().put(
            replace(e, status=engineering.SIGNED_OFF, history=("draft", "prototyped", "signed_off"))
        )


def test_concept_model_store_round_trip(tmp_path):
    s = ref()
    store = Store(tmp_path)
    e = engineering.design_role(payload(), s, entry_id="CE0001")
    _, v = through_verify(e, s)
    signed, cm = engineering.signoff(v, admin.BOOTSTRAP_USER, s)
    engineering.save_concept_model(store, cm)
    assert engineering.load_concept_model(store) == cm
    with pytest.raises(ImmutableEntry):
        engineering.save_concept_model(store, engineering.RoleConceptModel(), previous=cm)


# -- metrics ----------------------------------------------------------------


def test_metrics_examples():
    s = p123_state()
    e = engineering.design_role({"role": {"id": "NEW"}, "permissions": ["p1", "p2"]}, s, entry_id="CE0001")
    m = engineering.compute_quality_metrics(e, s)
    assert m.max_similarity == Fraction(1, 3)
    same = engineering.design_role({"role": {"id": "NEW"}, "permissions": ["p2", "p3"]}, s, entry_id="CE0002")
    assert engineering.compute_quality_metrics(same, s).max_similarity == 1
    alone = gen.directory_from_profiles({"U1": frozenset({"p1"})})
    e = engineering.design_role({"role": {"id": "NEW"}, "permissions": ["p1"], "candidate_users": ["U1"]}, alone)
    m = engineering.compute_quality_metrics(e, alone)
    assert m.max_similarity == 0
    assert (m.user_count, m.permission_count, m.hierarchy_depth, m.sod_adjacent, m.violation_count) == (1, 1, 0, False, 0)


def test_metrics_depth_and_sod_adjacency():
    s = ref()
    s = sod.add_sod_rule(s, SodRule("PSOD", model.PERMISSION_LEVEL, frozenset({"approve_po", "approve_orders"})))
    e = engineering.design_role(
        {"role": {"id": "TOP"}, "permissions": ["approve_orders"], "juniors": ["MANAGER"], "candidate_users": ["dave"]},
        s,
        entry_id="CE0001",
    )
    m = engineering.compute_quality_metrics(e, s)
    assert m.hierarchy_depth == 3
    assert m.sod_adjacent and m.violation_count == 1
    assert "PSOD" in e.sod_tags


@settings(max_examples=30)
@given(seeds, st.data())
def test_metrics_deterministic_and_pure(seed, data):
    rng = random.Random(seed)
    s = gen.random_directory(rng, 10, 20, 10)
    execs = sorted(p for p, d in s.permissions.items() if d.kind == model.EXECUTABLE)
    if not execs:
        return
    perms = data.draw(st.lists(st.sampled_from(execs), min_size=1, max_size=5, unique=True))
    users = data.draw(st.lists(st.sampled_from(sorted(s.users)), max_size=3, unique=True))
    e = engineering.design_role({"role": {"id": "ZZ"}, "permissions": perms, "candidate_users": users}, s, entry_id="CE0001")
    before = canonicalize(model.state_to_dict(s))
    m1 = engineering.compute_quality_metrics(e, s)
    m2 = engineering.compute_quality_metrics(e, model.state_from_dict(model.state_to_dict(s)))
    assert m1 == m2 and 0 <= m1.max_similarity <= 1
    sandbox, _ = engineering.prototype_role(e, s)
    assert canonicalize(model.state_to_dict(s)) == before
    assert model.effective_permissions(sandbox, "ZZ") == frozenset(perms)
