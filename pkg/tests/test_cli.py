from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from rolecycle.canonical import canonicalize, parse_canonical
from rolecycle.cli import COMMANDS, Result, cell, main, parse_table, render
from rolecycle.store import Store


def run(capsysbinary, root, *argv):
    code = main(["--store", str(root), *argv])
    out = capsysbinary.readouterr()
    return code, out.out, out.err.decode()


@pytest.fixture
def seeded(tmp_path, capsysbinary):
    root = tmp_path / "store"
    assert run(capsysbinary, root, "--as", "sysadmin", "fixtures", "seed")[0] == 0
    return root


# -- rendering ---------------------------------------------------------------


def test_cell_forms():
    assert [cell(None), cell(True), cell(False), cell(3), cell(["a", "b"]), cell({"b": 1, "a": 2})] == [
        "-", "true", "false", "3", "a,b", '{"a":2,"b":1}'
    ]


def test_render_table_and_json():
    r = Result([{"user": "dave", "allowed": True, "roles": ["A", "B"]}, {"user": "erin", "allowed": False, "roles": []}], ("user", "allowed", "roles"))
    table = render(r, "table").decode()
    assert table.splitlines()[0].split() == ["user", "allowed", "roles"]
    assert parse_table(table) == [{"user": "dave", "allowed": "true", "roles": "A,B"}, {"user": "erin", "allowed": "false", "roles": ""}]
    raw = render(r, "json")
    assert parse_canonical(raw) == r.rows
    assert render(r, "table") == render(r, "table")
    assert render(Result([]), "table") == b"" and render(Result([]), "json") == b"[]\n"


word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_.0123456789", min_size=1, max_size=8)
scalar = st.none() | st.booleans() | st.integers(-10**6, 10**6) | word
value = scalar | st.lists(word, max_size=3)


@settings(max_examples=200)
@given(st.lists(word, min_size=1, max_size=5, unique=True).flatmap(
    lambda cols: st.tuples(st.just(cols), st.lists(st.fixed_dictionaries({c: value for c in cols}), max_size=6))
))
def test_table_parse_back(spec):
    cols, rows = spec
    r = Result(rows, tuple(cols))
    assert parse_table(render(r, "table").decode()) == [{c: cell(row[c]) for c in cols} for row in rows]
    assert json.loads(render(r, "json")) == rows


# -- end to end --------------------------------------------------------------


def test_check_access_json_and_table(seeded, capsysbinary):
    code, out, _ = run(capsysbinary, seeded, "--format", "json", "check-access", "--user", "dave", "--perm", "approve_po")
    assert code == 0
    (d,) = parse_canonical(out)
    assert d["decision"] == "allow" and (d["role"], d["source"]) == ("MANAGER", "grant:MANAGER.grant")
    code, out, _ = run(capsysbinary, seeded, "check-access", "--user", "erin", "--perm", "approve_po")
    (row,) = parse_table(out.decode())
    assert code == 0 and (row["decision"], row["role"]) == ("deny", "-")


def test_global_flags_either_side_of_subcommand(seeded, capsysbinary):
    a = run(capsysbinary, seeded, "--format", "json", "--env", "test", "audit-sod")
    b = run(capsysbinary, seeded, "audit-sod", "--format", "json", "--env", "test")
    assert a == b and a[0] == 0 and parse_canonical(a[1]) == []


def test_read_only_commands_leave_the_store_alone(seeded, capsysbinary, tmp_path):
    store = Store(seeded)
    before = (store.tree_digest(), store.verify_chain().records)
    bundle = tmp_path / "bundle.json"
    read_only = [
        ["check-access", "--user", "dave", "--perm", "view_po"],
        ["audit-sod"],
        ["diff", "--env", "production"],
        ["history"],
        ["mine"],
        ["detect-deviations"],
        ["audit-log", "verify"],
        ["export-bundle", "--out", str(bundle)],
        ["metrics", "--entry", "NOPE"],
    ]
    names = {"audit-log verify" if argv[0] == "audit-log" else argv[0] for argv in read_only}
    assert names == {n for n, (_, m, _) in COMMANDS.items() if not m}
    for argv in read_only:
        code, _, err = run(capsysbinary, seeded, *argv)
        assert code in (0, 1, 2), (argv, code, err)
        assert (store.tree_digest(), store.verify_chain().records) == before, argv
    assert bundle.exists()


def test_each_mutation_writes_one_record(seeded, capsysbinary):
    store = Store(seeded)
    n = store.verify_chain().records
    assert run(capsysbinary, seeded, "--as", "sysadmin", "assign", "--user", "erin", "--role", "SALES_PERSON")[0] == 0
    assert store.verify_chain().records == n + 1
    rec = store.audit_records()[-1]
    assert (rec.actor, rec.operation) == ("sysadmin", "assign")
    assert run(capsysbinary, seeded, "--as", "sysadmin", "revoke", "--user", "erin", "--role", "SALES_PERSON")[0] == 0
    assert store.verify_chain().records == n + 2
    # A failing mutation writes nothing.
    tree = store.tree_digest()
    code, _, err = run(capsysbinary, seeded, "--as", "sysadmin", "revoke", "--user", "erin", "--role", "SALES_PERSON")
    assert code != 0 and err.startswith("rolecycle: ")
    assert store.tree_digest() == tree


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["no-such-command"],
        ["assign", "--user", "erin", "--role", "BUYER"],
        ["--format", "xml", "audit-sod"],
        ["check-access", "--user", "dave"],
        ["detect-deviations", "--on-event", "org-change"],
        ["audit-log"],
    ],
)
def test_usage_errors(seeded, capsysbinary, argv):
    tree = Store(seeded).tree_digest()
    assert run(capsysbinary, seeded, *argv)[0] == 2
    assert Store(seeded).tree_digest() == tree


def test_missing_store_is_usage_error(monkeypatch, capsysbinary):
    monkeypatch.delenv("ROLECYCLE_STORE", raising=False)
    assert main(["audit-sod"]) == 2
    assert "no store" in capsysbinary.readouterr().err.decode()


def test_store_from_environment_variable(seeded, monkeypatch, capsysbinary):
    monkeypatch.setenv("ROLECYCLE_STORE", str(seeded))
    assert main(["history"]) == 0
    assert len(parse_table(capsysbinary.readouterr().out.decode())) >= 2


def test_audit_log_verify_detects_tamper(seeded, capsysbinary):
    code, out, _ = run(capsysbinary, seeded, "--format", "json", "audit-log", "verify")
    assert code == 0 and parse_canonical(out)[0]["valid"]
    log = Store(seeded).audit_path
    raw = bytearray(log.read_bytes())
    raw[10] ^= 0x01
    log.write_bytes(bytes(raw))
    code, out, _ = run(capsysbinary, seeded, "--format", "json", "audit-log", "verify")
    assert code == 4 and parse_canonical(out) == [{"valid": False, "records": 0, "broken_at": 1}]


def test_corrupt_version_file_exits_4(seeded, capsysbinary):
    path = Store(seeded).path_for("environment", 1, "test")
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    assert run(capsysbinary, seeded, "audit-sod")[0] == 4


def test_detect_deviations_on_org_change(seeded, capsysbinary, tmp_path):
    empty = tmp_path / "org.json"
    empty.write_text(json.dumps({"org_units": [], "job_functions": [], "users": []}))
    code, out, _ = run(capsysbinary, seeded, "--format", "json", "detect-deviations", "--on-event", "org-change", "--org-file", str(empty))
    rows = parse_canonical(out)
    # Orphans are informational, so the sweep still exits clean.
    assert code == 0 and len(rows) == 8 and {r["kind"] for r in rows} == {"orphaned_assignment"}
    code, out, _ = run(capsysbinary, seeded, "--format", "json", "detect-deviations")
    assert code == 0 and parse_canonical(out) == []


def test_bad_input_files(seeded, capsysbinary, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsysbinary, seeded, "detect-deviations", "--org-file", str(bad))[0] == 2
    assert run(capsysbinary, seeded, "detect-deviations", "--org-file", str(tmp_path / "missing.json"))[0] == 2
    log = tmp_path / "usage.ndjson"
    log.write_text('{"user": "dave"}\n')
    assert run(capsysbinary, seeded, "detect-deviations", "--usage-log", str(log))[0] == 2


def test_audit_sod_findings_exit_1(seeded, capsysbinary):
    rule = {"op": "add_sod_rule", "id": "PSOD", "scope": "permission_level", "conflict_set": ["approve_po", "approve_orders"]}
    assert run(capsysbinary, seeded, "--as", "sysadmin", "edit", "--change", json.dumps(rule))[0] == 0
    store = Store(seeded)
    tree = store.tree_digest()
    code, _, err = run(capsysbinary, seeded, "--as", "sysadmin", "assign", "--user", "dave", "--role", "SALES_MANAGER", "--enforce-sod")
    assert code == 1 and "PSOD" in err and store.tree_digest() == tree
    code, _, err = run(capsysbinary, seeded, "--as", "sysadmin", "assign", "--user", "dave", "--role", "SALES_MANAGER")
    assert code == 0 and "advisory" in err
    code, out, _ = run(capsysbinary, seeded, "audit-sod")
    (row,) = parse_table(out.decode())
    assert code == 1 and (row["rule"], row["user"], row["witnesses"]) == ("PSOD", "dave", "approve_orders,approve_po")


def test_json_output_is_canonical(seeded, capsysbinary):
    for argv in (["history"], ["mine"], ["audit-log", "verify"], ["diff", "--env", "production"]):
        code, out, _ = run(capsysbinary, seeded, "--format", "json", *argv)
        assert canonicalize(json.loads(out)) == out, argv
