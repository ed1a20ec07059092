"""Command-line administration surface.

Every subcommand resolves to a handler returning a :class:`Result` (rows
plus an exit code). Mutating handlers run under the store's writer lock,
pass the admin gate for the acting user (``--as``) in the target
environment, and append exactly one audit record when they complete.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from . import admin, analysis, engineering, fixtures, maintenance, management, model, sod
from .admin import FUNCTIONAL_ADMINISTRATOR
from .canonical import canonicalize, digest
from .catalogue import RolesCatalogue, catalogue_from_dict
from .errors import (
    EXIT_FINDINGS,
    EXIT_INTEGRITY,
    EXIT_OK,
    EXIT_USAGE,
    InputError,
    RolecycleError,
    SodViolationError,
    UnknownCatalogueVersion,
    UnknownVersion,
)
from .store import Store

DEFAULT_ENV = "test"


@dataclass
class Result:
    rows: list[dict[str, Any]]
    columns: tuple[str, ...] = ()
    exit_code: int = EXIT_OK
    notes: list[str] = field(default_factory=list)


@dataclass
class Context:
    store: Store
    actor: Optional[str]
    env_name: str
    fmt: str
    args: argparse.Namespace


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def cell(value: Any) -> str:
    """Single-line text form of a JSON value as used in table output."""
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(cell(v) if not isinstance(v, (dict, list)) else canonicalize(v).decode().strip() for v in value)
    if isinstance(value, dict):
        return canonicalize(value).decode().strip()
    return str(value)


def render(result: Result, fmt: str) -> bytes:
    if fmt == "json":
        return canonicalize(result.rows)
    columns = list(result.columns)
    if not columns:
        for row in result.rows:
            columns += [k for k in row if k not in columns]
    table = [[cell(row.get(c)) for c in columns] for row in result.rows]
    widths = [max([len(c)] + [len(r[i]) for r in table]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in table]
    return ("\n".join(lines) + "\n").encode("utf-8") if columns else b""


def parse_table(text: str) -> list[dict[str, str]]:
    """Inverse of :func:`render` for table output (cells come back as text)."""
    # Strip only the final terminator: a row of blank cells is an empty line.
    lines = (text[:-1] if text.endswith("\n") else text).split("\n")
    if not lines[0]:
        return []
    header = lines[0]
    names, starts = [], []
    i = 0
    while i < len(header):
        if header[i] != " " and (i == 0 or header[i - 1] == " "):
            starts.append(i)
            j = header.find("  ", i)
            names.append(header[i : j if j != -1 else len(header)].strip())
        i += 1
    out = []
    for line in lines[1:]:
        row = {}
        for k, (name, s) in enumerate(zip(names, starts)):
            e = starts[k + 1] if k + 1 < len(starts) else None
            row[name] = line[s:e].rstrip() if e is not None else line[s:].rstrip()
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# store helpers
# ---------------------------------------------------------------------------


def _env(ctx: Context) -> management.Environment:
    return management.load_environment(ctx.store, ctx.env_name)


def _env_digest(env: management.Environment) -> str:
    return digest(management.environment_to_dict(env))


def _save_env(ctx: Context, before: management.Environment, after: management.Environment) -> None:
    if ctx.store.latest_version("environment", after.name) is None or _env_digest(before) != _env_digest(after):
        management.save_environment(ctx.store, after)


def _roles_catalogue(ctx: Context, version: Optional[int] = None) -> RolesCatalogue:
    if ctx.store.latest_version("roles") is None and version is None:
        return RolesCatalogue()
    try:
        header, body = ctx.store.load_with_header("roles", version)
    except UnknownVersion as exc:
        raise UnknownCatalogueVersion(str(exc)) from None
    return catalogue_from_dict(body, header["version"])


def _concept_model(ctx: Context) -> tuple[engineering.RoleConceptModel, Optional[int]]:
    return engineering.load_concept_model(ctx.store), ctx.store.latest_version("concept")


def _body_digest(ctx: Context, kind: str) -> Optional[str]:
    v = ctx.store.latest_version(kind)
    return None if v is None else digest(ctx.store.load(kind, v))


def _audit(ctx: Context, op: str, subjects: Sequence[str], before: Optional[str], after: Optional[str]) -> None:
    ctx.store.append_audit(ctx.actor or "", op, list(subjects), before, after)


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None


def _org(ctx: Context, state: model.DirectoryState) -> analysis.OrgSnapshot:
    path = getattr(ctx.args, "org_file", None)
    if path:
        return analysis.org_from_dict(_read_json(path))
    return analysis.org_from_state(state)


def _csv(text: Optional[str]) -> list[str]:
    return [x for x in (text or "").split(",") if x]


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


def _candidate_rows(cands: Sequence[analysis.CandidateRole]) -> list[dict[str, Any]]:
    return [
        {
            "id": c.id,
            "permissions": sorted(c.permissions),
            "members": sorted(c.members),
            "org_unit": c.matched_org_unit,
            "provenance": list(c.provenance),
            "coverage": c.coverage_score,
        }
        for c in cands
    ]


def _analysis_input(ctx: Context) -> tuple[analysis.AnalysisInput, dict[str, int]]:
    env = _env(ctx)
    inp = analysis.ingest(env.state, _org(ctx, env.state))
    return inp, {"min_users": ctx.args.min_users, "min_perms": ctx.args.min_perms}


def cmd_mine(ctx: Context) -> Result:
    inp, params = _analysis_input(ctx)
    return Result(_candidate_rows(analysis.mine_bottom_up(inp, **params)))


def cmd_analyze(ctx: Context) -> Result:
    admin.require(_env(ctx).state, ctx.actor, FUNCTIONAL_ADMINISTRATOR)
    inp, params = _analysis_input(ctx)
    bottom = analysis.mine_bottom_up(inp, **params)
    cands = analysis.reconcile(bottom, analysis.derive_top_down(inp), inp.org)
    before = _body_digest(ctx, "analysis")
    v = analysis.write_analysis_catalogue(ctx.store, cands, inp, params)
    _audit(ctx, "analyze", [f"analysis@{v}"], before, _body_digest(ctx, "analysis"))
    return Result(_candidate_rows(cands), notes=[f"analysis catalogue version {v}"])


# ---------------------------------------------------------------------------
# engineering
# ---------------------------------------------------------------------------


def _entry_row(e: engineering.ConceptEntry) -> dict[str, Any]:
    return {
        "entry": e.id,
        "version": e.version,
        "role": e.role.id,
        "status": e.status,
        "permissions": sorted(e.permissions),
        "juniors": sorted(e.juniors),
        "candidate_users": sorted(e.candidate_users),
    }


def _concept_op(
    ctx: Context, op: str, fn: Callable[[management.Environment, engineering.RoleConceptModel], tuple]
) -> Result:
    """Shared skeleton for commands that rewrite the concept model."""
    env = _env(ctx)
    admin.require(env.state, ctx.actor, FUNCTIONAL_ADMINISTRATOR)
    cm, _ = _concept_model(ctx)
    before = _body_digest(ctx, "concept")
    entry, new_cm, result = fn(env, cm)
    if new_cm.to_dict() != cm.to_dict() or ctx.store.latest_version("concept") is None:
        engineering.save_concept_model(ctx.store, new_cm, cm)
    _audit(ctx, op, [f"{entry.id}@{entry.version}", entry.role.id], before, _body_digest(ctx, "concept"))
    return result


def cmd_design(ctx: Context) -> Result:
    a = ctx.args

    def run(env, cm):
        qualifier = engineering.MembershipQualifier(a.qualifier_unit, a.qualifier_job) if a.qualifier_unit else None
        common = dict(
            entry_id=cm.next_entry_id(),
            role_id=a.role_id,
            name=a.name or "",
            category=a.category or "",
            juniors=a.junior or (),
            qualifier=qualifier,
        )
        if a.payload:
            entry = engineering.design_role(_read_json(a.payload), env.state, **common)
        elif a.candidate:
            try:
                cat = analysis.load_analysis_catalogue(ctx.store, a.analysis_version)
            except UnknownVersion as exc:
                raise UnknownCatalogueVersion(str(exc)) from None
            entry = engineering.design_role(
                cat.candidate(a.candidate), env.state, analysis_version=cat.version, **common
            )
        else:
            raise InputError("design needs --candidate or --payload")
        return entry, cm.put(entry), Result([_entry_row(entry)])

    return _concept_op(ctx, "design", run)


def cmd_edit_entry(ctx: Context) -> Result:
    a = ctx.args

    def run(env, cm):
        entry = cm.get(a.entry, a.version)
        changes: dict[str, Any] = {}
        if a.permissions is not None:
            changes["permissions"] = _csv(a.permissions)
        if a.juniors is not None:
            changes["juniors"] = _csv(a.juniors)
        if a.candidate_users is not None:
            changes["candidate_users"] = _csv(a.candidate_users)
        edited, new_cm = cm.fork(entry, **changes)
        engineering.check_references(edited, env.state)
        return edited, new_cm, Result([_entry_row(edited)])

    return _concept_op(ctx, "edit-entry", run)


def cmd_prototype(ctx: Context) -> Result:
    a = ctx.args

    def run(env, cm):
        entry = cm.get(a.entry, a.version)
        sandbox, proto = engineering.prototype_role(entry, env.state)
        row = _entry_row(proto)
        row["effective_permissions"] = sorted(model.effective_permissions(sandbox, proto.role.id))
        row["members"] = sorted(model.role_members(sandbox, proto.role.id))
        return proto, cm.put(proto), Result([row])

    return _concept_op(ctx, "prototype", run)


def cmd_verify(ctx: Context) -> Result:
    a = ctx.args

    def run(env, cm):
        entry = cm.get(a.entry, a.version)
        if entry.status != engineering.PROTOTYPED:
            engineering.verify_role(entry, env.state, env.state)  # raises InvalidStatus
        sandbox = engineering.build_sandbox(entry, env.state)
        report, after = engineering.verify_role(entry, sandbox, env.state, cm.signed_off())
        rows = [{"check": c.name, "passed": c.passed, "details": dict(c.details)} for c in report.checks]
        code = EXIT_OK if report.passed else EXIT_FINDINGS
        return after, cm.put(after), Result(rows, ("check", "passed", "details"), code, [f"{after.id}@{after.version}: {after.status}"])

    return _concept_op(ctx, "verify", run)


def cmd_signoff(ctx: Context) -> Result:
    a = ctx.args
    env = _env(ctx)
    admin.require(env.state, ctx.actor, FUNCTIONAL_ADMINISTRATOR)
    cm, _ = _concept_model(ctx)
    entry = cm.get(a.entry, a.version)
    signed, new_cm = engineering.signoff(entry, ctx.actor, env.state, cm)
    before = digest({"concept": _body_digest(ctx, "concept"), "roles": _body_digest(ctx, "roles")})
    catalogue = _roles_catalogue(ctx).supersede(engineering.role_definition(signed, env.state))
    engineering.save_concept_model(ctx.store, new_cm, cm)
    rv = ctx.store.save("roles", catalogue.to_dict())
    notes = [f"roles catalogue version {rv}"]
    if signed.lineage is not None and ctx.store.latest_version("analysis") is not None:
        av = analysis.record_findings(ctx.store, [engineering.signoff_finding(signed)])
        notes.append(f"analysis catalogue version {av} records the sign-off")
    after = digest({"concept": _body_digest(ctx, "concept"), "roles": _body_digest(ctx, "roles")})
    _audit(ctx, "signoff", [f"{signed.id}@{signed.version}", signed.role.id], before, after)
    return Result([_entry_row(signed)], notes=notes)


def cmd_metrics(ctx: Context) -> Result:
    cm, _ = _concept_model(ctx)
    entry = cm.get(ctx.args.entry, ctx.args.version)
    m = engineering.compute_quality_metrics(entry, _env(ctx).state, cm.signed_off())
    return Result([{"entry": entry.id, "version": entry.version, **m.to_dict()}])


# ---------------------------------------------------------------------------
# management
# ---------------------------------------------------------------------------


def _bundle(ctx: Context) -> management.DeploymentBundle:
    path = getattr(ctx.args, "bundle", None)
    if path:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc.strerror}") from None
        return management.parse_bundle(raw)
    return management.export_bundle(_roles_catalogue(ctx, ctx.args.catalogue_version))


def _change_rows(cs: management.ChangeSet) -> list[dict[str, Any]]:
    return [{"kind": c.kind, "subject": c.subject} for c in cs.changes]


def cmd_export_bundle(ctx: Context) -> Result:
    bundle = management.export_bundle(_roles_catalogue(ctx, ctx.args.catalogue_version))
    data = management.bundle_bytes(bundle)
    if ctx.args.out:
        Path(ctx.args.out).write_bytes(data)
    return Result([{"source_version": bundle.source_version, "digest": bundle.digest, "roles": len(bundle.body["entries"])}])


def cmd_diff(ctx: Context) -> Result:
    return Result(_change_rows(management.diff(_bundle(ctx), _env(ctx))), ("kind", "subject"))


def cmd_deploy(ctx: Context) -> Result:
    env = _env(ctx)
    admin.require(env.state, ctx.actor, FUNCTIONAL_ADMINISTRATOR)
    bundle = _bundle(ctx)
    after, cs = management.apply(bundle, env, ctx.actor)
    _save_env(ctx, env, after)
    subjects = [f"{env.name}"] + sorted({c.subject for c in cs.changes})
    _audit(ctx, "deploy", subjects, _env_digest(env), _env_digest(after))
    return Result(_change_rows(cs), ("kind", "subject"), notes=[f"{len(cs)} change(s) applied to {env.name}"])


def _env_op(ctx: Context, op: str, fn: Callable[[management.Environment], tuple]) -> Result:
    env = _env(ctx)
    after, subjects, result = fn(env)
    _save_env(ctx, env, after)
    _audit(ctx, op, [env.name, *subjects], _env_digest(env), _env_digest(after))
    return result


def _violation_rows(vs: Sequence[sod.SodViolation]) -> list[dict[str, Any]]:
    return [{"rule": v.rule, "user": v.user, "witnesses": sorted(v.witnesses)} for v in vs]


def cmd_assign(ctx: Context) -> Result:
    a = ctx.args

    def run(env):
        res = management.admin_assign(env, a.user, a.role, ctx.actor, enforce_sod=a.enforce_sod)
        notes = [f"advisory: SOD rule {v.rule} would be violated by {v.user}" for v in res.advisories]
        return res.environment, [a.user, a.role], Result([{"user": a.user, "role": a.role, "active": True}], notes=notes)

    return _env_op(ctx, "assign", run)


def cmd_revoke(ctx: Context) -> Result:
    a = ctx.args

    def run(env):
        res = management.admin_revoke(env, a.user, a.role, ctx.actor)
        return res.environment, [a.user, a.role], Result([{"user": a.user, "role": a.role, "active": False}])

    return _env_op(ctx, "revoke", run)


def _save_catalogue_if_changed(ctx: Context, old: RolesCatalogue, new: Optional[RolesCatalogue]) -> list[str]:
    if new is None or new.to_dict() == old.to_dict():
        return []
    return [f"roles catalogue version {ctx.store.save('roles', new.to_dict())}"]


def cmd_split(ctx: Context) -> Result:
    a = ctx.args
    mapping = {}
    for item in a.map or ():
        user, sep, role = item.partition("=")
        if not sep:
            raise InputError(f"--map expects user=ROLE, got {item!r}")
        mapping[user] = role
    names = tuple(_csv(a.names)) if a.names else None
    if names is not None and len(names) != 2:
        raise InputError("--names expects two comma-separated role ids")

    def run(env):
        cat = _roles_catalogue(ctx)
        res = management.split_role(env, a.role, (_csv(a.p1), _csv(a.p2)), ctx.actor, mapping, names, cat)
        notes = _save_catalogue_if_changed(ctx, cat, res.catalogue)
        rows = [
            {"role": r, "permissions": sorted(model.direct_grant_permissions(res.environment.state, r)),
             "members": sorted(model.role_members(res.environment.state, r))}
            for r in res.roles
        ]
        return res.environment, [a.role, *res.roles], Result(rows, notes=notes)

    return _env_op(ctx, "split", run)


def cmd_merge(ctx: Context) -> Result:
    a = ctx.args

    def run(env):
        cat = _roles_catalogue(ctx)
        res = management.merge_roles(env, _csv(a.roles), a.new_id, ctx.actor, cat)
        notes = _save_catalogue_if_changed(ctx, cat, res.catalogue)
        st = res.environment.state
        row = {"role": res.role, "permissions": sorted(model.direct_grant_permissions(st, res.role)),
               "members": sorted(model.role_members(st, res.role))}
        return res.environment, [*_csv(a.roles), res.role], Result([row], notes=notes)

    return _env_op(ctx, "merge", run)


def cmd_edit(ctx: Context) -> Result:
    raw = ctx.args.change
    change = _read_json(raw[1:]) if raw.startswith("@") else None
    if change is None:
        try:
            change = json.loads(raw)
        except ValueError as exc:
            raise InputError(f"--change is not valid JSON: {exc}") from None
    if not isinstance(change, dict):
        raise InputError("--change must be a JSON object")

    def run(env):
        res = management.admin_edit_relationships(env, change, ctx.actor)
        return res.environment, list(res.subjects), Result([{"op": change.get("op"), "subjects": list(res.subjects)}])

    return _env_op(ctx, f"edit:{change.get('op')}", run)


# ---------------------------------------------------------------------------
# read-only queries
# ---------------------------------------------------------------------------


def cmd_check_access(ctx: Context) -> Result:
    a = ctx.args
    d = model.check_access(_env(ctx).state, a.user, a.perm, a.org_context)
    return Result([d.to_dict()])


def cmd_audit_sod(ctx: Context) -> Result:
    vs = sod.audit_sod(_env(ctx).state)
    return Result(_violation_rows(vs), ("rule", "user", "witnesses"), EXIT_FINDINGS if vs else EXIT_OK)


def _maintenance_inputs(ctx: Context):
    a = ctx.args
    env = _env(ctx)
    if a.on_event and not a.org_file:
        raise InputError("--on-event needs --org-file")
    catalogue = _roles_catalogue(ctx, a.catalogue_version)
    cm, cv = _concept_model(ctx)
    usage = None
    if a.usage_log:
        try:
            with open(a.usage_log, encoding="utf-8") as fh:
                usage = maintenance.parse_usage_log(fh)
        except OSError as exc:
            raise InputError(f"cannot read {a.usage_log}: {exc.strerror}") from None
    report = maintenance.trigger(
        a.on_event,
        env,
        catalogue,
        cm,
        _org(ctx, env.state),
        usage,
        since=a.since,
        unused_window_secs=a.unused_window_secs,
        concept_version=cv,
        now=a.now,
    )
    return env, catalogue, cm, report


def _deviation_rows(report: maintenance.MaintenanceReport) -> list[dict[str, Any]]:
    return [
        {"severity": d.severity, "kind": d.kind, "subjects": list(d.subjects), "route": d.route, "evidence": dict(d.evidence)}
        for d in report.deviations
    ]


def cmd_detect_deviations(ctx: Context) -> Result:
    _, _, _, report = _maintenance_inputs(ctx)
    code = EXIT_FINDINGS if report.has_findings else EXIT_OK
    return Result(_deviation_rows(report), ("severity", "kind", "subjects", "route", "evidence"), code)


def cmd_plan_redefinition(ctx: Context) -> Result:
    env = _env(ctx)
    admin.require(env.state, ctx.actor, FUNCTIONAL_ADMINISTRATOR)
    env, catalogue, cm, report = _maintenance_inputs(ctx)
    tasks = maintenance.plan_redefinition(report, env, catalogue, cm)
    rows = [t.to_dict() for t in tasks]
    if ctx.args.out:
        Path(ctx.args.out).write_bytes(canonicalize(rows))
    _audit(ctx, "plan-redefinition", [env.name, *(t.deviation for t in tasks)], None, digest(rows))
    return Result(rows, ("id", "deviation", "route", "payload"))


def cmd_audit_log_verify(ctx: Context) -> Result:
    status = ctx.store.verify_chain()
    return Result([status.to_dict()], ("valid", "records", "broken_at"), EXIT_OK if status.valid else EXIT_INTEGRITY)


def cmd_history(ctx: Context) -> Result:
    cols = ("kind", "name", "version", "parent_version", "created_at", "body_digest")
    return Result([{k: h[k] for k in cols} for h in ctx.store.history()], cols)


def cmd_fixtures_seed(ctx: Context) -> Result:
    names = ("purchasing", "sales") if ctx.args.name == "all" else (ctx.args.name,)

    def run(env):
        admin.require(env.state, ctx.actor, FUNCTIONAL_ADMINISTRATOR)
        state = fixtures.fixture_state(names, env.state)
        cat = _roles_catalogue(ctx)
        for rid, defn in sorted(fixtures.fixture_catalogue(state, names).entries.items()):
            cat = cat.supersede(defn)
        version = ctx.store.save("roles", cat.to_dict())
        managed = env.managed_roles | frozenset(r for n in names for r in fixtures.FIXTURE_ROLES[n])
        after = replace(env, state=state, catalogue_version=version, managed_roles=managed)
        rows = [{"fixture": n, "roles": list(fixtures.FIXTURE_ROLES[n])} for n in names]
        return after, list(names), Result(rows, notes=[f"roles catalogue version {version}"])

    return _env_op(ctx, "fixtures-seed", run)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

COMMANDS: dict[str, tuple[Callable[[Context], Result], bool, str]] = {}
# name -> (handler, mutating, help)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--store", default=d(None), help="store root (default: $ROLECYCLE_STORE)")
    p.add_argument("--as", dest="actor", default=d(None), metavar="USER", help="acting user")
    p.add_argument("--env", default=d(DEFAULT_ENV), help=f"target environment (default: {DEFAULT_ENV})")
    p.add_argument("--format", choices=("table", "json"), default=d("table"))


def _catalogue_flags(p: argparse.ArgumentParser, bundle: bool = True) -> None:
    p.add_argument("--catalogue-version", type=int, help="roles catalogue version (default: latest)")
    if bundle:
        p.add_argument("--bundle", help="deploy from a bundle file instead of the catalogue")


def _mining_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--org-file", help="organization snapshot JSON (default: the environment's own)")
    p.add_argument("--min-users", type=int, default=analysis.DEFAULT_MIN_USERS)
    p.add_argument("--min-perms", type=int, default=analysis.DEFAULT_MIN_PERMS)


def _entry_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--entry", required=True, help="concept entry id")
    p.add_argument("--version", type=int, help="entry version (default: latest)")


def _maintenance_flags(p: argparse.ArgumentParser) -> None:
    _catalogue_flags(p, bundle=False)
    p.add_argument("--org-file", help="organization snapshot JSON")
    p.add_argument("--on-event", choices=("org-change",), help="run as an event-triggered sweep")
    p.add_argument("--usage-log", help="NDJSON usage records {user, permission, ts}")
    p.add_argument("--since", type=int, help="ignore usage records before this epoch second")
    p.add_argument("--unused-window-secs", type=int, default=maintenance.DEFAULT_UNUSED_WINDOW_SECS)
    p.add_argument("--now", type=int, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rolecycle", description="Role lifecycle management toolkit.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    def add(name, handler, mutating, help_text, hidden=False):
        kw = {} if hidden else {"help": help_text}
        p = sub.add_parser(name, description=help_text, **kw)
        _global_flags(p, suppress=True)
        p.set_defaults(handler=handler, mutating=mutating, command=name)
        COMMANDS[name] = (handler, mutating, help_text)
        return p

    _mining_flags(add("analyze", cmd_analyze, True, "mine and reconcile candidates; store an analysis catalogue"))
    _mining_flags(add("mine", cmd_mine, False, "preview bottom-up candidate roles"))

    p = add("design", cmd_design, True, "start a draft concept entry")
    p.add_argument("--candidate", help="candidate id from the analysis catalogue")
    p.add_argument("--analysis-version", type=int)
    p.add_argument("--payload", help="manual design payload JSON file")
    p.add_argument("--role-id")
    p.add_argument("--name")
    p.add_argument("--category")
    p.add_argument("--junior", action="append", help="junior role (repeatable)")
    p.add_argument("--qualifier-unit")
    p.add_argument("--qualifier-job")

    p = add("edit-entry", cmd_edit_entry, True, "edit a draft or fork a later-stage concept entry")
    _entry_flags(p)
    p.add_argument("--permissions", help="comma-separated permission ids")
    p.add_argument("--juniors", help="comma-separated junior role ids")
    p.add_argument("--candidate-users", help="comma-separated user ids")

    _entry_flags(add("prototype", cmd_prototype, True, "build a sandbox for a draft entry"))
    _entry_flags(add("verify", cmd_verify, True, "run verification checks on a prototyped entry"))
    _entry_flags(add("signoff", cmd_signoff, True, "sign off a verified entry and publish it"))
    _entry_flags(add("metrics", cmd_metrics, False, "quality metrics for a concept entry"))

    _catalogue_flags(add("deploy", cmd_deploy, True, "apply the roles catalogue (or a bundle) to an environment"))
    _catalogue_flags(add("diff", cmd_diff, False, "changes a deploy would make"))
    p = add("export-bundle", cmd_export_bundle, False, "write a deployment bundle file")
    _catalogue_flags(p, bundle=False)
    p.add_argument("--out", help="bundle output path")

    for name, handler, text in (("assign", cmd_assign, "assign a role to a user"), ("revoke", cmd_revoke, "revoke a role from a user")):
        p = add(name, handler, True, text)
        p.add_argument("--user", required=True)
        p.add_argument("--role", required=True)
        if name == "assign":
            p.add_argument("--enforce-sod", action="store_true", help="refuse assignments that violate SOD")

    p = add("split", cmd_split, True, "split a role's permissions into two roles")
    p.add_argument("--role", required=True)
    p.add_argument("--p1", required=True, help="comma-separated permissions of the first half")
    p.add_argument("--p2", required=True, help="comma-separated permissions of the second half")
    p.add_argument("--names", help="ids of the two halves, comma-separated")
    p.add_argument("--map", action="append", help="user=ROLE: keep the user on one half only")

    p = add("merge", cmd_merge, True, "merge roles into one")
    p.add_argument("--roles", required=True, help="comma-separated role ids")
    p.add_argument("--new-id", required=True)

    p = add("edit", cmd_edit, True, "apply one relationship or definition edit")
    p.add_argument("--change", required=True, help='JSON object {"op": ..., ...} or @file')

    p = add("check-access", cmd_check_access, False, "explain an access decision")
    p.add_argument("--user", required=True)
    p.add_argument("--perm", required=True)
    p.add_argument("--org-context")

    add("audit-sod", cmd_audit_sod, False, "list SOD violations")
    _maintenance_flags(add("detect-deviations", cmd_detect_deviations, False, "compare an environment with the catalogues"))
    p = add("plan-redefinition", cmd_plan_redefinition, True, "turn deviations into re-definition tasks")
    _maintenance_flags(p)
    p.add_argument("--out", help="write the task list to this file")

    p = add("audit-log", None, False, "audit log tools")
    audit_sub = p.add_subparsers(dest="audit_command", metavar="<action>", required=True)
    v = audit_sub.add_parser("verify", help="verify the audit hash chain")
    _global_flags(v, suppress=True)
    v.set_defaults(handler=cmd_audit_log_verify, mutating=False)
    COMMANDS["audit-log verify"] = (cmd_audit_log_verify, False, "verify the audit hash chain")
    COMMANDS.pop("audit-log")

    add("history", cmd_history, False, "list stored catalogue and environment versions")

    p = add("fixtures", None, False, "", hidden=True)
    fx = p.add_subparsers(dest="fixtures_command", metavar="<action>", required=True)
    s = fx.add_parser("seed")
    _global_flags(s, suppress=True)
    s.add_argument("--name", choices=("purchasing", "sales", "all"), default="all")
    s.set_defaults(handler=cmd_fixtures_seed, mutating=True)
    COMMANDS["fixtures seed"] = (cmd_fixtures_seed, True, "seed example directories")
    COMMANDS.pop("fixtures")
    return parser


def _diagnose(msg: str) -> None:
    sys.stderr.write(f"rolecycle: {msg}\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if getattr(args, "handler", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    root = args.store or os.environ.get("ROLECYCLE_STORE")
    if not root:
        _diagnose("no store given (use --store or ROLECYCLE_STORE)")
        return EXIT_USAGE
    ctx = Context(Store(root), args.actor, args.env, args.format, args)
    try:
        if args.mutating:
            if not args.actor:
                _diagnose("mutating commands need --as USER")
                return EXIT_USAGE
            with ctx.store.writer():
                result = args.handler(ctx)
        else:
            result = args.handler(ctx)
    except RolecycleError as exc:
        _diagnose(str(exc))
        if isinstance(exc, SodViolationError) and exc.users:
            _diagnose(f"users: {', '.join(exc.users)}")
        return exc.exit_code
    sys.stdout.buffer.write(render(result, args.format))
    sys.stdout.flush()
    for note in result.notes:
        _diagnose(note)
    return result.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
