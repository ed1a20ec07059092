"""Role analysis: ingest the organization and system views, mine candidate roles.

Bottom-up mining works from per-user permission profiles; top-down
derivation intersects the profiles of everyone under each org unit.
:func:`reconcile` lines the two up so that a candidate whose membership is
exactly an org unit's population gets that unit as its natural home.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

from . import model
from .canonical import digest
from .errors import CyclicOrgStructure, DanglingReference, InvalidEntity, VersionMismatch
from .model import DirectoryState, OrgUnit

DEFAULT_MIN_USERS = 2
DEFAULT_MIN_PERMS = 2

PROFILE = "profile"
INTERSECTION = "intersection"
ORG_NODE = "org_node"


@dataclass(frozen=True)
class JobFunction:
    id: str
    title: str = ""
    org_unit: str = ""
    description: str = ""


@dataclass(frozen=True)
class Placement:
    org_unit: Optional[str] = None
    job_function: Optional[str] = None


@dataclass(frozen=True)
class OrgSnapshot:
    """Organization view: unit forest, job functions and user placements."""

    units: Mapping[str, OrgUnit] = field(default_factory=dict)
    job_functions: Mapping[str, JobFunction] = field(default_factory=dict)
    users: Mapping[str, Placement] = field(default_factory=dict)

    def children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {u: [] for u in self.units}
        for u in self.units.values():
            if u.parent is not None:
                out[u.parent].append(u.id)
        return {k: sorted(v) for k, v in out.items()}

    def subtree(self, unit_id: str) -> frozenset[str]:
        kids = self.children()
        out, stack = set(), [unit_id]
        while stack:
            u = stack.pop()
            if u not in out:
                out.add(u)
                stack.extend(kids.get(u, ()))
        return frozenset(out)

    def depth(self, unit_id: str) -> int:
        d, u = 0, self.units[unit_id]
        while u.parent is not None:
            d, u = d + 1, self.units[u.parent]
        return d

    def to_dict(self) -> dict[str, Any]:
        return {
            "org_units": [
                {"id": u.id, "name": u.name, "parent": u.parent} for _, u in sorted(self.units.items())
            ],
            "job_functions": [
                {"id": j.id, "title": j.title, "org_unit": j.org_unit, "description": j.description}
                for _, j in sorted(self.job_functions.items())
            ],
            "users": [
                {"id": uid, "org_unit": p.org_unit, "job_function": p.job_function}
                for uid, p in sorted(self.users.items())
            ],
        }


def check_forest(units: Mapping[str, OrgUnit]) -> None:
    for u in units.values():
        if u.parent is not None and u.parent not in units:
            raise DanglingReference(f"org unit {u.id!r} has unknown parent {u.parent!r}")
    for start in sorted(units):
        seen = set()
        u: Optional[str] = start
        while u is not None:
            if u in seen:
                raise CyclicOrgStructure(f"org unit {start!r} is its own ancestor")
            seen.add(u)
            u = units[u].parent


def org_from_dict(d: Mapping[str, Any]) -> OrgSnapshot:
    """Parse and validate an organization document.

    Schema: ``{"org_units": [{id, name, parent}], "job_functions": [{id,
    title, org_unit, description}], "users": [{id, org_unit, job_function}]}``.
    """
    if not isinstance(d, Mapping):
        raise InvalidEntity("organization document must be an object")
    units: dict[str, OrgUnit] = {}
    for u in d.get("org_units", ()):
        if not u.get("id") or u["id"] in units:
            raise InvalidEntity(f"org unit id {u.get('id')!r} missing or duplicated")
        units[u["id"]] = OrgUnit(u["id"], u.get("name", ""), u.get("parent"))
    check_forest(units)
    jobs: dict[str, JobFunction] = {}
    for j in d.get("job_functions", ()):
        if j.get("org_unit") not in units:
            raise DanglingReference(f"job function {j.get('id')!r} references unknown org unit")
        jobs[j["id"]] = JobFunction(j["id"], j.get("title", ""), j["org_unit"], j.get("description", ""))
    users: dict[str, Placement] = {}
    for p in d.get("users", ()):
        ou, jf = p.get("org_unit"), p.get("job_function")
        if ou is not None and ou not in units:
            raise DanglingReference(f"user {p.get('id')!r} placed in unknown org unit {ou!r}")
        if jf is not None and jf not in jobs:
            raise DanglingReference(f"user {p.get('id')!r} has unknown job function {jf!r}")
        users[p["id"]] = Placement(ou, jf)
    return OrgSnapshot(units, jobs, users)


def org_from_state(state: DirectoryState) -> OrgSnapshot:
    """Org view implied by the directory itself (units plus user placements).

    Job functions are inferred from user records and homed at the smallest
    unit id among their holders; a job function held only by unplaced users
    is dropped.
    """
    homes: dict[str, str] = {}
    for u in state.users.values():
        if u.job_function and u.org_unit is not None:
            homes[u.job_function] = min(homes.get(u.job_function, u.org_unit), u.org_unit)
    jobs = {j: JobFunction(j, j, ou) for j, ou in sorted(homes.items())}
    return OrgSnapshot(
        dict(state.org_units),
        jobs,
        {
            u.id: Placement(u.org_unit, u.job_function if u.job_function in jobs else None)
            for u in state.users.values()
        },
    )


@dataclass(frozen=True)
class UserPermissionProfile:
    user: str
    permissions: frozenset[str]


@dataclass(frozen=True)
class CandidateRole:
    id: str
    permissions: frozenset[str]
    members: frozenset[str]
    provenance: tuple[str, ...]
    matched_org_unit: Optional[str] = None
    input_digest: str = ""
    reconciled: bool = False

    @property
    def coverage_score(self) -> int:
        return len(self.members) * len(self.permissions)

    @property
    def no_natural_home(self) -> bool:
        return self.reconciled and self.matched_org_unit is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "permissions": sorted(self.permissions),
            "members": sorted(self.members),
            "provenance": list(self.provenance),
            "matched_org_unit": self.matched_org_unit,
            "no_natural_home": self.no_natural_home,
            "reconciled": self.reconciled,
            "coverage_score": self.coverage_score,
            "input_digest": self.input_digest,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CandidateRole":
        return cls(
            d["id"],
            frozenset(d["permissions"]),
            frozenset(d["members"]),
            tuple(d["provenance"]),
            d.get("matched_org_unit"),
            d.get("input_digest", ""),
            bool(d.get("reconciled", False)),
        )


@dataclass(frozen=True)
class AnalysisInput:
    state: DirectoryState
    org: OrgSnapshot
    profiles: tuple[UserPermissionProfile, ...]
    placements: Mapping[str, str]
    digest: str

    def profile_map(self) -> dict[str, frozenset[str]]:
        return {p.user: p.permissions for p in self.profiles}


def user_profile(state: DirectoryState, user: str) -> frozenset[str]:
    """Effective executable permissions of *user*, org scope ignored."""
    return frozenset(
        p
        for p in model.user_effective_permissions(state, user)
        if state.permissions[p].kind == model.EXECUTABLE
    )


def ingest(
    state: DirectoryState,
    org_forest: OrgSnapshot | Iterable[OrgUnit] = (),
    job_functions: Iterable[JobFunction] = (),
) -> AnalysisInput:
    """Bundle a directory snapshot with an org view and compute user profiles.

    A user's unit comes from the org snapshot's placement when present,
    otherwise from the directory record; units outside the forest are ignored.
    """
    if isinstance(org_forest, OrgSnapshot):
        org = org_forest
        if job_functions:
            org = replace(org, job_functions={**org.job_functions, **{j.id: j for j in job_functions}})
    else:
        units = {}
        for u in org_forest:
            units[u.id] = u
        org = OrgSnapshot(units, {j.id: j for j in job_functions}, {})
    check_forest(org.units)
    for j in org.job_functions.values():
        if j.org_unit not in org.units:
            raise DanglingReference(f"job function {j.id!r} references unknown org unit {j.org_unit!r}")
    profiles = tuple(UserPermissionProfile(u, user_profile(state, u)) for u in sorted(state.users))
    placements = {}
    for uid in sorted(state.users):
        p = org.users.get(uid)
        unit = p.org_unit if p is not None else state.users[uid].org_unit
        if unit is not None and unit in org.units:
            placements[uid] = unit
    d = digest({"state": model.state_to_dict(state), "org": org.to_dict()})
    return AnalysisInput(state, org, profiles, placements, d)


def _perm_key(perms: frozenset[str]) -> list[str]:
    return sorted(perms)


def _cid(prefix: str, perms: frozenset[str]) -> str:
    return f"{prefix}-{digest(sorted(perms))[:12]}"


def generate_candidates(
    inp: AnalysisInput,
    min_users: int = DEFAULT_MIN_USERS,
    min_perms: int = DEFAULT_MIN_PERMS,
) -> list[CandidateRole]:
    """Profile candidates followed by single-pass pairwise intersections."""
    if min_users < 1 or min_perms < 1:
        raise InvalidEntity("min_users and min_perms must be >= 1")
    by_profile: dict[frozenset[str], set[str]] = {}
    for p in inp.profiles:
        if p.permissions:
            by_profile.setdefault(p.permissions, set()).add(p.user)
    distinct = sorted(by_profile, key=_perm_key)
    out = [
        CandidateRole(_cid("P", perms), perms, frozenset(by_profile[perms]), (PROFILE,), input_digest=inp.digest)
        for perms in distinct
    ]
    seen = set(distinct)
    profiles = [(p.user, p.permissions) for p in inp.profiles]
    inter: list[CandidateRole] = []
    for i, a in enumerate(distinct):
        for b in distinct[i + 1:]:
            common = a & b
            if len(common) < min_perms or common in seen:
                continue
            seen.add(common)
            members = frozenset(u for u, perms in profiles if common <= perms)
            if len(members) < min_users:
                continue
            inter.append(
                CandidateRole(_cid("I", common), common, members, (INTERSECTION,), input_digest=inp.digest)
            )
    return out + sorted(inter, key=lambda c: _perm_key(c.permissions))


def select_cover(candidates: Sequence[CandidateRole], inp: AnalysisInput) -> list[CandidateRole]:
    """Greedy cover: repeatedly take the candidate covering the most uncovered pairs.

    The score is the candidate's coverage restricted to still-uncovered
    (user, permission) pairs, so on the first pick it equals coverage_score.
    Ties break on the lexicographically smallest sorted permission list, then
    id. Stops once every pair of the input is covered.
    """
    uncovered = {(p.user, perm) for p in inp.profiles for perm in p.permissions}
    boxes = [(c, {(u, p) for u in c.members for p in c.permissions}) for c in candidates]
    selected = []
    while uncovered:
        best = None
        for c, pairs in boxes:
            gain = len(pairs & uncovered)
            if gain and (best is None or (-gain, _perm_key(c.permissions), c.id) < best[0]):
                best = ((-gain, _perm_key(c.permissions), c.id), c, pairs)
        if best is None:
            break
        _, c, pairs = best
        selected.append(c)
        uncovered -= pairs
    return selected


def mine_bottom_up(
    inp: AnalysisInput,
    min_users: int = DEFAULT_MIN_USERS,
    min_perms: int = DEFAULT_MIN_PERMS,
) -> list[CandidateRole]:
    return select_cover(generate_candidates(inp, min_users, min_perms), inp)


def derive_top_down(inp: AnalysisInput) -> list[CandidateRole]:
    """One candidate per org unit: what every user in its subtree can do."""
    profiles = inp.profile_map()
    out = []
    for unit in sorted(inp.org.units):
        subtree = inp.org.subtree(unit)
        users = sorted(u for u, ou in inp.placements.items() if ou in subtree)
        if not users:
            continue
        common = frozenset.intersection(*(profiles[u] for u in users))
        if not common:
            continue
        out.append(
            CandidateRole(
                f"O-{unit}", common, frozenset(users), (ORG_NODE,), matched_org_unit=unit, input_digest=inp.digest
            )
        )
    return out


def reconcile(
    bottom_up: Sequence[CandidateRole],
    top_down: Sequence[CandidateRole],
    org: Optional[OrgSnapshot] = None,
) -> list[CandidateRole]:
    """Match bottom-up candidates to org units and merge duplicate permission sets.

    A bottom-up candidate whose members equal an org-node candidate's members
    is homed at that unit (the deepest one when nested units share a
    population, then smallest id). Candidates with identical permission sets
    collapse into the first occurrence with members and provenance unioned;
    the merged home follows the same deepest-unit rule.
    """
    digests = {c.input_digest for c in [*bottom_up, *top_down]}
    if len(digests) > 1:
        raise VersionMismatch("candidates come from different analysis inputs")

    def unit_rank(unit: str) -> tuple[int, str]:
        depth = org.depth(unit) if org is not None and unit in org.units else 0
        return (-depth, unit)

    homes: dict[frozenset[str], list[str]] = {}
    for c in top_down:
        homes.setdefault(c.members, []).append(c.matched_org_unit)
    annotated = []
    for c in bottom_up:
        units = sorted(homes.get(c.members, ()), key=unit_rank)
        annotated.append(replace(c, matched_org_unit=units[0] if units else None, reconciled=True))
    annotated += [replace(c, reconciled=True) for c in top_down]

    merged: dict[frozenset[str], CandidateRole] = {}
    for c in annotated:
        prev = merged.get(c.permissions)
        if prev is None:
            merged[c.permissions] = c
            continue
        provenance = prev.provenance + tuple(p for p in c.provenance if p not in prev.provenance)
        units = sorted((u for u in (prev.matched_org_unit, c.matched_org_unit) if u is not None), key=unit_rank)
        merged[c.permissions] = replace(
            prev,
            members=prev.members | c.members,
            provenance=provenance,
            matched_org_unit=units[0] if units else None,
        )
    return list(merged.values())


# ---------------------------------------------------------------------------
# catalogue
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisCatalogue:
    version: int
    input_digest: str
    params: Mapping[str, Any]
    profiles: Mapping[str, frozenset[str]]
    candidates: tuple[CandidateRole, ...]
    org: OrgSnapshot
    sod_observations: tuple[model.SodRule, ...]
    findings: tuple[Mapping[str, Any], ...] = ()
    created_at: Optional[int] = None

    def candidate(self, candidate_id: str) -> CandidateRole:
        for c in self.candidates:
            if c.id == candidate_id:
                return c
        raise DanglingReference(f"candidate {candidate_id!r} not in analysis catalogue v{self.version}")


def catalogue_body(
    candidates: Sequence[CandidateRole],
    inp: AnalysisInput,
    params: Optional[Mapping[str, Any]] = None,
    findings: Sequence[Mapping[str, Any]] = (),
) -> dict[str, Any]:
    return {
        "input_digest": inp.digest,
        "params": dict(params or {}),
        "profiles": {p.user: sorted(p.permissions) for p in inp.profiles},
        "candidates": [c.to_dict() for c in candidates],
        "org": inp.org.to_dict(),
        "sod_observations": [model.sod_rule_to_dict(r) for _, r in sorted(inp.state.sod_rules.items())],
        "findings": list(findings),
    }


def catalogue_body_check(body: Mapping[str, Any]) -> None:
    for key in ("input_digest", "params", "profiles", "candidates", "org", "sod_observations", "findings"):
        if key not in body:
            raise InvalidEntity(f"analysis catalogue lacks {key!r}")
    profiles = {u: frozenset(p) for u, p in body["profiles"].items()}
    for c in body["candidates"]:
        cand = CandidateRole.from_dict(c)
        for m in cand.members:
            if m in profiles and not cand.permissions <= profiles[m]:
                raise InvalidEntity(f"candidate {cand.id!r} member {m!r} lacks its permissions")
    org_from_dict(body["org"])


def write_analysis_catalogue(
    store,
    candidates: Sequence[CandidateRole],
    inp: AnalysisInput,
    params: Optional[Mapping[str, Any]] = None,
    *,
    created_at: Optional[int] = None,
) -> int:
    """Persist a new immutable analysis catalogue version and return its id."""
    return store.save("analysis", catalogue_body(candidates, inp, params), created_at=created_at)


def catalogue_from_body(version: int, body: Mapping[str, Any], created_at: Optional[int] = None) -> AnalysisCatalogue:
    return AnalysisCatalogue(
        version=version,
        input_digest=body["input_digest"],
        params=dict(body["params"]),
        profiles={u: frozenset(p) for u, p in body["profiles"].items()},
        candidates=tuple(CandidateRole.from_dict(c) for c in body["candidates"]),
        org=org_from_dict(body["org"]),
        sod_observations=tuple(model.sod_rule_from_dict(r) for r in body["sod_observations"]),
        findings=tuple(body["findings"]),
        created_at=created_at,
    )


def load_analysis_catalogue(store, version: Optional[int] = None) -> AnalysisCatalogue:
    header, body = store.load_with_header("analysis", version)
    return catalogue_from_body(header["version"], body, header["created_at"])


def record_findings(store, findings: Sequence[Mapping[str, Any]], version: Optional[int] = None) -> int:
    """Write a successor analysis version carrying extra engineering findings.

    Earlier versions stay untouched; the cross-reference lives in the new one.
    """
    body = dict(store.load("analysis", version))
    body["findings"] = list(body["findings"]) + [dict(f) for f in findings]
    return store.save("analysis", body)
