"""Small mixed-integer linear program builder and exact solver.

The solver is a two-phase dense simplex (floats, 1e-6 feasibility
tolerance, Bland's rule kicks in on stalling) wrapped in best-first
branch and bound with most-fractional branching. It is deliberately
simple: the instances produced by the planners are small and the whole
pipeline must stay deterministic. An external solver can be plugged in
through an LP-file process interface for larger deployments.
"""

from __future__ import annotations

import math
import re
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from heapq import heapify, heappop, heappush
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEAS_TOL = 1e-6
INT_TOL = 1e-6
# objective gap below which two incumbents are considered equal
OBJ_TOL = 1e-9
# bound-pruning gap: nodes whose LP bound is within this of the incumbent
# cannot hold a meaningfully better solution (LP values carry ~1e-8 pivot
# noise, so pruning strictly at 1e-9 lets equal-cost subtrees explode)
ABS_GAP = 1e-6
REL_GAP = 1e-9


class MilpError(ValueError):
    """Malformed problem, unbounded objective, or numerical failure."""


@dataclass(frozen=True)
class Variable:
    id: str
    lower: float = 0.0
    upper: float = math.inf
    is_integer: bool = True


@dataclass(frozen=True)
class Constraint:
    terms: tuple[tuple[str, float], ...]
    relation: str  # "<=", ">=", "="
    rhs: float
    name: str = ""


@dataclass
class SolveLimits:
    max_nodes: int = 200_000
    max_seconds: float = 300.0


@dataclass
class SolveStats:
    nodes: int = 0
    wall_time_s: float = 0.0


@dataclass
class MilpSolution:
    status: str  # "optimal" | "infeasible" | "limit_reached"
    assignment: dict[str, float]
    objective_value: float
    stats: SolveStats = field(default_factory=SolveStats)


@dataclass
class LpSolution:
    status: str  # "optimal" | "infeasible"
    assignment: dict[str, float]
    objective_value: float


class MilpProblem:
    """Minimization problem over bounded (mostly integer) variables.

    Terms are validated at build time so solve() never sees a malformed
    problem.
    """

    def __init__(self) -> None:
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective: tuple[tuple[str, float], ...] = ()
        self._index: dict[str, int] = {}

    def add_variable(self, vid: str, lower: float = 0, upper: float = math.inf,
                     integer: bool = True) -> str:
        if vid in self._index:
            raise MilpError(f"duplicate variable id {vid!r}")
        if lower < 0:
            raise MilpError(f"variable {vid!r}: lower bound must be >= 0")
        if upper < lower:
            raise MilpError(f"variable {vid!r}: bounds {lower} > {upper}")
        self._index[vid] = len(self.variables)
        self.variables.append(Variable(vid, float(lower), float(upper), integer))
        return vid

    def _check_terms(self, terms: Iterable[tuple[str, float]], where: str
                     ) -> tuple[tuple[str, float], ...]:
        out = []
        for vid, coeff in terms:
            if vid not in self._index:
                raise MilpError(f"{where}: unknown variable {vid!r}")
            c = float(coeff)
            if not math.isfinite(c):
                raise MilpError(f"{where}: non-finite coefficient for {vid!r}")
            out.append((vid, c))
        return tuple(out)

    def add_constraint(self, terms: Iterable[tuple[str, float]], relation: str,
                       rhs: float, name: str = "") -> None:
        if relation not in ("<=", ">=", "="):
            raise MilpError(f"constraint {name!r}: bad relation {relation!r}")
        if not math.isfinite(float(rhs)):
            raise MilpError(f"constraint {name!r}: non-finite rhs")
        checked = self._check_terms(terms, f"constraint {name!r}")
        self.constraints.append(Constraint(checked, relation, float(rhs), name))

    def set_objective(self, terms: Iterable[tuple[str, float]]) -> None:
        self.objective = self._check_terms(terms, "objective")

    def var_index(self, vid: str) -> int:
        return self._index[vid]

    # -- dense views used by the solver ------------------------------------

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(len(self.variables))
        for vid, coeff in self.objective:
            c[self._index[vid]] += coeff
        return c

    def evaluate_objective(self, assignment: dict[str, float]) -> float:
        return float(sum(coeff * assignment.get(vid, 0.0)
                         for vid, coeff in self.objective))


def check_solution(problem: MilpProblem, assignment: dict[str, float],
                   tol: float = FEAS_TOL) -> list[str]:
    """Independent constraint audit; returns human-readable violations."""
    violations = []
    for var in problem.variables:
        x = assignment.get(var.id, 0.0)
        if x < var.lower - tol or x > var.upper + tol:
            violations.append(f"bound: {var.id}={x} outside [{var.lower}, {var.upper}]")
        if var.is_integer and abs(x - round(x)) > INT_TOL:
            violations.append(f"integrality: {var.id}={x}")
    for i, con in enumerate(problem.constraints):
        lhs = sum(coeff * assignment.get(vid, 0.0) for vid, coeff in con.terms)
        label = con.name or f"#{i}"
        if con.relation == "<=" and lhs > con.rhs + tol:
            violations.append(f"{label}: {lhs} <= {con.rhs} violated")
        elif con.relation == ">=" and lhs < con.rhs - tol:
            violations.append(f"{label}: {lhs} >= {con.rhs} violated")
        elif con.relation == "=" and abs(lhs - con.rhs) > tol:
            violations.append(f"{label}: {lhs} = {con.rhs} violated")
    return violations


# --------------------------------------------------------------------------
# Dense two-phase simplex over the standard form  min c.u, A u = b, u >= 0.
# --------------------------------------------------------------------------

_STALL_LIMIT = 64
_MAX_PIVOTS = 50_000


class _Simplex:
    def __init__(self, A: np.ndarray, b: np.ndarray, c: np.ndarray,
                 relations: Sequence[str]):
        m, n = A.shape
        # normalize rhs >= 0
        A = A.copy()
        b = b.copy()
        rels = list(relations)
        for i in range(m):
            if b[i] < 0:
                A[i] *= -1.0
                b[i] *= -1.0
                rels[i] = {"<=": ">=", ">=": "<=", "=": "="}[rels[i]]
        n_slack = sum(1 for r in rels if r in ("<=", ">="))
        n_art = sum(1 for r in rels if r in (">=", "="))
        total = n + n_slack + n_art
        T = np.zeros((m, total + 1))
        T[:, :n] = A
        T[:, -1] = b
        basis = np.empty(m, dtype=int)
        s = n
        a = n + n_slack
        self.art_cols: list[int] = []
        for i, rel in enumerate(rels):
            if rel == "<=":
                T[i, s] = 1.0
                basis[i] = s
                s += 1
            elif rel == ">=":
                T[i, s] = -1.0
                s += 1
                T[i, a] = 1.0
                basis[i] = a
                self.art_cols.append(a)
                a += 1
            else:
                T[i, a] = 1.0
                basis[i] = a
                self.art_cols.append(a)
                a += 1
        self.T = T
        self.basis = basis
        self.n_struct = n
        self.n_total = total
        self.c = c

    def _pivot(self, row: int, col: int) -> None:
        T = self.T
        T[row] /= T[row, col]
        factors = T[:, col].copy()
        factors[row] = 0.0
        T -= np.outer(factors, T[row])
        self.basis[row] = col

    def _iterate(self, obj: np.ndarray, allowed: np.ndarray) -> tuple[str, float]:
        """Run pivots until optimal/unbounded. obj is the reduced-cost row
        (mutated in place); allowed masks columns eligible to enter."""
        T = self.T
        stall = 0
        use_bland = False
        last = obj[-1]
        for _ in range(_MAX_PIVOTS):
            rc = obj[:-1]
            eligible = np.where((rc < -FEAS_TOL) & allowed)[0]
            if eligible.size == 0:
                return "optimal", -obj[-1]
            if use_bland:
                col = int(eligible[0])
            else:
                col = int(eligible[np.argmin(rc[eligible])])
            column = T[:, col]
            pos = np.where(column > FEAS_TOL)[0]
            if pos.size == 0:
                return "unbounded", -math.inf
            ratios = T[pos, -1] / column[pos]
            best = ratios.min()
            ties = pos[ratios <= best + 1e-12]
            # leaving rule: lowest basis column index among ties (Bland-safe)
            row = int(ties[np.argmin(self.basis[ties])])
            self._pivot(row, col)
            obj -= obj[col] * T[row]
            if obj[-1] > last - 1e-12:
                stall += 1
                if stall >= _STALL_LIMIT:
                    use_bland = True
            else:
                stall = 0
            last = obj[-1]
        raise MilpError(
            "numerical failure: simplex pivot limit reached "
            f"(m={self.T.shape[0]}, n={self.n_total})")

    def _objective_row(self, costs: np.ndarray) -> np.ndarray:
        row = np.zeros(self.n_total + 1)
        row[:costs.size] = costs
        for i, bcol in enumerate(self.basis):
            if row[bcol] != 0.0:
                row -= row[bcol] * self.T[i]
        return row

    def solve(self) -> tuple[str, np.ndarray, float]:
        allowed = np.ones(self.n_total, dtype=bool)
        if self.art_cols:
            phase1 = np.zeros(self.n_total)
            phase1[self.art_cols] = 1.0
            obj = self._objective_row(phase1)
            status, value = self._iterate(obj, allowed)
            if status == "unbounded":  # pragma: no cover - phase 1 is bounded
                raise MilpError("numerical failure: unbounded phase-1")
            if value > 1e-7:
                return "infeasible", np.array([]), math.inf
            self._drive_out_artificials()
            allowed[self.art_cols] = False
        costs = np.zeros(self.n_total)
        costs[:self.n_struct] = self.c
        obj = self._objective_row(costs)
        status, value = self._iterate(obj, allowed)
        if status == "unbounded":
            return "unbounded", np.array([]), -math.inf
        u = np.zeros(self.n_total)
        u[self.basis] = self.T[:, -1]
        return "optimal", u[:self.n_struct], float(value)

    def _drive_out_artificials(self) -> None:
        art = set(self.art_cols)
        for i in range(self.T.shape[0]):
            if self.basis[i] in art:
                row = self.T[i]
                candidates = [j for j in range(self.n_total)
                              if j not in art and abs(row[j]) > FEAS_TOL]
                if candidates:
                    self._pivot(i, candidates[0])
                else:
                    # redundant row: keep the (zero-valued) artificial basic
                    self.T[i, -1] = 0.0


def _build_standard_form(problem: MilpProblem,
                         bounds: dict[int, tuple[float, float]] | None = None
                         ) -> tuple[np.ndarray, np.ndarray, list[str], np.ndarray,
                                    np.ndarray, float] | None:
    """Shift variables by their lower bounds and emit (A, b, rels, c, lb, shift).

    Returns None when a node's bound overrides are outright contradictory.
    """
    nvar = len(problem.variables)
    lb = np.array([v.lower for v in problem.variables])
    ub = np.array([v.upper for v in problem.variables])
    if bounds:
        for idx, (lo, hi) in bounds.items():
            lb[idx] = max(lb[idx], lo)
            ub[idx] = min(ub[idx], hi)
    if np.any(lb > ub + 1e-12):
        return None
    rows: list[np.ndarray] = []
    rhs: list[float] = []
    rels: list[str] = []
    for con in problem.constraints:
        row = np.zeros(nvar)
        for vid, coeff in con.terms:
            row[problem.var_index(vid)] += coeff
        rows.append(row)
        rhs.append(con.rhs - float(row @ lb))
        rels.append(con.relation)
    for j in range(nvar):
        if math.isfinite(ub[j]):
            row = np.zeros(nvar)
            row[j] = 1.0
            rows.append(row)
            rhs.append(ub[j] - lb[j])
            rels.append("<=")
    A = np.vstack(rows) if rows else np.zeros((0, nvar))
    b = np.array(rhs)
    c = problem.objective_vector()
    shift = float(c @ lb)
    return A, b, rels, c, lb, shift


def _solve_lp(problem: MilpProblem,
              bounds: dict[int, tuple[float, float]] | None = None
              ) -> tuple[str, np.ndarray, float]:
    built = _build_standard_form(problem, bounds)
    if built is None:
        return "infeasible", np.array([]), math.inf
    A, b, rels, c, lb, shift = built
    status, u, value = _Simplex(A, b, c, rels).solve()
    if status != "optimal":
        return status, np.array([]), value
    return "optimal", lb + u, value + shift


def lp_relax(problem: MilpProblem) -> LpSolution:
    """Optimal solution of the LP relaxation (valid bound for solve())."""
    status, x, value = _solve_lp(problem)
    if status == "unbounded":
        raise MilpError("unbounded")
    if status == "infeasible":
        return LpSolution("infeasible", {}, math.inf)
    assignment = {v.id: float(x[i]) for i, v in enumerate(problem.variables)}
    return LpSolution("optimal", assignment, value)


def _dense_constraints(problem: MilpProblem
                       ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    nvar = len(problem.variables)
    rows = np.zeros((len(problem.constraints), nvar))
    rhs = np.zeros(len(problem.constraints))
    rels = []
    for r, con in enumerate(problem.constraints):
        for vid, coeff in con.terms:
            rows[r, problem.var_index(vid)] += coeff
        rhs[r] = con.rhs
        rels.append(con.relation)
    return rows, rhs, rels


def _feasible_point(A: np.ndarray, b: np.ndarray, rels: list[str],
                    x: np.ndarray, tol: float = FEAS_TOL) -> bool:
    lhs = A @ x
    for value, rel, rhs in zip(lhs, rels, b):
        if rel == "<=" and value > rhs + tol:
            return False
        if rel == ">=" and value < rhs - tol:
            return False
        if rel == "=" and abs(value - rhs) > tol:
            return False
    return True


def solve(problem: MilpProblem, limits: SolveLimits | None = None,
          backend: str = "builtin", backend_command: Sequence[str] | None = None
          ) -> MilpSolution:
    """Exact branch-and-bound solve (builtin) or external-process solve."""
    if backend == "external":
        return solve_external(problem, backend_command or ())
    if backend != "builtin":
        raise MilpError(f"unknown backend {backend!r}")
    limits = limits or SolveLimits()
    start = time.perf_counter()
    stats = SolveStats()

    int_idx = [i for i, v in enumerate(problem.variables) if v.is_integer]
    incumbent: np.ndarray | None = None
    incumbent_obj = math.inf
    c_vec = problem.objective_vector()
    A_all, b_all, rels_all = _dense_constraints(problem)

    def deadline_hit() -> bool:
        return (stats.nodes >= limits.max_nodes
                or time.perf_counter() - start > limits.max_seconds)

    def prune_gap() -> float:
        if incumbent_obj is math.inf:
            return 0.0
        return max(ABS_GAP, REL_GAP * abs(incumbent_obj))

    # Two-phase search. While no incumbent exists, dive depth-first taking
    # the rounded-up child first (covering constraints tend to stay
    # feasible that way). Once an incumbent bounds the search, switch to
    # best-first on the parent LP bound with deepest-first tie-breaking so
    # plateaus of symmetric siblings prune instead of flooding. Ordering
    # keys are quantized: pivot noise (~1e-13 relative) must not break ties.
    def qbound(value: float) -> float:
        return float(f"{value:.9g}") if math.isfinite(value) else value

    heap: list[tuple[float, int, int, dict[int, tuple[float, float]]]] = []
    dive: list[tuple[float, int, int, dict[int, tuple[float, float]]]] = []
    seq = 0
    dive.append((-math.inf, 0, seq, {}))
    limit_flag = False

    while heap or dive:
        if incumbent is None and dive:
            bound, neg_depth, _, node_bounds = dive.pop()
        elif dive:
            heap.extend(dive)  # re-rank leftover dive nodes by bound
            dive.clear()
            heapify(heap)
            continue
        else:
            bound, neg_depth, _, node_bounds = heappop(heap)
        if bound >= incumbent_obj - prune_gap():
            continue
        if deadline_hit():
            limit_flag = True
            break
        stats.nodes += 1
        status, x, value = _solve_lp(problem, node_bounds)
        if status == "unbounded":
            raise MilpError("unbounded")
        if status == "infeasible" or value >= incumbent_obj - prune_gap():
            continue
        frac = [(i, x[i] - math.floor(x[i])) for i in int_idx
                if min(x[i] - math.floor(x[i]), math.ceil(x[i]) - x[i]) > INT_TOL]
        if not frac:
            if value < incumbent_obj - OBJ_TOL:
                incumbent = x.copy()
                incumbent_obj = value
            continue
        # primal rounding heuristic: ceiling fractional integers often stays
        # feasible for covering constraints and caps searches on symmetric
        # plateaus (activity-flag variables especially)
        rounded = x.copy()
        for i in int_idx:
            rounded[i] = min(math.ceil(x[i] - INT_TOL), problem.variables[i].upper)
        cand_obj = float(c_vec @ rounded)
        if cand_obj < incumbent_obj - OBJ_TOL and _feasible_point(A_all, b_all,
                                                                  rels_all, rounded):
            incumbent = rounded.copy()
            incumbent_obj = cand_obj
        # most-fractional branching, tie-break lowest variable index
        j, fj = max(frac, key=lambda t: (min(t[1], 1.0 - t[1]), -t[0]))
        down = dict(node_bounds)
        down[j] = (node_bounds.get(j, (0.0, math.inf))[0], math.floor(x[j]))
        up = dict(node_bounds)
        up[j] = (math.ceil(x[j]), node_bounds.get(j, (0.0, math.inf))[1])
        if incumbent is None:
            for child in (down, up):  # stack: the up child pops first
                seq += 1
                dive.append((qbound(value), neg_depth - 1, seq, child))
        else:
            for child in (up, down):
                seq += 1
                heappush(heap, (qbound(value), neg_depth - 1, seq, child))

    stats.wall_time_s = time.perf_counter() - start
    if incumbent is None:
        status = "limit_reached" if limit_flag else "infeasible"
        return MilpSolution(status, {}, math.nan, stats)

    assignment: dict[str, float] = {}
    for i, var in enumerate(problem.variables):
        val = float(incumbent[i])
        assignment[var.id] = float(round(val)) if var.is_integer else val
    objective = problem.evaluate_objective(assignment)
    status = "limit_reached" if limit_flag else "optimal"
    return MilpSolution(status, assignment, objective, stats)


# --------------------------------------------------------------------------
# External backend: LP-format dump + solution-file parse.
# --------------------------------------------------------------------------

def _lp_term(coeff: float, vid: str, first: bool) -> str:
    sign = "-" if coeff < 0 else ("" if first else "+")
    mag = abs(coeff)
    return f"{sign} {mag:.12g} {vid}".strip()


def write_lp(problem: MilpProblem) -> str:
    """Serialize to a CPLEX-LP-format subset.

    Grammar subset: `Minimize`/`Subject To`/`Bounds`/`General`/`End`
    sections, one constraint per line as `name: terms rel rhs` with rel in
    {<=, >=, =}, explicit `lo <= var <= hi` bound lines, integer variables
    listed under `General`.
    """
    lines = ["Minimize"]
    terms = " ".join(_lp_term(c, v, i == 0) for i, (v, c) in enumerate(problem.objective))
    if not terms and problem.variables:
        terms = f"0 {problem.variables[0].id}"
    lines.append(f" obj: {terms}")
    lines.append("Subject To")
    for i, con in enumerate(problem.constraints):
        name = con.name or f"c{i}"
        body = " ".join(_lp_term(c, v, j == 0) for j, (v, c) in enumerate(con.terms))
        lines.append(f" {name}: {body} {con.relation} {con.rhs:.12g}")
    lines.append("Bounds")
    for var in problem.variables:
        hi = f"{var.upper:.12g}" if math.isfinite(var.upper) else "+inf"
        lines.append(f" {var.lower:.12g} <= {var.id} <= {hi}")
    generals = [v.id for v in problem.variables if v.is_integer]
    if generals:
        lines.append("General")
        lines.append(" " + " ".join(generals))
    lines.append("End")
    return "\n".join(lines) + "\n"


_BOUND_RE = re.compile(r"^\s*(\S+)\s*<=\s*(\S+)\s*<=\s*(\S+)\s*$")
_CON_RE = re.compile(r"^\s*(?:(\S+)\s*:)?\s*(.*?)\s*(<=|>=|=)\s*([-+0-9.eE]+)\s*$")
# optional sign, optional numeric coefficient, identifier
_TERM_RE = re.compile(
    r"([+-])?\s*((?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)?\s*([A-Za-z_][A-Za-z0-9_.]*)")


def _parse_terms(body: str) -> list[tuple[str, float]]:
    terms: list[tuple[str, float]] = []
    for sign, num, vid in _TERM_RE.findall(body):
        coeff = float(num) if num else 1.0
        if sign == "-":
            coeff = -coeff
        terms.append((vid, coeff))
    return terms


def parse_lp(text: str) -> MilpProblem:
    """Parse the write_lp() grammar subset back into a problem."""
    problem = MilpProblem()
    section = None
    objective: list[tuple[str, float]] = []
    constraints: list[tuple[str, list[tuple[str, float]], str, float]] = []
    bounds: dict[str, tuple[float, float]] = {}
    generals: set[str] = set()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        low = line.lower()
        if low in ("minimize", "subject to", "bounds", "general", "end"):
            section = low
            continue
        if section == "minimize":
            body = line.split(":", 1)[1] if ":" in line else line
            objective.extend(_parse_terms(body))
        elif section == "subject to":
            m = _CON_RE.match(line)
            if not m:
                raise MilpError(f"unparsable constraint line: {line!r}")
            name, body, rel, rhs = m.groups()
            constraints.append((name or "", _parse_terms(body), rel, float(rhs)))
        elif section == "bounds":
            m = _BOUND_RE.match(line)
            if not m:
                raise MilpError(f"unparsable bound line: {line!r}")
            lo, vid, hi = m.groups()
            bounds[vid] = (float(lo), math.inf if hi in ("+inf", "inf") else float(hi))
        elif section == "general":
            generals.update(line.split())
    order: list[str] = []
    seen = set()
    for vid, _ in objective:
        if vid not in seen:
            seen.add(vid)
            order.append(vid)
    for _, terms, _, _ in constraints:
        for vid, _ in terms:
            if vid not in seen:
                seen.add(vid)
                order.append(vid)
    for vid in bounds:
        if vid not in seen:
            seen.add(vid)
            order.append(vid)
    for vid in order:
        lo, hi = bounds.get(vid, (0.0, math.inf))
        problem.add_variable(vid, lo, hi, integer=vid in generals)
    for name, terms, rel, rhs in constraints:
        problem.add_constraint(terms, rel, rhs, name=name)
    problem.set_objective(objective)
    return problem


def parse_solution_file(text: str) -> dict[str, float]:
    """Parse `var value` lines, '#' comments allowed."""
    assignment: dict[str, float] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MilpError(f"unparsable solution line: {raw!r}")
        assignment[parts[0]] = float(parts[1])
    return assignment


def solve_external(problem: MilpProblem, command: Sequence[str]) -> MilpSolution:
    """Run an external solver: `command <problem.lp> <solution.out>`.

    The returned assignment is audited against the problem before being
    accepted; the objective is recomputed locally.
    """
    if not command:
        raise MilpError("external backend requires a command")
    start = time.perf_counter()
    with tempfile.TemporaryDirectory(prefix="windroute-milp-") as tmp:
        lp_path = Path(tmp) / "problem.lp"
        sol_path = Path(tmp) / "solution.out"
        lp_path.write_text(write_lp(problem))
        proc = subprocess.run([*command, str(lp_path), str(sol_path)],
                              capture_output=True, text=True)
        if proc.returncode == 2:
            return MilpSolution("infeasible", {}, math.nan,
                                SolveStats(0, time.perf_counter() - start))
        if proc.returncode != 0:
            raise MilpError(f"external solver failed: {proc.stderr.strip()}")
        assignment = parse_solution_file(sol_path.read_text())
    full = {v.id: assignment.get(v.id, 0.0) for v in problem.variables}
    violations = check_solution(problem, full)
    if violations:
        raise MilpError(f"external solution rejected: {violations[:3]}")
    for var in problem.variables:
        if var.is_integer:
            full[var.id] = float(round(full[var.id]))
    return MilpSolution("optimal", full, problem.evaluate_objective(full),
                        SolveStats(0, time.perf_counter() - start))
