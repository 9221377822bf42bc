"""Certified conic solves behind a pluggable backend contract.

solve() accepts the standard-form programs built by reform, hands them to an
interior-point (clarabel) or operator-splitting (scs) engine, recomputes KKT
residuals independently, and only reports Optimal when the certificate passes.
Programs carrying a SolutionExpander are solved in collapsed form and the
solution is lifted back to the full variable/multiplier space afterwards.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .reform import (SQRT2, ConicProgram, ConstraintTag, DualBundle, RowGroup,
                     complex_dual_from_embedded, extract_dual_bundle, smat)
from .reform import svec_len as svec_len_of

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SolveSettings:
    tol: float = 1e-9             # backend target accuracy
    cert_tol: float = 1e-6        # independent KKT certification threshold
    max_iters: int = 200          # interior-point iteration cap
    backend: str = "auto"         # cvxopt for collapsed programs, clarabel for big-M forms
    verbose: bool = False
    expand: bool = True           # lift collapsed solutions to the full space
    scs_max_iters: int = 100_000
    equilibrate: bool = True      # cone-aware Ruiz scaling before the backend
    equilibrate_iters: int = 10

    def with_backend(self, backend: str) -> "SolveSettings":
        out = SolveSettings(**self.__dict__)
        out.backend = backend
        return out


@dataclass
class ConicSolution:
    status: str
    objective: float
    x: np.ndarray | None = None
    primal: dict = field(default_factory=dict)
    duals: dict = field(default_factory=dict)
    dual_bundle: DualBundle | None = None
    kkt: dict = field(default_factory=dict)
    certificate: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def _group_emb_dim(g: RowGroup) -> int:
    if g.complex_dim:
        return 2 * g.complex_dim
    return int(round((np.sqrt(8 * g.size + 1) - 1) / 2))


def _sections(program: ConicProgram):
    """Row permutation into (zero, nonneg, psd...) solver order."""
    zero = [g for g in program.groups if g.cone == "zero"]
    nonneg = [g for g in program.groups if g.cone == "nonneg"]
    psd = [g for g in program.groups if g.cone == "psd"]
    perm = []
    for g in zero + nonneg + psd:
        perm.extend(range(g.start, g.start + g.size))
    return zero, nonneg, psd, np.asarray(perm, dtype=np.int64)


def _scs_tri_perm(d: int) -> np.ndarray:
    """Map upper-col-major svec positions to scs lower-col-major order."""
    mine = {}
    r = 0
    for j in range(d):
        for i in range(j + 1):
            mine[(i, j)] = r
            r += 1
    perm = []
    for c in range(d):
        for rr in range(c, d):
            perm.append(mine[(c, rr)])
    return np.asarray(perm, dtype=np.int64)


def _equilibrate(A: sp.csc_matrix, b: np.ndarray, c: np.ndarray, group_spans,
                 iters: int = 10):
    """Cone-aware Ruiz equilibration.

    Row factors are uniform within each cone group (PSD cones are invariant
    only under uniform positive scaling); column factors are free. Returns the
    scaled data plus the diagonal factors needed to restore original units.
    """
    m, nv = A.shape
    dr = np.ones(m)
    dc = np.ones(nv)
    A = A.tocsr()
    for _ in range(iters):
        aabs = abs(A)
        rmax = np.asarray(aabs.max(axis=1).todense()).ravel()
        fr = np.ones(m)
        for start, size in group_spans:
            g = rmax[start:start + size].max(initial=0.0)
            if g > 0.0:
                fr[start:start + size] = 1.0 / np.sqrt(g)
        cmax = np.asarray(aabs.max(axis=0).todense()).ravel()
        fc = np.where(cmax > 0.0, 1.0 / np.sqrt(np.maximum(cmax, 1e-300)), 1.0)
        A = sp.diags(fr) @ A @ sp.diags(fc)
        dr *= fr
        dc *= fc
    return A.tocsc(), dr * b, dc * c, dr, dc


def _resolve_backend(program: ConicProgram, st: SolveSettings) -> str:
    if st.backend != "auto":
        return st.backend
    if program.family in ("feasibility", "sca", "primal"):
        return "clarabel"
    return "cvxopt"


def _solve_backend(program: ConicProgram, st: SolveSettings):
    backend = _resolve_backend(program, st)
    zero, nonneg, psd, perm = _sections(program)
    A = program.A.tocsr()[perm].tocsc()
    b = program.b[perm]
    nz = sum(g.size for g in zero)
    nl = sum(g.size for g in nonneg)

    dr = dc = None
    if st.equilibrate:
        spans = []
        r0 = 0
        for g in zero + nonneg + psd:
            spans.append((r0, g.size))
            r0 += g.size
        A, b, c_scaled, dr, dc = _equilibrate(A, b, program.c, spans,
                                              iters=st.equilibrate_iters)
    else:
        c_scaled = program.c

    t0 = time.perf_counter()
    if backend == "clarabel":
        import clarabel
        cones = []
        if nz:
            cones.append(clarabel.ZeroConeT(nz))
        if nl:
            cones.append(clarabel.NonnegativeConeT(nl))
        for g in psd:
            cones.append(clarabel.PSDTriangleConeT(_group_emb_dim(g)))
        settings = clarabel.DefaultSettings()
        settings.verbose = st.verbose
        settings.max_iter = st.max_iters
        settings.tol_gap_abs = st.tol
        settings.tol_gap_rel = st.tol
        settings.tol_feas = st.tol
        solver = clarabel.DefaultSolver(sp.csc_matrix((program.n_vars, program.n_vars)),
                                        c_scaled, A, b, cones, settings)
        sol = solver.solve()
        raw_status = str(sol.status)
        x = np.asarray(sol.x)
        z = np.asarray(sol.z)
        iters = sol.iterations
    elif backend == "cvxopt":
        import cvxopt
        import cvxopt.solvers
        # conelp wants full-matrix storage for the s cones: expand each svec
        # row (i <= j) into entries (i, j) and (j, i) of the flattened block.
        acoo = A.tocoo()
        sdims = [_group_emb_dim(g) for g in psd]
        row_map = {}       # svec row -> list of (full row, factor)
        rfull = nz + nl
        r0 = nz + nl
        for g, d in zip(psd, sdims):
            k = r0
            for jj in range(d):
                for ii in range(jj + 1):
                    if ii == jj:
                        row_map[k] = [(rfull + jj * d + ii, 1.0)]
                    else:
                        f = 1.0 / SQRT2
                        row_map[k] = [(rfull + jj * d + ii, f), (rfull + ii * d + jj, f)]
                    k += 1
            r0 += svec_len_of(d)
            rfull += d * d
        n_full = rfull
        gr, gc, gv = [], [], []
        hfull = np.zeros(n_full)
        for r, cc, v in zip(acoo.row, acoo.col, acoo.data):
            if r < nz + nl:
                gr.append(int(r)), gc.append(int(cc)), gv.append(float(v))
            else:
                for rf, f in row_map[r]:
                    gr.append(int(rf)), gc.append(int(cc)), gv.append(float(v * f))
        for r in range(nz + nl):
            hfull[r] = b[r]
        for r in range(nz + nl, A.shape[0]):
            for rf, f in row_map[r]:
                hfull[rf] = b[r] * f
        # zero-cone rows go to conelp's equality block
        Aeq = None
        beq = None
        if nz:
            eq_rows = [i for i in range(len(gr)) if gr[i] < nz]
            Aeq = cvxopt.spmatrix([gv[i] for i in eq_rows], [gr[i] for i in eq_rows],
                                  [gc[i] for i in eq_rows], (nz, program.n_vars))
            beq = cvxopt.matrix(hfull[:nz])
            keep = [i for i in range(len(gr)) if gr[i] >= nz]
            gr = [gr[i] - nz for i in keep]
            gc = [gc[i] for i in keep]
            gv = [gv[i] for i in keep]
            hfull = hfull[nz:]
            n_full -= nz
        G = cvxopt.spmatrix(gv, gr, gc, (n_full, program.n_vars))
        h = cvxopt.matrix(hfull)
        dims = {"l": int(nl), "q": [], "s": sdims}
        saved = dict(cvxopt.solvers.options)
        cvxopt.solvers.options.clear()
        cvxopt.solvers.options.update({"show_progress": st.verbose,
                                       "abstol": st.tol, "reltol": st.tol,
                                       "feastol": st.tol, "refinement": 3,
                                       "maxiters": st.max_iters})
        try:
            if Aeq is not None:
                out = cvxopt.solvers.conelp(cvxopt.matrix(c_scaled), G, h, dims, Aeq, beq)
            else:
                out = cvxopt.solvers.conelp(cvxopt.matrix(c_scaled), G, h, dims)
        finally:
            cvxopt.solvers.options.clear()
            cvxopt.solvers.options.update(saved)
        raw_status = out["status"]
        if out["x"] is None or out["z"] is None:
            x = np.full(program.n_vars, np.nan)
            z = np.zeros(A.shape[0])
        else:
            x = np.asarray(out["x"]).ravel()
            zfull_all = np.asarray(out["z"]).ravel()
            zparts = [zfull_all[:nl]]
            off = nl
            for d in sdims:
                zf = zfull_all[off:off + d * d].reshape(d, d, order="F")
                zf = (zf + zf.T) / 2.0
                sv = np.empty(svec_len_of(d))
                k = 0
                for jj in range(d):
                    for ii in range(jj + 1):
                        sv[k] = zf[ii, jj] * (1.0 if ii == jj else SQRT2)
                        k += 1
                zparts.append(sv)
                off += d * d
            if nz:
                zy = np.asarray(out["y"]).ravel()
                zparts.insert(0, zy)
            z = np.concatenate(zparts) if zparts else np.zeros(0)
        iters = out.get("iterations")
    elif backend == "scs":
        import scs
        # scs orders PSD svec lower-triangular column-major; permute per group.
        off = nz + nl
        rperm = np.arange(A.shape[0])
        for g in psd:
            d = _group_emb_dim(g)
            rperm[off:off + g.size] = off + _scs_tri_perm(d)
            off += g.size
        A2 = A.tocsr()[rperm].tocsc()
        b2 = b[rperm]
        cone = {"z": int(nz), "l": int(nl), "s": [_group_emb_dim(g) for g in psd]}
        solver = scs.SCS({"A": A2, "b": b2, "c": c_scaled}, cone,
                         eps_abs=st.tol * 10, eps_rel=st.tol * 10,
                         max_iters=st.scs_max_iters, verbose=st.verbose)
        out = solver.solve()
        raw_status = out["info"]["status"]
        x = np.asarray(out["x"])
        zp = np.asarray(out["y"])
        inv = np.empty_like(rperm)
        inv[rperm] = np.arange(len(rperm))
        z = zp[inv]
        iters = out["info"]["iter"]
    else:
        raise ValueError(f"unknown backend {backend!r}")
    wall = time.perf_counter() - t0
    if dr is not None:
        x = dc * x
        z = dr * z
    return raw_status, x, z, perm, {"backend": backend, "iterations": iters,
                                    "solve_time_s": wall}


_CLARABEL_STATUS = {
    "Solved": OPTIMAL, "AlmostSolved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE, "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED, "AlmostDualInfeasible": UNBOUNDED,
}


def _classify(raw: str) -> str:
    if raw in _CLARABEL_STATUS:
        return _CLARABEL_STATUS[raw]
    low = raw.lower()
    if low.startswith("solved") or low == "optimal":
        return OPTIMAL
    if "dual infeasible" in low or "unbounded" in low:
        return UNBOUNDED
    if "infeasible" in low:
        return INFEASIBLE
    return NUMERICAL_FAILURE


def certify(program: ConicProgram, x: np.ndarray, z: np.ndarray) -> dict:
    """Independent KKT residuals, measured against each row/column's own scale.

    Row coefficients span many orders of magnitude, so residuals are
    normalized by the largest term actually entering each row (|A_ij x_j|)
    or column (|A_ij z_i|), never by an absolute unit.
    """
    A, b, c = program.A, program.b, program.c
    absA = abs(A)
    absx = np.abs(x)
    absz = np.abs(z)
    # largest term per row of A x, and per column of A^T z; floored by the
    # bare coefficient magnitude so rows whose variables all sit at ~0 do not
    # turn roundoff into a 0/0 failure
    rowterm = np.asarray((absA @ sp.diags(absx)).max(axis=1).todense()).ravel()
    rowmax = np.asarray(absA.max(axis=1).todense()).ravel()
    colterm = np.asarray((sp.diags(absz) @ absA).max(axis=0).todense()).ravel()
    colmax = np.asarray(absA.max(axis=0).todense()).ravel()

    r = A @ x - b
    primal = 0.0
    cone = 0.0
    for g in program.groups:
        seg = slice(g.start, g.start + g.size)
        scale = max(float(np.max(np.abs(b[seg]), initial=0.0)),
                    float(np.max(rowterm[seg], initial=0.0)),
                    float(np.max(rowmax[seg], initial=0.0)), 1e-30)
        if g.cone == "zero":
            primal = max(primal, float(np.max(np.abs(r[seg]), initial=0.0)) / scale)
        elif g.cone == "nonneg":
            primal = max(primal, float(np.max(r[seg], initial=0.0)) / scale)
            zseg = z[seg]
            cone = max(cone, float(np.max(-zseg / (1.0 + np.abs(zseg)), initial=0.0)))
        else:
            d = _group_emb_dim(g)
            slack = smat(b[seg] - A[g.start:g.start + g.size] @ x, d)
            primal = max(primal, max(0.0, -float(np.linalg.eigvalsh(slack)[0])) / scale)
            zmat = smat(z[seg], d)
            ev = np.linalg.eigvalsh(zmat)
            cone = max(cone, max(0.0, -float(ev[0])) / (1.0 + float(np.max(np.abs(ev)))))

    rd = c + A.T @ z
    denom = np.maximum(np.maximum(np.abs(c), colterm), np.maximum(colmax, 1e-30))
    dual = float(np.max(np.abs(rd) / denom)) if rd.size else 0.0

    pobj = float(c @ x)
    dobj = -float(b @ z)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return {"primal_feas": primal, "dual_feas": dual, "gap": gap, "cone": cone}


def _extract_duals(program: ConicProgram, z: np.ndarray) -> dict:
    """Tag-keyed duals in original (pre-equilibration) row units."""
    duals = {}
    for g in program.groups:
        seg = z[g.start:g.start + g.size] / g.scale
        if g.cone == "psd":
            zmat = smat(seg, _group_emb_dim(g))
            duals[g.tag] = (complex_dual_from_embedded(zmat) if g.complex_dim
                            else zmat)
        else:
            duals[g.tag] = float(seg[0])
    return duals


def _infeasibility_certificate_quality(program: ConicProgram, z: np.ndarray):
    """Certificate: z in K*, A^T z = 0, b^T z < 0 (improving dual ray)."""
    bz = float(program.b @ z)
    if bz >= 0:
        return np.inf
    atz = np.abs(program.A.T @ z)
    zinf = float(np.max(np.abs(z)))
    colmax = np.asarray(abs(program.A).max(axis=0).todense()).ravel()
    rel = np.max(atz / (1.0 + colmax * zinf)) if atz.size else 0.0
    return float(rel / max(-bz, 1e-300))


def solve(program: ConicProgram, settings: SolveSettings | None = None) -> ConicSolution:
    """Solve one conic program with post-hoc KKT certification.

    Optimal is only reported when the independent residual check passes at
    settings.cert_tol; an engine claim of optimality that fails certification
    is demoted to NumericalFailure.
    """
    st = settings or SolveSettings()
    raw, x, z_perm, perm, info = _solve_backend(program, st)
    status = _classify(raw)
    info["raw_status"] = raw

    z = np.empty_like(z_perm)
    z[perm] = z_perm

    sol = ConicSolution(status=status, objective=np.nan, x=x, info=info)
    if status == NUMERICAL_FAILURE and np.all(np.isfinite(x)) and z.size:
        # engines sometimes stop with "unknown" while the iterate already
        # certifies; accept it on the strength of the certificate alone
        kkt = certify(program, x, z)
        if np.isfinite(max(kkt.values())) and max(kkt.values()) <= st.cert_tol:
            status = OPTIMAL
            sol.status = OPTIMAL
    if status == OPTIMAL:
        kkt = certify(program, x, z)
        sol.kkt = kkt
        worst = max(kkt.values())
        if not np.isfinite(worst) or worst > st.cert_tol:
            sol.status = NUMERICAL_FAILURE
            sol.info["cert_failure"] = kkt
            return sol
        sol.objective = float(program.c @ x) + program.obj_offset
        sol.duals = _extract_duals(program, z)
        for blk in program.blocks:
            sol.primal[blk.name] = program.block_value(x, *blk.name)
        if program.expander is not None and st.expand:
            primal_full, bundle = program.expander.expand(x, sol.duals)
            sol.primal = primal_full
            sol.dual_bundle = bundle
        elif program.family in ("primal", "feasibility"):
            sol.dual_bundle = extract_dual_bundle(program, sol.duals)
        elif program.family == "reduced_primal":
            sol.dual_bundle = None
    elif status == INFEASIBLE:
        sol.certificate = z
        sol.info["certificate_quality"] = _infeasibility_certificate_quality(program, z)
    elif status == UNBOUNDED:
        sol.certificate = x
    return sol


def solve_robust(program: ConicProgram, settings: SolveSettings | None = None) -> ConicSolution:
    """solve() with a retry ladder for stalls just outside certification.

    Interior-point stalls here are scaling-sensitive; re-running with a
    different equilibration depth almost always lands within tolerance.
    Backend swaps are the last resort.
    """
    st = settings or SolveSettings()
    sol = solve(program, st)
    if sol.status != NUMERICAL_FAILURE:
        return sol
    for eq_iters in (3, 25, 40):
        if eq_iters == st.equilibrate_iters:
            continue
        trial = SolveSettings(**st.__dict__)
        trial.equilibrate_iters = eq_iters
        sol = solve(program, trial)
        if sol.status != NUMERICAL_FAILURE:
            sol.info["retried"] = f"equilibrate_iters={eq_iters}"
            return sol
    resolved = _resolve_backend(program, st)
    for backend in ("clarabel", "cvxopt", "scs"):
        if backend == resolved:
            continue
        if backend == "cvxopt" and program.n_rows() > 6000:
            continue
        trial = st.with_backend(backend)
        sol = solve(program, trial)
        if sol.status != NUMERICAL_FAILURE:
            sol.info["retried"] = backend
            return sol
    return sol


# ---------------------------------------------------------------------------
# Sparse-triplet text dumps (programs and solutions)
# ---------------------------------------------------------------------------

def write_program(program: ConicProgram, path) -> None:
    """Plain-text standard-form dump; format documented in docs/dump_format.md."""
    with open(path, "w") as f:
        f.write("fdas-conic-program v1\n")
        f.write(f"vars {program.n_vars}\n")
        f.write(f"rows {program.n_rows()}\n")
        f.write(f"obj_offset {program.obj_offset!r}\n")
        for blk in program.blocks:
            name = "/".join(str(p) for p in blk.name)
            f.write(f"block {name} {blk.kind} {blk.dim} {blk.offset} {blk.size}\n")
        for g in program.groups:
            f.write(f"group {g.tag} {g.cone} {g.start} {g.size} {g.complex_dim} {g.scale!r}\n")
        coo = program.A.tocoo()
        for i, v in enumerate(program.c):
            if v != 0.0:
                f.write(f"c {i} {v!r}\n")
        for r, cc, v in zip(coo.row, coo.col, coo.data):
            f.write(f"A {r} {cc} {v!r}\n")
        for i, v in enumerate(program.b):
            if v != 0.0:
                f.write(f"b {i} {v!r}\n")


def write_solution(solution: ConicSolution, program: ConicProgram, path) -> None:
    with open(path, "w") as f:
        f.write("fdas-conic-solution v1\n")
        f.write(f"status {solution.status}\n")
        f.write(f"objective {solution.objective!r}\n")
        for key, val in solution.kkt.items():
            f.write(f"kkt {key} {val!r}\n")
        if solution.x is not None:
            for i, v in enumerate(solution.x):
                f.write(f"x {i} {v!r}\n")
        for g in program.groups:
            if g.tag in solution.duals:
                d = solution.duals[g.tag]
                if isinstance(d, np.ndarray):
                    for (i, j), v in np.ndenumerate(d):
                        if v != 0:
                            f.write(f"y {g.tag} {i} {j} {v.real!r} {v.imag!r}\n")
                else:
                    f.write(f"y {g.tag} {d!r}\n")
