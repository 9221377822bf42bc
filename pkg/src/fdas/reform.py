"""Conic program builders for the big-M reformulated allocation problems.

Three program families are constructible, all sharing one constraint-tag
vocabulary and one standard form (linear objective, nonnegative / zero /
PSD-cone rows over free scalar parameters):

  * the SDP-relaxed primal for a fixed binary antenna pattern,
  * the l1 feasibility problem (slacked power/selection chains),
  * the penalized SCA iterate with a continuous antenna pattern.

Complex Hermitian matrix variables are parametrized by their n^2 real
degrees of freedom and cone membership is imposed on the real embedding
[[Re, -Im], [Im, Re]]; complex traces are half the embedded real traces.

For a binary pattern the auxiliary variables q, P-tilde and W-tilde are
pinned by the selection chains (q_mn = s_m s_n, products elsewhere), so the
primal carries a Reduction: a collapsed program over {W_k, P_j} only plus a
closed-form recovery of every eliminated variable and dual multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .scenario import Scenario

SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# Hermitian parametrization and real embedding
# ---------------------------------------------------------------------------

def herm_param_count(n: int) -> int:
    return n * n


def _offdiag_index(n: int, i: int, j: int) -> int:
    """Row-major linear index of the strict upper-triangle pair (i < j)."""
    return i * (2 * n - i - 1) // 2 + (j - i - 1)


def herm_trace_coeffs(a: np.ndarray) -> np.ndarray:
    """Real coefficient vector c with Tr(A X) = c . params(X) for Hermitian A, X."""
    n = a.shape[0]
    t = n * (n - 1) // 2
    c = np.empty(n * n)
    c[:n] = np.real(np.diag(a))
    iu, ju = np.triu_indices(n, k=1)
    c[n:n + t] = 2.0 * np.real(a[iu, ju])
    c[n + t:] = 2.0 * np.imag(a[iu, ju])
    return c


def mat_from_params(p: np.ndarray, n: int) -> np.ndarray:
    t = n * (n - 1) // 2
    x = np.zeros((n, n), complex)
    iu, ju = np.triu_indices(n, k=1)
    x[iu, ju] = p[n:n + t] + 1j * p[n + t:]
    x = x + x.conj().T
    x[np.diag_indices(n)] = p[:n]
    return x


def params_from_mat(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    t = n * (n - 1) // 2
    p = np.empty(n * n)
    p[:n] = np.real(np.diag(x))
    iu, ju = np.triu_indices(n, k=1)
    p[n:n + t] = np.real(x[iu, ju])
    p[n + t:] = np.imag(x[iu, ju])
    return p


def svec_len(d: int) -> int:
    return d * (d + 1) // 2


def svec(m: np.ndarray) -> np.ndarray:
    """Scaled upper-triangle column-major vectorization of a symmetric matrix."""
    d = m.shape[0]
    out = np.empty(svec_len(d))
    r = 0
    for j in range(d):
        for i in range(j + 1):
            out[r] = m[i, j] * (1.0 if i == j else SQRT2)
            r += 1
    return out


def smat(v: np.ndarray, d: int) -> np.ndarray:
    m = np.zeros((d, d))
    r = 0
    for j in range(d):
        for i in range(j + 1):
            if i == j:
                m[i, j] = v[r]
            else:
                m[i, j] = m[j, i] = v[r] / SQRT2
            r += 1
    return m


def embed(x: np.ndarray) -> np.ndarray:
    """Real embedding [[Re, -Im], [Im, Re]] of a complex Hermitian matrix."""
    re, im = np.real(x), np.imag(x)
    return np.block([[re, -im], [im, re]])


def complex_dual_from_embedded(z: np.ndarray) -> np.ndarray:
    """Paper-convention Hermitian dual D with Tr(D M) = Tr_R(Z E(M)) for Hermitian M."""
    n = z.shape[0] // 2
    z11, z12 = z[:n, :n], z[:n, n:]
    z21, z22 = z[n:, :n], z[n:, n:]
    d_hat = (z11 + z22) / 2.0 + 1j * (z12 - z21) / 2.0
    d = 2.0 * d_hat
    return (d + d.conj().T) / 2.0


class _EmbeddingTemplate:
    """Sparse map params(X) -> svec(E(X)) for Hermitian n x n blocks."""

    def __init__(self, n: int):
        self.n = n
        self.d = 2 * n
        self.len = svec_len(self.d)
        t = n * (n - 1) // 2
        rows, cols, vals = [], [], []
        diag_rows = []
        r = 0
        for jj in range(self.d):
            for ii in range(jj + 1):
                sc = 1.0 if ii == jj else SQRT2
                bi, bj = ii // n, jj // n
                i, j = ii % n, jj % n
                if bi == bj:
                    if i == j:
                        rows.append(r), cols.append(i), vals.append(sc)
                        if ii == jj:
                            diag_rows.append(r)
                    else:
                        i0, j0 = min(i, j), max(i, j)
                        rows.append(r), cols.append(n + _offdiag_index(n, i0, j0)), vals.append(sc)
                else:
                    # upper-right block of E(X): -Im X_{i,j}
                    if i < j:
                        rows.append(r), cols.append(n + t + _offdiag_index(n, i, j)), vals.append(-sc)
                    elif i > j:
                        rows.append(r), cols.append(n + t + _offdiag_index(n, j, i)), vals.append(sc)
                r += 1
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.vals = np.asarray(vals)
        self.diag_rows = np.asarray(diag_rows, dtype=np.int64)


_EMB_CACHE: dict[int, _EmbeddingTemplate] = {}


def _emb(n: int) -> _EmbeddingTemplate:
    if n not in _EMB_CACHE:
        _EMB_CACHE[n] = _EmbeddingTemplate(n)
    return _EMB_CACHE[n]


# ---------------------------------------------------------------------------
# Program container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintTag:
    kind: str                 # C1, C2bar, C3, C4, C5a, C6, C8..C19
    idx: tuple = ()
    sub: str = ""             # "lo"/"up" for two-sided scalar bounds

    def __str__(self) -> str:
        s = self.kind
        if self.idx:
            s += "[" + ",".join(str(i) for i in self.idx) + "]"
        if self.sub:
            s += ":" + self.sub
        return s


@dataclass(frozen=True)
class VarBlock:
    name: tuple               # ("W", k) / ("Wt", k, m, n) / ("q", m, n) / ...
    kind: str                 # "hermitian" | "scalar" | "nonneg"
    dim: int                  # matrix dimension for hermitian blocks, else 1
    offset: int
    size: int


@dataclass(frozen=True)
class RowGroup:
    tag: ConstraintTag
    cone: str                 # "zero" | "nonneg" | "psd"
    start: int
    size: int                 # svec length for psd groups
    complex_dim: int = 0      # n for embedded Hermitian groups (emb dim 2n)
    scale: float = 1.0        # stored rows are the true rows divided by scale


@dataclass
class ConicProgram:
    """Standard-form conic program with named variable blocks and tagged rows.

    minimize  c . x + obj_offset
    s.t.      (A x - b) restricted to each row group lies in the group cone
              (zero rows: equality; nonneg rows: A x <= b;
               psd groups: smat(b - A x) is PSD).
    """

    n_vars: int
    blocks: list[VarBlock]
    groups: list[RowGroup]
    c: np.ndarray
    obj_offset: float
    A: sp.csc_matrix
    b: np.ndarray
    params: dict = field(default_factory=dict)
    expander: "SolutionExpander | None" = None
    family: str = "generic"

    def __post_init__(self):
        self._block_map = {blk.name: blk for blk in self.blocks}

    def block(self, *name) -> VarBlock:
        return self._block_map[tuple(name)]

    def block_value(self, x: np.ndarray, *name):
        blk = self.block(*name)
        seg = x[blk.offset:blk.offset + blk.size]
        if blk.kind == "hermitian":
            return mat_from_params(seg, blk.dim)
        return float(seg[0])

    def rows_of(self, kind: str) -> list[RowGroup]:
        return [g for g in self.groups if g.tag.kind == kind]

    def n_rows(self) -> int:
        return int(self.A.shape[0])


class _ProgramAssembler:
    """Accumulates variable blocks and rows, emits a ConicProgram."""

    def __init__(self):
        self.blocks: list[VarBlock] = []
        self.n_vars = 0
        self._nn_rows: list[tuple] = []     # (tag, coeffs(list of (col,val)), rhs)
        self._psd: list[tuple] = []         # (tag, rows, cols, vals, bvec, complex_dim)
        self._c: list[tuple] = []
        self.obj_offset = 0.0

    def add_block(self, name: tuple, kind: str, dim: int) -> VarBlock:
        size = herm_param_count(dim) if kind == "hermitian" else 1
        blk = VarBlock(name=name, kind=kind, dim=dim, offset=self.n_vars, size=size)
        self.blocks.append(blk)
        self.n_vars += size
        return blk

    def add_obj(self, col, val):
        self._c.append((col, val))

    def add_obj_herm(self, blk: VarBlock, a: np.ndarray):
        coeffs = herm_trace_coeffs(a)
        for i, v in enumerate(coeffs):
            if v != 0.0:
                self._c.append((blk.offset + i, v))

    def add_nonneg(self, tag: ConstraintTag, coeffs, rhs: float):
        self._nn_rows.append((tag, coeffs, rhs))

    def add_psd_membership(self, tag: ConstraintTag, blk: VarBlock):
        """Row group: X >= 0 for a Hermitian block (b - A x = svec(E(X)))."""
        t = _emb(blk.dim)
        self._psd.append((tag, t.rows.copy(), blk.offset + t.cols, -t.vals,
                          np.zeros(t.len), blk.dim))

    def add_psd_expr(self, tag: ConstraintTag, terms, q_term=None, const_diag: float = 0.0,
                     dim: int | None = None):
        """Row group: sum_i sign_i X_i + q_coeff*q*I + const_diag*I  >=  0.

        terms: list of (VarBlock, sign); q_term: (col, coeff) adding coeff*q on
        the diagonal of the complex matrix.
        """
        n = dim if dim is not None else terms[0][0].dim
        t = _emb(n)
        rows = []
        cols = []
        vals = []
        for blk, sign in terms:
            rows.append(t.rows)
            cols.append(blk.offset + t.cols)
            vals.append(-sign * t.vals)
        if q_term is not None:
            col, coeff = q_term
            rows.append(t.diag_rows)
            cols.append(np.full(len(t.diag_rows), col, dtype=np.int64))
            vals.append(np.full(len(t.diag_rows), -coeff))
        # b - A x = svec(E(expr)): b carries the constant part, A the negated
        # linear part.
        bvec = np.zeros(t.len)
        if const_diag != 0.0:
            bvec[t.diag_rows] = const_diag
        self._psd.append((tag, np.concatenate(rows), np.concatenate(cols),
                          np.concatenate(vals), bvec, n))

    def build(self, family: str, params: dict | None = None) -> ConicProgram:
        """Emit the program in original units (equilibration is the solver's job)."""
        groups: list[RowGroup] = []
        rows, cols, vals = [], [], []
        b = []
        r = 0
        for tag, coeffs, rhs in self._nn_rows:
            groups.append(RowGroup(tag=tag, cone="nonneg", start=r, size=1))
            for col, val in coeffs:
                if val != 0.0:
                    rows.append(r), cols.append(col), vals.append(val)
            b.append(rhs)
            r += 1
        for tag, gr, gc, gv, gb, cdim in self._psd:
            groups.append(RowGroup(tag=tag, cone="psd", start=r,
                                   size=len(gb), complex_dim=cdim))
            rows.extend((gr + r).tolist())
            cols.extend(gc.tolist())
            vals.extend(gv.tolist())
            b.extend(gb.tolist())
            r += len(gb)
        A = sp.csc_matrix((vals, (rows, cols)), shape=(r, self.n_vars))
        c = np.zeros(self.n_vars)
        for col, val in self._c:
            c[col] += val
        return ConicProgram(n_vars=self.n_vars, blocks=self.blocks, groups=groups,
                            c=c, obj_offset=self.obj_offset, A=A, b=np.asarray(b),
                            params=dict(params or {}), family=family)


# ---------------------------------------------------------------------------
# Dual bundle
# ---------------------------------------------------------------------------

@dataclass
class DualBundle:
    """Multipliers of the reformulated problem, keyed as in the Lagrangian."""

    alpha: np.ndarray           # C1, (K_D,)
    psi: np.ndarray             # C2bar, (K_U,)
    rho: np.ndarray             # C3, (N,)
    lam: np.ndarray             # C4 upper, (K_U,)
    chi: np.ndarray             # C4 lower, (K_U,)
    Z: list                     # C6, K_D Hermitian PSD matrices
    varsigma: np.ndarray        # C8 lower, (N, N)
    kappa: np.ndarray           # C8 upper, (N, N)
    varphi: np.ndarray          # C9, (N, N)
    omega: np.ndarray           # C10, (N, N)
    mu: np.ndarray              # C11, (K_U, N, N)
    tau: np.ndarray             # C12, (K_U, N, N)
    xi: np.ndarray              # C13, (K_U, N, N)
    beta: np.ndarray            # C14, (K_U, N, N)
    D15: list | None = None     # (K_D, N, N) Hermitian PSD (None if not materialized)
    D16: list | None = None
    D17: list | None = None
    D18: list | None = None

    def cone_violation(self) -> float:
        """Largest violation of the sign/cone constraints (0 when clean)."""
        worst = 0.0
        for arr in (self.alpha, self.psi, self.rho, self.lam, self.chi, self.varsigma,
                    self.kappa, self.varphi, self.omega, self.mu, self.tau,
                    self.xi, self.beta):
            if arr.size:
                worst = max(worst, float(-arr.min()))
        for mats in (self.Z, self.D15, self.D16, self.D17, self.D18):
            if mats is None:
                continue
            for m in np.asarray(mats).reshape(-1, *np.asarray(mats).shape[-2:]):
                w = np.linalg.eigvalsh(m)[0]
                worst = max(worst, float(-w))
        return worst


def extract_dual_bundle(program: ConicProgram, duals: dict) -> DualBundle:
    """Collect tag-keyed duals of a full-form program into a DualBundle.

    For a symmetric-pair build, each merged multiplier is the sum of the two
    ordered twins' multipliers; splitting it evenly restores a valid
    assignment for the unmerged formulation (the split is immaterial anywhere
    the bundle is consumed, since only pair sums enter).
    """
    scen_meta = program.params
    n = scen_meta["n_antennas"]
    k_d, k_u = scen_meta["num_dl_users"], scen_meta["num_ul_users"]
    sym = bool(scen_meta.get("symmetric_pairs"))

    def arr(shape, kind, sub=""):
        out = np.zeros(shape)
        for g in program.groups:
            if g.tag.kind == kind and g.tag.sub == sub:
                out[g.tag.idx] = duals[g.tag]
        return out

    def mats(kind, count_shape):
        found = any(g.tag.kind == kind for g in program.groups)
        if not found:
            return None
        out = np.zeros(count_shape + (n, n), complex)
        for g in program.groups:
            if g.tag.kind == kind:
                val = duals[g.tag]
                idx = g.tag.idx
                if sym and idx[-2] != idx[-1]:
                    half = val / 2.0
                    out[idx] = half
                    out[idx[:-2] + (idx[-1], idx[-2])] = half
                else:
                    out[idx] = val
        return list(out) if len(count_shape) == 1 else out

    def pair_arr(shape, kind, sub=""):
        """Scalar multipliers over (.., m, n), split across merged twins."""
        out = np.zeros(shape)
        for g in program.groups:
            if g.tag.kind == kind and g.tag.sub == sub:
                idx = g.tag.idx
                val = duals[g.tag]
                if sym and idx[-2] != idx[-1]:
                    out[idx] = val / 2.0
                    out[idx[:-2] + (idx[-1], idx[-2])] = val / 2.0
                else:
                    out[idx] = val
        return out

    z = [duals[ConstraintTag("C6", (k,))] for k in range(k_d)]
    if sym:
        # merged "q <= s_m" rows carry kappa(m,n) + varphi(n,m); an even split
        # keeps every antenna-wise sum identical
        kappa = np.zeros((n, n))
        varphi = np.zeros((n, n))
        for g in program.groups:
            if g.tag.kind == "C8" and g.tag.sub == "up":
                m, nn = g.tag.idx
                half = duals[g.tag] / 2.0
                kappa[m, nn] += half
                varphi[nn, m] += half
    else:
        kappa = arr((n, n), "C8", "up")
        varphi = arr((n, n), "C9")

    return DualBundle(
        alpha=arr((k_d,), "C1"), psi=arr((k_u,), "C2bar"),
        rho=arr((n,), "C3"), lam=arr((k_u,), "C4", "up"), chi=arr((k_u,), "C4", "lo"),
        Z=z, varsigma=pair_arr((n, n), "C8", "lo"), kappa=kappa,
        varphi=varphi, omega=pair_arr((n, n), "C10"),
        mu=pair_arr((k_u, n, n), "C11"), tau=pair_arr((k_u, n, n), "C12"),
        xi=pair_arr((k_u, n, n), "C13"), beta=pair_arr((k_u, n, n), "C14"),
        D15=mats("C15", (k_d, n, n)), D16=mats("C16", (k_d, n, n)),
        D17=mats("C17", (k_d, n, n)), D18=mats("C18", (k_d, n, n)),
    )


# ---------------------------------------------------------------------------
# Reduction (presolve of the binary-pattern primal) and recovery
# ---------------------------------------------------------------------------

@dataclass
class SolutionExpander:
    """Lifts a collapsed-primal solution back to the full big-M space.

    The selection chains pin q = s_m s_n, P~ = P q and W~ = W q; the
    eliminated multipliers are reconstructed so that stationarity and
    complementary slackness of the full Lagrangian hold exactly given the
    reduced solve's multipliers.
    """

    s: np.ndarray
    factory: "ProgramFactory"
    include_power_caps: bool
    reduced: ConicProgram

    def expand(self, x_red: np.ndarray, duals_red: dict):
        f = self.factory
        scen = f.scenario
        n, k_d, k_u = f.n, f.k_d, f.k_u
        s = self.s
        red = self.reduced

        w = [red.block_value(x_red, "W", k) for k in range(k_d)]
        p = np.array([red.block_value(x_red, "P", j) for j in range(k_u)])
        q = np.outer(s, s)

        alpha = np.array([duals_red[ConstraintTag("C1", (k,))] for k in range(k_d)])
        psi = np.array([duals_red[ConstraintTag("C2bar", (j,))] for j in range(k_u)])
        if self.include_power_caps:
            rho = np.array([duals_red[ConstraintTag("C3", (l,))] for l in range(n)])
            lam = np.array([duals_red[ConstraintTag("C4", (j,), "up")] for j in range(k_u)])
        else:
            rho = np.zeros(n)
            lam = np.zeros(k_u)
        chi = np.array([duals_red[ConstraintTag("C4", (j,), "lo")] for j in range(k_u)])
        z = [duals_red[ConstraintTag("C6", (k,))] for k in range(k_d)]

        # G_mn = sum_j psi_j Herm(B^j_mn); rank <= 2, split into PSD parts.
        gamma = np.zeros((n, n), complex)
        for j in range(k_u):
            hj = scen.channels.h_ul[j]
            gamma += psi[j] * np.outer(hj, hj.conj())
        g_plus_tr = np.zeros((n, n))
        g_minus_tr = np.zeros((n, n))
        g_plus = np.zeros((n, n, n, n), complex)
        g_minus = np.zeros((n, n, n, n), complex)
        for m in range(n):
            for nn in range(n):
                b_mn = gamma[m, nn] * np.outer(f.si_cols[:, m], f.si_cols[:, nn].conj())
                g = (b_mn + b_mn.conj().T) / 2.0
                evals, evecs = np.linalg.eigh(g)
                pos = evecs @ np.diag(np.maximum(evals, 0.0)) @ evecs.conj().T
                neg = pos - g
                g_plus[m, nn] = pos
                g_minus[m, nn] = neg
                g_plus_tr[m, nn] = max(float(np.sum(np.maximum(evals, 0.0))), 0.0)
                g_minus_tr[m, nn] = max(float(-np.sum(np.minimum(evals, 0.0))), 0.0)

        # d_jmn drives the C11-C14 split (stationarity w.r.t. P~_jmn).
        d = np.zeros((k_u, n, n))
        for j in range(k_u):
            d[j] = (psi[j] / scen.qos.gamma_ul_req[j]) * f.t_num[j]
            for jp in range(k_u):
                if jp != j:
                    d[j] -= psi[jp] * f.cross_re[j, jp]

        on = q > 0.5
        mu = np.where(~on, np.maximum(d, 0.0), 0.0)
        beta = np.where(~on, np.maximum(-d, 0.0), 0.0)
        tau = np.where(on, np.maximum(d, 0.0), 0.0)
        xi = np.where(on, np.maximum(-d, 0.0), 0.0)

        pmax_ul = scen.power.p_max_ul
        # Stationarity w.r.t. q_mn fixes kappa/varphi/omega/varsigma.
        e = np.zeros((n, n))
        for j in range(k_u):
            e[np.diag_indices(n)] += psi[j] * scen.config.noise_power_ul * f.habs2[j]
            e += (xi[j] - mu[j]) * pmax_ul[j]
        e += f.pbar * k_d * np.where(on, g_plus_tr, -g_minus_tr)

        kappa = np.zeros((n, n))
        varphi = np.zeros((n, n))
        omega = np.zeros((n, n))
        varsigma = np.zeros((n, n))
        for m in range(n):
            for nn in range(n):
                if on[m, nn]:
                    omega[m, nn] = e[m, nn]
                elif e[m, nn] <= 0.0:
                    if s[m] < 0.5:
                        kappa[m, nn] = -e[m, nn]
                    else:
                        varphi[m, nn] = -e[m, nn]
                else:
                    varsigma[m, nn] = e[m, nn]

        primal = {}
        for k in range(k_d):
            primal[("W", k)] = w[k]
        for j in range(k_u):
            primal[("P", j)] = p[j]
        for m in range(n):
            for nn in range(n):
                primal[("q", m, nn)] = q[m, nn]
                for j in range(k_u):
                    primal[("Pt", j, m, nn)] = p[j] * q[m, nn]
                for k in range(k_d):
                    primal[("Wt", k, m, nn)] = w[k] * q[m, nn]

        d15 = np.zeros((k_d, n, n, n, n), complex)
        d16 = np.zeros_like(d15)
        d17 = np.zeros_like(d15)
        d18 = np.zeros_like(d15)
        for k in range(k_d):
            d16[k][on] = g_minus[on]
            d17[k][on] = g_plus[on]
            d18[k][~on] = g_plus[~on]
            d15[k][~on] = g_minus[~on]

        bundle = DualBundle(alpha=alpha, psi=psi, rho=rho, lam=lam, chi=chi, Z=z,
                            varsigma=varsigma, kappa=kappa, varphi=varphi, omega=omega,
                            mu=mu, tau=tau, xi=xi, beta=beta,
                            D15=d15, D16=d16, D17=d17, D18=d18)
        return primal, bundle


# ---------------------------------------------------------------------------
# Program factory
# ---------------------------------------------------------------------------

class ProgramFactory:
    """Builds the three program families for one scenario.

    Static constraint structure is assembled once per family and reused across
    calls; only right-hand sides (primal, feasibility) or objective slopes
    (SCA iterate) change between calls.
    """

    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.n = scenario.n_antennas
        self.k_d = scenario.config.num_dl_users
        self.k_u = scenario.config.num_ul_users
        self.pbar = float(np.max(scenario.power.p_max_dl))

        ch = scenario.channels
        self.h_d_outer = [np.outer(ch.h_dl[k], ch.h_dl[k].conj()) for k in range(self.k_d)]
        self.gabs2 = np.abs(ch.g_ul_dl) ** 2
        self.habs2 = np.abs(ch.h_ul) ** 2                      # (K_U, N)
        self.si_cols = ch.h_si.conj().T                        # column m = H_SI^H e_m
        # t_num[j][m,n] = Tr(H_Uj R_m H_Uj R_n^H) = |h_jm|^2 |h_jn|^2
        self.t_num = np.einsum("jm,jn->jmn", self.habs2, self.habs2)
        # cross_re[r, j, m, n] = Re Tr(H_Ur R_m H_Uj R_n^H): P~_{r,mn} coeff in C2bar_j
        h = ch.h_ul
        if self.k_u:
            cross = np.einsum("rm,jm,jn,rn->rjmn", h.conj(), h, h.conj(), h)
            self.cross_re = np.real(cross)
        else:
            self.cross_re = np.zeros((0, 0, self.n, self.n))
        # herm_b[j][m][n] = Herm(B^j_mn): W~ coefficient matrices in C2bar_j
        self._herm_b_coeffs = None
        self._full_cache: dict = {}

    # -- shared metadata on every built program
    def _meta(self) -> dict:
        return {"n_antennas": self.n, "num_dl_users": self.k_d,
                "num_ul_users": self.k_u}

    # ------------------------------------------------------------------
    # Reduced primal (binary s): variables {W_k, P_j}
    # ------------------------------------------------------------------

    def reduced_primal(self, s: np.ndarray, include_power_caps: bool = True,
                       hd_mode: bool = False, gamma_dl=None, gamma_ul=None,
                       transmit_weight: float = 1.0) -> ConicProgram:
        """Collapsed primal at a binary pattern.

        hd_mode drops self-interference and UL-to-DL cross terms (the two
        directions are time-separated); gamma overrides support the converted
        half-duplex targets; transmit_weight scales the transmit/amplifier
        objective terms (1/2 for half-duplex accounting).
        """
        scen = self.scenario
        n, k_d, k_u = self.n, self.k_d, self.k_u
        s = np.asarray(s, dtype=float)
        g_dl = np.asarray(gamma_dl if gamma_dl is not None else scen.qos.gamma_dl_req)
        g_ul = np.asarray(gamma_ul if gamma_ul is not None else scen.qos.gamma_ul_req)

        a = _ProgramAssembler()
        w_blk = [a.add_block(("W", k), "hermitian", n) for k in range(k_d)]
        p_blk = [a.add_block(("P", j), "scalar", 1) for j in range(k_u)]

        eta_eps = scen.power.weight_dl * scen.power.amp_ineff_dl * transmit_weight
        for k in range(k_d):
            a.add_obj_herm(w_blk[k], eta_eps * np.eye(n, dtype=complex))
        for j in range(k_u):
            a.add_obj(p_blk[j].offset, scen.power.amp_ineff_ul * scen.power.weight_ul[j]
                      * transmit_weight)
        a.obj_offset = (scen.power.p_static
                        + float(np.sum(s)) * scen.power.p_active
                        + float(n - np.sum(s)) * scen.power.p_idle)

        for k in range(k_d):
            coeffs = []
            for t in range(k_d):
                sgn = -1.0 / g_dl[k] if t == k else 1.0
                ct = sgn * herm_trace_coeffs(self.h_d_outer[k])
                coeffs.extend((w_blk[t].offset + i, v) for i, v in enumerate(ct) if v != 0.0)
            if not hd_mode:
                for j in range(k_u):
                    coeffs.append((p_blk[j].offset, float(self.gabs2[j, k])))
            a.add_nonneg(ConstraintTag("C1", (k,)), coeffs, -scen.config.noise_power_dl)

        for j in range(k_u):
            v = s * scen.channels.h_ul[j]
            v2 = float(np.real(np.vdot(v, v)))
            coeffs = [(p_blk[j].offset, -(v2 ** 2) / g_ul[j])]
            if not hd_mode:
                u = self.scenario.channels.h_si.conj().T @ v
                uu = np.outer(u, u.conj())
                for k in range(k_d):
                    ct = herm_trace_coeffs(uu)
                    coeffs.extend((w_blk[k].offset + i, c) for i, c in enumerate(ct) if c != 0.0)
            for r in range(k_u):
                if r != j:
                    coeffs.append((p_blk[r].offset,
                                   float(np.abs(np.vdot(v, scen.channels.h_ul[r])) ** 2)))
            a.add_nonneg(ConstraintTag("C2bar", (j,)), coeffs,
                         -scen.config.noise_power_ul * v2)

        if include_power_caps:
            for l in range(n):
                coeffs = [(w_blk[k].offset + l, 1.0) for k in range(k_d)]
                a.add_nonneg(ConstraintTag("C3", (l,)), coeffs,
                             float(s[l] * scen.power.p_max_dl[l]))
            for j in range(k_u):
                a.add_nonneg(ConstraintTag("C4", (j,), "up"), [(p_blk[j].offset, 1.0)],
                             float(scen.power.p_max_ul[j]))
        for j in range(k_u):
            a.add_nonneg(ConstraintTag("C4", (j,), "lo"), [(p_blk[j].offset, -1.0)], 0.0)

        for k in range(k_d):
            a.add_psd_membership(ConstraintTag("C6", (k,)), w_blk[k])

        params = self._meta()
        params.update({"s": s.copy(), "include_power_caps": include_power_caps,
                       "hd_mode": hd_mode})
        return a.build("reduced_primal", params)

    # ------------------------------------------------------------------
    # Full-form families
    # ------------------------------------------------------------------

    def _herm_b(self, j: int, m: int, nn: int) -> np.ndarray:
        hj = self.scenario.channels.h_ul[j]
        b = hj[m] * np.conj(hj[nn]) * np.outer(self.si_cols[:, m], self.si_cols[:, nn].conj())
        return (b + b.conj().T) / 2.0

    def _assemble_full(self, family: str, symmetric: bool = False) -> ConicProgram:
        """Static structure shared by every call of one full-form family.

        symmetric=True merges the (m,n)/(n,m) auxiliary twins. The problem is
        invariant under that swap (coefficients pair up conjugate-symmetric),
        so the merged program has the same optimal value; it roughly halves
        the PSD block count. Duals of merged rows split evenly back onto both
        orderings (extract_dual_bundle handles this).
        """
        key = (family, symmetric)
        if key in self._full_cache:
            return self._full_cache[key]
        scen = self.scenario
        n, k_d, k_u = self.n, self.k_d, self.k_u
        if symmetric:
            pairs = [(m, nn) for m in range(n) for nn in range(m, n)]
        else:
            pairs = [(m, nn) for m in range(n) for nn in range(n)]

        def pmult(m, nn):
            return 2.0 if (symmetric and m != nn) else 1.0

        a = _ProgramAssembler()
        w_blk = [a.add_block(("W", k), "hermitian", n) for k in range(k_d)]
        wt_blk = {(k, m, nn): a.add_block(("Wt", k, m, nn), "hermitian", n)
                  for k in range(k_d) for (m, nn) in pairs}
        q_blk = {(m, nn): a.add_block(("q", m, nn), "scalar", 1) for (m, nn) in pairs}
        p_blk = [a.add_block(("P", j), "scalar", 1) for j in range(k_u)]
        pt_blk = {(j, m, nn): a.add_block(("Pt", j, m, nn), "scalar", 1)
                  for j in range(k_u) for (m, nn) in pairs}
        s_blk = None
        nu_blk = {}
        nu_weight = {}
        if family == "sca":
            s_blk = [a.add_block(("s", l), "scalar", 1) for l in range(n)]
        if family == "feasibility":
            for l in range(n):
                nu_blk[("C3", l)] = a.add_block(("nu", "C3", l), "scalar", 1)
                nu_weight[("C3", l)] = 1.0
            if symmetric:
                # merged rows carry the combined slack mass of their twins
                for (m, nn) in pairs:
                    nu_blk[("C8", m, nn)] = a.add_block(("nu", "C8", m, nn), "scalar", 1)
                    nu_weight[("C8", m, nn)] = 2.0
                    if m != nn:
                        nu_blk[("C8", nn, m)] = a.add_block(("nu", "C8", nn, m), "scalar", 1)
                        nu_weight[("C8", nn, m)] = 2.0
                    nu_blk[("C10", m, nn)] = a.add_block(("nu", "C10", m, nn), "scalar", 1)
                    nu_weight[("C10", m, nn)] = 2.0 if m != nn else 1.0
            else:
                for kind in ("C8", "C9", "C10"):
                    for m in range(n):
                        for nn in range(n):
                            nu_blk[(kind, m, nn)] = a.add_block(("nu", kind, m, nn), "scalar", 1)
                            nu_weight[(kind, m, nn)] = 1.0

        # objective
        if family == "feasibility":
            for key2, blk in nu_blk.items():
                a.add_obj(blk.offset, nu_weight[key2])
        else:
            eta_eps = scen.power.weight_dl * scen.power.amp_ineff_dl
            for k in range(k_d):
                a.add_obj_herm(w_blk[k], eta_eps * np.eye(n, dtype=complex))
            for j in range(k_u):
                a.add_obj(p_blk[j].offset,
                          scen.power.amp_ineff_ul * scen.power.weight_ul[j])
            # s-dependent objective pieces are installed per call

        # C1
        for k in range(k_d):
            coeffs = []
            for t in range(k_d):
                sgn = -1.0 / scen.qos.gamma_dl_req[k] if t == k else 1.0
                ct = sgn * herm_trace_coeffs(self.h_d_outer[k])
                coeffs.extend((w_blk[t].offset + i, v) for i, v in enumerate(ct) if v != 0.0)
            for j in range(k_u):
                coeffs.append((p_blk[j].offset, float(self.gabs2[j, k])))
            a.add_nonneg(ConstraintTag("C1", (k,)), coeffs, -scen.config.noise_power_dl)

        # C2bar over the auxiliaries
        for j in range(k_u):
            coeffs = []
            for (m, nn) in pairs:
                w = pmult(m, nn)
                coeffs.append((pt_blk[(j, m, nn)].offset,
                               -w * float(self.t_num[j, m, nn]) / scen.qos.gamma_ul_req[j]))
                for r in range(k_u):
                    if r != j:
                        coeffs.append((pt_blk[(r, m, nn)].offset,
                                       w * float(self.cross_re[r, j, m, nn])))
                hb = self._herm_b(j, m, nn)
                ct = w * herm_trace_coeffs(hb)
                for k in range(k_d):
                    blk = wt_blk[(k, m, nn)]
                    coeffs.extend((blk.offset + i, v) for i, v in enumerate(ct) if v != 0.0)
            for l in range(n):
                coeffs.append((q_blk[(l, l)].offset,
                               scen.config.noise_power_ul * float(self.habs2[j, l])))
            a.add_nonneg(ConstraintTag("C2bar", (j,)), coeffs, 0.0)

        # C3 (rhs/s-column handled per family)
        for l in range(n):
            coeffs = [(w_blk[k].offset + l, 1.0) for k in range(k_d)]
            if family == "sca":
                coeffs.append((s_blk[l].offset, -float(scen.power.p_max_dl[l])))
            if family == "feasibility":
                coeffs.append((nu_blk[("C3", l)].offset, -1.0))
            a.add_nonneg(ConstraintTag("C3", (l,)), coeffs, 0.0)

        # C4
        for j in range(k_u):
            a.add_nonneg(ConstraintTag("C4", (j,), "up"), [(p_blk[j].offset, 1.0)],
                         float(scen.power.p_max_ul[j]))
            a.add_nonneg(ConstraintTag("C4", (j,), "lo"), [(p_blk[j].offset, -1.0)], 0.0)

        # C5a for the SCA family
        if family == "sca":
            for l in range(n):
                a.add_nonneg(ConstraintTag("C5a", (l,), "up"), [(s_blk[l].offset, 1.0)], 1.0)
                a.add_nonneg(ConstraintTag("C5a", (l,), "lo"), [(s_blk[l].offset, -1.0)], 0.0)

        # C8-C10 selection chains
        def sel_row(tag, q, s_idx, nu_key):
            row = [(q, 1.0)]
            if family == "sca":
                row.append((s_blk[s_idx].offset, -1.0))
            if family == "feasibility":
                row.append((nu_blk[nu_key].offset, -1.0))
            a.add_nonneg(tag, row, 0.0)

        for (m, nn) in pairs:
            q = q_blk[(m, nn)].offset
            a.add_nonneg(ConstraintTag("C8", (m, nn), "lo"), [(q, -1.0)], 0.0)
            if symmetric:
                # q <= s_m merges C8(m,nn) with C9(nn,m); q <= s_nn the mirror
                sel_row(ConstraintTag("C8", (m, nn), "up"), q, m, ("C8", m, nn))
                if m != nn:
                    sel_row(ConstraintTag("C8", (nn, m), "up"), q, nn, ("C8", nn, m))
            else:
                sel_row(ConstraintTag("C8", (m, nn), "up"), q, m, ("C8", m, nn))
                sel_row(ConstraintTag("C9", (m, nn)), q, nn, ("C9", m, nn))
            c10 = [(q, -1.0)]
            if family == "sca":
                c10.extend(((s_blk[m].offset, 1.0), (s_blk[nn].offset, 1.0)))
            if family == "feasibility":
                c10.append((nu_blk[("C10", m, nn)].offset, -1.0))
            a.add_nonneg(ConstraintTag("C10", (m, nn)), c10, 1.0)

        # C11-C14 big-M chain for P~ = P q
        for j in range(k_u):
            pmx = float(scen.power.p_max_ul[j])
            for (m, nn) in pairs:
                pt = pt_blk[(j, m, nn)].offset
                q = q_blk[(m, nn)].offset
                p = p_blk[j].offset
                a.add_nonneg(ConstraintTag("C11", (j, m, nn)), [(pt, 1.0), (q, -pmx)], 0.0)
                a.add_nonneg(ConstraintTag("C12", (j, m, nn)), [(pt, 1.0), (p, -1.0)], 0.0)
                a.add_nonneg(ConstraintTag("C13", (j, m, nn)),
                             [(p, 1.0), (q, pmx), (pt, -1.0)], pmx)
                a.add_nonneg(ConstraintTag("C14", (j, m, nn)), [(pt, -1.0)], 0.0)

        # C19 slack nonnegativity
        if family == "feasibility":
            for key2, blk in nu_blk.items():
                a.add_nonneg(ConstraintTag("C19", tuple(key2)), [(blk.offset, -1.0)], 0.0)

        # PSD groups: C6 then the C15-C18 big-M chain for W~ = W q
        for k in range(k_d):
            a.add_psd_membership(ConstraintTag("C6", (k,)), w_blk[k])
        for k in range(k_d):
            for (m, nn) in pairs:
                wt = wt_blk[(k, m, nn)]
                q = q_blk[(m, nn)].offset
                a.add_psd_expr(ConstraintTag("C15", (k, m, nn)),
                               [(wt, -1.0)], q_term=(q, self.pbar))
                a.add_psd_expr(ConstraintTag("C16", (k, m, nn)),
                               [(w_blk[k], 1.0), (wt, -1.0)])
                a.add_psd_expr(ConstraintTag("C17", (k, m, nn)),
                               [(wt, 1.0), (w_blk[k], -1.0)],
                               q_term=(q, -self.pbar), const_diag=self.pbar)
                a.add_psd_membership(ConstraintTag("C18", (k, m, nn)), wt)

        params = self._meta()
        params["symmetric_pairs"] = symmetric
        program = a.build(family, params)
        self._full_cache[key] = program
        return program

    def _full_with(self, family: str, symmetric: bool = False,
                   b_edits: dict | None = None, c_edits: dict | None = None,
                   obj_offset: float | None = None,
                   params: dict | None = None) -> ConicProgram:
        base = self._assemble_full(family, symmetric)
        b = base.b.copy()
        if b_edits:
            rows = {(g.tag.kind, g.tag.idx, g.tag.sub): g.start
                    for g in base.groups if g.cone == "nonneg"}
            for key, val in b_edits.items():
                b[rows[key]] = val
        c = base.c
        if c_edits:
            c = c.copy()
            for col, val in c_edits.items():
                c[col] += val
        pars = self._meta()
        pars["symmetric_pairs"] = symmetric
        pars.update(params or {})
        return ConicProgram(n_vars=base.n_vars, blocks=base.blocks, groups=base.groups,
                            c=c, obj_offset=base.obj_offset if obj_offset is None else obj_offset,
                            A=base.A, b=b, params=pars, family=family)

    def primal(self, s: np.ndarray, form: str = "auto",
               include_power_caps: bool = True) -> ConicProgram:
        """SDP-relaxed primal at a fixed binary pattern (rank constraint dropped).

        form="auto" presolves the selection chains (q, P~, W~ are pinned by a
        binary pattern) and returns the collapsed program carrying a
        SolutionExpander, so a solve still reports every eliminated variable
        and multiplier. form="full" materializes all big-M rows.
        """
        s = np.asarray(s, dtype=float)
        if not np.all(np.isin(s, (0.0, 1.0))):
            raise ValueError("primal requires a binary antenna pattern")
        if form not in ("auto", "full", "reduced"):
            raise ValueError(f"unknown form {form!r}")
        if form == "full" and not include_power_caps:
            raise ValueError("full form needs the power caps as big-M bounds")
        if form in ("auto", "reduced"):
            red = self.reduced_primal(s, include_power_caps=include_power_caps)
            if form == "auto" and include_power_caps:
                red.expander = SolutionExpander(s=s.copy(), factory=self,
                                                include_power_caps=True, reduced=red)
            return red
        scen = self.scenario
        n = self.n
        b_edits = {}
        for l in range(n):
            b_edits[("C3", (l,), "")] = float(s[l] * scen.power.p_max_dl[l])
        for m in range(n):
            for nn in range(n):
                b_edits[("C8", (m, nn), "up")] = float(s[m])
                b_edits[("C9", (m, nn), "")] = float(s[nn])
                b_edits[("C10", (m, nn), "")] = float(1.0 - s[m] - s[nn])
        offset = (scen.power.p_static + float(np.sum(s)) * scen.power.p_active
                  + float(n - np.sum(s)) * scen.power.p_idle)
        return self._full_with("primal", b_edits=b_edits, obj_offset=offset,
                               params={"s": s.copy()})

    def feasibility(self, s: np.ndarray, symmetric: bool = False) -> ConicProgram:
        """l1 violation-minimization at a binary pattern (slacked C3, C8-C10)."""
        s = np.asarray(s, dtype=float)
        if not np.all(np.isin(s, (0.0, 1.0))):
            raise ValueError("feasibility problem requires a binary antenna pattern")
        scen = self.scenario
        n = self.n
        b_edits = {}
        for l in range(n):
            b_edits[("C3", (l,), "")] = float(s[l] * scen.power.p_max_dl[l])
        if symmetric:
            for m in range(n):
                for nn in range(m, n):
                    b_edits[("C8", (m, nn), "up")] = float(s[m])
                    if m != nn:
                        b_edits[("C8", (nn, m), "up")] = float(s[nn])
                    b_edits[("C10", (m, nn), "")] = float(1.0 - s[m] - s[nn])
        else:
            for m in range(n):
                for nn in range(n):
                    b_edits[("C8", (m, nn), "up")] = float(s[m])
                    b_edits[("C9", (m, nn), "")] = float(s[nn])
                    b_edits[("C10", (m, nn), "")] = float(1.0 - s[m] - s[nn])
        return self._full_with("feasibility", symmetric, b_edits=b_edits, obj_offset=0.0,
                               params={"s": s.copy()})

    def sca_iterate(self, s_prev: np.ndarray, phi: float,
                    symmetric: bool = False) -> ConicProgram:
        """Penalized convex iterate around s_prev with the linearized penalty."""
        if phi <= 0:
            raise ValueError("penalty factor phi must be positive")
        s_prev = np.clip(np.asarray(s_prev, dtype=float), 0.0, 1.0)
        scen = self.scenario
        base = self._assemble_full("sca", symmetric)
        c_edits = {}
        for l in range(self.n):
            blk = base.block("s", l)
            c_edits[blk.offset] = ((scen.power.p_active - scen.power.p_idle)
                                   + phi * (1.0 - 2.0 * s_prev[l]))
        offset = (scen.power.p_static + self.n * scen.power.p_idle
                  + phi * float(np.sum(s_prev ** 2)))
        return self._full_with("sca", symmetric, c_edits=c_edits, obj_offset=offset,
                               params={"s_prev": s_prev.copy(), "phi": float(phi)})


def build_primal(scenario: Scenario, s_fixed, form: str = "auto") -> ConicProgram:
    return ProgramFactory(scenario).primal(np.asarray(s_fixed), form=form)


def build_feasibility(scenario: Scenario, s_fixed, symmetric: bool = False) -> ConicProgram:
    return ProgramFactory(scenario).feasibility(np.asarray(s_fixed), symmetric=symmetric)


def build_sca_iterate(scenario: Scenario, s_prev, penalty: float,
                      symmetric: bool = False) -> ConicProgram:
    return ProgramFactory(scenario).sca_iterate(np.asarray(s_prev), penalty,
                                                symmetric=symmetric)


# ---------------------------------------------------------------------------
# Beamformer extraction
# ---------------------------------------------------------------------------

@dataclass
class RankReport:
    eigenvalue_ratios: np.ndarray      # lambda_2 / lambda_1 per DL user

    @property
    def worst(self) -> float:
        return float(self.eigenvalue_ratios.max()) if self.eigenvalue_ratios.size else 0.0


def allocation_from_solution(solution, scenario: Scenario, s: np.ndarray):
    """Rank-one allocation from a solved primal (any form) at pattern s."""
    from .metrics import Allocation

    k_d = scenario.config.num_dl_users
    k_u = scenario.config.num_ul_users
    w_mats = [solution.primal[("W", k)] for k in range(k_d)]
    w_vecs, rank_report = extract_beamformers(w_mats)
    p_ul = np.array([solution.primal[("P", j)] for j in range(k_u)])
    return Allocation(w_dl=w_vecs, p_ul=p_ul, s=np.asarray(s, dtype=float),
                      rank_ratios=rank_report.eigenvalue_ratios)


def extract_beamformers(w_matrices) -> tuple[list[np.ndarray], RankReport]:
    """Principal-eigenvector beamformers w_k = sqrt(lambda_1) u_1 per user."""
    vecs = []
    ratios = []
    for w in w_matrices:
        wh = (w + w.conj().T) / 2.0
        evals, evecs = np.linalg.eigh(wh)
        lead = float(evals[-1])
        if lead <= 0.0:
            vecs.append(np.zeros(w.shape[0], complex))
            ratios.append(0.0)
            continue
        second = float(evals[-2]) if len(evals) > 1 else 0.0
        ratios.append(max(second, 0.0) / lead)
        vecs.append(np.sqrt(lead) * evecs[:, -1])
    return vecs, RankReport(eigenvalue_ratios=np.asarray(ratios))
