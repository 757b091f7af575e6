# 二次规划求解器
# Primal-dual interior-point QP solver

"""Convex QP solver used by the CFTOC builders and inverse kinematics.

    min 1/2 z'Hz + f'z   s.t.   A_ineq z <= b_ineq,   A_eq z = b_eq

The problem is equilibrated (Ruiz scaling of the KKT matrix plus an
objective scale) before Mehrotra predictor-corrector iterations. Each
iteration factorizes the quasi-definite reduced KKT system once and reuses
it for the predictor and corrector solves; small systems go through dense
LAPACK, large ones through SuperLU. Convergence is judged on the caller's
problem, not the scaled one (see KktResiduals). When the iteration stalls
or diverges, a phase-one LP (HiGHS) decides between `infeasible` and
`max_iterations`.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from app.core.config import get_settings
from app.core.exceptions import QPNotConvexError, handle_solver_error
from app.core.logging import get_logger
from app.models.numerics import MatrixLike, QpProblem, QpSolution, QpStatus

settings = get_settings()
logger = get_logger("app.qp_solver")

_REGULARIZATION = 1e-10
_STEP_FRACTION = 0.99
_DIVERGENCE = 1e20
_RUIZ_PASSES = 25
_RUIZ_SPREAD = 0.1
_NEGLIGIBLE_NORM = 1e-8
# fraction of the equilibrated problem size below which residual entries count as zero
_RESIDUAL_FLOOR = 1e-6
# KKT systems up to this size are factorized densely
_DENSE_KKT_SIZE = 300


def check_psd(H, tol: float = 1e-9) -> None:
    """Raise QPNotConvexError unless H is positive semidefinite.

    A symmetric matrix with a nonnegative, diagonally dominant diagonal is
    PSD without an eigen-decomposition; otherwise the smallest eigenvalue
    must stay above -tol (relative to the largest entry).
    """
    scale = max(1.0, float(abs(H).max())) if H.shape[0] else 1.0
    if sparse.issparse(H):
        diag = H.diagonal()
        off = np.asarray(abs(H).sum(axis=1)).ravel() - np.abs(diag)
        if np.all(diag >= off - tol * scale):
            return
        H = H.toarray()
    if H.shape[0] == 0:
        return
    min_eig = float(np.linalg.eigvalsh(H).min())
    if min_eig < -tol * scale:
        raise QPNotConvexError(f"H is not positive semidefinite (min eigenvalue {min_eig:.3e})")


@dataclass(frozen=True)
class KktResiduals:
    """Componentwise relative KKT residuals in the caller's units.

    Every residual entry is divided by the magnitude of the terms it is
    summed from, so the numbers do not move when variables, constraints or
    the objective are rescaled:

    - stationarity: |Hz + f + G'lam + A'nu|_j against (|H||z| + |f| + |G'||lam| + |A'||nu|)_j
    - primal: violation of row i against (|G||z| + |b|)_i
    - complementarity: lam_i * slack_i against (|G||z| + |b|)_i times the
      natural multiplier size of row i, i.e. the largest cost/equality term of
      the variables the row touches divided by its coefficient there
    """

    stationarity: float
    primal: float
    complementarity: float

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


def _relative(numerator: np.ndarray, scale: np.ndarray) -> float:
    numerator = np.abs(numerator)
    if numerator.size == 0:
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(numerator == 0.0, 0.0, numerator / scale)
    return float(np.max(ratio))


def _magnitude(v: np.ndarray) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _abs(matrix: MatrixLike) -> MatrixLike:
    return abs(matrix) if sparse.issparse(matrix) else np.abs(matrix)


def _transposed_product(matrix: MatrixLike, v: np.ndarray) -> np.ndarray:
    if matrix.shape[0] == 0:
        return np.zeros(matrix.shape[1])
    return matrix.T @ v


@dataclass(frozen=True)
class ResidualFloors:
    """Per-entry additions to the KktResiduals denominators.

    Entries whose terms all vanish at the solution (a cost-free variable
    with zero multipliers, a row with zero data) cannot be judged relative
    to themselves; the solver supplies these floors from the equilibrated
    problem so that such entries are held to a roundoff-sized tolerance.
    """

    stationarity: np.ndarray
    inequality: np.ndarray
    equality: np.ndarray
    complementarity: np.ndarray


class KktCheck:
    """Evaluates KktResiduals of one QpProblem at a candidate (z, lam, nu)."""

    def __init__(self, problem: QpProblem):
        self.problem = problem
        self.abs_H = _abs(problem.H)
        self.abs_G = _abs(problem.A_ineq)
        self.abs_A = _abs(problem.A_eq)
        G = problem.A_ineq
        if sparse.issparse(G):
            coo = G.tocoo()
            keep = coo.data != 0.0
            self._rows, self._cols, self._coefficients = coo.row[keep], coo.col[keep], np.abs(coo.data[keep])
        else:
            self._rows, self._cols = np.nonzero(G)
            self._coefficients = np.abs(G[self._rows, self._cols])

    def _multiplier_scale(self, column_scale: np.ndarray) -> np.ndarray:
        scale = np.zeros(self.problem.n_ineq)
        if self._rows.size:
            np.maximum.at(scale, self._rows, column_scale[self._cols] / self._coefficients)
        positive = scale > 0.0
        # rows touching only cost-free variables borrow the largest scale
        scale[~positive] = float(scale[positive].max()) if np.any(positive) else 1.0
        return scale

    def __call__(
        self,
        z: np.ndarray,
        lam: np.ndarray,
        nu: np.ndarray,
        floors: Optional[ResidualFloors] = None,
    ) -> KktResiduals:
        p = self.problem
        abs_z = np.abs(z)
        Gz = p.A_ineq @ z

        cost_scale = self.abs_H @ abs_z + np.abs(p.f) + _transposed_product(self.abs_A, np.abs(nu))
        gradient = p.H @ z + p.f + _transposed_product(p.A_ineq, lam) + _transposed_product(p.A_eq, nu)
        gradient_scale = cost_scale + _transposed_product(self.abs_G, np.abs(lam))

        row_scale = self.abs_G @ abs_z + np.abs(p.b_ineq)
        eq_scale = self.abs_A @ abs_z + np.abs(p.b_eq)
        complementarity_scale = self._multiplier_scale(cost_scale) * row_scale

        if floors is not None:
            gradient_scale = gradient_scale + floors.stationarity
            eq_scale = eq_scale + floors.equality
            complementarity_scale = complementarity_scale + floors.complementarity
            primal_ineq_scale = row_scale + floors.inequality
        else:
            primal_ineq_scale = row_scale

        slack = np.maximum(p.b_ineq - Gz, 0.0)
        return KktResiduals(
            stationarity=_relative(gradient, gradient_scale),
            primal=max(
                _relative(np.maximum(Gz - p.b_ineq, 0.0), primal_ineq_scale),
                _relative(p.A_eq @ z - p.b_eq, eq_scale),
            ),
            complementarity=_relative(np.maximum(lam, 0.0) * slack, complementarity_scale),
        )


class _ReducedKkt:
    """Factorizations of K(w) = [[H + G' diag(w) G, A'], [A, 0]].

    The sparsity pattern does not depend on w, so the sparse triplets are
    laid out once and only the G' diag(w) G values change per iteration.
    """

    def __init__(self, H: MatrixLike, G: MatrixLike, A: MatrixLike, dense: bool):
        self.dense = dense
        self.n = H.shape[0]
        self.p = A.shape[0]
        size = self.n + self.p
        self.reg = np.concatenate([np.full(self.n, _REGULARIZATION), np.full(self.p, -_REGULARIZATION)])
        if dense:
            self.H, self.G, self.A = H, G, A
            return

        H, A, G = sparse.coo_matrix(H), sparse.coo_matrix(A), sparse.csr_matrix(G)
        diag = np.arange(size)
        self._fixed_rows = np.concatenate([H.row, self.n + A.row, A.col, diag])
        self._fixed_cols = np.concatenate([H.col, A.col, self.n + A.row, diag])
        self._fixed_values = np.concatenate([H.data, A.data, A.data, self.reg])

        # every pair of nonzeros sharing a row of G adds w_row * g_a * g_b at (col_a, col_b)
        counts = np.diff(G.indptr)
        owner = np.repeat(np.arange(G.shape[0]), counts)
        partners = counts[owner]
        first = np.repeat(np.arange(G.nnz), partners)
        offset = np.arange(first.size) - np.repeat(np.cumsum(partners) - partners, partners)
        second = np.repeat(G.indptr[owner], partners) + offset
        self._pair_owner = owner[first]
        self._rows = np.concatenate([self._fixed_rows, G.indices[first]])
        self._cols = np.concatenate([self._fixed_cols, G.indices[second]])
        self._pair_values = G.data[first] * G.data[second]
        self._size = size

    def factorize(self, w: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        if self.dense:
            M = self.H + (self.G.T * w) @ self.G
            K = np.block([[M, self.A.T], [self.A, np.zeros((self.p, self.p))]]) if self.p else M
            K = K + np.diag(self.reg)
            factors = la.lu_factor(K, check_finite=False)

            def solve_once(rhs: np.ndarray) -> np.ndarray:
                return la.lu_solve(factors, rhs, check_finite=False)

        else:
            values = np.concatenate([self._fixed_values, self._pair_values * w[self._pair_owner]])
            K = sparse.csc_matrix((values, (self._rows, self._cols)), shape=(self._size, self._size))
            lu = spla.splu(K)
            solve_once = lu.solve

        reg = self.reg

        def solve(rhs: np.ndarray) -> np.ndarray:
            x = solve_once(rhs)
            # refine against the unregularized matrix K - diag(reg)
            for _ in range(2):
                x = x + solve_once(rhs - (K @ x - reg * x))
            return x

        return solve


class InteriorPointSolver:
    """Single-use solver for one QpProblem."""

    def __init__(
        self,
        problem: QpProblem,
        tol: Optional[float] = None,
        max_iter: Optional[int] = None,
        initial_guess: Optional[np.ndarray] = None,
    ):
        self.problem = problem
        self.tol = settings.qp_tolerance if tol is None else tol
        self.max_iter = settings.qp_max_iterations if max_iter is None else max_iter
        self.initial_guess = initial_guess
        self.dense = problem.n_z + problem.n_eq <= _DENSE_KKT_SIZE
        self.check = KktCheck(problem)

    # 预处理：Ruiz 平衡
    def _equilibrate(self) -> None:
        problem = self.problem
        n, m_eq = problem.n_z, problem.n_eq
        H = sparse.coo_matrix(problem.H)
        C = sparse.vstack([sparse.csr_matrix(problem.A_eq), sparse.csr_matrix(problem.A_ineq)], format="coo")
        h_abs, c_abs = np.abs(H.data), np.abs(C.data)
        D = np.ones(n)
        E = np.ones(C.shape[0])

        for _ in range(_RUIZ_PASSES):
            h_values = h_abs * D[H.row] * D[H.col]
            c_values = c_abs * E[C.row] * D[C.col]
            col = np.zeros(n)
            row = np.zeros(C.shape[0])
            np.maximum.at(col, H.col, h_values)
            np.maximum.at(col, C.col, c_values)
            np.maximum.at(row, C.row, c_values)
            norms = np.concatenate([col, row])
            live = norms > _NEGLIGIBLE_NORM
            if not np.any(live) or np.max(np.abs(1.0 - norms[live])) <= _RUIZ_SPREAD:
                break
            col[col <= _NEGLIGIBLE_NORM] = 1.0
            row[row <= _NEGLIGIBLE_NORM] = 1.0
            D *= np.clip(1.0 / np.sqrt(col), 1e-4, 1e4)
            E *= np.clip(1.0 / np.sqrt(row), 1e-4, 1e4)

        H_values = H.data * D[H.row] * D[H.col]
        h_col = np.zeros(n)
        np.maximum.at(h_col, H.col, np.abs(H_values))
        f = D * problem.f
        curvature = h_col[h_col > 0.0]
        scale = float(np.mean(curvature)) if curvature.size else float(np.max(np.abs(f), initial=0.0))
        cost = 1.0 / scale if scale > 0.0 else 1.0

        Hs = sparse.csr_matrix((cost * H_values, (H.row, H.col)), shape=(n, n))
        Cs = sparse.csr_matrix((C.data * E[C.row] * D[C.col], (C.row, C.col)), shape=C.shape)
        As, Gs = Cs[:m_eq], Cs[m_eq:]
        if self.dense:
            Hs, As, Gs = Hs.toarray(), As.toarray(), Gs.toarray()

        self.D = D
        self.E_eq = E[:m_eq]
        self.E_in = E[m_eq:]
        self.cost = cost
        self.Hs, self.As, self.Gs = Hs, As, Gs
        self.fs = cost * f
        self.bs = self.E_eq * problem.b_eq
        self.hs = self.E_in * problem.b_ineq

    def _unscale(self, z: np.ndarray, lam: np.ndarray, nu: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.D * z, self.E_in * lam / self.cost, self.E_eq * nu / self.cost

    def _residuals(self, z: np.ndarray, lam: np.ndarray, nu: np.ndarray) -> KktResiduals:
        """KktResiduals of the caller's problem at the scaled iterate."""
        stationarity_size = max(
            _magnitude(self.Hs @ z),
            _magnitude(self.fs),
            _magnitude(_transposed_product(self.Gs, lam)),
            _magnitude(_transposed_product(self.As, nu)),
        )
        primal_size = max(
            _magnitude(self.Gs @ z), _magnitude(self.hs), _magnitude(self.As @ z), _magnitude(self.bs)
        )
        floors = ResidualFloors(
            stationarity=_RESIDUAL_FLOOR * stationarity_size / (self.cost * self.D),
            inequality=_RESIDUAL_FLOOR * primal_size / self.E_in,
            equality=_RESIDUAL_FLOOR * primal_size / self.E_eq,
            complementarity=np.full(
                self.E_in.shape[0], _RESIDUAL_FLOOR * stationarity_size * primal_size / self.cost
            ),
        )
        return self.check(*self._unscale(z, lam, nu), floors=floors)

    def _solve_equality_only(self, kkt: _ReducedKkt):
        n = self.problem.n_z
        solve = kkt.factorize(np.zeros(0))
        sol = solve(np.concatenate([-self.fs, self.bs]))
        z, nu, lam = sol[:n], sol[n:], np.zeros(0)
        residuals = self._residuals(z, lam, nu)
        status = QpStatus.OPTIMAL if residuals.worst <= self.tol else None
        return status, z, lam, nu, 1, residuals

    @staticmethod
    def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
        negative = dv < 0
        if not np.any(negative):
            return 1.0
        return float(min(1.0, np.min(-v[negative] / dv[negative])))

    def _interior_point(self, z0: np.ndarray):
        n = self.problem.n_z
        m = self.hs.shape[0]
        p = self.bs.shape[0]
        kkt = _ReducedKkt(self.Hs, self.Gs, self.As, self.dense)
        if m == 0:
            return self._solve_equality_only(kkt)

        H, G, A = self.Hs, self.Gs, self.As
        GT = G.T
        z = z0.copy()
        s = np.maximum(self.hs - G @ z, 1.0)
        lam = np.ones(m)
        nu = np.zeros(p)

        for iteration in range(self.max_iter + 1):
            residuals = self._residuals(z, lam, nu)
            if residuals.worst <= self.tol:
                return QpStatus.OPTIMAL, z, lam, nu, iteration, residuals
            if iteration == self.max_iter:
                break
            finite = np.all(np.isfinite(z)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(s))
            if not finite or np.max(np.abs(lam)) > _DIVERGENCE or np.max(np.abs(z), initial=0.0) > _DIVERGENCE:
                logger.debug(f"interior point diverged at iteration {iteration}")
                return None, z, lam, nu, iteration, residuals

            r_d = H @ z + self.fs + GT @ lam + _transposed_product(A, nu)
            r_eq = A @ z - self.bs
            r_in = G @ z + s - self.hs
            mu = float(s @ lam) / m
            w = lam / s
            try:
                kkt_solve = kkt.factorize(w)
            except RuntimeError as e:  # SuperLU: exactly singular
                logger.debug(f"KKT factorization failed: {e}")
                return None, z, lam, nu, iteration, residuals

            def newton(r_c: np.ndarray):
                rhs = -r_d - GT @ (w * r_in - r_c / s)
                sol = kkt_solve(np.concatenate([rhs, -r_eq]))
                dz, dnu = sol[:n], sol[n:]
                dlam = w * (G @ dz + r_in) - r_c / s
                ds = -(r_c + s * dlam) / lam
                return dz, ds, dlam, dnu

            # predictor
            dz, ds, dlam, dnu = newton(s * lam)
            alpha = min(self._max_step(s, ds), self._max_step(lam, dlam))
            mu_aff = float((s + alpha * ds) @ (lam + alpha * dlam)) / m
            sigma = float(np.clip((mu_aff / mu) ** 3, 0.0, 1.0)) if mu > 0 else 0.0

            # corrector
            r_c = s * lam + ds * dlam - sigma * mu
            dz, ds, dlam, dnu = newton(r_c)
            alpha = min(1.0, _STEP_FRACTION * min(self._max_step(s, ds), self._max_step(lam, dlam)))

            z = z + alpha * dz
            s = s + alpha * ds
            lam = lam + alpha * dlam
            nu = nu + alpha * dnu

        return None, z, lam, nu, self.max_iter, residuals

    def _phase_one_infeasible(self) -> bool:
        n = self.problem.n_z
        result = linprog(
            c=np.zeros(n),
            A_ub=self.Gs if self.Gs.shape[0] else None,
            b_ub=self.hs if self.Gs.shape[0] else None,
            A_eq=self.As if self.As.shape[0] else None,
            b_eq=self.bs if self.As.shape[0] else None,
            bounds=[(None, None)] * n,
            method="highs",
        )
        return result.status == 2

    def solve(self) -> QpSolution:
        problem = self.problem
        check_psd(problem.H)
        try:
            self._equilibrate()
            z0 = np.zeros(problem.n_z) if self.initial_guess is None else np.asarray(self.initial_guess, float) / self.D
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                status, zs, lams, nus, iterations, residuals = self._interior_point(z0)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise handle_solver_error(e) from e

        if status is None:
            status = QpStatus.INFEASIBLE if self._phase_one_infeasible() else QpStatus.MAX_ITERATIONS
        if status != QpStatus.OPTIMAL:
            logger.warning(
                f"QP not solved: {status.value} after {iterations} iterations (residual {residuals.worst:.3e})"
            )

        z, lam, nu = self._unscale(zs, lams, nus)
        objective = problem.objective(z) if np.all(np.isfinite(z)) else float("nan")
        return QpSolution(
            z=z,
            lam=lam,
            nu=nu,
            status=status,
            kkt_residual=float(residuals.worst),
            iterations=int(iterations),
            objective=objective,
        )


def solve(
    problem: QpProblem,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    initial_guess: Optional[np.ndarray] = None,
) -> QpSolution:
    """Solve a convex QP; see InteriorPointSolver."""
    return InteriorPointSolver(problem, tol=tol, max_iter=max_iter, initial_guess=initial_guess).solve()


def kkt_residuals(problem: QpProblem, solution: QpSolution) -> KktResiduals:
    return KktCheck(problem)(solution.z, solution.lam, solution.nu)


def stationarity_residual(problem: QpProblem, solution: QpSolution) -> float:
    """||Hz + f + A_ineq' lam + A_eq' nu||_inf in the caller's units."""
    r = problem.H @ solution.z + problem.f
    if problem.n_ineq:
        r = r + problem.A_ineq.T @ solution.lam
    if problem.n_eq:
        r = r + problem.A_eq.T @ solution.nu
    return float(np.max(np.abs(r), initial=0.0))