"""Finite-difference reference solvers on cell-centred grids.

All operators share one discretisation. For a cell P and each of its four
faces with conductance ``a`` (1 for Poisson, the harmonic mean of the two
cell diffusivities for Darcy) the flux term is

* interior face to neighbour Q: ``a (u_Q - u_P) / h**2``
* Dirichlet face with value g: ``a (8 g - 9 u_P + u_opp) / (3 h**2)``, from
  the quadratic ghost value ``(8 g - 6 u_P + u_opp) / 3`` where ``u_opp`` is
  the next cell inwards
* Neumann face with outward derivative g: ``a g / h``

The Dirichlet closure is exact for quadratics and keeps the discrete
maximum principle. The Laplacian ``L u`` is the sum of the four flux terms.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import GridSpec, ScalarField

#: Regulariser in the coupled nonlinear equation ``lap v = 1/(u^2 + eps) - v^2``.
NONLINEAR_EPS = 1e-2

EDGES = ("left", "right", "top", "bottom")

# factorisations keyed by operator fingerprint, shared across solves on one grid
_LU_CACHE: dict = {}


class IllPosedError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class PicardDivergenceError(NonConvergenceError):
    pass


class BcKind(enum.IntEnum):
    DIRICHLET = 0
    NEUMANN = 1


@dataclass(frozen=True, eq=False)
class BoundarySpec:
    """Kind and value per edge, in the order left, right, top, bottom.

    A value may be a scalar or a profile along the edge (``ny`` entries for
    left/right, ``nx`` for top/bottom, ordered by increasing coordinate).
    Neumann values are outward normal derivatives.
    """

    kinds: tuple = (BcKind.DIRICHLET,) * 4
    values: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.kinds) != 4 or len(self.values) != 4:
            raise ValueError("boundary spec needs exactly four edges")
        kinds = tuple(BcKind(int(k)) for k in self.kinds)
        vals = []
        for v in self.values:
            a = np.asarray(v, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError("boundary magnitudes must be finite")
            vals.append(float(a) if a.ndim == 0 else a.copy())
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "values", tuple(vals))

    @classmethod
    def dirichlet(cls, value=0.0) -> "BoundarySpec":
        return cls((BcKind.DIRICHLET,) * 4, (value,) * 4)

    @classmethod
    def from_encoding(cls, enc) -> "BoundarySpec":
        enc = np.asarray(enc, dtype=np.float64)
        if enc.shape != (8,):
            raise ValueError("boundary encoding must have length 8")
        if not np.all(np.isin(enc[:4], (0.0, 1.0))):
            raise ValueError("boundary kind flags must be 0 or 1")
        return cls(tuple(int(k) for k in enc[:4]), tuple(float(x) for x in enc[4:]))

    def to_encoding(self) -> np.ndarray:
        if any(np.ndim(v) for v in self.values):
            raise ValueError("edge profiles have no fixed-length encoding")
        return np.array([float(k) for k in self.kinds] + [float(v) for v in self.values])

    @property
    def has_dirichlet(self) -> bool:
        return BcKind.DIRICHLET in self.kinds

    def edge_values(self, edge: int, n: int) -> np.ndarray:
        v = self.values[edge]
        if np.ndim(v) == 0:
            return np.full(n, float(v))
        if np.shape(v) != (n,):
            raise ValueError(f"{EDGES[edge]} profile needs {n} values, got {np.shape(v)}")
        return np.asarray(v)

    def to_dict(self) -> dict:
        return {
            "kinds": [k.name.lower() for k in self.kinds],
            "values": [v if np.ndim(v) == 0 else list(map(float, v)) for v in self.values],
        }

    def __eq__(self, other):
        if not isinstance(other, BoundarySpec):
            return NotImplemented
        return self.kinds == other.kinds and all(
            np.array_equal(a, b) for a, b in zip(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True)
class FdmConfig:
    """Solver settings.

    ``tolerance`` bounds the area-weighted L2 norm of the equation residual.
    ``method`` picks red-black SOR or a sparse LU factorisation ("direct").
    """

    tolerance: float = 1e-9
    max_iters: int = 200_000
    omega: float = 1.9
    picard_damping: float = 0.7
    picard_max_iters: int = 500
    method: str = "sor"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.omega < 2:
            raise ValueError("omega must lie in (0, 2)")
        if not 0 < self.picard_damping <= 1:
            raise ValueError("picard_damping must lie in (0, 1]")
        if self.max_iters < 1 or self.picard_max_iters < 1:
            raise ValueError("iteration caps must be positive")
        if self.method not in ("sor", "direct"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True, eq=False)
class FivePoint:
    """``(L u)_P = c u_P + w u_W + e u_E + s u_S + n u_N + const``.

    Arrays are ``(ny, nx)``. South is row ``j - 1``, north is row ``j + 1``.
    """

    grid: GridSpec
    c: np.ndarray
    w: np.ndarray
    e: np.ndarray
    s: np.ndarray
    n: np.ndarray
    const: np.ndarray
    _lu: list = field(default_factory=list, repr=False)

    def apply(self, u: np.ndarray, with_const=True) -> np.ndarray:
        out = self.c * u
        out[:, 1:] += self.w[:, 1:] * u[:, :-1]
        out[:, :-1] += self.e[:, :-1] * u[:, 1:]
        out[1:, :] += self.s[1:, :] * u[:-1, :]
        out[:-1, :] += self.n[:-1, :] * u[1:, :]
        if with_const:
            out += self.const
        return out

    def residual(self, u, rhs) -> np.ndarray:
        return rhs - self.apply(u)

    def norm(self, r) -> float:
        return float(np.sqrt(np.sum(r * r) * self.grid.hx * self.grid.hy))

    def matrix(self) -> sp.csr_matrix:
        ny, nx = self.grid.shape
        idx = np.arange(nx * ny).reshape(ny, nx)
        rows, cols, vals = [idx.ravel()], [idx.ravel()], [self.c.ravel()]
        for coef, sl_p, sl_q in (
            (self.w, np.s_[:, 1:], np.s_[:, :-1]),
            (self.e, np.s_[:, :-1], np.s_[:, 1:]),
            (self.s, np.s_[1:, :], np.s_[:-1, :]),
            (self.n, np.s_[:-1, :], np.s_[1:, :]),
        ):
            rows.append(idx[sl_p].ravel())
            cols.append(idx[sl_q].ravel())
            vals.append(coef[sl_p].ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nx * ny, nx * ny),
        )

    def factorized(self):
        if not self._lu:
            key = self.fingerprint()
            lu = _LU_CACHE.get(key)
            if lu is None:
                lu = spla.splu(self.matrix().tocsc())
                if len(_LU_CACHE) >= 8:
                    _LU_CACHE.pop(next(iter(_LU_CACHE)))
                _LU_CACHE[key] = lu
            self._lu.append(lu)
        return self._lu[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.c, self.w, self.e, self.s, self.n):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr(self.grid).encode())
        return h.hexdigest()


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def assemble(grid: GridSpec, bc: BoundarySpec, alpha=None) -> FivePoint:
    """Build the flux-form operator ``div(alpha grad u)`` with closures for ``bc``."""
    if not bc.has_dirichlet:
        raise IllPosedError("at least one Dirichlet edge is required")
    ny, nx = grid.shape
    if alpha is None:
        alpha = np.ones((ny, nx))
    else:
        alpha = np.asarray(alpha.values if isinstance(alpha, ScalarField) else alpha,
                           dtype=np.float64).reshape(ny, nx)
        if not np.all(alpha > 0):
            raise ValueError("diffusivity must be strictly positive")
    ix2, iy2 = 1.0 / grid.hx ** 2, 1.0 / grid.hy ** 2
    c = np.zeros((ny, nx))
    w = np.zeros((ny, nx))
    e = np.zeros((ny, nx))
    s = np.zeros((ny, nx))
    n = np.zeros((ny, nx))
    const = np.zeros((ny, nx))

    kx = _harmonic(alpha[:, :-1], alpha[:, 1:]) * ix2  # faces between i and i+1
    ky = _harmonic(alpha[:-1, :], alpha[1:, :]) * iy2  # faces between j and j+1
    e[:, :-1] += kx
    c[:, :-1] -= kx
    w[:, 1:] += kx
    c[:, 1:] -= kx
    n[:-1, :] += ky
    c[:-1, :] -= ky
    s[1:, :] += ky
    c[1:, :] -= ky

    # (edge index, boundary cell slice, inward-neighbour coefficient array, h, 1/h^2)
    edges = (
        (0, np.s_[:, 0], e, grid.hx, ix2, ny),
        (1, np.s_[:, -1], w, grid.hx, ix2, ny),
        (2, np.s_[-1, :], s, grid.hy, iy2, nx),
        (3, np.s_[0, :], n, grid.hy, iy2, nx),
    )
    for k, sl, inward, h, ih2, count in edges:
        g = bc.edge_values(k, count)
        a = alpha[sl]
        if bc.kinds[k] == BcKind.DIRICHLET:
            kb = a * ih2
            c[sl] -= 3.0 * kb
            inward[sl] += kb / 3.0
            const[sl] += 8.0 * kb * g / 3.0
        else:
            const[sl] += a * g / h
    return FivePoint(grid, c, w, e, s, n, const)


def _as_values(grid: GridSpec, f) -> np.ndarray:
    if f is None:
        return np.zeros(grid.shape)
    if isinstance(f, ScalarField):
        if f.grid != grid:
            raise ValueError("field grid does not match solver grid")
        return f.values
    a = np.asarray(f, dtype=np.float64)
    if a.size != grid.size:
        raise ValueError(f"expected {grid.size} values, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise ValueError("source must be finite")
    return a.reshape(grid.shape)


def _sor(op: FivePoint, rhs, u0, cfg: FdmConfig, tol) -> tuple[np.ndarray, float, int]:
    ny, nx = op.grid.shape
    jj, ii = np.indices((ny, nx))
    red = ((ii + jj) % 2 == 0)
    black = ~red
    b = rhs - op.const
    u = np.array(u0, dtype=np.float64)
    om_c = cfg.omega / op.c
    res = op.norm(b - op.apply(u, with_const=False))
    check_every = 10
    for it in range(1, cfg.max_iters + 1):
        for mask in (red, black):
            r = b - op.apply(u, with_const=False)
            u += np.where(mask, om_c * r, 0.0)
        if it % check_every == 0 or it == cfg.max_iters:
            res = op.norm(b - op.apply(u, with_const=False))
            if not np.isfinite(res):
                raise NonConvergenceError("SOR produced non-finite values", res, it)
            if res < tol:
                return u, res, it
    raise NonConvergenceError(
        f"SOR did not reach residual {tol:g} in {cfg.max_iters} sweeps (final {res:.3e}); "
        "raise max_iters or use method='direct'", res, cfg.max_iters)


def _direct(op: FivePoint, rhs, tol) -> tuple[np.ndarray, float, int]:
    lu = op.factorized()
    b = rhs - op.const
    u = lu.solve(b.ravel()).reshape(op.grid.shape)
    r = b - op.apply(u, with_const=False)
    res = op.norm(r)
    for _ in range(3):  # iterative refinement mops up rounding on large grids
        if res < tol:
            break
        u = u + lu.solve(r.ravel()).reshape(op.grid.shape)
        r = b - op.apply(u, with_const=False)
        res = op.norm(r)
    return u, res, 1


def solve_linear(op: FivePoint, rhs, cfg: FdmConfig, u0=None, tol=None):
    """Solve ``L u = rhs``; returns ``(u, residual_norm, iterations)``."""
    tol = cfg.tolerance if tol is None else tol
    if cfg.method == "direct":
        return _direct(op, rhs, tol)
    if u0 is None:
        u0 = np.zeros(op.grid.shape)
    return _sor(op, rhs, u0, cfg, tol)


def solve_laplace(grid: GridSpec, bc: BoundarySpec, cfg: FdmConfig = FdmConfig()) -> ScalarField:
    op = assemble(grid, bc)
    u, _, _ = solve_linear(op, np.zeros(grid.shape), cfg)
    return ScalarField(grid, u)


def solve_poisson(grid: GridSpec, source, bc: BoundarySpec = BoundarySpec(),
                  cfg: FdmConfig = FdmConfig()) -> ScalarField:
    """Solve ``lap u = f``."""
    f = _as_values(grid, source)
    op = assemble(grid, bc)
    u, _, _ = solve_linear(op, f, cfg)
    return ScalarField(grid, u)


def solve_darcy(grid: GridSpec, alpha, source, bc: BoundarySpec = BoundarySpec(),
                cfg: FdmConfig = FdmConfig()) -> ScalarField:
    """Solve ``-div(alpha grad phi) = f``."""
    f = _as_values(grid, source)
    op = assemble(grid, bc, alpha=_as_values(grid, alpha))
    phi, _, _ = solve_linear(op, -f, cfg)
    return ScalarField(grid, phi)


def nonlinear_residuals(grid, u, v, source, bc=BoundarySpec(), eps=NONLINEAR_EPS):
    """Area-weighted residual norms of both coupled equations at ``(u, v)``."""
    op = assemble(grid, bc)
    f = _as_values(grid, source)
    u = _as_values(grid, u)
    v = _as_values(grid, v)
    ru = op.residual(u, f - u * u)
    rv = op.residual(v, 1.0 / (u * u + eps) - v * v)
    return op.norm(ru), op.norm(rv)


def solve_nonlinear_poisson(grid: GridSpec, source, bc: BoundarySpec = BoundarySpec(),
                            cfg: FdmConfig = FdmConfig(), bc_v: BoundarySpec | None = None,
                            eps: float = NONLINEAR_EPS):
    """Damped Picard iteration for ``lap u = f - u^2`` and ``lap v = 1/(u^2+eps) - v^2``.

    The quadratic terms are lagged; each outer step solves two linear
    problems and blends the result with weight ``cfg.picard_damping``.
    Returns ``(u, v)``.
    """
    f = _as_values(grid, source)
    op_u = assemble(grid, bc)
    op_v = op_u if bc_v is None else assemble(grid, bc_v)
    d = cfg.picard_damping
    inner_tol = cfg.tolerance / 10.0
    u = np.zeros(grid.shape)
    v = np.zeros(grid.shape)
    history = []
    rising = 0
    for it in range(1, cfg.picard_max_iters + 1):
        u_star, _, _ = solve_linear(op_u, f - u * u, cfg, u0=u, tol=inner_tol)
        u_new = (1 - d) * u + d * u_star
        v_star, _, _ = solve_linear(op_v, 1.0 / (u_new * u_new + eps) - v * v, cfg, u0=v,
                                    tol=inner_tol)
        v_new = (1 - d) * v + d * v_star
        change = np.hypot(op_u.norm(u_new - u), op_u.norm(v_new - v))
        u, v = u_new, v_new
        ru = op_u.norm(op_u.residual(u, f - u * u))
        rv = op_v.norm(op_v.residual(v, 1.0 / (u * u + eps) - v * v))
        res = max(ru, rv)
        if not np.isfinite(res):
            raise PicardDivergenceError("Picard iteration produced non-finite values; "
                                        "try a smaller picard_damping", res, it)
        if history and res > history[-1]:
            rising += 1
            if rising >= 3:
                raise PicardDivergenceError(
                    f"Picard residual grew for 3 consecutive iterations (now {res:.3e}); "
                    "try a smaller picard_damping", res, it)
        else:
            rising = 0
        history.append(res)
        if change < cfg.tolerance and res < 10 * cfg.tolerance:
            return ScalarField(grid, u), ScalarField(grid, v)
    raise NonConvergenceError(
        f"Picard iteration did not converge in {cfg.picard_max_iters} steps "
        f"(residual {history[-1]:.3e})", history[-1], cfg.picard_max_iters)


# -- dense oracle ------------------------------------------------------------

DENSE_LIMIT = 4096


def dense_oracle(grid: GridSpec, operator: str, source=None, bc: BoundarySpec = BoundarySpec(),
                 alpha=None) -> ScalarField:
    """Assemble the full 5-point system cell by cell and solve it by elimination.

    ``operator`` is ``"poisson"`` (``lap u = f``), ``"laplace"`` (``f = 0``)
    or ``"darcy"`` (``-div(alpha grad u) = f``). Written independently of
    :func:`assemble` so the two can be cross-checked.
    """
    nx, ny = grid.nx, grid.ny
    if nx * ny > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to {DENSE_LIMIT} unknowns, got {nx * ny}")
    if operator not in ("poisson", "laplace", "darcy"):
        raise ValueError(f"unknown operator {operator!r}")
    if not bc.has_dirichlet:
        raise IllPosedError("at least one Dirichlet edge is required")
    f = np.zeros((ny, nx)) if operator == "laplace" else _as_values(grid, source)
    if operator == "darcy":
        if alpha is None:
            raise ValueError("darcy operator needs alpha")
        al = _as_values(grid, alpha)
        if np.any(al <= 0):
            raise ValueError("diffusivity must be strictly positive")
        sign = -1.0
    else:
        al = np.ones((ny, nx))
        sign = 1.0

    N = nx * ny
    A = np.zeros((N, N))
    rhs = np.zeros(N)

    def k(i, j):
        return j * nx + i

    for j in range(ny):
        for i in range(nx):
            row = k(i, j)
            rhs[row] = sign * f[j, i]
            # (di, dj, edge index, spacing)
            for di, dj, edge, h in ((-1, 0, 0, grid.hx), (1, 0, 1, grid.hx),
                                    (0, 1, 2, grid.hy), (0, -1, 3, grid.hy)):
                qi, qj = i + di, j + dj
                if 0 <= qi < nx and 0 <= qj < ny:
                    a = 2 * al[j, i] * al[qj, qi] / (al[j, i] + al[qj, qi])
                    A[row, row] -= a / h ** 2
                    A[row, k(qi, qj)] += a / h ** 2
                    continue
                a = al[j, i]
                along = j if edge in (0, 1) else i
                g = bc.edge_values(edge, ny if edge in (0, 1) else nx)[along]
                if bc.kinds[edge] == BcKind.DIRICHLET:
                    # ghost = (8 g - 6 u_P + u_inner) / 3, flux a (ghost - u_P) / h^2
                    oi, oj = i - di, j - dj
                    A[row, row] -= 3 * a / h ** 2
                    A[row, k(oi, oj)] += a / (3 * h ** 2)
                    rhs[row] -= 8 * a * g / (3 * h ** 2)
                else:
                    rhs[row] -= a * g / h
    u = np.linalg.solve(A, rhs)
    return ScalarField(grid, u.reshape(ny, nx))
