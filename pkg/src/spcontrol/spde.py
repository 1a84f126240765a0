"""Scenario-tree time steppers for the controlled and adjoint parabolic pairs.

Forward step (diffusion implicit, lower-order terms explicit and adapted):

    (I - dt*E(t_{n+1})) y_{n+1}^{+/-} = y_n + dt*drift(t_n) +/- sqrt(dt)*noise(t_n)

with E the conservative elliptic stencil.  The backward steppers are the
algebraic transposes of this map: fold each sibling pair through the same SPD
solve, split into conditional mean ("half step" value) and martingale part,
then apply the transposed lower-order couplings:

    w = S_{n+1}^{-1} children
    z_half_n = (w_+ + w_-)/2,   Z_n = (w_+ - w_-)/(2 sqrt(dt))
    z_n = z_half_n - dt*(F0_n + weak_div(F_n))

where for the adjoint of the controlled forward equation the sources are the
couplings F0 = -a1*z_half - a2*Z and F = z_half*B1 + Z*B2.  Because solve,
gradient transpose, and weights mirror the forward operations exactly, the
discrete duality identity

    E<y(T), zT> = <y0, z(0)> + E int_{Q0} u * z_half + E int_Q v * Z

holds to rounding; everything in the HUM construction leans on that.  Note
the two roles of the backward solution: the nodal values z (consistent with
the backward equation) carry the initial pairing, while the half-step values
z_half carry the space-time pairings and the control feedback.

Solvers are pure: steppers hold only immutable per-level factorizations and
coefficient tables, so independent solves may run concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import NumericsError
from .grid import SpatialGrid, gradient, gradient_transpose, weak_divergence
from .scenario import AdaptedField, ScenarioTree, mean_square_norm

__all__ = [
    "ProblemCoefficients",
    "CoefficientTables",
    "ForwardSolution",
    "BackwardSolution",
    "TreeStepper",
    "PathStepper",
    "forward_solve",
    "backward_solve",
    "duality_gap",
    "forward_state_matrix",
    "backward_state_matrix",
]

FORWARD_MODES = ("general", "adjoint_1_5")
BACKWARD_MODES = ("generic", "adjoint_1_3", "controlled_1_2")


def _sample(spec, times: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Tabulate a scalar/callable coefficient on a times-by-points grid."""
    out = np.empty((times.size, x.size))
    if callable(spec):
        for k, t in enumerate(times):
            out[k] = np.broadcast_to(np.asarray(spec(t, x), dtype=float), x.shape)
    else:
        out[:] = float(spec)
    return out


@dataclass(frozen=True)
class CoefficientTables:
    """Coefficients sampled on the time grid; sup-norms cached from samples.

    a_faces holds the diffusion coefficient at faces for every level 0..M
    (the implicit solve at level n uses a_faces[n]); the zeroth-order and
    convection tables are sampled at the left endpoints t_0..t_{M-1} only
    (adapted evaluation).
    """

    times: np.ndarray
    a_faces: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b: np.ndarray
    beta: float
    a1_inf: float
    a2_inf: float
    b1_inf: float
    b2_inf: float
    b_inf: float


class ProblemCoefficients:
    """Coefficient bundle for the forward (1.1)-type and backward (1.2)-type problems.

    Each entry is a constant or a callable f(t, x) -> values: `a` is the
    diffusion coefficient (>= beta > 0), a1/b1 the drift zeroth-order and
    convection coefficients, a2/b2 their diffusion-part counterparts, and `b`
    the convection field of the backward controlled problem.
    """

    def __init__(self, a=1.0, a1=0.0, a2=0.0, b1=0.0, b2=0.0, b=0.0):
        self.a, self.a1, self.a2, self.b1, self.b2, self.b = a, a1, a2, b1, b2, b

    def sample(self, grid: SpatialGrid, times: np.ndarray) -> CoefficientTables:
        times = np.asarray(times, dtype=float)
        a_faces = _sample(self.a, times, grid.faces)
        beta = float(a_faces.min())
        if beta <= 0.0:
            raise ValueError(f"diffusion coefficient must stay positive; min sample = {beta}")
        left = times[:-1]
        tabs = {k: _sample(getattr(self, k), left, grid.x) for k in ("a1", "a2", "b1", "b2", "b")}
        sup = {k: float(np.abs(v).max()) for k, v in tabs.items()}
        return CoefficientTables(times=times, a_faces=a_faces, beta=beta,
                                 a1=tabs["a1"], a2=tabs["a2"], b1=tabs["b1"],
                                 b2=tabs["b2"], b=tabs["b"],
                                 a1_inf=sup["a1"], a2_inf=sup["a2"], b1_inf=sup["b1"],
                                 b2_inf=sup["b2"], b_inf=sup["b"])


@dataclass
class ForwardSolution:
    """State of a forward solve: y over levels 0..M."""

    y: AdaptedField


@dataclass
class BackwardSolution:
    """State pair of a backward solve.

    z: nodal values over levels 0..M (level M is the terminal datum);
    Z: martingale part over levels 0..M-1;
    z_half: half-step conditional means over levels 0..M-1 (the values the
    duality pairings integrate and the HUM feedback injects).
    In controlled_1_2 mode the same slots hold the controlled pair (y, Y).
    """

    z: AdaptedField
    Z: AdaptedField
    z_half: AdaptedField


def _as_tables(coeffs, grid: SpatialGrid, times: np.ndarray) -> CoefficientTables:
    if isinstance(coeffs, CoefficientTables):
        return coeffs
    return coeffs.sample(grid, times)


class _StepperBase:
    """Shared per-level factorization of S_n = I - dt*E(t_n)."""

    def __init__(self, grid: SpatialGrid, times: np.ndarray, dt: float, coeffs):
        self.grid = grid
        self.dt = float(dt)
        self.tab = _as_tables(coeffs, grid, times)
        h2 = grid.h * grid.h
        self._facts = [None]
        for n in range(1, times.size):
            af = self.tab.a_faces[n]
            ab = np.zeros((2, grid.N))
            ab[0, 1:] = -self.dt * af[1:-1] / h2
            ab[1, :] = 1.0 + self.dt * (af[:-1] + af[1:]) / h2
            self._facts.append(cholesky_banded(ab, lower=False))
        cfl = self.dt * (self.tab.b1_inf ** 2 / self.tab.beta + self.tab.a1_inf)
        if cfl > 1.0:
            warnings.warn(f"explicit lower-order terms are large: dt*(|B1|^2/beta + |a1|) = {cfl:.3g} > 1",
                          RuntimeWarning, stacklevel=3)

    def _solve(self, level: int, rhs: np.ndarray) -> np.ndarray:
        """Apply S_level^{-1} to rows of rhs (the solve is symmetric)."""
        out = cho_solve_banded((self._facts[level], False), rhs.T).T
        if not np.all(np.isfinite(out)):
            raise NumericsError(f"non-finite values after implicit solve into level {level}")
        return np.ascontiguousarray(out)


class TreeStepper(_StepperBase):
    """Forward/backward solvers on a scenario tree for one coefficient set."""

    def __init__(self, grid: SpatialGrid, tree: ScenarioTree, coeffs):
        super().__init__(grid, tree.times, tree.dt, coeffs)
        self.tree = tree

    # -- forward ---------------------------------------------------------

    def forward(self, y0, u=None, v=None, drift_src=None, drift_div=None,
                mode: str = "general") -> ForwardSolution:
        """March level 0 -> M; see module docstring for the step map.

        general mode:      drift = a1*y + b1*grad(y) + 1_{G0} u [+ drift_src
                           + weak_div(drift_div)], noise = a2*y + b2*grad(y) + v.
        adjoint_1_5 mode:  drift = -a1*y + weak_div(y*b), noise = -a2*y
                           (controls/sources not accepted).
        """
        if mode not in FORWARD_MODES:
            raise ValueError(f"unknown forward mode {mode!r}")
        if mode == "adjoint_1_5" and any(s is not None for s in (u, v, drift_src, drift_div)):
            raise ValueError("adjoint_1_5 mode takes no controls or sources")
        grid, tree, tab = self.grid, self.tree, self.tab
        y0 = np.asarray(y0, dtype=float).reshape(1, grid.N)
        if not np.all(np.isfinite(y0)):
            raise NumericsError("non-finite initial state")
        mask = grid.g0_mask
        levels = [y0.copy()]
        for n in range(tree.M):
            y = levels[n]
            if mode == "general":
                drift = tab.a1[n] * y + tab.b1[n] * gradient(grid, y)
                if u is not None:
                    drift = drift + mask * u[n]
                if drift_src is not None:
                    drift = drift + drift_src[n]
                if drift_div is not None:
                    drift = drift + weak_divergence(grid, drift_div[n])
                noise = tab.a2[n] * y + tab.b2[n] * gradient(grid, y)
                if v is not None:
                    noise = noise + v[n]
            else:  # adjoint_1_5
                drift = -(tab.a1[n] * y) + weak_divergence(grid, tab.b[n] * y)
                noise = -(tab.a2[n] * y)
            base = y + self.dt * drift
            bump = tree.sqrt_dt * noise
            rhs = np.empty((2 * y.shape[0], grid.N))
            rhs[0::2] = base + bump
            rhs[1::2] = base - bump
            levels.append(self._solve(n + 1, rhs))
        return ForwardSolution(y=AdaptedField(levels))

    # -- backward --------------------------------------------------------

    def backward(self, zT, mode: str = "generic", f0=None, f_div=None, u=None) -> BackwardSolution:
        """Fold level M -> 0 through the transposed step map.

        generic mode:        z_n = z_half_n - dt*(f0_n + weak_div(f_div_n));
        adjoint_1_3 mode:    sources are the couplings F0 = -a1*z_half - a2*Z,
                             F = z_half*b1 + Z*b2;
        controlled_1_2 mode: z_n = z_half_n - dt*(a1*z_half + b*grad(z_half)
                             + a2*Z + 1_{G0} u_n).
        """
        if mode not in BACKWARD_MODES:
            raise ValueError(f"unknown backward mode {mode!r}")
        if mode != "generic" and (f0 is not None or f_div is not None):
            raise ValueError("explicit sources are only accepted in generic mode")
        if mode != "controlled_1_2" and u is not None:
            raise ValueError("a control is only accepted in controlled_1_2 mode")
        grid, tree, tab = self.grid, self.tree, self.tab
        cur = np.asarray(zT, dtype=float)
        if cur.shape != (tree.n_nodes(tree.M), grid.N):
            raise ValueError(f"terminal data must have shape {(tree.n_nodes(tree.M), grid.N)}, got {cur.shape}")
        if not np.all(np.isfinite(cur)):
            raise NumericsError("non-finite terminal data")
        mask = grid.g0_mask
        z_levels: list = [None] * (tree.M + 1)
        z_half_levels: list = [None] * tree.M
        mart_levels: list = [None] * tree.M
        z_levels[tree.M] = cur.copy()
        for n in range(tree.M - 1, -1, -1):
            w = self._solve(n + 1, cur)
            z_half = 0.5 * (w[0::2] + w[1::2])
            half_diff = 0.5 * (w[0::2] - w[1::2])
            z_mart = half_diff / tree.sqrt_dt
            if mode == "adjoint_1_3":
                src = -(tab.a1[n] * z_half) - tab.a2[n] * z_mart
                flux = tab.b1[n] * z_half + tab.b2[n] * z_mart
                corr = src + weak_divergence(grid, flux)
            elif mode == "controlled_1_2":
                corr = tab.a1[n] * z_half + tab.b[n] * gradient(grid, z_half) + tab.a2[n] * z_mart
                if u is not None:
                    corr = corr + mask * u[n]
            else:
                corr = np.zeros_like(z_half)
                if f0 is not None:
                    corr = corr + f0[n]
                if f_div is not None:
                    corr = corr + weak_divergence(grid, f_div[n])
            cur = z_half - self.dt * corr
            z_levels[n], z_half_levels[n], mart_levels[n] = cur, z_half, z_mart
        return BackwardSolution(z=AdaptedField(z_levels), Z=AdaptedField(mart_levels),
                                z_half=AdaptedField(z_half_levels))


class PathStepper(_StepperBase):
    """Single-branch deterministic counterpart of TreeStepper.

    Used as the collapsed-tree oracle (zero-noise degeneration) and for
    time-resolved runs whose tree would be too deep; states are plain arrays
    of shape (n_steps+1, N).
    """

    def __init__(self, grid: SpatialGrid, n_steps: int, T: float, coeffs):
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        dt = T / n_steps
        times = dt * np.arange(n_steps + 1)
        super().__init__(grid, times, dt, coeffs)
        self.n_steps = int(n_steps)
        self.T = float(T)
        self.times = times

    def forward(self, y0, u=None, drift_src=None, drift_div=None, mode: str = "general") -> np.ndarray:
        if mode not in FORWARD_MODES:
            raise ValueError(f"unknown forward mode {mode!r}")
        grid, tab = self.grid, self.tab
        out = np.empty((self.n_steps + 1, grid.N))
        out[0] = np.asarray(y0, dtype=float)
        mask = grid.g0_mask
        for n in range(self.n_steps):
            y = out[n]
            if mode == "general":
                drift = tab.a1[n] * y + tab.b1[n] * gradient(grid, y)
                if u is not None:
                    drift = drift + mask * u[n]
                if drift_src is not None:
                    drift = drift + drift_src[n]
                if drift_div is not None:
                    drift = drift + weak_divergence(grid, drift_div[n])
            else:
                drift = -(tab.a1[n] * y) + weak_divergence(grid, tab.b[n] * y)
            rhs = y + self.dt * drift
            out[n + 1] = self._solve(n + 1, rhs.reshape(1, -1))[0]
        return out

    def backward(self, zT, mode: str = "generic", f0=None, f_div=None, u=None):
        """Deterministic backward solve; returns (z, z_half) arrays."""
        if mode not in BACKWARD_MODES:
            raise ValueError(f"unknown backward mode {mode!r}")
        grid, tab = self.grid, self.tab
        z = np.empty((self.n_steps + 1, grid.N))
        z_half = np.empty((self.n_steps, grid.N))
        z[self.n_steps] = np.asarray(zT, dtype=float)
        mask = grid.g0_mask
        for n in range(self.n_steps - 1, -1, -1):
            zh = self._solve(n + 1, z[n + 1].reshape(1, -1))[0]
            if mode == "adjoint_1_3":
                corr = -(tab.a1[n] * zh) + weak_divergence(grid, tab.b1[n] * zh)
            elif mode == "controlled_1_2":
                corr = tab.a1[n] * zh + tab.b[n] * gradient(grid, zh)
                if u is not None:
                    corr = corr + mask * u[n]
            else:
                corr = np.zeros_like(zh)
                if f0 is not None:
                    corr = corr + f0[n]
                if f_div is not None:
                    corr = corr + weak_divergence(grid, f_div[n])
            z[n] = zh - self.dt * corr
            z_half[n] = zh
        return z, z_half


# -- module-level conveniences ------------------------------------------


def forward_solve(grid, tree, coeffs, y0, u=None, v=None, drift_src=None,
                  drift_div=None, mode: str = "general") -> ForwardSolution:
    return TreeStepper(grid, tree, coeffs).forward(y0, u=u, v=v, drift_src=drift_src,
                                                   drift_div=drift_div, mode=mode)


def backward_solve(grid, tree, coeffs, zT, mode: str = "generic",
                   f0=None, f_div=None, u=None) -> BackwardSolution:
    return TreeStepper(grid, tree, coeffs).backward(zT, mode=mode, f0=f0, f_div=f_div, u=u)


def _pairing_terms(stepper: TreeStepper, fwd: ForwardSolution, bwd: BackwardSolution,
                   y0, u, v) -> dict:
    grid, tree = stepper.grid, stepper.tree
    t_terminal = tree.node_weight(tree.M) * grid.h * float(np.sum(fwd.y[tree.M] * bwd.z[tree.M]))
    t_initial = grid.h * float(np.dot(np.ravel(y0), bwd.z[0][0]))
    t_u = 0.0
    t_v = 0.0
    for n in range(tree.M):
        w = tree.dt * tree.node_weight(n) * grid.h
        if u is not None:
            t_u += w * float(np.sum((grid.g0_mask * u[n]) * bwd.z_half[n]))
        if v is not None:
            t_v += w * float(np.sum(v[n] * bwd.Z[n]))
    return {"terminal": t_terminal, "initial": t_initial, "u": t_u, "v": t_v}


def duality_gap(grid, tree, coeffs, y0, u, v, zT) -> float:
    """Relative defect of the discrete duality identity (pure rounding noise).

    |E<y(T), zT> - <y0, z(0)> - E int_{Q0} u z - E int_Q v Z| divided by the
    sum of the magnitudes of the four terms, where y solves the controlled
    forward problem and (z, Z) the adjoint backward problem.
    """
    stepper = TreeStepper(grid, tree, coeffs)
    fwd = stepper.forward(y0, u=u, v=v)
    bwd = stepper.backward(zT, mode="adjoint_1_3")
    t = _pairing_terms(stepper, fwd, bwd, y0, u, v)
    gap = abs(t["terminal"] - t["initial"] - t["u"] - t["v"])
    scale = abs(t["terminal"]) + abs(t["initial"]) + abs(t["u"]) + abs(t["v"])
    if scale == 0.0:
        return 0.0
    return gap / scale


def forward_state_matrix(stepper: TreeStepper) -> np.ndarray:
    """Dense matrix of y0 -> y(T) (leaf-flattened rows), homogeneous problem."""
    grid, tree = stepper.grid, stepper.tree
    leaf_dim = tree.n_nodes(tree.M) * grid.N
    out = np.empty((leaf_dim, grid.N))
    for j in range(grid.N):
        e = np.zeros(grid.N)
        e[j] = 1.0
        out[:, j] = stepper.forward(e).y[tree.M].ravel()
    return out


def backward_state_matrix(stepper: TreeStepper) -> np.ndarray:
    """Dense matrix of zT -> z(0) for the adjoint backward solver."""
    grid, tree = stepper.grid, stepper.tree
    n_leaves = tree.n_nodes(tree.M)
    out = np.empty((grid.N, n_leaves * grid.N))
    zT = np.zeros((n_leaves, grid.N))
    for k in range(n_leaves * grid.N):
        zT.ravel()[k] = 1.0
        out[:, k] = stepper.backward(zT, mode="adjoint_1_3").z[0][0]
        zT.ravel()[k] = 0.0
    return out
