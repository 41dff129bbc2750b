"""Small-data solver for the nonlinear two-domain flow transmission
problem.

The inner region adds quadratic drag and self-convection to the linear
resistance model, the outer region plain self-convection.  Moving both
terms to the right-hand side turns the problem into a fixed point of
the assembled linear solver: each sweep solves the linear transmission
problem with the body forces shifted by the node-wise nonlinearity of
the current velocity pair.  For data below a smallness threshold the
sweep contracts with factor one half on a ball in the discrete
solution space; the threshold and the ball radius derive from two
sampled constants, the solution-operator norm and the quadratic bound
of the nonlinearity.  Sampling yields lower bounds of the true
suprema, so the iteration also guards itself at run time: an iterate
leaving the ball aborts the run instead of drifting.

Interior norms of the continuous problem are not computable from
samples; the discrete proxy used throughout combines the boundary
trace norm at order s with the volume L2 norm and lattice
difference-quotient gradients on the side's cells.
"""

import warnings

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .boundary import BoundaryField, project_flux_free, sobolev_norm
from .geometry import christoffel
from .potentials import (VolumeQuadrature, _NewtonTerm,
                         assemble_layer_operators)
from .solver_linear import (TransmissionData, VolumeCoefficient,
                            _assemble_mixed, _build_solution,
                            _interior_velocity_matrices,
                            _layer_pressure_rows, _node_tensor,
                            _reduced_data, _sample_at,
                            solve_brinkman_transmission)


class BallExitError(RuntimeError):
    """An iterate left the contraction ball.

    Raised when the sampled constants were too optimistic for the given
    data; the partial trace rides along as the .trace attribute.
    """


# ----------------------------------------------------------------------
# parameter and configuration types
# ----------------------------------------------------------------------

class NonlinearParams:
    """Drag and convection coefficients of one side.

    The inner side takes arbitrary finite (k, beta) for the term
    k |u| u + beta (nabla_u u); the outer side is pinned to plain
    self-convection (0, 1) and rejects overrides.
    """

    def __init__(self, k, beta, side='+'):
        self.k = float(k)
        self.beta = float(beta)
        if not (np.isfinite(self.k) and np.isfinite(self.beta)):
            raise ValueError("drag and convection coefficients must be "
                             "finite")
        if side not in ('+', '-'):
            raise ValueError("side must be '+' or '-'")
        self.side = side
        if side == '-' and (self.k, self.beta) != (0.0, 1.0):
            raise ValueError("the outer side carries plain "
                             "self-convection; its coefficients are "
                             "fixed to (0, 1)")


OUTER_PARAMS = NonlinearParams(0.0, 1.0, side='-')


class PicardConfig:
    """Constants and stopping rules for the fixed-point iteration.

    zeta_hat bounds the data norm under which the sweep provably
    contracts with factor one half on the ball of radius eta_hat; both
    derive from the supplied constants.  The iteration is undamped.
    """

    def __init__(self, c_star, c1_tilde, max_iterations=50,
                 tolerance=1e-10):
        self.c_star = float(c_star)
        self.c1_tilde = float(c1_tilde)
        if not (self.c_star > 0.0 and self.c1_tilde > 0.0):
            raise ValueError("both constants must be positive")
        self.max_iterations = int(max_iterations)
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        self.tolerance = float(tolerance)
        if not self.tolerance > 0.0:
            raise ValueError("tolerance must be positive")
        self.zeta_hat = 3.0 / (16.0 * self.c1_tilde * self.c_star ** 2)
        self.eta_hat = 1.0 / (4.0 * self.c1_tilde * self.c_star)


class PicardTrace:
    """Per-iteration record of a fixed-point run.

    Stores the iterate norm, the step norm, the ratio of consecutive
    steps (zero on the first entry), and the ball-membership flag.
    data_norm and guaranteed describe the smallness check at entry;
    final_pair holds the converged velocity pair after a successful
    run.
    """

    def __init__(self):
        self.norms = []
        self.steps = []
        self.ratios = []
        self.in_ball = []
        self.data_norm = None
        self.guaranteed = True
        self.final_pair = None

    def append(self, norm, step, in_ball):
        if self.steps and self.steps[-1] > 0.0:
            ratio = step / self.steps[-1]
        else:
            ratio = 0.0
        self.norms.append(float(norm))
        self.steps.append(float(step))
        self.ratios.append(float(ratio))
        self.in_ball.append(bool(in_ball))

    def __len__(self):
        return len(self.steps)

    @property
    def iterations(self):
        return len(self.steps)

    def to_csv(self, path):
        with open(path, 'w') as fh:
            fh.write('iteration,norm,step,ratio\n')
            for i in range(len(self.steps)):
                fh.write('%d,%.17g,%.17g,%.17g\n'
                         % (i + 1, self.norms[i], self.steps[i],
                            self.ratios[i]))


# ----------------------------------------------------------------------
# sampled velocities on the volume lattice
# ----------------------------------------------------------------------

def _side_points(quad, side):
    if side == '+':
        mask = quad.weights_plus > 0.0
        return mask, quad.nodes_plus[mask]
    if side == '-':
        mask = quad.weights_minus > 0.0
        return mask, quad.nodes_minus[mask]
    raise ValueError("side must be '+' or '-'")


def _lattice_gradients(quad, mask, values):
    """Difference-quotient gradients on the side's cells.

    Central quotients where both lattice neighbours lie on the same
    side, one-sided along the cut (second order when two neighbours
    line up, first order otherwise), zero where the cell is isolated.
    Every branch is linear in the samples, so scaling the values
    scales the gradients exactly.
    """
    n = quad.n
    idx = np.flatnonzero(mask)
    pos = np.full(n * n, -1)
    pos[idx] = np.arange(idx.size)
    i, j = np.divmod(idx, n)
    grads = np.zeros((idx.size, 2, 2))
    for axis in range(2):
        stride = n if axis == 0 else 1
        h = quad.hx if axis == 0 else quad.hy
        c = i if axis == 0 else j

        def neighbour(offset):
            out = np.full(idx.size, -1)
            ok = (c + offset >= 0) & (c + offset < n)
            out[ok] = pos[idx[ok] + offset * stride]
            return out

        p1, p2 = neighbour(1), neighbour(2)
        m1, m2 = neighbour(-1), neighbour(-2)
        g = np.zeros((idx.size, 2))
        central = (p1 >= 0) & (m1 >= 0)
        g[central] = (values[p1[central]] - values[m1[central]]) \
            / (2.0 * h)
        fwd = (p1 >= 0) & (m1 < 0)
        f2 = fwd & (p2 >= 0)
        g[f2] = (-3.0 * values[f2] + 4.0 * values[p1[f2]]
                 - values[p2[f2]]) / (2.0 * h)
        f1 = fwd & (p2 < 0)
        g[f1] = (values[p1[f1]] - values[f1]) / h
        bwd = (m1 >= 0) & (p1 < 0)
        b2 = bwd & (m2 >= 0)
        g[b2] = (3.0 * values[b2] - 4.0 * values[m1[b2]]
                 + values[m2[b2]]) / (2.0 * h)
        b1 = bwd & (m2 < 0)
        g[b1] = (values[b1] - values[m1[b1]]) / h
        grads[:, axis, :] = g
    return grads


class GridVelocity:
    """Velocity samples of one side's field on the volume quadrature.

    values sit at the side's evaluation nodes (cut cells keep their
    pushed positions when the quadrature subsamples); gradients are the
    lattice difference quotients of the samples.
    """

    def __init__(self, quad, side, values):
        self.quad = quad
        self.side = side
        self.mask, self.points = _side_points(quad, side)
        values = np.asarray(values, dtype=float)
        if values.shape != (self.points.shape[0], 2):
            raise ValueError(
                "grid mismatch: expected %d node samples, got shape %r"
                % (self.points.shape[0], values.shape))
        self.values = values
        w = quad.weights_plus if side == '+' else quad.weights_minus
        self.weights = w[self.mask]
        self.gradients = _lattice_gradients(quad, self.mask, values)

    @classmethod
    def zero(cls, quad, side):
        _, pts = _side_points(quad, side)
        return cls(quad, side, np.zeros((pts.shape[0], 2)))

    @classmethod
    def from_field(cls, field, quad, side):
        """Sample a velocity field (an object with .velocity, or a
        callable point -> vector) at the side's quadrature nodes."""
        _, pts = _side_points(quad, side)
        fn = getattr(field, 'velocity', field)
        with warnings.catch_warnings():
            warnings.filterwarnings('ignore', message='evaluation within')
            vals = _sample_at(fn, pts)
        return cls(quad, side, vals)

    def volume_norm_sq(self):
        """Weighted L2 norm square of the samples plus the
        difference-quotient gradient energy."""
        return float(
            np.sum(self.weights * np.sum(self.values ** 2, axis=1))
            + np.sum(self.weights
                     * np.sum(self.gradients ** 2, axis=(1, 2))))

    def scaled(self, factor):
        return GridVelocity(self.quad, self.side, factor * self.values)


class IteratePair:
    """One iterate of the fixed point: both side velocities on the
    lattice together with their interface traces."""

    def __init__(self, plus, minus, trace_plus, trace_minus):
        self.plus = plus
        self.minus = minus
        self.trace_plus = trace_plus
        self.trace_minus = trace_minus

    def norm(self):
        return float(np.sqrt(
            self.plus.volume_norm_sq() + self.minus.volume_norm_sq()
            + sobolev_norm(self.trace_plus) ** 2
            + sobolev_norm(self.trace_minus) ** 2))

    def distance(self, other):
        total = 0.0
        for a, b in ((self.plus, other.plus), (self.minus, other.minus)):
            if a.quad is not b.quad or a.side != b.side:
                raise ValueError("grid mismatch between iterate pairs")
            dv = a.values - b.values
            dg = a.gradients - b.gradients
            total += float(np.sum(a.weights * np.sum(dv * dv, axis=1))
                           + np.sum(a.weights
                                    * np.sum(dg * dg, axis=(1, 2))))
        for a, b in ((self.trace_plus, other.trace_plus),
                     (self.trace_minus, other.trace_minus)):
            diff = BoundaryField(a.curve, a.values - b.values, s=a.s)
            total += sobolev_norm(diff) ** 2
        return float(np.sqrt(total))

    def scaled(self, factor):
        return IteratePair(
            self.plus.scaled(factor), self.minus.scaled(factor),
            BoundaryField(self.trace_plus.curve,
                          factor * self.trace_plus.values,
                          s=self.trace_plus.s),
            BoundaryField(self.trace_minus.curve,
                          factor * self.trace_minus.values,
                          s=self.trace_minus.s))


# ----------------------------------------------------------------------
# the node-wise nonlinearity
# ----------------------------------------------------------------------

def nonlinear_term(u, params, chart=None):
    """Node-wise drag and self-convection forcing of sampled
    velocities: k |u| u + beta (nabla_u u) at the side's quadrature
    nodes.  Zero extension off the side is implied downstream by the
    fractional cell weights.  chart supplies the metric correction of
    the transport term; omitted, the plane is flat.

    The speed factor uses a plain square root of the component
    squares, so doubling the samples exactly quadruples the output.
    """
    if not isinstance(u, GridVelocity):
        raise TypeError("u must be a GridVelocity sampled on the "
                        "side's quadrature nodes")
    vals = u.values
    speed = np.sqrt(np.sum(vals * vals, axis=1))
    conv = np.einsum('nj,nji->ni', vals, u.gradients)
    if chart is not None:
        gam = np.array([christoffel(chart, p).values for p in u.points])
        conv = conv + np.einsum('nlrj,nr,nj->nl', gam, vals, vals)
    return params.k * speed[:, None] * vals + params.beta * conv


# ----------------------------------------------------------------------
# assembled linear solver with reusable volume maps
# ----------------------------------------------------------------------

class SolutionOperator:
    """Linear transmission solver bound to one interface and one
    coefficient set, assembled once.

    Factors the interface system and precomputes the dense maps from
    the stacked densities to the velocities at both sides' quadrature
    nodes, plus the pressure-mean rows, so a solve with fresh data
    costs one right-hand-side reduction and two back-substitutions.
    A node-wise resistance tensor falls back to the public fixed-point
    solver per call and only keeps the layer operators cached.
    """

    def __init__(self, curve, mu, P, V=None, s=0.5, quad=None,
                 volume_n=160, flux_tol=1e-4):
        self.curve = curve
        self.mu = float(mu)
        self.P_nodes = _node_tensor(P, curve.N)
        self.V = V if isinstance(V, VolumeCoefficient) \
            else VolumeCoefficient(V)
        self.s = float(s)
        self.flux_tol = float(flux_tol)
        self.quad = quad if quad is not None \
            else VolumeQuadrature(curve, n=volume_n)
        self._general = self.V.kind == 'general'
        if self.V.kind == 'scalar':
            self.kernel_plus = kernels.brinkman_2d(self.V.alpha)
            self.kernel_minus = kernels.stokes_2d()
            self.ops_plus = assemble_layer_operators(curve,
                                                     self.kernel_plus)
            self.ops_minus = assemble_layer_operators(curve,
                                                      self.kernel_minus)
        else:
            self.kernel_plus = self.kernel_minus = kernels.stokes_2d()
            self.ops_plus = self.ops_minus = \
                assemble_layer_operators(curve, self.kernel_plus)
        self.system = _assemble_mixed(curve, self.mu, self.P_nodes,
                                      self.ops_plus, self.ops_minus)
        self.mask_plus, self.points_plus = _side_points(self.quad, '+')
        self.mask_minus, self.points_minus = _side_points(self.quad, '-')
        self.Mw_plus, self.Mv_plus = _interior_velocity_matrices(
            curve, self.kernel_plus, self.quad, points=self.points_plus)
        self.Mw_minus, self.Mv_minus = _interior_velocity_matrices(
            curve, self.kernel_minus, self.quad,
            points=self.points_minus)
        self.c0_rows = _layer_pressure_rows(curve, self.kernel_plus,
                                            self.quad)

    @classmethod
    def for_data(cls, data, quad=None, volume_n=160, flux_tol=1e-4):
        return cls(data.curve, data.mu, data.P_nodes, V=data.V,
                   s=data.s, quad=quad, volume_n=volume_n,
                   flux_tol=flux_tol)

    def solve(self, h, r, forcing_plus=None, forcing_minus=None):
        """One linear transmission solve.  Forcings are full-grid
        arrays or callables, zero-extended off their side by the cell
        weights."""
        data = TransmissionData(self.curve, h, r, self.mu, self.P_nodes,
                                V=self.V, forcing_plus=forcing_plus,
                                forcing_minus=forcing_minus, s=self.s)
        return self.solve_data(data)

    def solve_data(self, data):
        if self._general:
            return solve_brinkman_transmission(data, quad=self.quad,
                                               ops=self.ops_plus)
        red = _reduced_data(data, self.quad, self.kernel_plus,
                            self.kernel_minus, self.flux_tol)
        return _build_solution(data, self.quad, self.kernel_plus,
                               self.kernel_minus, self.ops_plus,
                               self.ops_minus, self.system, red,
                               c0_rows=self.c0_rows)

    def _newton_velocity(self, side_field, points):
        out = np.zeros((points.shape[0], 2))
        for weight, term in side_field.evaluator.terms:
            if isinstance(term, _NewtonTerm):
                out += weight * term.velocity(points)
        return out

    def sample(self, solution):
        """Velocity pair of a solution at both sides' quadrature nodes
        together with its interface traces."""
        Phi = solution.Phi.stacked()
        phi = solution.phi.stacked()
        pair = []
        for side, Mw, Mv, pts in (
                ('+', self.Mw_plus, self.Mv_plus, self.points_plus),
                ('-', self.Mw_minus, self.Mv_minus, self.points_minus)):
            vel = (Mw @ Phi + Mv @ phi).reshape(2, -1).T
            vel = vel + self._newton_velocity(solution.side(side), pts)
            pair.append(GridVelocity(self.quad, side, vel))
        return IteratePair(pair[0], pair[1],
                           solution.boundary_trace('+'),
                           solution.boundary_trace('-'))

    def zero_pair(self):
        zero_trace = BoundaryField(
            self.curve, np.zeros((self.curve.N, 2)), s=self.s)
        return IteratePair(GridVelocity.zero(self.quad, '+'),
                           GridVelocity.zero(self.quad, '-'),
                           zero_trace, zero_trace)

    def forcing_array(self, forcing, side):
        """Full-grid forcing samples, zero off the side."""
        out = np.zeros((self.quad.nodes.shape[0], 2))
        if forcing is None:
            return out
        mask, pts = _side_points(self.quad, side)
        if callable(forcing):
            out[mask] = _sample_at(forcing, pts)
        else:
            arr = np.asarray(forcing, dtype=float)
            if arr.shape != out.shape:
                raise ValueError("forcing array shape %r does not "
                                 "match the volume grid" % (arr.shape,))
            out[mask] = arr[mask]
        return out

    def data_norm(self, h, r, forcing_plus=None, forcing_minus=None):
        """Discrete norm of a data quadruple: weighted volume L2 for
        the body forces, trace norms at orders s and s - 1 for the
        jumps."""
        total = sobolev_norm(h, self.s) ** 2 \
            + sobolev_norm(r, self.s - 1.0) ** 2
        for forcing, side in ((forcing_plus, '+'), (forcing_minus, '-')):
            if forcing is None:
                continue
            arr = self.forcing_array(forcing, side)
            mask, _ = _side_points(self.quad, side)
            w = self.quad.weights_plus if side == '+' \
                else self.quad.weights_minus
            total += float(np.sum(w[mask]
                                  * np.sum(arr[mask] ** 2, axis=1)))
        return float(np.sqrt(total))


# ----------------------------------------------------------------------
# fixed-point iteration
# ----------------------------------------------------------------------

def _linearized_solve(solver, data, base_fp, base_fm, pair, params):
    fp = base_fp.copy()
    fp[solver.mask_plus] -= nonlinear_term(pair.plus, params)
    fm = base_fm.copy()
    fm[solver.mask_minus] -= nonlinear_term(pair.minus, OUTER_PARAMS)
    # identically zero forcing skips the Newtonian machinery
    return solver.solve(data.h, data.r,
                        forcing_plus=fp if np.any(fp) else None,
                        forcing_minus=fm if np.any(fm) else None)


def picard_step(current, data, params, config, solver=None):
    """One fixed-point update: a linear transmission solve with the
    nonlinearity of the current iterate moved into the body forces.
    current may be None for the zero iterate."""
    if solver is None:
        solver = SolutionOperator.for_data(data)
    base_fp = solver.forcing_array(data.forcing_plus, '+')
    base_fm = solver.forcing_array(data.forcing_minus, '-')
    pair = current if current is not None else solver.zero_pair()
    return _linearized_solve(solver, data, base_fp, base_fm, pair,
                             params)


def picard_solve(data, params, config, solver=None, init=None):
    """Iterate the linearized solve to its fixed point.

    Returns the final solution and the iteration trace; the converged
    velocity pair rides on the trace as final_pair.  Data above the
    smallness threshold only warns (the existence guarantee is lost,
    the run may still converge); an iterate leaving the ball raises
    BallExitError, exhausting max_iterations raises RuntimeError, and
    both carry the partial trace.
    """
    if solver is None:
        solver = SolutionOperator.for_data(data)
    base_fp = solver.forcing_array(data.forcing_plus, '+')
    base_fm = solver.forcing_array(data.forcing_minus, '-')
    trace = PicardTrace()
    trace.data_norm = solver.data_norm(data.h, data.r, base_fp, base_fm)
    if trace.data_norm > config.zeta_hat * (1.0 + 1e-12):
        trace.guaranteed = False
        warnings.warn(
            "data norm %.3e exceeds the smallness threshold %.3e; "
            "existence guarantee lost" % (trace.data_norm,
                                          config.zeta_hat),
            RuntimeWarning)
    if init is None:
        pair = solver.zero_pair()
    else:
        pair = init
        if pair.norm() > config.eta_hat * (1.0 + 1e-12):
            raise ValueError("initial iterate lies outside the "
                             "contraction ball")
    sol = None
    for _ in range(config.max_iterations):
        sol = _linearized_solve(solver, data, base_fp, base_fm, pair,
                                params)
        new_pair = solver.sample(sol)
        step = new_pair.distance(pair)
        norm = new_pair.norm()
        in_ball = norm <= config.eta_hat * (1.0 + 1e-12)
        trace.append(norm, step, in_ball)
        pair = new_pair
        if not in_ball:
            err = BallExitError(
                "iterate %d left the contraction ball: norm %.6e "
                "exceeds %.6e" % (len(trace), norm, config.eta_hat))
            err.trace = trace
            raise err
        if step <= config.tolerance:
            trace.final_pair = pair
            return sol, trace
    err = RuntimeError(
        "fixed point did not converge in %d iterations; last step "
        "%.3e" % (config.max_iterations, trace.steps[-1]))
    err.trace = trace
    raise err


def uniqueness_check(data, params, config, init1, init2, solver=None):
    """Distance between the fixed points reached from two starts in
    the contraction ball."""
    if solver is None:
        solver = SolutionOperator.for_data(data)
    for init in (init1, init2):
        if init.norm() > config.eta_hat * (1.0 + 1e-12):
            raise ValueError("both starts must lie in the contraction "
                             "ball")
    _, trace1 = picard_solve(data, params, config, solver=solver,
                             init=init1)
    _, trace2 = picard_solve(data, params, config, solver=solver,
                             init=init2)
    return trace1.final_pair.distance(trace2.final_pair)


def random_pair(solver, seed, radius):
    """Random smooth velocity pair scaled to the given norm; handy as
    an alternative start for the uniqueness check."""
    rng = np.random.default_rng(seed)
    plus, trace_p = _coefficient_field(
        solver, rng.standard_normal((_MODES, 2)), '+')
    minus, trace_m = _coefficient_field(
        solver, rng.standard_normal((_MODES, 2)), '-')
    pair = IteratePair(plus, minus, trace_p, trace_m)
    return pair.scaled(radius / pair.norm())


def collocation_residual(solution, pair, data, params, solver):
    """Interior defect of the nonlinear problem at the quadrature
    nodes: the body force consumed by the final linear solve against
    the one induced by the converged velocities."""
    base_fp = solver.forcing_array(data.forcing_plus, '+')
    base_fm = solver.forcing_array(data.forcing_minus, '-')
    used_fp = solver.forcing_array(solution.data.forcing_plus, '+')
    used_fm = solver.forcing_array(solution.data.forcing_minus, '-')
    rp = base_fp[solver.mask_plus] - nonlinear_term(pair.plus, params) \
        - used_fp[solver.mask_plus]
    rm = base_fm[solver.mask_minus] \
        - nonlinear_term(pair.minus, OUTER_PARAMS) \
        - used_fm[solver.mask_minus]
    return float(max(np.max(np.abs(rp)), np.max(np.abs(rm))))


# ----------------------------------------------------------------------
# constants estimation
# ----------------------------------------------------------------------

_MODES = 8


def _mode_matrix(points, box):
    """Fixed smooth scalar shapes over the quadrature box, one column
    per mode; random fields are their span."""
    (x0, x1), (y0, y1) = box
    xh = (points[:, 0] - 0.5 * (x0 + x1)) / (x1 - x0)
    yh = (points[:, 1] - 0.5 * (y0 + y1)) / (y1 - y0)
    return np.column_stack([
        np.ones(points.shape[0]), 2.0 * xh, 2.0 * yh,
        np.sin(np.pi * xh) * np.cos(np.pi * yh),
        np.cos(np.pi * xh) * np.sin(np.pi * yh),
        np.sin(np.pi * (xh + yh)),
        np.cos(2.0 * np.pi * xh), np.cos(2.0 * np.pi * yh)])


def _coefficient_field(solver, coeffs, side):
    """GridVelocity and interface trace of a mode-coefficient field."""
    _, pts = _side_points(solver.quad, side)
    box = solver.quad.box
    gv = GridVelocity(solver.quad, side,
                      _mode_matrix(pts, box) @ coeffs)
    trace = BoundaryField(solver.curve,
                          _mode_matrix(solver.curve.nodes, box) @ coeffs,
                          s=solver.s)
    return gv, trace


def _side_norm(gv, trace):
    return float(np.sqrt(gv.volume_norm_sq() + sobolev_norm(trace) ** 2))


def _forcing_norm(gv, term_values):
    return float(np.sqrt(np.sum(gv.weights
                                * np.sum(term_values ** 2, axis=1))))


def _lipschitz_ratio(solver, params_side, side, cv, cw):
    """Ratio of the nonlinearity difference to the product bound; with
    cw = 0 it reduces to the quadratic ratio."""
    gv, tr_v = _coefficient_field(solver, cv, side)
    gw, tr_w = _coefficient_field(solver, cw, side)
    gd, tr_d = _coefficient_field(solver, cv - cw, side)
    den = (_side_norm(gv, tr_v) + _side_norm(gw, tr_w)) \
        * _side_norm(gd, tr_d)
    if den < 1e-12:
        return 0.0
    diff = nonlinear_term(gv, params_side) - nonlinear_term(gw,
                                                            params_side)
    return _forcing_norm(gv, diff) / den


def _trig_field(curve, coeffs, s):
    """Low-mode trigonometric field in the curve parameter; coeffs has
    one row per component over [1, cos t, sin t, cos 2t, sin 2t]."""
    t = curve.t
    basis = np.column_stack([np.ones_like(t), np.cos(t), np.sin(t),
                             np.cos(2.0 * t), np.sin(2.0 * t)])
    return BoundaryField(curve, basis @ coeffs.T, s=s)


def _boundary_data(solver, coeffs):
    ch = coeffs[:10].reshape(2, 5)
    cr = coeffs[10:].reshape(2, 5)
    h = project_flux_free(_trig_field(solver.curve, ch, solver.s))
    r = _trig_field(solver.curve, cr, solver.s - 1.0)
    return h, r


def _data_ratio(solver, h, r, fp=None, fm=None):
    den = solver.data_norm(h, r, fp, fm)
    if den < 1e-12:
        return 0.0
    sol = solver.solve(h, r, forcing_plus=fp, forcing_minus=fm)
    return solver.sample(sol).norm() / den


class EstimatedConstants:
    """Sampled lower bounds of the contraction constants with the
    derived smallness threshold and ball radius."""

    def __init__(self, c_star, c1_tilde, seed, samples):
        self.c_star = float(c_star)
        self.c1_tilde = float(c1_tilde)
        self.seed = int(seed)
        self.samples = int(samples)
        self.zeta_hat = 3.0 / (16.0 * self.c1_tilde * self.c_star ** 2)
        self.eta_hat = 1.0 / (4.0 * self.c1_tilde * self.c_star)

    def config(self, max_iterations=50, tolerance=1e-10):
        return PicardConfig(self.c_star, self.c1_tilde,
                            max_iterations=max_iterations,
                            tolerance=tolerance)

    def to_file(self, path):
        with open(path, 'w') as fh:
            for key in ('c_star', 'c1_tilde', 'zeta_hat', 'eta_hat'):
                fh.write('%s = %.17g\n' % (key, getattr(self, key)))
            fh.write('samples = %d\n' % self.samples)
            fh.write('seed = %d\n' % self.seed)


def estimate_constants(solver, params, seed=0, data_samples=60,
                       field_samples=60, polish=True):
    """Sample the solution-operator norm and the quadratic bound of
    the nonlinearity.

    Both constants are maxima of ratios over random draws (boundary
    jumps, body forces, smooth velocity fields), sharpened by a local
    search started from the best draws.  They remain lower bounds of
    the true suprema; the ball guard of the iteration covers the gap
    at run time.
    """
    rng = np.random.default_rng(seed)
    total = 0

    # quadratic bound of the nonlinearity, per side then combined
    c1 = 0.0
    for side, ps in (('+', params), ('-', OUTER_PARAMS)):
        draws = []
        for _ in range(field_samples):
            cv = rng.standard_normal((_MODES, 2))
            draws.append((_lipschitz_ratio(solver, ps, side, cv,
                                           np.zeros((_MODES, 2))),
                          cv, np.zeros((_MODES, 2))))
            cw = rng.standard_normal((_MODES, 2))
            cu = rng.standard_normal((_MODES, 2))
            draws.append((_lipschitz_ratio(solver, ps, side, cw, cu),
                          cw, cu))
        total += 2 * field_samples
        draws.sort(key=lambda d: -d[0])
        best = draws[0][0]
        if polish:
            for _, cv, cw in draws[:2]:
                x0 = np.concatenate([cv.ravel(), cw.ravel()])

                def neg(x):
                    a = x[:2 * _MODES].reshape(_MODES, 2)
                    b = x[2 * _MODES:].reshape(_MODES, 2)
                    return -_lipschitz_ratio(solver, ps, side, a, b)

                res = minimize(neg, x0, method='Powell',
                               options={'maxfev': 400, 'xtol': 1e-3})
                best = max(best, -float(res.fun))
        c1 = max(c1, best)

    # solution-operator norm over boundary and body-force draws
    draws = []
    for i in range(data_samples):
        coeffs = rng.standard_normal(20)
        h, r = _boundary_data(solver, coeffs)
        if i % 4 == 3:
            fp = np.zeros((solver.quad.nodes.shape[0], 2))
            fm = np.zeros((solver.quad.nodes.shape[0], 2))
            box = solver.quad.box
            fp[solver.mask_plus] = _mode_matrix(
                solver.points_plus, box) @ rng.standard_normal((_MODES, 2))
            fm[solver.mask_minus] = _mode_matrix(
                solver.points_minus, box) @ rng.standard_normal((_MODES, 2))
            draws.append((_data_ratio(solver, h, r, fp, fm), None))
        else:
            draws.append((_data_ratio(solver, h, r), coeffs))
    total += data_samples
    draws.sort(key=lambda d: -d[0])
    c_star = draws[0][0]
    if polish:
        starts = [c for _, c in draws if c is not None][:1]
        for x0 in starts:

            def neg_data(x):
                h, r = _boundary_data(solver, x)
                return -_data_ratio(solver, h, r)

            res = minimize(neg_data, x0, method='Powell',
                           options={'maxfev': 150, 'xtol': 1e-3})
            c_star = max(c_star, -float(res.fun))
    return EstimatedConstants(c_star, c1, seed, total)
