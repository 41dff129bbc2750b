"""Linear solver for the two-domain viscous transmission problem.

The inner region carries a symmetric, possibly vanishing resistance
tensor while the outer region is plain viscous flow; the two fields are
coupled across the interface by a viscosity-ratio velocity condition
and a traction condition with a positive interface tensor.  Both sides
are represented by the double- and single-layer potentials of one
shared density pair plus Newtonian volume potentials of the body
forcings, which turns the problem into a dense two-by-two block system
on the interface nodes.  A homogeneous scalar resistance is handled
directly with the screened kernel on the inner side; a node-wise
resistance is folded in by fixed-point iteration on the volume grid.
"""

import os
import warnings

import numpy as np
from scipy.linalg import lapack, lu_factor, lu_solve, null_space

from . import kernels
from .boundary import (BoundaryField, FluxFreeField, field_to_csv,
                       project_flux_free, require_flux_free)
from .potentials import (VolumeQuadrature, _extrapolation_to_zero,
                         _pair_displacements, _stack_blocks,
                         _upsample_matrix, assemble_layer_operators,
                         combine_evaluators, double_layer_eval,
                         newtonian_eval, single_layer_eval)


# ----------------------------------------------------------------------
# small helpers
# ----------------------------------------------------------------------

def _node_tensor(value, n):
    """Normalize a symmetric 2x2 interface tensor to shape (n, 2, 2).

    Accepts a scalar (multiple of the identity), a per-node scalar array
    of shape (n,), a constant (2, 2) matrix, or the full (n, 2, 2).
    """
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        out = np.zeros((n, 2, 2))
        out[:, 0, 0] = out[:, 1, 1] = float(v)
    elif v.shape == (n,):
        out = np.zeros((n, 2, 2))
        out[:, 0, 0] = out[:, 1, 1] = v
    elif v.shape == (2, 2):
        out = np.broadcast_to(v, (n, 2, 2)).copy()
    elif v.shape == (n, 2, 2):
        out = v.copy()
    else:
        raise ValueError("interface tensor shape %r not understood"
                         % (v.shape,))
    scale = np.max(np.abs(out)) + 1e-300
    if np.max(np.abs(out - np.transpose(out, (0, 2, 1)))) > 1e-12 * scale:
        raise ValueError("interface tensor must be symmetric")
    return out


def _tensor_block(tensor):
    """Stacked (2n, 2n) matrix of a node-wise 2x2 tensor multiply."""
    n = tensor.shape[0]
    out = np.zeros((2 * n, 2 * n))
    for a in range(2):
        for b in range(2):
            out[a * n:(a + 1) * n, b * n:(b + 1) * n] = \
                np.diag(tensor[:, a, b])
    return out


def _apply_tensor(tensor, values):
    return np.einsum('nab,nb->na', tensor, values)


def _eval_chunked(fn, points, chunk=64):
    parts = [fn(points[k:k + chunk])
             for k in range(0, points.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


def _sample_at(forcing, points):
    """Evaluate a forcing (callable or per-point array) at points."""
    if callable(forcing):
        try:
            vals = np.asarray(forcing(points), dtype=float)
            if vals.shape == (points.shape[0], 2):
                return vals
        except Exception:
            pass
        return np.array([forcing(p) for p in points], dtype=float)
    vals = np.asarray(forcing, dtype=float)
    if vals.shape != (points.shape[0], 2):
        raise ValueError("forcing array shape %r does not match %d "
                         "evaluation points" % (vals.shape, points.shape[0]))
    return vals


def divergence_residual(field, points, step=1e-5):
    """Max |div u| at points by central differences of field.velocity."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    div = np.zeros(points.shape[0])
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = step
        hi = field.velocity(points + e)
        lo = field.velocity(points - e)
        div += (hi[:, axis] - lo[:, axis]) / (2.0 * step)
    return float(np.max(np.abs(div)))


# ----------------------------------------------------------------------
# problem data
# ----------------------------------------------------------------------

class VolumeCoefficient:
    """Resistance tensor on the inner region.

    kind 'zero' for unforced viscous flow, 'scalar' for alpha times the
    identity (handled directly with the screened kernel), 'general' for
    a node-wise symmetric positive-semidefinite tensor given as a
    callable x -> (2, 2) or as an array aligned with the evaluation
    points chosen by the caller.
    """

    def __init__(self, value):
        if value is None:
            self.kind = 'zero'
            self.alpha = 0.0
            self.value = None
            return
        if np.ndim(value) == 0 and not callable(value):
            alpha = float(value)
            if alpha < 0.0:
                raise ValueError("scalar resistance must be >= 0")
            self.kind = 'zero' if alpha == 0.0 else 'scalar'
            self.alpha = alpha
            self.value = None
            return
        self.kind = 'general'
        self.alpha = None
        self.value = value

    @property
    def is_zero(self):
        return self.kind == 'zero'

    def values_at(self, points):
        """Node-wise (k, 2, 2) tensor samples, PSD-checked."""
        k = points.shape[0]
        if self.kind == 'zero':
            return np.zeros((k, 2, 2))
        if self.kind == 'scalar':
            out = np.zeros((k, 2, 2))
            out[:, 0, 0] = out[:, 1, 1] = self.alpha
            return out
        if callable(self.value):
            out = np.array([self.value(p) for p in points], dtype=float)
        else:
            out = np.asarray(self.value, dtype=float)
            if out.shape != (k, 2, 2):
                raise ValueError(
                    "resistance array shape %r does not match %d points; "
                    "pass a callable for grid-independent data"
                    % (out.shape, k))
        scale = np.max(np.abs(out)) + 1e-300
        if np.max(np.abs(out - np.transpose(out, (0, 2, 1)))) \
                > 1e-12 * scale:
            raise ValueError("resistance tensor must be symmetric")
        if np.min(np.linalg.eigvalsh(out)) < -1e-10 * scale:
            raise ValueError("resistance tensor must be positive "
                             "semidefinite at every node")
        return out


class TransmissionData:
    """Data for the transmission problem on a closed interface curve.

    h is the velocity-jump datum (mu gamma+ u+ - gamma- u- = h) and must
    be flux-free; r is the traction-jump datum.  P is the interface
    tensor acting on the inner trace, symmetric positive definite at
    every node.  forcing_plus / forcing_minus are body forces on the
    inner / outer region, callables or arrays on the volume grid.
    """

    def __init__(self, curve, h, r, mu, P, V=None, forcing_plus=None,
                 forcing_minus=None, s=0.5):
        self.curve = curve
        self.mu = float(mu)
        if not self.mu > 0.0:
            raise ValueError("viscosity ratio mu must be positive")
        self.s = float(s)
        if not 0.0 < self.s < 1.0:
            raise ValueError("smoothness index s must lie in (0, 1)")
        if h.curve is not curve or r.curve is not curve:
            raise ValueError("jump data must live on the problem curve")
        self.h = require_flux_free(h)
        self.r = r
        self.P_nodes = _node_tensor(P, curve.N)
        eig = np.linalg.eigvalsh(self.P_nodes)
        self.C_P = float(np.min(eig))
        if not self.C_P > 0.0:
            raise ValueError("interface tensor must be uniformly "
                             "positive definite")
        self.V = V if isinstance(V, VolumeCoefficient) \
            else VolumeCoefficient(V)
        self.forcing_plus = forcing_plus
        self.forcing_minus = forcing_minus
        self._P_block = None

    @property
    def P_block(self):
        if self._P_block is None:
            self._P_block = _tensor_block(self.P_nodes)
        return self._P_block

    def apply_P(self, values):
        return _apply_tensor(self.P_nodes, values)


# ----------------------------------------------------------------------
# Newtonian boundary data
# ----------------------------------------------------------------------

_LADDER_STEPS = np.array([3.0, 4.0, 5.0, 6.0])


def _max_curvature(curve):
    cross = (curve.tangents_raw[:, 0] * curve.second_derivatives[:, 1]
             - curve.tangents_raw[:, 1] * curve.second_derivatives[:, 0])
    return float(np.max(np.abs(cross) / curve.speeds ** 3))


class _NewtonBoundary:
    """Curve trace and one-sided traction of a volume potential.

    The trace is continuous and read off directly.  The traction is
    extrapolated to the curve along the source-free side, where the
    potential is smooth up to the interface: the inner-region potential
    is approached from outside and vice versa.
    """

    def __init__(self, evaluator, curve, quad, approach):
        self.trace = evaluator.velocity(curve.nodes)
        h = max(quad.hx, quad.hy)
        kappa = _max_curvature(curve)
        if kappa > 0.0:
            h = min(h, 0.4 / (_LADDER_STEPS[-1] * kappa))
        sgn = 1.0 if approach == 'outer' else -1.0
        dist = _LADDER_STEPS * h
        lam = _extrapolation_to_zero(dist)
        acc = np.zeros((curve.N, 2))
        for dk, lk in zip(dist, lam):
            pts = curve.nodes + sgn * dk * curve.normals
            acc += lk * evaluator.traction(pts, curve.normals)
        self.traction = acc


# ----------------------------------------------------------------------
# right-hand side reduction
# ----------------------------------------------------------------------

def _reduced_data(data, quad, kernel, kernel_minus, flux_tol,
                  forcing_plus=None, minus_parts=None):
    """Subtract the Newtonian contributions from the jump data.

    Returns a dict with the reduced jumps h0 (flux-free up to the
    volume-quadrature tolerance) and r0 plus the Newtonian evaluators
    needed to assemble the full solution.  forcing_plus overrides the
    inner forcing (used by the fixed-point loop); minus_parts carries a
    precomputed outer-side contribution.
    """
    curve = data.curve
    h0v = data.h.values.copy()
    r0v = data.r.values.copy()
    ev_p = nb_p = ev_m = nb_m = None
    fp = data.forcing_plus if forcing_plus is None else forcing_plus
    if fp is not None:
        ev_p = newtonian_eval(fp, quad, kernel, side='plus')
        nb_p = _NewtonBoundary(ev_p, curve, quad, 'outer')
        h0v -= data.mu * nb_p.trace
        r0v -= nb_p.traction + data.apply_P(nb_p.trace)
    if minus_parts is not None:
        ev_m, nb_m = minus_parts
    elif data.forcing_minus is not None:
        ev_m = newtonian_eval(data.forcing_minus, quad, kernel_minus,
                              side='minus')
        nb_m = _NewtonBoundary(ev_m, curve, quad, 'inner')
    if nb_m is not None:
        h0v += nb_m.trace
        r0v += nb_m.traction
    h0 = FluxFreeField(curve, h0v, s=data.h.s)
    scale = np.max(np.abs(h0v)) * curve.length + 1e-300
    if abs(h0.flux_value) > flux_tol * scale:
        raise ValueError(
            "reduced velocity jump has flux %.3e; the volume quadrature "
            "is inconsistent with the boundary data" % h0.flux_value)
    r0 = BoundaryField(curve, r0v, s=max(data.r.s, -1.0))
    return {'h0': h0, 'r0': r0, 'ev_plus': ev_p, 'nb_plus': nb_p,
            'ev_minus': ev_m, 'nb_minus': nb_m}


def reduce_rhs(data, quad, kernel, kernel_minus=None, flux_tol=1e-4):
    """Reduced jump data (h0, r0) after removing Newtonian potentials.

    h0 keeps its raw quadrature flux (readable as h0.flux_value); the
    solvers project it before solving.
    """
    red = _reduced_data(data, quad, kernel,
                        kernel_minus if kernel_minus is not None else kernel,
                        flux_tol)
    return red['h0'], red['r0']


# ----------------------------------------------------------------------
# interface system
# ----------------------------------------------------------------------

class SystemU:
    """Dense two-by-two block system for the layer density pair.

    Row one enforces the velocity jump, row two the traction jump with
    the interface tensor.  The first block unknown lives in the
    flux-free subspace; a rank-one shift along the normal makes the
    factored matrix invertible there without touching flux-free data.
    Instances are immutable once factored.
    """

    def __init__(self, curve, mu, P_nodes, matrix, T_matrix):
        self.curve = curve
        self.mu = float(mu)
        self.P_nodes = P_nodes
        self.matrix = matrix
        self.T_matrix = T_matrix
        self.C_matrix = matrix - T_matrix
        n2 = 2 * curve.N
        self.flux_vector = np.concatenate(
            [curve.weights * curve.normals[:, 0],
             curve.weights * curve.normals[:, 1]])
        self.normal_vector = np.concatenate(
            [curve.normals[:, 0], curve.normals[:, 1]])
        sigma = 2.0 * (1.0 + self.mu) / curve.length
        for attempt in range(3):
            shifted = matrix.copy()
            shifted[:n2, :n2] += sigma * np.outer(self.normal_vector,
                                                  self.flux_vector)
            lu, piv = lu_factor(shifted)
            anorm = np.max(np.sum(np.abs(shifted), axis=0))
            rcond, _ = lapack.dgecon(lu, anorm, norm='1')
            if rcond > 1e-14:
                break
            sigma *= 3.0
        self.deflation = sigma
        self.shifted = shifted
        self.lu = (lu, piv)
        self.condition_estimate = float(1.0 / max(rcond, 1e-300))

    def solve(self, h0, r0):
        """Density pair (Phi, phi) for reduced jump data (h0, r0)."""
        h0 = require_flux_free(h0)
        rhs = np.concatenate([h0.stacked(), r0.stacked()])
        z = lu_solve(self.lu, rhs)
        z += lu_solve(self.lu, rhs - self.shifted @ z)
        n2 = 2 * self.curve.N
        Phi = FluxFreeField.from_stacked(self.curve, z[:n2], s=h0.s)
        phi = BoundaryField.from_stacked(self.curve, z[n2:],
                                         s=max(h0.s - 1.0, -1.0))
        return Phi, phi


def _assemble_mixed(curve, mu, P_nodes, ops_plus, ops_minus):
    """Block system with independent kernels on the two sides."""
    n2 = 2 * curve.N
    eye = np.eye(n2)
    Pb = _tensor_block(P_nodes)
    diag = np.diag_indices(n2)
    # add the identity parts on the diagonal last so that equal-kernel
    # operator differences cancel exactly
    A11 = mu * ops_plus.K_mat - ops_minus.K_mat
    A11[diag] -= 0.5 * (1.0 + mu)
    A12 = mu * ops_plus.V_mat - ops_minus.V_mat
    A21 = (ops_plus.Dplus_mat - ops_minus.Dminus_mat
           + Pb @ (-0.5 * eye + ops_plus.K_mat))
    A22 = ops_plus.Kstar_mat - ops_minus.Kstar_mat + Pb @ ops_plus.V_mat
    A22[diag] += 1.0
    matrix = np.block([[A11, A12], [A21, A22]])
    T_matrix = np.block([[A11, A12], [np.zeros((n2, n2)), eye]])
    return SystemU(curve, mu, P_nodes, matrix, T_matrix)


def assemble_system(curve, mu, P, ops):
    """Interface system with one shared kernel on both sides."""
    if not float(mu) > 0.0:
        raise ValueError("viscosity ratio mu must be positive")
    P_nodes = _node_tensor(P, curve.N)
    return _assemble_mixed(curve, float(mu), P_nodes, ops, ops)


def isomorphism_witness(ops, mu, P):
    """Smallest singular value of the reduced interface operator.

    For mu != 1 this is the velocity-row operator restricted to the
    flux-free subspace; for mu = 1 that row degenerates and the witness
    is the traction-row operator on the quotient modulo the normal
    field, where it has eigenvalue one along the normal itself.
    """
    curve = ops.curve
    mu = float(mu)
    P_nodes = _node_tensor(P, curve.N)
    Pb = _tensor_block(P_nodes)
    n2 = 2 * curve.N
    eye = np.eye(n2)
    if mu == 1.0:
        M = eye + Pb @ ops.V_mat
        direction = np.concatenate([curve.normals[:, 0],
                                    curve.normals[:, 1]])
    else:
        M = 0.5 * (1.0 + mu) * eye + (1.0 - mu) * ops.K_mat \
            + ops.V_mat @ Pb
        direction = np.concatenate([curve.weights * curve.normals[:, 0],
                                    curve.weights * curve.normals[:, 1]])
    Q = null_space(direction[None, :])
    return float(np.linalg.svd(Q.T @ M @ Q, compute_uv=False)[-1])


# ----------------------------------------------------------------------
# solution object
# ----------------------------------------------------------------------

class SideField:
    """Velocity/pressure field on one side, with a pressure shift."""

    def __init__(self, evaluator, pressure_shift=0.0):
        self.evaluator = evaluator
        self.pressure_shift = float(pressure_shift)

    def velocity(self, points):
        return self.evaluator.velocity(points)

    def velocity_gradient(self, points):
        return self.evaluator.velocity_gradient(points)

    def pressure(self, points):
        return self.evaluator.pressure(points) + self.pressure_shift

    def traction(self, points, normals):
        t = self.evaluator.traction(points, normals)
        return t - self.pressure_shift * np.asarray(normals, dtype=float)


class _ScaledField:
    """Side field scaled by a constant factor."""

    def __init__(self, base, factor):
        self.base = base
        self.factor = float(factor)
        self.pressure_shift = self.factor * base.pressure_shift

    def velocity(self, points):
        return self.factor * self.base.velocity(points)

    def velocity_gradient(self, points):
        return self.factor * self.base.velocity_gradient(points)

    def pressure(self, points):
        return self.factor * self.base.pressure(points)

    def traction(self, points, normals):
        return self.factor * self.base.traction(points, normals)


class TransmissionSolution:
    """Layer-potential solution of the transmission problem.

    plus / minus are the two side fields (velocity, pressure, traction
    evaluators); Phi / phi the double- and single-layer densities; c and
    c0 the pressure constants fixing the inner-region mean to zero.
    """

    def __init__(self, data, quad, kernel_plus, kernel_minus, ops_plus,
                 ops_minus, system, Phi, phi, plus, minus, c, c0,
                 newton_plus, newton_minus, diagnostics):
        self.data = data
        self.quad = quad
        self.kernel_plus = kernel_plus
        self.kernel_minus = kernel_minus
        self.ops_plus = ops_plus
        self.ops_minus = ops_minus
        self.system = system
        self.Phi = Phi
        self.phi = phi
        self.plus = plus
        self.minus = minus
        self.c = float(c)
        self.c0 = float(c0)
        self.newton_plus = newton_plus
        self.newton_minus = newton_minus
        self.diagnostics = dict(diagnostics)
        self.diagnostics.update(self.boundary_residuals())

    def side(self, which):
        if which == '+':
            return self.plus
        if which == '-':
            return self.minus
        raise ValueError("side must be '+' or '-'")

    def velocity(self, points, side='+'):
        return self.side(side).velocity(points)

    def pressure(self, points, side='+'):
        return self.side(side).pressure(points)

    def boundary_trace(self, side):
        """Interface velocity trace from the layer algebra."""
        ops = self.ops_plus if side == '+' else self.ops_minus
        sgn = -0.5 if side == '+' else 0.5
        vec = sgn * self.Phi.stacked() + ops.K_mat @ self.Phi.stacked() \
            + ops.V_mat @ self.phi.stacked()
        values = BoundaryField.from_stacked(self.data.curve, vec).values
        nb = self.newton_plus if side == '+' else self.newton_minus
        if nb is not None:
            values = values + nb.trace
        return BoundaryField(self.data.curve, values, s=self.data.s)

    def conormal(self, side):
        """Interface traction from the layer algebra."""
        ops = self.ops_plus if side == '+' else self.ops_minus
        dmat = ops.Dplus_mat if side == '+' else ops.Dminus_mat
        sgn = 0.5 if side == '+' else -0.5
        vec = dmat @ self.Phi.stacked() + sgn * self.phi.stacked() \
            + ops.Kstar_mat @ self.phi.stacked()
        values = BoundaryField.from_stacked(self.data.curve, vec).values
        nb = self.newton_plus if side == '+' else self.newton_minus
        if nb is not None:
            values = values + nb.traction
        shift = self.c + self.c0
        values = values - shift * self.data.curve.normals
        return BoundaryField(self.data.curve, values,
                             s=max(self.data.s - 1.0, -1.0))

    def boundary_residuals(self):
        """Sup-norm residuals of the two interface jump conditions."""
        trp = self.boundary_trace('+').values
        trm = self.boundary_trace('-').values
        jump_v = self.data.mu * trp - trm - self.data.h.values
        tp = self.conormal('+').values
        tm = self.conormal('-').values
        jump_t = tp - tm + self.data.apply_P(trp) - self.data.r.values
        return {'velocity_jump_residual': float(np.max(np.abs(jump_v))),
                'traction_jump_residual': float(np.max(np.abs(jump_t)))}

    def interior_mean_pressure(self):
        """Discrete inner-region mean of the pressure (zero by choice
        of the constants c and c0)."""
        quad = self.quad
        mask = quad.weights_plus > 0.0
        pts = quad.nodes_plus[mask]
        with warnings.catch_warnings():
            warnings.filterwarnings('ignore', message='evaluation within')
            vals = _eval_chunked(self.plus.pressure, pts)
        return float(np.sum(quad.weights_plus[mask] * vals)
                     / quad.area_plus)

    def to_csv(self, directory):
        """Write densities, traces, tractions, and diagnostics."""
        os.makedirs(directory, exist_ok=True)
        field_to_csv(self.Phi, os.path.join(directory, 'Phi.csv'))
        field_to_csv(self.phi, os.path.join(directory, 'phi.csv'))
        for side, tag in (('+', 'plus'), ('-', 'minus')):
            field_to_csv(self.boundary_trace(side),
                         os.path.join(directory, 'trace_%s.csv' % tag))
            field_to_csv(self.conormal(side),
                         os.path.join(directory, 'conormal_%s.csv' % tag))
        rows = [('c', self.c), ('c0', self.c0), ('mu', self.data.mu)]
        rows += sorted(self.diagnostics.items())
        with open(os.path.join(directory, 'diagnostics.csv'), 'w') as f:
            f.write('key,value\n')
            for key, val in rows:
                f.write('%s,%.17g\n' % (key, val))


def _grid_mean_plus(quad, grid_values):
    return float(np.sum(quad.weights_plus * grid_values.ravel())
                 / quad.area_plus)


def _build_solution(data, quad, kernel_plus, kernel_minus, ops_plus,
                    ops_minus, system, red, extra_diag=None, c0_rows=None):
    """Assemble the solution fields and pressure constants.

    c0_rows short-circuits the inner-region pressure mean with the
    precomputed row vectors of _layer_pressure_rows.
    """
    h0 = project_flux_free(red['h0'])
    Phi, phi = system.solve(h0, red['r0'])
    plus_terms = [(1.0, double_layer_eval(Phi, kernel=kernel_plus)),
                  (1.0, single_layer_eval(phi, kernel=kernel_plus))]
    minus_terms = [(1.0, double_layer_eval(Phi, kernel=kernel_minus)),
                   (1.0, single_layer_eval(phi, kernel=kernel_minus))]
    c = 0.0
    if red['ev_plus'] is not None:
        plus_terms.append((1.0, red['ev_plus']))
        grid_pres = red['ev_plus'].terms[0][1].grid_fields()[1]
        c = -_grid_mean_plus(quad, grid_pres)
    if red['ev_minus'] is not None:
        minus_terms.append((1.0, red['ev_minus']))
    plus_ev = combine_evaluators([t for _, t in plus_terms],
                                 [w for w, _ in plus_terms])
    minus_ev = combine_evaluators([t for _, t in minus_terms],
                                  [w for w, _ in minus_terms])
    if c0_rows is not None:
        c0 = -float(c0_rows[0] @ Phi.stacked()
                    + c0_rows[1] @ phi.stacked()) / quad.area_plus
    else:
        mask = quad.weights_plus > 0.0
        pts = quad.nodes_plus[mask]
        layer = combine_evaluators(
            [double_layer_eval(Phi, kernel=kernel_plus),
             single_layer_eval(phi, kernel=kernel_plus)],
            [1.0, 1.0])
        with warnings.catch_warnings():
            warnings.filterwarnings('ignore', message='evaluation within')
            pvals = _eval_chunked(layer.pressure, pts)
        c0 = -float(np.sum(quad.weights_plus[mask] * pvals)
                    / quad.area_plus)
    plus = SideField(plus_ev, c + c0)
    minus = SideField(minus_ev, c + c0)
    diag = {'condition_estimate': system.condition_estimate,
            'deflation': system.deflation,
            'h0_flux': red['h0'].flux_value}
    if extra_diag:
        diag.update(extra_diag)
    return TransmissionSolution(
        data, quad, kernel_plus, kernel_minus, ops_plus, ops_minus,
        system, Phi, phi, plus, minus, c, c0,
        red['nb_plus'], red['nb_minus'], diag)


# ----------------------------------------------------------------------
# direct solvers
# ----------------------------------------------------------------------

def solve_stokes_transmission(data, quad=None, ops=None, kernel=None,
                              volume_n=160, flux_tol=1e-4):
    """Solve the transmission problem with plain viscous flow on both
    sides (zero resistance)."""
    if not data.V.is_zero:
        raise ValueError("data carries a resistance term; use "
                         "solve_brinkman_transmission")
    if kernel is None:
        kernel = kernels.stokes_2d()
    if kernel.alpha != 0.0:
        raise ValueError("unscreened flow needs an alpha = 0 kernel")
    if quad is None:
        quad = VolumeQuadrature(data.curve, n=volume_n)
    if ops is None:
        ops = assemble_layer_operators(data.curve, kernel)
    system = _assemble_mixed(data.curve, data.mu, data.P_nodes, ops, ops)
    red = _reduced_data(data, quad, kernel, kernel, flux_tol)
    return _build_solution(data, quad, kernel, kernel, ops, ops,
                           system, red)


def _solve_screened(data, quad, ops_pair, volume_n, flux_tol):
    """Direct path for scalar resistance: screened kernel inside,
    plain kernel outside, one mixed block system."""
    kp = kernels.brinkman_2d(data.V.alpha)
    km = kernels.stokes_2d()
    if quad is None:
        quad = VolumeQuadrature(data.curve, n=volume_n)
    if ops_pair is None:
        ops_p = assemble_layer_operators(data.curve, kp)
        ops_m = assemble_layer_operators(data.curve, km)
    else:
        ops_p, ops_m = ops_pair
    system = _assemble_mixed(data.curve, data.mu, data.P_nodes,
                             ops_p, ops_m)
    red = _reduced_data(data, quad, kp, km, flux_tol)
    return _build_solution(data, quad, kp, km, ops_p, ops_m, system, red)


# ----------------------------------------------------------------------
# fixed-point path for node-wise resistance
# ----------------------------------------------------------------------

def _interior_velocity_matrices(curve, kernel, quad, points=None):
    """Dense maps from stacked densities to velocities at the interior
    grid nodes (or any given point set), with near-curve upsampling
    baked in."""
    pts = quad.nodes[quad.inside] if points is None else points
    m = pts.shape[0]
    ref = curve.resampled(8)
    dmin = np.empty(m)
    for k in range(0, m, 2048):
        d = _pair_displacements(kernel, pts[k:k + 2048], ref.nodes)
        dmin[k:k + 2048] = np.sqrt(np.min(np.sum(d * d, axis=-1), axis=1))
    h = curve.length / curve.N
    factors = np.where(dmin >= 4.0 * h, 1,
                       np.where(dmin >= 0.5 * h, 8, 64))
    n2 = 2 * curve.N
    Mw = np.zeros((2 * m, n2))
    Mv = np.zeros((2 * m, n2))
    for factor in (1, 8, 64):
        sel = np.flatnonzero(factors == factor)
        if sel.size == 0:
            continue
        cv = curve if factor == 1 else curve.resampled(factor)
        ustack = np.kron(np.eye(2), _upsample_matrix(curve.N, factor))
        for k in range(0, sel.size, 96):
            idx = sel[k:k + 96]
            dx = _pair_displacements(kernel, pts[idx], cv.nodes)
            nuq = np.broadcast_to(cv.normals[None], dx.shape)
            wcol = cv.weights[None, :, None, None]
            rows = np.concatenate([idx, m + idx])
            Mw[rows] = _stack_blocks(
                kernel.stress_block(dx, nuq) * wcol) @ ustack
            Mv[rows] = _stack_blocks(
                kernel.velocity_block(dx) * wcol) @ ustack
    return Mw, Mv


def _layer_pressure_rows(curve, kernel, quad):
    """Row vectors turning the stacked density pair into the weighted
    inner-region mean of the layer pressure, mirroring the evaluator's
    near-curve upsampling so the mean matches the direct evaluation."""
    mask = quad.weights_plus > 0.0
    pts = quad.nodes_plus[mask]
    wq = quad.weights_plus[mask]
    m = pts.shape[0]
    ref = curve.resampled(8)
    dmin = np.empty(m)
    for k in range(0, m, 2048):
        d = _pair_displacements(kernel, pts[k:k + 2048], ref.nodes)
        dmin[k:k + 2048] = np.sqrt(np.min(np.sum(d * d, axis=-1), axis=1))
    h = curve.length / curve.N
    factors = np.where(dmin >= 4.0 * h, 1,
                       np.where(dmin >= 0.5 * h, 8, 64))
    row_w = np.zeros(2 * curve.N)
    row_v = np.zeros(2 * curve.N)
    for factor in (1, 8, 64):
        sel = np.flatnonzero(factors == factor)
        if sel.size == 0:
            continue
        cv = curve if factor == 1 else curve.resampled(factor)
        ustack = np.kron(np.eye(2), _upsample_matrix(curve.N, factor))
        acc_w = np.zeros(2 * cv.N)
        acc_v = np.zeros(2 * cv.N)
        for k in range(0, sel.size, 256):
            idx = sel[k:k + 256]
            dx = _pair_displacements(kernel, pts[idx], cv.nodes)
            nuq = np.broadcast_to(cv.normals[None], dx.shape)
            wcol = cv.weights[None, :, None]
            pw = kernel.dlp_pressure_block(dx, nuq) * wcol
            pv = kernel.pressure_block(dx) * wcol
            acc_w += wq[idx] @ pw.transpose(0, 2, 1).reshape(idx.size, -1)
            acc_v += wq[idx] @ pv.transpose(0, 2, 1).reshape(idx.size, -1)
        row_w += acc_w @ ustack
        row_v += acc_v @ ustack
    return row_w, row_v


def _solve_general(data, quad, ops, volume_n, flux_tol, tol,
                   max_iterations, relaxation):
    """Fixed-point iteration moving the resistance term into the inner
    forcing: each sweep solves the unscreened problem with forcing
    f - V u and updates u on the interior grid nodes."""
    kernel = kernels.stokes_2d()
    if quad is None:
        quad = VolumeQuadrature(data.curve, n=volume_n)
    if ops is None:
        ops = assemble_layer_operators(data.curve, kernel)
    system = _assemble_mixed(data.curve, data.mu, data.P_nodes, ops, ops)
    inside = quad.inside
    pts = quad.nodes[inside]
    Vn = data.V.values_at(pts)
    if data.forcing_plus is not None:
        base_forcing = _sample_at(data.forcing_plus, quad.nodes)
    else:
        base_forcing = np.zeros((quad.nodes.shape[0], 2))
    minus_parts = None
    if data.forcing_minus is not None:
        ev_m = newtonian_eval(data.forcing_minus, quad, kernel,
                              side='minus')
        minus_parts = (ev_m, _NewtonBoundary(ev_m, data.curve, quad,
                                             'inner'))
    Mw, Mv = _interior_velocity_matrices(data.curve, kernel, quad)

    def sweep(U):
        forcing = base_forcing.copy()
        if U is not None:
            forcing[inside] -= _apply_tensor(Vn, U)
        red = _reduced_data(data, quad, kernel, kernel, flux_tol,
                            forcing_plus=forcing, minus_parts=minus_parts)
        h0 = project_flux_free(red['h0'])
        Phi, phi = system.solve(h0, red['r0'])
        vel = Mw @ Phi.stacked() + Mv @ phi.stacked()
        vel = vel.reshape(2, -1).T
        vel = vel + red['ev_plus'].terms[0][1].grid_fields()[0].reshape(
            -1, 2)[inside]
        return vel, red, Phi, phi

    omega = float(relaxation)
    U, red, Phi, phi = sweep(None)
    U0 = U.copy()
    steps = []
    restarted = False
    for it in range(1, max_iterations + 1):
        G, red, Phi, phi = sweep(U)
        step = float(np.max(np.abs(G - U)))
        scale = float(np.max(np.abs(G))) + 1e-300
        steps.append(step)
        if step <= tol * scale:
            U = G
            break
        if len(steps) >= 4 and all(
                steps[-j] > steps[-j - 1] for j in (1, 2, 3)):
            if not restarted:
                restarted = True
                omega = 0.5
                U = U0.copy()
                steps = []
                continue
            rho = float(np.exp(np.mean(np.log(
                np.array(steps[-3:]) / np.array(steps[-4:-1])))))
            raise RuntimeError(
                "resistance fixed point diverging; spectral radius "
                "estimate %.3f" % rho)
        U = (1.0 - omega) * U + omega * G
    else:
        raise RuntimeError(
            "resistance fixed point did not converge in %d sweeps; "
            "last relative step %.3e" % (max_iterations,
                                         steps[-1] / scale))
    diag = {'fixed_point_iterations': float(it),
            'fixed_point_step': steps[-1] if steps else 0.0,
            'relaxation': omega}
    return _build_solution(data, quad, kernel, kernel, ops, ops,
                           system, red, extra_diag=diag)


def solve_brinkman_transmission(data, quad=None, ops=None, ops_pair=None,
                                volume_n=160, flux_tol=1e-4, tol=1e-11,
                                max_iterations=40, relaxation=1.0):
    """Solve the transmission problem with a resistance term on the
    inner region.

    Zero resistance falls back to the plain solver; a scalar resistance
    uses the screened kernel directly; a node-wise tensor is handled by
    fixed-point iteration on the interior grid velocity.
    """
    if data.V.is_zero:
        return solve_stokes_transmission(data, quad=quad, ops=ops,
                                         volume_n=volume_n,
                                         flux_tol=flux_tol)
    if data.V.kind == 'scalar':
        return _solve_screened(data, quad, ops_pair, volume_n, flux_tol)
    return _solve_general(data, quad, ops, volume_n, flux_tol, tol,
                          max_iterations, relaxation)


def conormal_derivative(sol, side):
    """Interface traction of the solution on one side."""
    return sol.conormal(side)


# ----------------------------------------------------------------------
# identities and transforms
# ----------------------------------------------------------------------

def green_identity_residual(sol, w, side, quad=None, resistance=None,
                            forcing=None):
    """Residual of the weak traction identity against a test field w.

    Integrates sign * <t, gamma w> - 2 <Def u, Def w> - <V u, w>
    + <pi, div w> + <f, w> with the volume terms on the side's cells;
    w must expose velocity and velocity_gradient.  resistance and
    forcing default to the solution data and can be overridden to test
    the shift between the weak and the classical traction.
    """
    quad = sol.quad if quad is None else quad
    curve = sol.data.curve
    field = sol.side(side)
    if side == '+':
        sgn = 1.0
        wts = quad.weights_plus
        eval_nodes = quad.nodes_plus
        if resistance is None:
            resistance = sol.data.V
        if forcing is None:
            forcing = sol.data.forcing_plus
    else:
        sgn = -1.0
        wts = quad.weights_minus
        eval_nodes = quad.nodes_minus
        if resistance is None:
            resistance = VolumeCoefficient(None)
        if forcing is None:
            forcing = sol.data.forcing_minus
    if not isinstance(resistance, VolumeCoefficient):
        resistance = VolumeCoefficient(resistance)
    mask = wts > 0.0
    pts = eval_nodes[mask]
    cw = wts[mask]
    with warnings.catch_warnings():
        warnings.filterwarnings('ignore', message='evaluation within')
        ugrad = _eval_chunked(field.velocity_gradient, pts)
        pres = _eval_chunked(field.pressure, pts)
        if not resistance.is_zero or forcing is not None:
            uvel = _eval_chunked(field.velocity, pts)
    wvel = w.velocity(pts)
    wgrad = w.velocity_gradient(pts)
    def_u = 0.5 * (ugrad + np.transpose(ugrad, (0, 2, 1)))
    def_w = 0.5 * (wgrad + np.transpose(wgrad, (0, 2, 1)))
    total = -2.0 * float(np.sum(cw * np.sum(def_u * def_w, axis=(1, 2))))
    if not resistance.is_zero:
        Vu = _apply_tensor(resistance.values_at(pts), uvel)
        total -= float(np.sum(cw * np.sum(Vu * wvel, axis=1)))
    total += float(np.sum(cw * pres * np.trace(wgrad, axis1=1, axis2=2)))
    if forcing is not None:
        if not callable(forcing) and \
                np.asarray(forcing).shape[0] == quad.nodes.shape[0]:
            fw = np.asarray(forcing, dtype=float)[mask]
        else:
            fw = _sample_at(forcing, pts)
        total += float(np.sum(cw * np.sum(fw * wvel, axis=1)))
    t = sol.conormal(side).values
    gw = w.velocity(curve.nodes)
    total += sgn * float(np.sum(curve.weights * np.sum(t * gw, axis=1)))
    return abs(total)


def energy_chain(sol, quad=None):
    """Terms of the combined energy identity for the homogeneous
    problem: weighted deformation energies, the resistance term, and
    the interface dissipation.  The outer-region integral is truncated
    to the quadrature box."""
    quad = sol.quad if quad is None else quad
    data = sol.data
    out = {}
    with warnings.catch_warnings():
        warnings.filterwarnings('ignore', message='evaluation within')
        for tag, field, wts, nodes in (
                ('plus', sol.plus, quad.weights_plus, quad.nodes_plus),
                ('minus', sol.minus, quad.weights_minus, quad.nodes_minus)):
            mask = wts > 0.0
            pts = nodes[mask]
            cw = wts[mask]
            ugrad = _eval_chunked(field.velocity_gradient, pts)
            def_u = 0.5 * (ugrad + np.transpose(ugrad, (0, 2, 1)))
            out['def_' + tag] = float(
                np.sum(cw * np.sum(def_u * def_u, axis=(1, 2))))
            if tag == 'plus' and not data.V.is_zero:
                uvel = _eval_chunked(field.velocity, pts)
                Vu = _apply_tensor(data.V.values_at(pts), uvel)
                out['resistance'] = float(
                    np.sum(cw * np.sum(Vu * uvel, axis=1)))
    out.setdefault('resistance', 0.0)
    trp = sol.boundary_trace('+').values
    out['interface'] = float(np.sum(
        data.curve.weights * np.sum(data.apply_P(trp) * trp, axis=1)))
    out['total'] = (2.0 * data.mu * out['def_plus']
                    + data.mu * out['resistance']
                    + 2.0 * out['def_minus']
                    + data.mu * out['interface'])
    return out


class ScaledSolution:
    """Solution of the variant problem with the viscosity ratio moved
    from the velocity jump to the outer traction."""

    def __init__(self, base, factor):
        self.base = base
        self.factor = float(factor)
        self.plus = _ScaledField(base.plus, factor)
        self.minus = base.minus
        self.data = base.data
        self.quad = base.quad

    def side(self, which):
        return self.plus if which == '+' else self.minus

    def boundary_trace(self, side):
        tr = self.base.boundary_trace(side)
        if side == '+':
            return BoundaryField(tr.curve, self.factor * tr.values, s=tr.s)
        return tr

    def conormal(self, side):
        t = self.base.conormal(side)
        if side == '+':
            return BoundaryField(t.curve, self.factor * t.values, s=t.s)
        return t


def mu_scaling_transform(sol, data, mu=None):
    """Rescale a solution into the variant problem where the viscosity
    ratio multiplies the outer traction instead of the inner trace.

    Returns (sol', data'): the inner field and inner forcing are scaled
    by mu, the traction jump datum by mu, and the velocity jump keeps
    coefficient one on both traces.
    """
    mu = data.mu if mu is None else float(mu)
    scaled = ScaledSolution(sol, mu)
    fp = data.forcing_plus
    if fp is not None:
        if callable(fp):
            fp_scaled = lambda p, f=fp, m=mu: m * np.asarray(f(p),
                                                             dtype=float)
        else:
            fp_scaled = mu * np.asarray(fp, dtype=float)
    else:
        fp_scaled = None
    data_scaled = TransmissionData(
        data.curve, data.h,
        BoundaryField(data.curve, mu * data.r.values, s=data.r.s),
        data.mu, data.P_nodes, V=data.V, forcing_plus=fp_scaled,
        forcing_minus=data.forcing_minus, s=data.s)
    return scaled, data_scaled


def variant_residuals(scaled, data_scaled):
    """Sup-norm residuals of the variant jump conditions: unit-weight
    velocity jump and mu-weighted outer traction."""
    mu = scaled.factor
    trp = scaled.boundary_trace('+').values
    trm = scaled.boundary_trace('-').values
    jump_v = trp - trm - data_scaled.h.values
    tp = scaled.conormal('+').values
    tm = scaled.conormal('-').values
    P_tr = _apply_tensor(data_scaled.P_nodes, trp)
    jump_t = tp - mu * tm + P_tr - data_scaled.r.values
    return {'velocity_jump_residual': float(np.max(np.abs(jump_v))),
            'traction_jump_residual': float(np.max(np.abs(jump_t)))}


# ----------------------------------------------------------------------
# one-sided Dirichlet harness
# ----------------------------------------------------------------------

class DirichletField(SideField):
    """Solution of a one-sided Dirichlet problem, with the combined
    layer density and solve diagnostics attached."""

    def __init__(self, evaluator, pressure_shift, density, diagnostics):
        SideField.__init__(self, evaluator, pressure_shift)
        self.density = density
        self.diagnostics = dict(diagnostics)


def solve_dirichlet(side, g, F=None, V=None, quad=None, ops=None,
                    kernel=None, volume_n=160):
    """Solve a one-sided Dirichlet problem with flux-free datum g.

    The field is represented as (W -+ S) psi plus the Newtonian
    potential of F, with one combined-field density psi; the single
    layer enters with sign -1 inside and +1 outside, the choice that
    makes the combined trace operator injective.  The pressure is
    normalized to mean zero over the side's cells.  Only a scalar
    resistance is supported here; node-wise tensors need the
    transmission solver.
    """
    g = require_flux_free(g)
    curve = g.curve
    V = V if isinstance(V, VolumeCoefficient) else VolumeCoefficient(V)
    if V.kind == 'general':
        raise ValueError("node-wise resistance is only supported by the "
                         "transmission solver")
    if kernel is None:
        kernel = kernels.brinkman_2d(V.alpha) if V.kind == 'scalar' \
            else kernels.stokes_2d()
    if ops is None:
        ops = assemble_layer_operators(curve, kernel)
    if quad is None:
        quad = VolumeQuadrature(curve, n=volume_n)
    n2 = 2 * curve.N
    sgn = -0.5 if side == '+' else 0.5
    single_sign = -1.0 if side == '+' else 1.0
    matrix = sgn * np.eye(n2) + ops.K_mat + single_sign * ops.V_mat
    flux_vector = np.concatenate([curve.weights * curve.normals[:, 0],
                                  curve.weights * curve.normals[:, 1]])
    normal_vector = np.concatenate([curve.normals[:, 0],
                                    curve.normals[:, 1]])
    sigma = 3.0 / curve.length
    for attempt in range(3):
        shifted = matrix + sigma * np.outer(normal_vector, flux_vector)
        lu, piv = lu_factor(shifted)
        anorm = np.max(np.sum(np.abs(shifted), axis=0))
        rcond, _ = lapack.dgecon(lu, anorm, norm='1')
        if rcond > 1e-14:
            break
        sigma *= 3.0
    rhs = g.stacked()
    newton = None
    if F is not None:
        newton = newtonian_eval(F, quad, kernel,
                                side='plus' if side == '+' else 'minus')
        rhs = rhs - newton.velocity(curve.nodes).T.reshape(-1)
    z = lu_solve((lu, piv), rhs)
    z += lu_solve((lu, piv), rhs - shifted @ z)
    psi = project_flux_free(BoundaryField.from_stacked(curve, z, s=g.s))
    terms = [double_layer_eval(psi, kernel=kernel),
             single_layer_eval(psi, kernel=kernel)]
    weights = [1.0, single_sign]
    if newton is not None:
        terms.append(newton)
        weights.append(1.0)
    ev = combine_evaluators(terms, weights)
    if side == '+':
        wts, side_nodes = quad.weights_plus, quad.nodes_plus
    else:
        wts, side_nodes = quad.weights_minus, quad.nodes_minus
    mask = wts > 0.0
    with warnings.catch_warnings():
        warnings.filterwarnings('ignore', message='evaluation within')
        pvals = _eval_chunked(ev.pressure, side_nodes[mask])
    shift = -float(np.sum(wts[mask] * pvals) / np.sum(wts[mask]))
    trace = matrix @ psi.stacked()
    if newton is not None:
        trace = trace + newton.velocity(curve.nodes).T.reshape(-1)
    resid = float(np.max(np.abs(trace - g.stacked())))
    return DirichletField(ev, shift, psi,
                          {'condition_estimate': 1.0 / max(rcond, 1e-300),
                           'trace_residual': resid,
                           'deflation': sigma})
