"""Layer and volume potentials for the viscous transmission problem.

Dense Nystrom assembly on closed parametrized curves: the single-layer
trace with a periodic log-product rule, the double-layer trace and its
adjoint by trapezoid (their kernels are continuous on smooth curves;
residual log content is split off the same way as for the single layer),
and the one-sided conormal derivatives of the double layer by
extrapolating collar tractions down to the curve, which avoids
finite-part quadrature of the hypersingular kernel.  Off-curve field
evaluation upsamples the source curve as the target approaches it.
Volume (Newtonian) potentials live on an indicator-weighted uniform
grid, summed by FFT convolution with exact near-cell moments of the
leading kernel singularities.
"""

import warnings

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .boundary import BoundaryField, require_flux_free


class QuadratureBreakdown(Exception):
    """Curve nodes too close to coincident for stable assembly."""


# ----------------------------------------------------------------------
# periodic quadrature machinery
# ----------------------------------------------------------------------

def _kress_log_weights(n_nodes):
    """Circulant weights for int f(s) ln(4 sin^2((t-s)/2)) ds at the nodes.

    Exact for trigonometric polynomials of degree below n_nodes/2.
    """
    n = n_nodes // 2
    dt = 2.0 * np.pi / n_nodes
    k = np.arange(n_nodes)
    m = np.arange(1, n)
    row = -(2.0 * np.pi / n) * np.sum(
        np.cos(np.outer(k * dt, m)) / m, axis=1) \
        - (np.pi / (n * n)) * np.cos(n * k * dt)
    idx = (k[:, None] - k[None, :]) % n_nodes
    return row[idx]


def _resample_values(vals, factor):
    """Trigonometric interpolation of per-node samples onto a finer grid."""
    vals = np.asarray(vals, dtype=float)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    n = vals.shape[0]
    if factor == 1:
        out = vals.copy()
    else:
        spec = np.fft.rfft(vals, axis=0)
        spec[n // 2] *= 0.5  # Nyquist splits into +/- modes on refinement
        m = n * factor
        pad = np.zeros((m // 2 + 1, vals.shape[1]), dtype=complex)
        pad[: n // 2 + 1] = spec
        out = np.fft.irfft(pad, n=m, axis=0) * factor
    return out[:, 0] if squeeze else out


def _upsample_matrix(n, factor):
    return _resample_values(np.eye(n), factor)


def _stack_blocks(blocks):
    """(N, M, 2, 2) kernel blocks -> (2N, 2M) on component-blocked vectors."""
    n, m = blocks.shape[0], blocks.shape[1]
    return np.ascontiguousarray(
        blocks.transpose(2, 0, 3, 1).reshape(2 * n, 2 * m))


def _pair_displacements(kernel, targets, sources):
    d = np.asarray(targets, dtype=float)[:, None, :] \
        - np.asarray(sources, dtype=float)[None, :, :]
    return kernel.wrap(d) if kernel.is_torus else d


def _check_curve(curve, kernel):
    if getattr(kernel.profile, 'dim', 2) != 2:
        raise ValueError("layer assembly supports planar curves only")
    if curve.N < 32:
        raise ValueError("layer assembly needs at least 32 nodes")
    if curve.min_separation() < 1e-10 * curve.length:
        raise QuadratureBreakdown("curve nodes nearly coincide")
    if np.min(curve.speeds) < 1e-12 * np.mean(curve.speeds):
        raise QuadratureBreakdown("parametrization speed vanishes at a node")
    if kernel.is_torus:
        extents = np.ptp(curve.nodes, axis=0)
        if np.any(extents >= 0.5):
            raise ValueError("curve must fit inside a half-period cell")


# ----------------------------------------------------------------------
# dense trace operators
# ----------------------------------------------------------------------

class LayerOperators:
    """Dense boundary operators on component-blocked node values.

    V_mat is the single-layer trace, K_mat the double-layer principal
    value, Kstar_mat its adjoint under the arclength pairing, and
    Dplus_mat / Dminus_mat the one-sided conormal derivatives of the
    double layer (plus = limit from the bounded interior side).
    """

    def __init__(self, curve, kernel, V_mat, K_mat, Kstar_mat,
                 Dplus_mat, Dminus_mat, quadrature):
        self.curve = curve
        self.kernel = kernel
        self.V_mat = V_mat
        self.K_mat = K_mat
        self.Kstar_mat = Kstar_mat
        self.Dplus_mat = Dplus_mat
        self.Dminus_mat = Dminus_mat
        self.quadrature = quadrature
        self._single_collar = None

    def apply(self, name, field):
        mat = getattr(self, name + '_mat')
        return BoundaryField.from_stacked(
            field.curve, mat @ field.stacked(), s=field.s)

    def single_layer_conormal_matrices(self):
        """Collar-extrapolated one-sided tractions of the single layer."""
        if self._single_collar is None:
            setup = _collar_setup(self.curve, self.quadrature)
            self._single_collar = _collar_traction_pair(
                self.curve, self.kernel, 'single', setup)
        return self._single_collar

    def to_csv(self, directory):
        import os
        os.makedirs(directory, exist_ok=True)
        for name in ('V', 'K', 'Kstar', 'Dplus', 'Dminus'):
            np.savetxt(os.path.join(directory, name + '.csv'),
                       getattr(self, name + '_mat'),
                       fmt='%.17g', delimiter=',')


def _collar_parameters(curve):
    """Per-node collar spacing for the one-sided trace ladder.

    Distances scale with the local node spacing so the upsampled
    trapezoid tail is damped uniformly along the curve; a global clamp
    keeps the outermost ladder point short of any normal-ray crossing
    (local curvature, parameter-distant sheets)."""
    cross = (curve.tangents_raw[:, 0] * curve.second_derivatives[:, 1]
             - curve.tangents_raw[:, 1] * curve.second_derivatives[:, 0])
    kappa = np.abs(cross) / curve.speeds ** 3
    d = curve.nodes[:, None, :] - curve.nodes[None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=-1))
    idx = np.arange(curve.N)
    gap = np.abs(idx[:, None] - idx[None, :])
    gap = np.minimum(gap, curve.N - gap)
    sheet = float(np.min(dist[gap >= max(16, curve.N // 8)]))
    local = 0.375 * curve.speeds * curve.dt
    cap = min(0.25 / max(np.max(kappa), 1e-300), 0.5 * sheet) / 8.0
    if cap < np.max(local):
        warnings.warn("collar distances clamped by curvature or sheet "
                      "gap; one-sided traces may lose accuracy",
                      RuntimeWarning)
    delta = np.minimum(local, cap)
    # step k sits at distance k*delta, so a step-dependent source
    # refinement keeps the trapezoid tail damping uniform across the
    # ladder; clamped curves escalate until the refinement cap binds
    q = float(np.min(delta / (curve.speeds * curve.dt)))
    steps = np.arange(1, 9)
    factors = np.ceil(6.0 / (steps * q) - 1e-12).astype(int)
    factors = np.clip(factors, 1, 64)
    return delta, [int(f) for f in factors]


def _extrapolation_to_zero(d):
    lam = np.empty(d.size)
    for k in range(d.size):
        others = np.delete(d, k)
        lam[k] = np.prod(others / (others - d[k]))
    return lam


def _collar_setup(curve, quadrature):
    factors = [int(f) for f in quadrature['collar_upsample']]
    ups = {}
    ustacks = {}
    for f in sorted(set(factors)):
        up = curve.resampled(f)
        u1 = _upsample_matrix(curve.N, f)
        ustack = np.zeros((2 * up.N, 2 * curve.N))
        ustack[:up.N, :curve.N] = u1
        ustack[up.N:, curve.N:] = u1
        ups[f] = up
        ustacks[f] = ustack
    steps = np.asarray(quadrature['collar_steps'], dtype=float)
    return {'ups': ups, 'ustacks': ustacks, 'factors': factors,
            'delta': np.asarray(quadrature['collar_delta']),
            'steps': steps,
            'lam': _extrapolation_to_zero(steps)}


def _collar_traction_pair(curve, kernel, layer, setup):
    """One-sided traction matrices by extrapolating collar evaluations.

    layer 'double' gives the conormals of W (the D+/- operators); layer
    'single' gives the one-sided conormals of V.  Interior side first.
    """
    n = curve.N
    nu0 = curve.normals
    delta = setup['delta']
    w = nu0[:, None, :]
    acc = {}
    for step, lam, factor in zip(setup['steps'], setup['lam'],
                                 setup['factors']):
        up = setup['ups'][factor]
        nuq = up.normals[None, :, :]
        for side in (1.0, -1.0):
            # interior approach runs against the outward normal
            targets = curve.nodes - side * (step * delta)[:, None] * nu0
            dx = _pair_displacements(kernel, targets, up.nodes)
            if layer == 'double':
                tract = kernel.doublet_traction_block(dx, nuq, w)
            else:
                tract = kernel.source_traction_block(dx, w)
            tract *= up.weights[None, :, None, None]
            key = (side, factor)
            if key in acc:
                acc[key] += lam * _stack_blocks(tract)
            else:
                acc[key] = lam * _stack_blocks(tract)
    out = {1.0: np.zeros((2 * n, 2 * n)), -1.0: np.zeros((2 * n, 2 * n))}
    for (side, factor), mat in acc.items():
        out[side] += mat @ setup['ustacks'][factor]
    return out[1.0], out[-1.0]


def assemble_layer_operators(curve, kernel):
    """Dense V, K, K*, D+/- for one curve-kernel pair."""
    _check_curve(curve, kernel)
    n = curve.N
    t = curve.t
    nu = curve.normals
    tau = curve.tangents
    sp = curve.speeds
    diag = np.eye(n, dtype=bool)

    dx = _pair_displacements(kernel, curve.nodes, curve.nodes)
    dx[diag] = (0.25, 0.0)  # placeholder; diagonal blocks are overwritten
    dtm = t[:, None] - t[None, :]
    logsin = np.log(4.0 * np.sin(0.5 * dtm) ** 2, where=~diag,
                    out=np.zeros_like(dtm))
    kress = _kress_log_weights(n)
    spj = sp[None, :, None, None]
    trap = curve.dt
    a1, s1, s2 = kernel.slp_diagonal_constants()
    if kernel.is_torus:
        rem0, drem0 = kernel.torus_diagonal_corrections(nu)

    # single layer: log-product rule on the split kernel
    a_v = 0.5 * kernel.velocity_log_block(dx) * spj
    a_v[diag] = (0.5 * a1) * sp[:, None, None] * np.eye(2)
    b_v = kernel.velocity_block(dx) * spj - a_v * logsin[:, :, None, None]
    tau_dyad = tau[:, :, None] * tau[:, None, :]
    diag_v = ((a1 * np.log(sp) + s1)[:, None, None] * np.eye(2)
              + s2 * tau_dyad) * sp[:, None, None]
    if kernel.is_torus:
        diag_v = diag_v + rem0 * sp[:, None, None]
    b_v[diag] = diag_v
    v_mat = _stack_blocks(kress[:, :, None, None] * a_v + trap * b_v)

    # double layer trace: trapezoid, log residue through the same rule
    nuj = np.broadcast_to(nu[None, :, :], (n, n, 2))
    curv = np.sum(curve.second_derivatives * nu, axis=1) \
        / (2.0 * np.pi * sp ** 2)
    a_k = 0.5 * kernel.stress_log_block(dx, nuj) * spj
    a_k[diag] = 0.0
    b_k = kernel.stress_block(dx, nuj) * spj - a_k * logsin[:, :, None, None]
    diag_k = curv[:, None, None] * tau_dyad
    if kernel.is_torus:
        diag_k = diag_k + drem0
    b_k[diag] = diag_k * sp[:, None, None]
    k_mat = _stack_blocks(kress[:, :, None, None] * a_k + trap * b_k)

    # adjoint: reversed-argument stress kernel against the target normal
    nui = np.broadcast_to(nu[:, None, :], (n, n, 2))
    a_s = 0.5 * np.swapaxes(kernel.stress_log_block(-dx, nui), -1, -2) * spj
    a_s[diag] = 0.0
    b_s = np.swapaxes(kernel.stress_block(-dx, nui), -1, -2) * spj \
        - a_s * logsin[:, :, None, None]
    diag_s = curv[:, None, None] * tau_dyad
    if kernel.is_torus:
        diag_s = diag_s + np.swapaxes(drem0, -1, -2)
    b_s[diag] = diag_s * sp[:, None, None]
    kstar_mat = _stack_blocks(kress[:, :, None, None] * a_s + trap * b_s)

    delta, factors = _collar_parameters(curve)
    quadrature = {'rule': 'log-product + trapezoid',
                  'n_nodes': n,
                  'collar_delta': delta.tolist(),
                  'collar_steps': list(range(1, 9)),
                  'collar_upsample': factors}
    setup = _collar_setup(curve, quadrature)
    dplus_mat, dminus_mat = _collar_traction_pair(
        curve, kernel, 'double', setup)

    return LayerOperators(curve, kernel, v_mat, k_mat, kstar_mat,
                          dplus_mat, dminus_mat, quadrature)


# ----------------------------------------------------------------------
# off-curve field evaluation
# ----------------------------------------------------------------------

def _as_points(x):
    p = np.asarray(x, dtype=float)
    if p.ndim == 1:
        return p[None, :], True
    return p, False


class _LayerTerm:
    """Velocity/pressure/gradient of one layer representation."""

    def __init__(self, kind, field, kernel):
        self.kind = kind
        self.curve = field.curve
        self.kernel = kernel
        self.values = field.values
        self.h = self.curve.length / self.curve.N
        self._packs = {}

    def _pack(self, factor):
        if factor not in self._packs:
            if factor == 1:
                self._packs[1] = (self.curve, self.values)
            else:
                self._packs[factor] = (self.curve.resampled(factor),
                                       _resample_values(self.values, factor))
        return self._packs[factor]

    def _factors(self, points):
        ref, _ = self._pack(8)
        dmin = np.empty(points.shape[0])
        for k in range(points.shape[0]):
            d = _pair_displacements(self.kernel, points[k:k + 1], ref.nodes)
            dmin[k] = np.sqrt(np.min(np.sum(d * d, axis=-1)))
        if np.any(dmin < self.h):
            warnings.warn("evaluation within one node spacing of the "
                          "curve; accuracy degraded", RuntimeWarning)
        factors = np.where(dmin >= 4.0 * self.h, 1,
                           np.where(dmin >= 0.5 * self.h, 8, 64))
        return factors

    def _sum(self, points, contract):
        out = None
        factors = self._factors(points)
        for factor in (1, 8, 64):
            sel = factors == factor
            if not np.any(sel):
                continue
            cv, vals = self._pack(factor)
            dx = _pair_displacements(self.kernel, points[sel], cv.nodes)
            part = contract(dx, cv, vals * cv.weights[:, None])
            if out is None:
                out = np.zeros((points.shape[0],) + part.shape[1:])
            out[sel] = part
        return out

    def velocity(self, points):
        if self.kind == 'single':
            def contract(dx, cv, wv):
                return np.einsum('pmij,mj->pi',
                                 self.kernel.velocity_block(dx), wv)
        else:
            def contract(dx, cv, wv):
                nuq = np.broadcast_to(cv.normals[None], dx.shape)
                return np.einsum('pmij,mj->pi',
                                 self.kernel.stress_block(dx, nuq), wv)
        return self._sum(points, contract)

    def pressure(self, points):
        if self.kind == 'single':
            def contract(dx, cv, wv):
                return np.einsum('pmj,mj->p',
                                 self.kernel.pressure_block(dx), wv)
        else:
            def contract(dx, cv, wv):
                nuq = np.broadcast_to(cv.normals[None], dx.shape)
                return np.einsum('pmj,mj->p',
                                 self.kernel.dlp_pressure_block(dx, nuq), wv)
        return self._sum(points, contract)

    def velocity_gradient(self, points):
        if self.kind == 'single':
            def contract(dx, cv, wv):
                return np.einsum('pmaij,mj->pai',
                                 self.kernel.velocity_gradient_block(dx), wv)
        else:
            def contract(dx, cv, wv):
                nuq = np.broadcast_to(cv.normals[None], dx.shape)
                return np.einsum(
                    'pmaij,mj->pai',
                    self.kernel.stress_gradient_block(dx, nuq), wv)
        return self._sum(points, contract)


class FieldEvaluator:
    """Velocity/pressure evaluators for a layer or volume representation."""

    def __init__(self, tag, terms, density=None, curve=None, kernel=None):
        self.tag = tag
        self.terms = terms
        self.density = density
        self.curve = curve
        self.kernel = kernel

    def _accumulate(self, method, x):
        points, single = _as_points(x)
        out = None
        for coeff, term in self.terms:
            part = coeff * getattr(term, method)(points)
            out = part if out is None else out + part
        return out[0] if single else out

    def velocity(self, x):
        return self._accumulate('velocity', x)

    def pressure(self, x):
        return self._accumulate('pressure', x)

    def velocity_gradient(self, x):
        """d_a u_i as [..., a, i]."""
        return self._accumulate('velocity_gradient', x)

    def traction(self, x, normal):
        points, single = _as_points(x)
        nrm, _ = _as_points(normal)
        g = self._accumulate('velocity_gradient', points)
        p = self._accumulate('pressure', points)
        sym = g + np.swapaxes(g, -1, -2)
        out = np.einsum('pci,pc->pi', sym, nrm) - p[:, None] * nrm
        return out[0] if single else out


def single_layer_eval(psi, curve=None, kernel=None):
    curve = psi.curve if curve is None else curve
    if curve is not psi.curve:
        raise ValueError("density was sampled on a different curve")
    return FieldEvaluator('single', [(1.0, _LayerTerm('single', psi, kernel))],
                          density=psi, curve=curve, kernel=kernel)


def double_layer_eval(phi, curve=None, kernel=None):
    phi = require_flux_free(phi)
    curve = phi.curve if curve is None else curve
    if curve is not phi.curve:
        raise ValueError("density was sampled on a different curve")
    return FieldEvaluator('double', [(1.0, _LayerTerm('double', phi, kernel))],
                          density=phi, curve=curve, kernel=kernel)


def combine_evaluators(evaluators, coefficients=None):
    if coefficients is None:
        coefficients = np.ones(len(evaluators))
    terms = []
    for coeff, ev in zip(coefficients, evaluators):
        for inner, term in ev.terms:
            terms.append((coeff * inner, term))
    first = evaluators[0]
    return FieldEvaluator('combined', terms, density=None,
                          curve=first.curve, kernel=first.kernel)


# ----------------------------------------------------------------------
# jump-relation checks
# ----------------------------------------------------------------------

def conormal_jump_check(psi, ops):
    """Sup residual of the one-sided conormal relations for V psi.

    Compares collar-extrapolated tractions against the adjoint algebra
    (+-1/2 I + K*) psi and their difference against psi itself.
    """
    vec = psi.stacked() if hasattr(psi, 'stacked') else np.asarray(psi)
    t_plus_mat, t_minus_mat = ops.single_layer_conormal_matrices()
    t_plus = t_plus_mat @ vec
    t_minus = t_minus_mat @ vec
    ks = ops.Kstar_mat @ vec
    r_jump = np.max(np.abs(t_plus - t_minus - vec))
    r_plus = np.max(np.abs(t_plus - (0.5 * vec + ks)))
    r_minus = np.max(np.abs(t_minus - (-0.5 * vec + ks)))
    return float(max(r_jump, r_plus, r_minus))


def dlayer_conormal_difference(phi, ops):
    """D+ phi - D- phi; lies in the span of the normal field (null in
    free space)."""
    phi = require_flux_free(phi)
    diff = (ops.Dplus_mat - ops.Dminus_mat) @ phi.stacked()
    return BoundaryField.from_stacked(phi.curve, diff, s=phi.s)


# ----------------------------------------------------------------------
# exact rectangle moments of the leading singularities
# ----------------------------------------------------------------------

def _safe_atan(num, den):
    out = np.where(den == 0.0, 0.0, np.arctan(
        num / np.where(den == 0.0, 1.0, den)))
    return out


def _anti_log(u, v):
    # double antiderivative of ln sqrt(u^2 + v^2)
    r2 = u * u + v * v
    lg = np.log(np.where(r2 == 0.0, 1.0, r2))
    return (0.5 * u * v * lg + 0.5 * u * u * _safe_atan(v, u)
            + 0.5 * v * v * _safe_atan(u, v) - 1.5 * u * v)


def _anti_b1(u, v):
    # double antiderivative of u / (u^2 + v^2)
    r2 = u * u + v * v
    lg = np.log(np.where(r2 == 0.0, 1.0, r2))
    return 0.5 * v * lg + u * _safe_atan(v, u)


def _anti_uvv(u, v):
    # double antiderivative of u v^2 / (u^2 + v^2)^2
    return 0.5 * u * _safe_atan(v, u)


def _anti_vv(u, v):
    # double antiderivative of v^2 / (u^2 + v^2)
    return (0.5 * u * v - 0.5 * u * u * _safe_atan(v, u)
            + 0.5 * v * v * _safe_atan(u, v))


def _rect_moment(anti, d, hx, hy):
    u1, u2 = d[..., 0] - 0.5 * hx, d[..., 0] + 0.5 * hx
    v1, v2 = d[..., 1] - 0.5 * hy, d[..., 1] + 0.5 * hy
    return anti(u2, v2) - anti(u1, v2) - anti(u2, v1) + anti(u1, v1)


def _cell_log_moment(d, hx, hy):
    """Integral of ln|d - y| over one cell of displacements y."""
    return _rect_moment(_anti_log, d, hx, hy)


def _cell_inverse_moments(d, hx, hy):
    """Integrals of y_a/|y|^2 and y_a y_i y_j/|y|^4 over a displaced cell."""
    ib = np.stack([_rect_moment(_anti_b1, d, hx, hy),
                   _rect_moment(lambda u, v: _anti_b1(v, u), d, hx, hy)],
                  axis=-1)
    uvv = _rect_moment(_anti_uvv, d, hx, hy)
    uuv = _rect_moment(lambda u, v: _anti_uvv(v, u), d, hx, hy)
    ic = np.empty(d.shape[:-1] + (2, 2, 2))
    ic[..., 0, 0, 0] = ib[..., 0] - uvv
    ic[..., 1, 1, 1] = ib[..., 1] - uuv
    ic[..., 0, 0, 1] = ic[..., 0, 1, 0] = ic[..., 1, 0, 0] = uuv
    ic[..., 0, 1, 1] = ic[..., 1, 0, 1] = ic[..., 1, 1, 0] = uvv
    return ib, ic


# leading 1/r^2-scale coefficients shared by every planar family
_C_DF = -1.0 / (4.0 * np.pi)
_C_G = 1.0 / (4.0 * np.pi)
_C_DG = -1.0 / (2.0 * np.pi)


# ----------------------------------------------------------------------
# volume quadrature and the Newtonian potential
# ----------------------------------------------------------------------

class VolumeQuadrature:
    """Uniform midpoint grid over a box split by the curve.

    weights_plus carries the cell area on cells whose center lies inside
    the curve, weights_minus the rest; together they partition the box.
    With subsample > 1 the cells straddling the curve get fractional
    weights from a subsampled indicator instead of the all-or-nothing
    center test, which sharpens area-weighted integrals near the curve.
    """

    def __init__(self, curve, box=None, n=200, periodic=False, subsample=1):
        self.curve = curve
        self.periodic = bool(periodic)
        self.subsample = int(subsample)
        if box is None:
            if self.periodic:
                box = ((-0.5, 0.5), (-0.5, 0.5))
            else:
                lo = np.min(curve.nodes, axis=0)
                hi = np.max(curve.nodes, axis=0)
                pad = 0.35 * np.max(hi - lo)
                box = ((lo[0] - pad, hi[0] + pad), (lo[1] - pad, hi[1] + pad))
        self.box = box
        self.n = int(n)
        self.hx = (box[0][1] - box[0][0]) / self.n
        self.hy = (box[1][1] - box[1][0]) / self.n
        self.cell_area = self.hx * self.hy
        self.xs = box[0][0] + self.hx * (np.arange(self.n) + 0.5)
        self.ys = box[1][0] + self.hy * (np.arange(self.n) + 0.5)
        gx, gy = np.meshgrid(self.xs, self.ys, indexing='ij')
        self.nodes = np.column_stack([gx.ravel(), gy.ravel()])
        self.nodes_plus = self.nodes.copy()
        self.nodes_minus = self.nodes.copy()
        frac = self._classify()
        self.inside = frac >= 0.5
        self.weights_plus = self.cell_area * frac
        self.weights_minus = self.cell_area * (1.0 - frac)
        self.weights = np.full(self.nodes.shape[0], self.cell_area)
        self.area_plus = float(np.sum(self.weights_plus))
        self.area_minus = float(np.sum(self.weights_minus))
        self._tables = {}

    def _classify(self):
        from matplotlib.path import Path
        poly = Path(self.curve.resampled(8).nodes)
        frac = poly.contains_points(self.nodes).astype(float)
        if self.subsample <= 1:
            return frac
        # refine only the cells whose corner tests disagree
        s = self.subsample
        corners = self.nodes[:, None, :] + 0.5 * np.array(
            [[-self.hx, -self.hy], [self.hx, -self.hy],
             [-self.hx, self.hy], [self.hx, self.hy]])
        hits = poly.contains_points(
            corners.reshape(-1, 2)).reshape(-1, 4).sum(axis=1)
        mixed = np.flatnonzero((hits > 0) & (hits < 4))
        if mixed.size == 0:
            return frac
        off = (np.arange(s) + 0.5) / s - 0.5
        ox, oy = np.meshgrid(off * self.hx, off * self.hy, indexing='ij')
        sub = np.column_stack([ox.ravel(), oy.ravel()])
        pts = (self.nodes[mixed][:, None, :] + sub[None, :, :]).reshape(-1, 2)
        hit = poly.contains_points(pts).reshape(mixed.size, -1)
        frac[mixed] = hit.mean(axis=1)
        # per-side evaluation nodes for split cells: the centroid of the
        # cell fragment, pushed to a minimum clearance from the curve so
        # that layer fields stay evaluable there
        clear = 0.22 * min(self.hx, self.hy)
        refpts = self.curve.resampled(8).nodes
        seg_a = refpts
        seg_v = np.roll(refpts, -1, axis=0) - refpts
        seg_len2 = np.sum(seg_v * seg_v, axis=1) + 1e-300

        def curve_distance(p):
            t = np.clip(np.sum((p - seg_a) * seg_v, axis=1) / seg_len2,
                        0.0, 1.0)
            d = p - (seg_a + t[:, None] * seg_v)
            return float(np.sqrt(np.min(np.sum(d * d, axis=1))))

        subpts = self.nodes[mixed][:, None, :] + sub[None, :, :]
        for k, cell in enumerate(mixed):
            inpts = subpts[k][hit[k]]
            outpts = subpts[k][~hit[k]]
            if inpts.size == 0 or outpts.size == 0:
                continue
            cin = inpts.mean(axis=0)
            cout = outpts.mean(axis=0)
            gap = cin - cout
            unit = gap / (float(np.hypot(gap[0], gap[1])) + 1e-300)
            din = curve_distance(cin)
            dout = curve_distance(cout)
            self.nodes_plus[cell] = cin + max(0.0, clear - din) * unit
            self.nodes_minus[cell] = cout - max(0.0, clear - dout) * unit
        return frac

    # --- displacement-grid kernel tables for FFT convolution ---

    def _offset_grid(self):
        m = self.n if self.periodic else 2 * self.n
        ox = np.where(np.arange(m) < m // 2 + (m % 2),
                      np.arange(m), np.arange(m) - m)
        dx = np.empty((m, m, 2))
        dx[..., 0] = (ox * self.hx)[:, None]
        dx[..., 1] = (ox * self.hy)[None, :]
        near = (np.abs(ox)[:, None] <= 3) & (np.abs(ox)[None, :] <= 3)
        return dx, near

    def kernel_tables(self, kernel):
        """Per-offset velocity/pressure/gradient quadrature tables with
        exact moments of the leading singular parts on near cells."""
        key = (kernel.family, kernel.alpha, getattr(kernel, 'kmax', 0))
        if key in self._tables:
            return self._tables[key]
        d_grid, near = self._offset_grid()
        if self.periodic:
            d_grid = kernel.wrap(d_grid)
        zero = np.all(d_grid == 0.0, axis=-1)
        d_safe = np.where(zero[..., None], [[1.0, 0.0]], d_grid)
        area = self.cell_area
        r2 = np.sum(d_safe * d_safe, axis=-1)
        rr = np.sqrt(r2)
        lg = np.log(rr)
        a1, s1, s2 = kernel.slp_diagonal_constants()

        vel = kernel.velocity_block(d_safe) * area
        logc = kernel.velocity_log_block(d_safe)
        ia = _cell_log_moment(d_safe, self.hx, self.hy)
        nm = near & ~zero
        vel[nm] = (logc[nm] * ia[nm][..., None, None]
                   + area * (kernel.velocity_block(d_safe[nm])
                             - logc[nm] * lg[nm][..., None, None]))
        ia0 = _cell_log_moment(np.zeros(2), self.hx, self.hy)
        iv2 = _rect_moment(_anti_vv, np.zeros(2), self.hx, self.hy)
        self_vel = (a1 * ia0 + area * s1) * np.eye(2) \
            + s2 * np.diag([area - iv2, iv2])
        if kernel.is_torus:
            self_vel = self_vel + area * kernel.tables().remainder_velocity(
                np.zeros((1, 2)))[0]
        vel[zero] = self_vel

        ib, ic = _cell_inverse_moments(d_safe, self.hx, self.hy)
        pre = kernel.pressure_block(d_safe) * area
        lead_p = d_safe / (2.0 * np.pi * r2[..., None])
        pre[nm] = (ib[nm] / (2.0 * np.pi)
                   + area * (kernel.pressure_block(d_safe[nm]) - lead_p[nm]))
        self_pre = np.zeros(2)
        if kernel.is_torus:
            self_pre = area * kernel.tables().remainder_pressure(
                np.zeros((1, 2)))[0]
        pre[zero] = self_pre

        grad = kernel.velocity_gradient_block(d_safe) * area
        eye = np.eye(2)
        lead_g = (_C_DF * d_safe[..., :, None, None] * eye
                  + _C_G * (eye[:, :, None] * d_safe[..., None, None, :]
                            + d_safe[..., None, :, None] * eye[:, None, :])
                  + _C_DG * d_safe[..., :, None, None]
                  * d_safe[..., None, :, None] * d_safe[..., None, None, :]
                  / r2[..., None, None, None]) / r2[..., None, None, None]
        exact_g = (_C_DF * ib[..., :, None, None] * eye
                   + _C_G * (eye[:, :, None] * ib[..., None, None, :]
                             + ib[..., None, :, None] * eye[:, None, :])
                   + _C_DG * ic)
        grad[nm] = exact_g[nm] + area * (
            kernel.velocity_gradient_block(d_safe[nm]) - lead_g[nm])
        self_grad = np.zeros((2, 2, 2))
        if kernel.is_torus:
            self_grad = area * kernel.tables().remainder_velocity_gradient(
                np.zeros((1, 2)))[0]
        grad[zero] = self_grad

        self._tables[key] = {'vel': vel, 'pre': pre, 'grad': grad}
        return self._tables[key]

    def convolve(self, kernel, density):
        """Grid velocity, pressure, and velocity gradient of the Newtonian
        potential of a per-node vector density (cell masses divided by
        the cell area)."""
        tables = self.kernel_tables(kernel)
        n = self.n
        m = n if self.periodic else 2 * n
        f_hat = []
        for j in range(2):
            pad = np.zeros((m, m))
            pad[:n, :n] = density[:, j].reshape(n, n)
            f_hat.append(np.fft.rfft2(pad))

        def conv(table_comp, j):
            out = np.fft.irfft2(np.fft.rfft2(table_comp) * f_hat[j],
                                s=(m, m))
            return out[:n, :n]

        vel = np.zeros((n, n, 2))
        pres = np.zeros((n, n))
        grad = np.zeros((n, n, 2, 2))
        for j in range(2):
            pres += conv(tables['pre'][..., j], j)
            for i in range(2):
                vel[..., i] += conv(tables['vel'][..., i, j], j)
                for a in range(2):
                    grad[..., a, i] += conv(tables['grad'][..., a, i, j], j)
        return vel, pres, grad


class _NewtonTerm:
    """Grid-convolved Newtonian potential with spline interpolation."""

    def __init__(self, quad, values, kernel, weights):
        self.quad = quad
        self.kernel = kernel
        self.values = values
        self.masked = values * (weights / quad.cell_area)[:, None]
        self._fields = None
        self._splines = None

    def _ensure(self):
        if self._fields is None:
            self._fields = self.quad.convolve(self.kernel, self.masked)
        if self._splines is None:
            q = self.quad
            vel, pres, grad = self._fields
            if q.periodic:
                pad = 4
                xs = q.box[0][0] + q.hx * (np.arange(-pad, q.n + pad) + 0.5)
                ys = q.box[1][0] + q.hy * (np.arange(-pad, q.n + pad) + 0.5)

                def mk(z):
                    ext = np.pad(z, pad, mode='wrap')
                    return RectBivariateSpline(xs, ys, ext, kx=3, ky=3, s=0)
            else:
                def mk(z):
                    return RectBivariateSpline(q.xs, q.ys, z, kx=3, ky=3,
                                               s=0)
            self._splines = {
                'vel': [mk(vel[..., i]) for i in range(2)],
                'pre': mk(pres),
                'grad': [[mk(grad[..., a, i]) for i in range(2)]
                         for a in range(2)],
            }

    def grid_fields(self):
        self._ensure()
        return self._fields

    def _split(self, points):
        q = self.quad
        if q.periodic:
            return np.ones(points.shape[0], dtype=bool)
        inside = ((points[:, 0] >= q.xs[0]) & (points[:, 0] <= q.xs[-1])
                  & (points[:, 1] >= q.ys[0]) & (points[:, 1] <= q.ys[-1]))
        return inside

    def _far_blocks(self, points, block):
        src = self.quad.nodes
        dx = _pair_displacements(self.kernel, points, src)
        zero = np.all(dx == 0.0, axis=-1)
        dx = np.where(zero[..., None], [[1.0, 0.0]], dx)
        out = np.einsum('pm...j,mj->p...', block(dx),
                        self.masked * self.quad.cell_area)
        return out

    def _eval(self, points, kind):
        self._ensure()
        q = self.quad
        if q.periodic:
            lo = np.array([q.box[0][0], q.box[1][0]])
            points = lo + np.mod(points - lo, 1.0)
        inside = self._split(points)
        if kind == 'vel':
            out = np.zeros((points.shape[0], 2))
        elif kind == 'pre':
            out = np.zeros(points.shape[0])
        else:
            out = np.zeros((points.shape[0], 2, 2))
        if np.any(inside):
            px, py = points[inside, 0], points[inside, 1]
            if kind == 'vel':
                for i in range(2):
                    out[inside, i] = self._splines['vel'][i](px, py,
                                                            grid=False)
            elif kind == 'pre':
                out[inside] = self._splines['pre'](px, py, grid=False)
            else:
                for a in range(2):
                    for i in range(2):
                        out[inside, a, i] = \
                            self._splines['grad'][a][i](px, py, grid=False)
        rest = ~inside
        if np.any(rest):
            if kind == 'vel':
                out[rest] = self._far_blocks(points[rest],
                                             self.kernel.velocity_block)
            elif kind == 'pre':
                out[rest] = self._far_blocks(points[rest],
                                             self.kernel.pressure_block)
            else:
                out[rest] = self._far_blocks(
                    points[rest], self.kernel.velocity_gradient_block)
        return out

    def velocity(self, points):
        return self._eval(points, 'vel')

    def pressure(self, points):
        return self._eval(points, 'pre')

    def velocity_gradient(self, points):
        return self._eval(points, 'grad')


def newtonian_eval(forcing, quad, kernel, side='both'):
    """Newtonian velocity/pressure pair of a volume forcing.

    side selects the indicator weighting: the interior cells, the
    exterior cells, or their union (extension by zero outside the box).
    """
    if callable(forcing):
        values = np.array([forcing(p) for p in quad.nodes], dtype=float)
    else:
        values = np.asarray(forcing, dtype=float)
    if values.shape != (quad.nodes.shape[0], 2):
        raise ValueError("forcing grid mismatch: expected per-node "
                         "vector samples")
    weights = {'both': quad.weights, 'plus': quad.weights_plus,
               'minus': quad.weights_minus}[side]
    term = _NewtonTerm(quad, values, kernel, weights)
    return FieldEvaluator('newtonian', [(1.0, term)], density=values,
                          curve=quad.curve, kernel=kernel)
