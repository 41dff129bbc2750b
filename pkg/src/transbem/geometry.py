"""Local-coordinate differential geometry on metric charts.

Christoffel symbols, covariant derivatives, Lie brackets, deformation
tensors, Killing residuals and the convection term, all evaluated
pointwise on a single coordinate patch with a user-supplied metric.
"""

import numpy as np


class DegenerateMetricError(Exception):
    """Metric tensor is singular (or numerically indefinite) at a point."""


# ----------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------

# 4th-order central stencil; the default step suits unit-scaled charts.
_FD_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_FD_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
DEFAULT_FD_STEP = 1e-4


def _fd_directional(func, p, i, h):
    """4th-order central difference of func along coordinate i at p."""
    p = np.asarray(p, dtype=float)
    acc = None
    for off, wgt in zip(_FD_OFFSETS, _FD_WEIGHTS):
        q = p.copy()
        q[i] += off * h
        val = wgt * np.asarray(func(q), dtype=float)
        acc = val if acc is None else acc + val
    return acc / h


class MetricChart:
    """A single coordinate patch with a smooth Riemannian metric.

    Parameters:
    dimension: 2 or 3
    metric: callable point -> (m, m) array g_jk, symmetric positive definite
    metric_inverse: optional callable for g^jk (default: numerical inverse)
    sqrt_det: optional callable for sqrt(det g)
    metric_derivatives: optional callable point -> (m, m, m) array with
        entry [i, j, k] = d_i g_jk; default is a 4th-order central
        finite difference of `metric` with step `fd_step`
    box: optional validity box as (lo, hi) arrays
    """

    def __init__(self, dimension, metric, metric_inverse=None, sqrt_det=None,
                 metric_derivatives=None, box=None, fd_step=DEFAULT_FD_STEP):
        if dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        self.dimension = dimension
        self._metric = metric
        self._metric_inverse = metric_inverse
        self._sqrt_det = sqrt_det
        self._metric_derivatives = metric_derivatives
        self.box = None if box is None else (np.asarray(box[0], dtype=float),
                                             np.asarray(box[1], dtype=float))
        self.fd_step = float(fd_step)

    def contains(self, p):
        if self.box is None:
            return True
        lo, hi = self.box
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def metric(self, p):
        g = np.asarray(self._metric(np.asarray(p, dtype=float)), dtype=float)
        if g.shape != (self.dimension, self.dimension):
            raise ValueError("metric evaluator returned wrong shape %s" % (g.shape,))
        return g

    def metric_inverse(self, p):
        if self._metric_inverse is not None:
            return np.asarray(self._metric_inverse(np.asarray(p, dtype=float)),
                              dtype=float)
        g = self.metric(p)
        # reject indefinite or singular metrics before inverting
        eigs = np.linalg.eigvalsh(0.5 * (g + g.T))
        if eigs.min() <= 1e-14 * max(1.0, eigs.max()):
            raise DegenerateMetricError(
                "metric not positive definite at %s (min eig %.3e)"
                % (np.asarray(p), eigs.min()))
        return np.linalg.inv(g)

    def sqrt_det(self, p):
        if self._sqrt_det is not None:
            return float(self._sqrt_det(np.asarray(p, dtype=float)))
        det = np.linalg.det(self.metric(p))
        if det <= 0.0:
            raise DegenerateMetricError("nonpositive metric determinant at %s"
                                        % (np.asarray(p),))
        return float(np.sqrt(det))

    def metric_derivatives(self, p):
        """(m, m, m) array with entry [i, j, k] = d_i g_jk."""
        if self._metric_derivatives is not None:
            return np.asarray(self._metric_derivatives(np.asarray(p, dtype=float)),
                              dtype=float)
        m = self.dimension
        out = np.empty((m, m, m))
        for i in range(m):
            out[i] = _fd_directional(self.metric, p, i, self.fd_step)
        return out


class VectorField:
    """Contravariant vector field v^k given by a components evaluator.

    An analytic Jacobian (callable point -> (m, m) array with entry
    [j, k] = d_j v^k) may be supplied; otherwise finite differences
    of the components are used.
    """

    def __init__(self, components, jacobian=None, fd_step=DEFAULT_FD_STEP):
        self._components = components
        self._jacobian = jacobian
        self.fd_step = float(fd_step)

    def __call__(self, p):
        return np.asarray(self._components(np.asarray(p, dtype=float)),
                          dtype=float)

    def jacobian(self, p):
        """(m, m) array with entry [j, k] = d_j v^k."""
        if self._jacobian is not None:
            return np.asarray(self._jacobian(np.asarray(p, dtype=float)),
                              dtype=float)
        p = np.asarray(p, dtype=float)
        m = p.size
        out = np.empty((m, m))
        for j in range(m):
            out[j] = _fd_directional(self, p, j, self.fd_step)
        return out


class ChristoffelTable:
    """Christoffel symbols at one point; values[k, l, j] = Gamma^k_lj."""

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise ValueError("expected a cubic (m, m, m) array")
        self.values = values

    @property
    def dimension(self):
        return self.values.shape[0]

    def lower_symmetry_defect(self):
        return float(np.max(np.abs(self.values - self.values.transpose(0, 2, 1))))


class SymTensor2:
    """Symmetric rank-2 tensor at a point, with a role marker."""

    ROLES = ("deformation", "metric-perturbation")

    def __init__(self, values, role="deformation"):
        values = np.asarray(values, dtype=float)
        if role not in self.ROLES:
            raise ValueError("unknown role %r" % (role,))
        if not np.array_equal(values, values.T):
            raise ValueError("values must be exactly symmetric")
        self.values = values
        self.role = role


# ----------------------------------------------------------------------
# pointwise operators
# ----------------------------------------------------------------------

def christoffel(chart, p):
    """Christoffel symbols of the second kind at p.

    Gamma^k_lj = 1/2 g^kr (d_j g_rl + d_l g_rj - d_r g_lj), returned as
    a ChristoffelTable with values[k, l, j].
    """
    ginv = chart.metric_inverse(p)
    dg = chart.metric_derivatives(p)
    # dg[i, j, k] = d_i g_jk
    term = np.einsum('jrl->rlj', dg) + np.einsum('lrj->rlj', dg) \
        - np.einsum('rlj->rlj', dg)
    gamma = 0.5 * np.einsum('kr,rlj->klj', ginv, term)
    # enforce exact lower-pair symmetry even when the metric evaluator
    # is symmetric only to rounding
    return ChristoffelTable(0.5 * (gamma + gamma.transpose(0, 2, 1)))


def covariant_derivative(chart, X, Y, p):
    """(nabla_Y X)^k = Y^i (d_i X^k + X^j Gamma^k_ij) at p."""
    gamma = christoffel(chart, p).values
    Xv = X(p)
    Yv = Y(p)
    JX = X.jacobian(p)
    return np.einsum('i,ik->k', Yv, JX) \
        + np.einsum('i,j,kij->k', Yv, Xv, gamma)


def lie_bracket(X, Y, p):
    """[X, Y]^k = X^j d_j Y^k - Y^j d_j X^k at p (chart independent)."""
    Xv, Yv = X(p), Y(p)
    JX, JY = X.jacobian(p), Y.jacobian(p)
    return np.einsum('j,jk->k', Xv, JY) - np.einsum('j,jk->k', Yv, JX)


def _covariant_lowered_gradient(chart, X, p):
    """Matrix cov[j, l] = X_{j;l} = d_l X_j - Gamma^k_jl X_k."""
    g = chart.metric(p)
    dg = chart.metric_derivatives(p)
    gamma = christoffel(chart, p).values
    Xv = X(p)
    JX = X.jacobian(p)
    Xlow = g @ Xv
    # d_l X_j by the product rule on X_j = g_jk X^k
    dXlow = np.einsum('ljk,k->lj', dg, Xv) + np.einsum('lk,jk->lj', JX, g)
    return dXlow.T - np.einsum('kjl,k->jl', gamma, Xlow)


def deformation(chart, X, p):
    """Deformation tensor (Def X)_jl = 1/2 (X_{j;l} + X_{l;j}) at p."""
    cov = _covariant_lowered_gradient(chart, X, p)
    return SymTensor2(0.5 * (cov + cov.T), role="deformation")


def killing_residual(chart, X, sample):
    """Max over sample points and indices of |X_{j;l} + X_{l;j}|.

    Zero exactly when X generates isometries of the chart metric on the
    sampled set.
    """
    sample = list(sample)
    if not sample:
        raise ValueError("sample set must be nonempty")
    worst = 0.0
    for p in sample:
        cov = _covariant_lowered_gradient(chart, X, p)
        worst = max(worst, float(np.max(np.abs(cov + cov.T))))
    return worst


def convection(chart, u, p):
    """Self-transport term (nabla_u u)^l = u^j d_j u^l + Gamma^l_rj u^r u^j."""
    gamma = christoffel(chart, p).values
    uv = u(p)
    Ju = u.jacobian(p)
    return np.einsum('j,jl->l', uv, Ju) + np.einsum('lrj,r,j->l', gamma, uv, uv)


def flat_chart(dimension=2, box=None):
    """Chart with the identity metric; all Christoffel symbols vanish."""
    eye = np.eye(dimension)
    zeros = np.zeros((dimension, dimension, dimension))
    return MetricChart(dimension,
                       metric=lambda p: eye,
                       metric_inverse=lambda p: eye,
                       sqrt_det=lambda p: 1.0,
                       metric_derivatives=lambda p: zeros,
                       box=box)
