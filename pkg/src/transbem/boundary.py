"""Closed-interface discretization: Nystrom nodes, normals, flux pairing,
discrete fractional Sobolev norms and the flux-free subspace.

The interface is a smooth closed curve splitting the model plane (or
torus chart) into an inner region and its complement.  All node data
live on the uniform parameter grid t_i = 2 pi i / N.
"""

import csv
import re

import numpy as np


class DegenerateParametrizationError(Exception):
    """Curve speed vanishes (or nearly vanishes) at a quadrature node."""


def _spectral_derivative(values, order=1):
    """Differentiate periodic samples (N, m) in the parameter via FFT."""
    n = values.shape[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    mult = (1j * k) ** order
    if order % 2 == 1 and n % 2 == 0:
        mult[n // 2] = 0.0  # odd derivative of the unmatched Nyquist mode
    out = np.empty_like(values)
    for c in range(values.shape[1]):
        out[:, c] = np.fft.ifft(mult * np.fft.fft(values[:, c])).real
    return out


class BoundaryCurve:
    """Closed parametrized interface sampled at N uniform parameter nodes.

    Normals are the rotated unit tangents (tau_y, -tau_x); for the
    counterclockwise presets this points outward from the inner region.
    The complement of the inner region is connected by construction for
    simple closed curves, recorded in `connected_complement`.
    """

    def __init__(self, parametrization, N, derivative=None):
        N = int(N)
        if N % 2 != 0 or N < 16:
            raise ValueError("node count must be even and at least 16")
        self.parametrization = parametrization
        self.derivative = derivative
        self.N = N
        self.t, self.dt = np.linspace(0.0, 2.0 * np.pi, N, endpoint=False,
                                      retstep=True)
        self.nodes = np.array([parametrization(ti) for ti in self.t],
                              dtype=float)
        if self.nodes.shape != (N, 2):
            raise ValueError("parametrization must map to the plane")
        if derivative is not None:
            self.tangents_raw = np.array([derivative(ti) for ti in self.t],
                                         dtype=float)
        else:
            self.tangents_raw = _spectral_derivative(self.nodes)
        self.speeds = np.linalg.norm(self.tangents_raw, axis=1)
        if self.speeds.min() < 1e-12 * max(1.0, self.speeds.max()):
            raise DegenerateParametrizationError(
                "vanishing speed at node %d" % int(np.argmin(self.speeds)))
        self.tangents = self.tangents_raw / self.speeds[:, None]
        self.normals = np.column_stack([self.tangents[:, 1],
                                        -self.tangents[:, 0]])
        self.second_derivatives = _spectral_derivative(self.tangents_raw)
        self.weights = self.dt * self.speeds
        self.length = float(self.weights.sum())
        self.signed_area = 0.5 * self.dt * float(
            np.sum(self.nodes[:, 0] * self.tangents_raw[:, 1]
                   - self.nodes[:, 1] * self.tangents_raw[:, 0]))
        self.connected_complement = True

    def resampled(self, factor):
        """Same curve re-sampled at factor * N nodes (exact, via the
        parametrization, not by interpolation)."""
        if factor == 1:
            return self
        return BoundaryCurve(self.parametrization, self.N * int(factor),
                             derivative=self.derivative)

    def min_separation(self):
        """Smallest pairwise node distance over index distance >= 2."""
        d = self.nodes[:, None, :] - self.nodes[None, :, :]
        dist = np.sqrt((d ** 2).sum(-1))
        idx = np.arange(self.N)
        gap = np.abs(idx[:, None] - idx[None, :])
        gap = np.minimum(gap, self.N - gap)
        return float(dist[gap >= 2].min())

    def point_at(self, ti):
        return np.asarray(self.parametrization(ti), dtype=float)


def build_curve(parametrization, N, derivative=None):
    """Build the trapezoidal Nystrom grid for a closed curve."""
    return BoundaryCurve(parametrization, N, derivative=derivative)


# ----------------------------------------------------------------------
# presets, addressable by config name
# ----------------------------------------------------------------------

def _circle():
    return (lambda t: np.array([np.cos(t), np.sin(t)]),
            lambda t: np.array([-np.sin(t), np.cos(t)]))


def _ellipse(a, b):
    return (lambda t: np.array([a * np.cos(t), b * np.sin(t)]),
            lambda t: np.array([-a * np.sin(t), b * np.cos(t)]))


def _kite():
    x = lambda t: np.array([np.cos(t) + 0.65 * np.cos(2 * t) - 0.65,
                            1.5 * np.sin(t)])
    dx = lambda t: np.array([-np.sin(t) - 1.3 * np.sin(2 * t),
                             1.5 * np.cos(t)])
    return x, dx


def _star(k, eps):
    k = int(k)
    r = lambda t: 1.0 + eps * np.cos(k * t)
    dr = lambda t: -eps * k * np.sin(k * t)
    x = lambda t: np.array([r(t) * np.cos(t), r(t) * np.sin(t)])
    dx = lambda t: np.array([dr(t) * np.cos(t) - r(t) * np.sin(t),
                             dr(t) * np.sin(t) + r(t) * np.cos(t)])
    return x, dx


_PRESET_RE = re.compile(r'^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$')


def preset_curve(name, N, center=None, scale=1.0):
    """Curve preset by config string: circle, ellipse(a,b), kite,
    star(k,eps).  Optional center shift and uniform scale."""
    m = _PRESET_RE.match(name)
    if not m:
        raise ValueError("unparseable curve preset %r" % (name,))
    kind, args = m.group(1), m.group(2)
    args = [float(a) for a in args.split(',')] if args else []
    if kind == 'circle':
        x, dx = _circle()
    elif kind == 'ellipse':
        if len(args) != 2:
            raise ValueError("ellipse takes two semi-axes")
        x, dx = _ellipse(*args)
    elif kind == 'kite':
        x, dx = _kite()
    elif kind == 'star':
        if len(args) != 2:
            raise ValueError("star takes arm count and amplitude")
        x, dx = _star(*args)
    else:
        raise ValueError("unknown curve preset %r" % (kind,))
    if center is not None or scale != 1.0:
        c = np.zeros(2) if center is None else np.asarray(center, dtype=float)
        x0, dx0 = x, dx
        x = lambda t: c + scale * x0(t)
        dx = lambda t: scale * dx0(t)
    return build_curve(x, N, derivative=dx)


# ----------------------------------------------------------------------
# boundary fields
# ----------------------------------------------------------------------

class BoundaryField:
    """Density samples (N, m) on a curve, with smoothness index s."""

    def __init__(self, curve, values, s=0.5):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != curve.N:
            raise ValueError("field length does not match curve node count")
        if values.ndim == 1:
            values = values[:, None]
        self.curve = curve
        self.values = values
        self.s = float(s)

    @classmethod
    def from_function(cls, curve, fn, s=0.5):
        return cls(curve, np.array([fn(p) for p in curve.nodes], dtype=float),
                   s=s)

    @classmethod
    def from_parameter(cls, curve, fn, s=0.5):
        """Build from a function of the curve parameter t."""
        return cls(curve, np.array([fn(t) for t in curve.t], dtype=float),
                   s=s)

    @classmethod
    def from_stacked(cls, curve, vec, s=0.5):
        vec = np.asarray(vec, dtype=float)
        m = vec.size // curve.N
        return cls(curve, vec.reshape(m, curve.N).T, s=s)

    def stacked(self):
        """Component-blocked vector (all first components, then all second)."""
        return self.values.T.reshape(-1)

    def copy(self):
        return BoundaryField(self.curve, self.values.copy(), s=self.s)


class FluxFreeField(BoundaryField):
    """Boundary field with certified (near-)zero flux through the curve."""

    def __init__(self, curve, values, s=0.5):
        super().__init__(curve, values, s=s)
        self.flux_value = flux(self)


def flux(phi, curve=None):
    """Trapezoidal quadrature of <phi, nu> |x'| dt over the curve."""
    curve = phi.curve if curve is None else curve
    return float(np.sum(np.sum(phi.values * curve.normals, axis=1)
                        * curve.weights))


def project_flux_free(phi):
    """Remove the normal-flux component: phi - (flux(phi)/flux(nu)) nu."""
    curve = phi.curve
    nu_flux = float(np.sum(curve.weights))  # <nu, nu> |x'| dt = length
    values = phi.values - (flux(phi) / nu_flux) * curve.normals
    return FluxFreeField(curve, values, s=phi.s)


def require_flux_free(phi, rtol=1e-8):
    """Pass through flux-free inputs, reject the rest."""
    if isinstance(phi, FluxFreeField):
        return phi
    scale = np.max(np.abs(phi.values)) * phi.curve.length + 1e-300
    if abs(flux(phi)) > rtol * scale:
        raise ValueError("density has nonzero flux %.3e" % flux(phi))
    return FluxFreeField(phi.curve, phi.values, s=phi.s)


def sobolev_norm(phi, s=None):
    """Discrete fractional Sobolev norm in the curve parameter.

    Componentwise DFT coefficients phi_hat_k (with 1/N normalization,
    so a single mode e^{ikt} has norm (1+k^2)^{s/2}); the squared norm
    is the sum over components and modes of (1+k^2)^s |phi_hat_k|^2.
    """
    s = phi.s if s is None else float(s)
    if not -1.0 <= s <= 1.0:
        raise ValueError("s must lie in [-1, 1]")
    n = phi.values.shape[0]
    if n % 2 != 0:
        raise ValueError("odd-length grids are not supported")
    k = np.fft.fftfreq(n, 1.0 / n)
    weight = (1.0 + k * k) ** s
    total = 0.0
    for c in range(phi.values.shape[1]):
        coeff = np.fft.fft(phi.values[:, c]) / n
        total += float(np.sum(weight * np.abs(coeff) ** 2))
    return float(np.sqrt(total))


# ----------------------------------------------------------------------
# field CSV I/O: rows of (t_i, components)
# ----------------------------------------------------------------------

def field_to_csv(phi, path):
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        m = phi.values.shape[1]
        writer.writerow(['t'] + ['v%d' % c for c in range(m)])
        for ti, row in zip(phi.curve.t, phi.values):
            writer.writerow(['%.17g' % ti] + ['%.17g' % v for v in row])


def field_from_csv(path, curve, s=0.5):
    with open(path, newline='') as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=float)
    if data.shape[0] != curve.N:
        raise ValueError("CSV row count %d does not match curve N=%d"
                         % (data.shape[0], curve.N))
    if np.max(np.abs(data[:, 0] - curve.t)) > 1e-12:
        raise ValueError("CSV parameter grid does not match curve nodes")
    return BoundaryField(curve, data[:, 1:], s=s)
