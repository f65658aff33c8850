"""Closed-form geometric quantities of a Calabi-symmetric metric.

For u the potential and n the complex dimension,

    v         = n rho - (n-1) log u' - log u''        (Ricci potential)
    Ric/g     = diag(v'/u' x (n-1), v''/u'')          (relative eigenvalues)
    R         = -u''''/u''^2 + u'''^2/u''^3 - 2(n-1) u'''/(u' u'')
                - (n-1)(n-2) u''/u'^2 + n(n-1)/u'
    d(rho)    = 1/2 int_{-inf}^{rho} sqrt(u'') ds     (distance to E)
    Vol(rho)  = int (u')^{n-1} u'' ds = ((u')^n - a^n)/n   (tube volume, C(n)=1)

Everything involving u'''/u'' or u''''/u'' is computed through the
logarithmic tables of the profile module: the raw quotients cancel
catastrophically near the grid ends where u'' ~ e^{-L}.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import DomainError, InvalidProfileError, ParameterError, RangeError
from .numerics import cumulative_simpson
from .profile import CalabiProfile


def _require_positive_slopes(p: CalabiProfile) -> None:
    if np.any(p.u1 <= 0.0):
        raise InvalidProfileError("u' <= 0 somewhere on the grid")


def ricci_potential(p: CalabiProfile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(v, v', v'') on the grid.

    v is evaluated as (n-1) rho + 2 log(1+e^rho) - (n-1) log u' - log(u''/sigma')
    so the n rho and log u'' divergences cancel analytically at the ends; v' and
    v'' come from the same stencil tables as every other derivative.
    """
    _require_positive_slopes(p)
    n = p.n
    u1, u2 = p.u1, p.u2
    w = p.log_u2_derivatives  # raises on u'' <= 0
    q = np.log(p.u2_ratio)
    log1pexp = np.logaddexp(0.0, p.rho)
    v = (n - 1) * p.rho + 2.0 * log1pexp - (n - 1) * np.log(u1) - q
    r21 = u2 / u1
    v1 = n - (n - 1) * r21 - w[1]
    v2 = -(n - 1) * r21 * (w[1] - r21) - w[2]
    return v, v1, v2


def ricci_eigenvalues(p: CalabiProfile) -> tuple[np.ndarray, np.ndarray]:
    """Relative Ricci eigenvalues (v'/u' with multiplicity n-1, v''/u'')."""
    _, v1, v2 = ricci_potential(p)
    return v1 / p.u1, v2 / p.u2


def scalar_curvature(p: CalabiProfile) -> np.ndarray:
    """Scalar curvature on the grid (trace of the relative Ricci eigenvalues)."""
    _require_positive_slopes(p)
    n = p.n
    u1, u2 = p.u1, p.u2
    w = p.log_u2_derivatives
    return (-w[2] / u2 - 2.0 * (n - 1) * w[1] / u1
            - (n - 1) * (n - 2) * u2 / u1 ** 2 + n * (n - 1) / u1)


class DistanceMap:
    """Monotone map rho -> d(rho) = distance to the exceptional divisor.

    Composite Simpson of sqrt(u'') over [-L, rho], halved, plus the exact tail
    of the fitted left asymptote u'' ~ c e^rho: the tail contributes
    sqrt(c) e^{-L/2} = sqrt(u''(-L)).
    """

    def __init__(self, p: CalabiProfile):
        u2 = p.u2
        if np.any(u2 <= 0.0):
            raise InvalidProfileError("u'' <= 0 somewhere on the grid")
        self.L = p.L
        tail = float(np.sqrt(u2[0]))
        self.values = tail + 0.5 * cumulative_simpson(np.sqrt(u2), p.h)
        self._interp = PchipInterpolator(p.rho, self.values)

    def __call__(self, rho: float) -> float:
        if not (-self.L - 1e-12 <= rho <= self.L + 1e-12):
            raise DomainError(f"rho outside [-{self.L}, {self.L}]")
        return float(self._interp(np.clip(rho, -self.L, self.L)))

    @property
    def max(self) -> float:
        return float(self.values[-1])

    def inverse(self, r_tube: float, rel_tol: float = 1e-10) -> float:
        if not (0.0 < r_tube < self.max):
            raise RangeError(
                f"tube radius {r_tube} outside reachable range (0, {self.max})")
        lo, hi = -self.L, self.L
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = float(self._interp(mid))
            if abs(val - r_tube) <= rel_tol * r_tube:
                return mid
            if val < r_tube:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def distance_to_E(p: CalabiProfile, rho: float) -> float:
    """Distance from the sphere {log|z| = rho} to the exceptional divisor."""
    return DistanceMap(p)(rho)


def tube_radius_to_rho(p: CalabiProfile, r_tube: float) -> float:
    """rho_R with d(rho_R) = R, by monotone bisection to 1e-10 relative."""
    return DistanceMap(p).inverse(r_tube)


@dataclass(frozen=True)
class VolumeIdentity:
    """Tube volume two ways: quadrature and the exact antiderivative."""

    quadrature: float
    closed_form: float
    difference: float


def tube_volume(p: CalabiProfile, rho_R: float) -> VolumeIdentity:
    """Volume of the tube {rho <= rho_R}, normalized with C(n) = 1.

    Quadrature of (u')^{n-1} u'' from -L against the closed form
    ((u'(rho_R))^n - a^n)/n; their difference bundles the quadrature error
    with the genuine (exponentially small) left-tail truncation.
    """
    if not (-p.L - 1e-12 <= rho_R <= p.L + 1e-12):
        raise DomainError(f"rho_R outside [-{p.L}, {p.L}]")
    integrand = p.u1 ** (p.n - 1) * p.u2
    cum = cumulative_simpson(integrand, p.h)
    quad = float(PchipInterpolator(p.rho, cum)(np.clip(rho_R, -p.L, p.L)))
    from .profile import interpolate
    _, u1_at, _ = interpolate(p, rho_R)
    closed = (u1_at ** p.n - p.klass.a ** p.n) / p.n
    return VolumeIdentity(quad, closed, abs(quad - closed))


def invariant_function_calculus(p: CalabiProfile, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared gradient norm and Laplacian of invariant samples f(rho).

    gradsq = f'^2/u'' and laplacian = (n-1) f'/u' + f''/u'' with the module's
    stencils; `gradsq` is the squared norm (see module naming note).
    """
    if len(f) != p.N:
        raise ParameterError("f must be sampled on the profile grid")
    f1 = p._dmat(1) @ f
    f2 = p._dmat(2) @ f
    gradsq = f1 ** 2 / p.u2
    laplacian = (p.n - 1) * f1 / p.u1 + f2 / p.u2
    return gradsq, laplacian


def vector_field_diagnostics(p: CalabiProfile, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Diagnostics of the radial holomorphic field under the 1/tau rescaling.

    Vsq = u''/tau (squared norm), gradVsq = (n-1)(u''/u')^2 + (u'''/u'')^2,
    energy = (n-1) tau / u' (energy density of the bundle projection).
    """
    if tau <= 0.0:
        raise ParameterError(f"tau must be positive, got {tau}")
    w1 = p.log_u2_derivatives[1]
    vsq = p.u2 / tau
    gradvsq = (p.n - 1) * (p.u2 / p.u1) ** 2 + w1 ** 2
    energy = (p.n - 1) * tau / p.u1
    return vsq, gradvsq, energy


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    """Per-node geometric diagnostics of one profile at rescale factor tau."""

    rho: np.ndarray
    v: np.ndarray
    R: np.ndarray
    lam_base: np.ndarray
    lam_fiber: np.ndarray
    Vsq: np.ndarray
    gradVsq: np.ndarray
    energy: np.ndarray
    sup_abs_R: float
    sup_abs_eig: float


def build_diagnostics(p: CalabiProfile, tau: float) -> DiagnosticsReport:
    v, _, _ = ricci_potential(p)
    R = scalar_curvature(p)
    lam_base, lam_fiber = ricci_eigenvalues(p)
    vsq, gradvsq, energy = vector_field_diagnostics(p, tau)
    return DiagnosticsReport(
        rho=p.rho, v=v, R=R, lam_base=lam_base, lam_fiber=lam_fiber,
        Vsq=vsq, gradVsq=gradvsq, energy=energy,
        sup_abs_R=float(np.max(np.abs(R))),
        sup_abs_eig=float(max(np.max(np.abs(lam_base)), np.max(np.abs(lam_fiber)))),
    )


def write_diagnostics_csv(report: DiagnosticsReport, path, metadata: dict | None = None) -> None:
    from .profile import _fmt
    lines = ["# calabiflow diagnostics v1"]
    for k, v in (metadata or {}).items():
        lines.append(f"# {k}={_fmt(v) if isinstance(v, float) else v}")
    lines.append(f"# sup_abs_R={_fmt(report.sup_abs_R)}")
    lines.append(f"# sup_abs_eig={_fmt(report.sup_abs_eig)}")
    lines.append("rho,v,R,lam_base,lam_fiber,Vsq,gradVsq,energy")
    cols = (report.rho, report.v, report.R, report.lam_base, report.lam_fiber,
            report.Vsq, report.gradVsq, report.energy)
    for i in range(len(report.rho)):
        lines.append(",".join(_fmt(c[i]) for c in cols))
    from pathlib import Path
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
