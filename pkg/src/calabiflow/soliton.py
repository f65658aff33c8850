"""The shrinking-soliton ODE family in slope coordinates.

Writing phi = u' and u'' = F(phi), the self-similar profile solves

    F' + ((n-1)/phi - mu) F - (n - phi) = 0,

with the closed-form solution

    F(phi) = nu e^{mu phi}/phi^{n-1} + phi/mu
             - (mu-1)/mu^{n+1} * sum_{j=0}^{n-1} (n!/j!) mu^j phi^{j+1-n}.

Regularity at the zero section forces phi -> n-1 as rho -> -inf, so a = n-1
is a zero of F; with nu = 0 that pins mu to the positive root of the
resulting algebraic condition. The canonical member (mu = mu(n) > 0, nu = 0)
is the unique complete shrinking profile; other parameter choices produce the
classification witnesses (bounded volume, second zeros, or finite-distance
incompleteness).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad, solve_ivp

from .errors import (NumericalInconsistencyError, ParameterError, ParameterRegimeError,
                     RangeError, RootNotFoundError)
from .numerics import bisect_root, cumulative_simpson, scan_sign_changes

EXP_ARG_LIMIT = 500.0


@dataclass(frozen=True)
class SolitonParams:
    """(n, mu, nu) with the left zero a = n-1 of the canonical family."""

    n: int
    mu: float
    nu: float = 0.0

    def __post_init__(self):
        if self.n < 2:
            raise ParameterError(f"need n >= 2, got {self.n}")
        if self.mu == 0.0:
            raise ParameterError(
                "mu = 0 is refused: the profile would be Kahler-Einstein, "
                "which has bounded diameter and cannot arise as this limit")

    @property
    def a(self) -> float:
        return float(self.n - 1)


def _sum_coefficients(n: int) -> np.ndarray:
    # c_j = n!/j!, j = 0..n-1
    return np.array([math.factorial(n) / math.factorial(j) for j in range(n)])


def _polyval_desc(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Horner evaluation of sum_j c_j x^j from the highest power down."""
    acc = np.zeros_like(np.asarray(x, dtype=float))
    for c in coeffs[::-1]:
        acc = acc * x + c
    return acc


def _check_exp_range(params: SolitonParams, phi: np.ndarray) -> None:
    if params.nu != 0.0 and np.any(params.mu * np.asarray(phi) > EXP_ARG_LIMIT):
        raise RangeError(
            f"mu*phi > {EXP_ARG_LIMIT} with nu != 0 overflows the e^(mu phi) term")


def F_closed_form(phi, params: SolitonParams):
    """F(phi) for phi > 0; scalar in, scalar out (arrays likewise)."""
    scalar = np.ndim(phi) == 0
    phi_arr = np.atleast_1d(np.asarray(phi, dtype=float))
    if np.any(phi_arr <= 0.0):
        raise ParameterError("F(phi) needs phi > 0")
    _check_exp_range(params, phi_arr)
    n, mu, nu = params.n, params.mu, params.nu
    x = mu * phi_arr
    s = phi_arr ** (1 - n) * _polyval_desc(_sum_coefficients(n), x)
    out = phi_arr / mu - (mu - 1.0) / mu ** (n + 1) * s
    if nu != 0.0:
        out = out + nu * np.exp(mu * phi_arr) * phi_arr ** (1 - n)
    return float(out[0]) if scalar else out


def F_derivatives(phi, params: SolitonParams):
    """(F, dF/dphi, d2F/dphi2) by direct differentiation of the closed form."""
    scalar = np.ndim(phi) == 0
    p = np.atleast_1d(np.asarray(phi, dtype=float))
    if np.any(p <= 0.0):
        raise ParameterError("F(phi) needs phi > 0")
    _check_exp_range(params, p)
    n, mu, nu = params.n, params.mu, params.nu
    c = _sum_coefficients(n)
    j = np.arange(n)
    x = mu * p
    # S = sum c_j mu^j phi^{j+1-n} and its two phi-derivatives
    S = p ** (1 - n) * _polyval_desc(c, x)
    S1 = p ** (-n) * _polyval_desc(c * (j + 1 - n), x)
    S2 = p ** (-n - 1) * _polyval_desc(c * (j + 1 - n) * (j - n), x)
    k = (mu - 1.0) / mu ** (n + 1)
    F = p / mu - k * S
    F1 = 1.0 / mu - k * S1
    F2 = -k * S2
    if nu != 0.0:
        E = nu * np.exp(mu * p) * p ** (1 - n)
        E1 = E * (mu + (1 - n) / p)
        E2 = E1 * (mu + (1 - n) / p) + E * (n - 1) / p ** 2
        F, F1, F2 = F + E, F1 + E1, F2 + E2
    if scalar:
        return float(F[0]), float(F1[0]), float(F2[0])
    return F, F1, F2


def mu_condition(mu: float, n: int) -> float:
    """Scaled root function: mu^{n+1} F(a; mu, nu=0), a polynomial in mu."""
    a = float(n - 1)
    c = _sum_coefficients(n)
    x = mu * a
    s = a ** (1 - n) * _polyval_desc(c, x)
    return a * mu ** n - (mu - 1.0) * s


def solve_mu(n: int, rel_tol: float = 1e-12) -> float:
    """Positive root of the a = n-1 regularity condition (nu = 0).

    Brackets on (1e-6, mu_hi) with mu_hi grown geometrically, bisects the
    first sign change, then polishes with Newton on the scaled polynomial.
    Warns if more than one sign change shows up and returns the smallest.
    """
    if n < 2:
        raise ParameterError(f"need n >= 2, got {n}")
    f = lambda mu: mu_condition(mu, n)
    mu_hi = 10.0
    brackets = []
    while mu_hi <= 1e6:
        grid = np.geomspace(1e-6, mu_hi, 4096)
        brackets = scan_sign_changes(f, grid)
        if brackets:
            break
        mu_hi *= 10.0
    if not brackets:
        raise RootNotFoundError(f"no positive root of the mu-condition up to {mu_hi}")
    if len(brackets) > 1:
        warnings.warn(
            f"mu-condition for n={n} has {len(brackets)} sign changes; "
            "returning the smallest positive root", stacklevel=2)
    lo, hi = brackets[0]
    mu = bisect_root(f, lo, hi, iters=100, xtol=0.0) if lo != hi else lo
    # Newton polish on the polynomial form
    dmu = 1e-7 * max(mu, 1.0)
    for _ in range(8):
        deriv = (f(mu + dmu) - f(mu - dmu)) / (2.0 * dmu)
        if deriv == 0.0:
            break
        delta = f(mu) / deriv
        mu -= delta
        if abs(delta) <= rel_tol * abs(mu):
            break
    return float(mu)


def canonical_params(n: int) -> SolitonParams:
    return SolitonParams(n=n, mu=solve_mu(n), nu=0.0)


@dataclass(frozen=True)
class ZeroOfF:
    phi: float
    slope: float          # F'(phi), equals n - phi along the ODE


def zeros_of_F(params: SolitonParams, phi_max: float) -> list[ZeroOfF]:
    """All positive zeros of F on (1e-6, phi_max), by scan plus bisection.

    Tangential (double) zeros, where F touches 0 without a sign change, are
    caught by polishing local minima of |F| with Newton on F'. The ODE
    forces at most two positive zeros straddling n; finding more signals
    evaluation cancellation and raises.
    """
    if phi_max <= params.n:
        raise ParameterError("phi_max must exceed n")
    f = lambda p: F_closed_form(p, params)
    grid = np.unique(np.concatenate([
        np.geomspace(1e-6, min(1.0, phi_max), 1024),
        np.linspace(min(1.0, phi_max), phi_max, 8192),
    ]))
    roots: list[float] = []
    for lo, hi in scan_sign_changes(f, grid):
        roots.append(lo if lo == hi else bisect_root(f, lo, hi, iters=100))

    # tangencies: local |F| minima that Newton on F' drives to F ~ 0
    vals = f(grid)
    absv = np.abs(vals)
    scale = 1.0 + float(np.median(absv))
    for i in range(1, len(grid) - 1):
        if not (absv[i] <= absv[i - 1] and absv[i] <= absv[i + 1]
                and absv[i] < 1e-4 * scale):
            continue
        if any(grid[i - 1] <= r <= grid[i + 1] for r in roots):
            continue  # already found by the sign-change scan
        lo, hi = float(grid[i - 1]), float(grid[i + 1])
        phi0 = float(grid[i])
        ok = True
        for _ in range(60):
            _, F1, F2 = F_derivatives(phi0, params)
            if F2 == 0.0:
                break
            step_len = F1 / F2
            phi0 -= step_len
            if not (lo <= phi0 <= hi):
                ok = False  # the |F| dip has no nearby critical point
                break
            if abs(step_len) <= 1e-14 * max(1.0, abs(phi0)):
                break
        if ok and phi0 > 0.0 and abs(f(phi0)) <= 1e-9 * scale:
            roots.append(phi0)

    roots = sorted(roots)
    deduped: list[float] = []
    for r in roots:
        if not deduped or abs(r - deduped[-1]) > 1e-7 * max(1.0, abs(r)):
            deduped.append(r)
    out = [ZeroOfF(phi=float(r), slope=float(F_derivatives(r, params)[1]))
           for r in deduped]
    if len(out) > 2:
        raise NumericalInconsistencyError(
            f"found {len(out)} positive zeros of F; at most two are possible, "
            "so the evaluation must be cancelling")
    return out


@dataclass(frozen=True, eq=False)
class SolitonProfile:
    """phi(rho) on a uniform grid with F = phi' evaluated along it."""

    params: SolitonParams
    rho: np.ndarray
    phi: np.ndarray
    F: np.ndarray
    reached_phi_cap: bool
    blow_up_rho: float | None = None


def integrate_profile(params: SolitonParams, rho_span: float = 15.0,
                      phi_cap: float = 60.0, n_samples: int = 4001) -> SolitonProfile:
    """Integrate phi' = F(phi) from the linearized start at the left zero.

    Starts at phi(-rho_span) = a1 + e^{-rho_span} where a1 is the smallest
    positive zero of F (the translation constant is normalized to 1; the ODE
    is autonomous). Stops at rho = +rho_span or phi = phi_cap; when nu > 0
    the orbit escapes in finite rho and the blow-up location is completed by
    quadrature of 1/F past the cap.
    """
    zs = zeros_of_F(params, phi_max=max(phi_cap, params.n + 1.0))
    if not zs:
        raise ParameterRegimeError("F has no positive zero to anchor the orbit")
    a1 = zs[0].phi
    if zs[0].slope <= 0.0:
        raise ParameterRegimeError(
            f"F'(a1) = {zs[0].slope} <= 0: no rightward orbit from the zero")
    phi0 = a1 + math.exp(-rho_span)
    if F_closed_form(phi0, params) <= 0.0:
        raise ParameterRegimeError("F < 0 immediately right of the anchor zero")

    cap = phi_cap
    if len(zs) == 2:
        cap = min(cap, zs[1].phi * (1.0 - 1e-9))  # orbit cannot cross the 2nd zero

    def event_cap(rho, y):
        return y[0] - cap
    event_cap.terminal = True
    event_cap.direction = 1.0

    sol = solve_ivp(lambda rho, y: [F_closed_form(float(y[0]), params)],
                    (-rho_span, rho_span), [phi0], method="RK45",
                    rtol=1e-10, atol=1e-12, dense_output=True,
                    events=[event_cap])
    rho_end = float(sol.t[-1])
    phi_end = float(sol.y[0, -1])
    rho_grid = np.linspace(-rho_span, rho_end, n_samples)
    phi_grid = sol.sol(rho_grid)[0]
    phi_grid = np.clip(phi_grid, a1 + 1e-300, None)
    F_grid = F_closed_form(phi_grid, params)

    # sol.status == -1: step underflow racing an escape; count it as capped
    reached_cap = bool(sol.t_events[0].size) or sol.status == -1
    blow_up = None
    if reached_cap and params.nu > 0.0:
        # remaining rho to escape: integral of 1/F, convergent for nu > 0
        tail, _ = quad(lambda p: 1.0 / F_closed_form(p, params), phi_end,
                       min(EXP_ARG_LIMIT / params.mu * 0.98, 20.0 * cap), limit=200)
        blow_up = rho_end + float(tail)
    return SolitonProfile(params=params, rho=rho_grid, phi=phi_grid, F=F_grid,
                          reached_phi_cap=reached_cap, blow_up_rho=blow_up)


def soliton_residual(profile: SolitonProfile,
                     phi_window: tuple[float, float] | None = None) -> float:
    """Max residual of the 4th-order profile ODE along the orbit.

    With u' = phi, u'' = F, u''' = F F', u'''' = F(F'^2 + F F''), the
    equation u'''' - 2 u'''^2/u'' + n u''' - (n-1) u''^3/u'^2
    - (u''' u' - u''^2) reduces to  F^2 F'' - F F1^2 + n F F1
    - (n-1) F^3/phi^2 - (F F1 phi - F^2),  free of 0/0 at the left zero.

    Note this equation carries no mu (mu enters as an integration constant),
    so it holds identically for every consistently-built family member; what
    singles out the canonical profile is the regularity value a = n-1.
    """
    phi = profile.phi
    if phi_window is not None:
        m = (phi >= phi_window[0]) & (phi <= phi_window[1])
        phi = phi[m]
    n = profile.params.n
    F, F1, F2 = F_derivatives(phi, profile.params)
    res = F * F * F2 - F * F1 ** 2 + n * F * F1 \
        - (n - 1) * F ** 3 / phi ** 2 - (F * F1 * phi - F * F)
    return float(np.max(np.abs(res)))


def reduction_residual(profile: SolitonProfile,
                       phi_window: tuple[float, float] | None = None,
                       mu: float | None = None) -> float:
    """Max residual of (log phi')' + (n-1)(log phi)' - mu phi' + phi - n.

    By default mu is the orbit's own (the residual then vanishes to float
    precision); passing a different mu probes sensitivity, the residual
    being (mu_orbit - mu) F along the orbit.
    """
    phi = profile.phi
    if phi_window is not None:
        m = (phi >= phi_window[0]) & (phi <= phi_window[1])
        phi = phi[m]
    n = profile.params.n
    mu = profile.params.mu if mu is None else mu
    F, F1, _ = F_derivatives(phi, profile.params)
    res = F1 + (n - 1) * F / phi - mu * F + phi - n
    return float(np.max(np.abs(res)))


def distance_integral(params: SolitonParams, phi_lo: float, phi_hi: float) -> float:
    """int dphi / sqrt(F) between zeros of the slope variable.

    Near a simple zero a1 with slope k the substitution phi = a1 + s^2
    regularizes the endpoint: the integrand becomes 2s/sqrt(F(a1+s^2)).
    """
    zs = zeros_of_F(params, phi_max=max(phi_hi, params.n + 1.0))
    a1 = zs[0].phi if zs else 0.0
    slope = zs[0].slope if zs else 1.0
    if phi_lo < a1 + 1e-12 and slope > 0.0:
        # regularized leg out of the zero: with phi = a1 + s^2 the integrand
        # is 2/sqrt(F/s^2) -> 2/sqrt(F'(a1)); close to the zero the closed
        # form cancels below float noise, so the linearization takes over
        def integrand(s):
            G = F_closed_form(a1 + s * s, params) / (s * s)
            return 2.0 / math.sqrt(G if G > 0.25 * slope else slope)
        s_hi = math.sqrt(max(min(1.0, phi_hi) - a1, 0.0) or 1e-30)
        leg1, _ = quad(integrand, 1e-10, s_hi, limit=200)
        lo_rest = a1 + s_hi ** 2
    else:
        leg1, lo_rest = 0.0, max(phi_lo, a1 + 1e-12)
    if phi_hi <= lo_rest:
        return float(leg1)
    leg2, _ = quad(lambda p: 1.0 / math.sqrt(F_closed_form(p, params)),
                   lo_rest, phi_hi, limit=200)
    return float(leg1 + leg2)


@dataclass(frozen=True)
class ClassificationRecord:
    """Which member of the parameter plane, with its numerical witness."""

    kind: str                      # complete_shrinker | finite_volume | incomplete | two_zeros
    params: SolitonParams
    zeros: tuple[float, ...]
    witness: dict = field(default_factory=dict)


def classify(params: SolitonParams, phi_cap: float = 60.0,
             rho_span: float = 15.0) -> ClassificationRecord:
    """Classify (mu, nu) by the structure of F and the induced metric.

    complete_shrinker: mu > 0, nu = 0 -- one zero, phi unbounded, distance
        integral diverging (a growing lower bound is reported).
    finite_volume: mu < 0 -- phi trapped below a second zero b; the total
        volume witness ((b^n - a^n)/n) is finite.
    incomplete: nu > 0 -- phi escapes at finite rho_0 and the distance
        integral to infinity converges.
    two_zeros: nu < 0 -- a second zero b > a caps the orbit (finite volume).
    """
    n, mu, nu = params.n, params.mu, params.nu
    zs = zeros_of_F(params, phi_max=phi_cap)
    zero_locs = tuple(z.phi for z in zs)

    if mu < 0.0:
        # F ~ phi/mu < 0 for large phi: every orbit is trapped below the
        # largest zero of F, so the total volume witness is finite
        if not zs:
            raise NumericalInconsistencyError(
                "mu < 0 should leave F a zero below which orbits are trapped")
        a1, b = zero_locs[0], zero_locs[-1]
        witness = {"phi_bound": b, "volume": (b ** n - a1 ** n) / n}
        if zs[0].slope > 0.0 and len(zs) >= 2:
            prof = integrate_profile(params, rho_span, phi_cap=b)
            witness["phi_sup"] = float(np.max(prof.phi))
        return ClassificationRecord("finite_volume", params, zero_locs, witness)
    if nu > 0.0:
        prof = integrate_profile(params, rho_span, phi_cap=phi_cap)
        a1 = zero_locs[0]
        dist = distance_integral(params, a1, min(EXP_ARG_LIMIT / mu * 0.98, 50.0 * n))
        return ClassificationRecord("incomplete", params, zero_locs, {
            "blow_up_rho": prof.blow_up_rho,
            "distance_to_infinity": dist,
        })
    if nu < 0.0:
        if len(zs) < 2:
            raise NumericalInconsistencyError("nu < 0 must produce a second zero")
        a1, b = zero_locs[0], zero_locs[1]
        return ClassificationRecord("two_zeros", params, zero_locs, {
            "second_zero": b,
            "volume": (b ** n - a1 ** n) / n,
        })
    # mu > 0, nu = 0
    a1 = zero_locs[0]
    d_half = distance_integral(params, a1, phi_cap / 2.0)
    d_full = distance_integral(params, a1, phi_cap)
    return ClassificationRecord("complete_shrinker", params, zero_locs, {
        "distance_lower_bound": d_full,
        "distance_growth": d_full - d_half,  # > 0: still growing at the cap
    })


def reconstruct_potential(profile: SolitonProfile) -> np.ndarray:
    """u(rho) on the profile grid by quadrature of phi (gauge u(rho_0) = 0)."""
    h = profile.rho[1] - profile.rho[0]
    return cumulative_simpson(profile.phi, h)


def ke_indicator(profile: SolitonProfile, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Q = -n rho + (n-1) log phi + log phi' + u and its rho-derivative.

    Q' vanishes identically exactly when the profile degenerates to a
    Kahler-Einstein metric; along the soliton family Q' = mu F > 0.
    """
    n = profile.params.n
    if len(u) != len(profile.rho):
        raise ParameterError("u must be sampled on the profile grid")
    Q = -n * profile.rho + (n - 1) * np.log(profile.phi) + np.log(profile.F) + u
    F, F1, _ = F_derivatives(profile.phi, profile.params)
    Q1 = -n + (n - 1) * F / profile.phi + F1 + profile.phi
    return Q, Q1, float(np.max(np.abs(Q1)))


# -- serialization -------------------------------------------------------------

def write_profile_csv(profile: SolitonProfile, path) -> None:
    from .profile import _fmt
    lines = ["# calabiflow soliton profile v1",
             f"# n={profile.params.n}",
             f"# mu={_fmt(profile.params.mu)}",
             f"# nu={_fmt(profile.params.nu)}",
             f"# reached_phi_cap={int(profile.reached_phi_cap)}"]
    if profile.blow_up_rho is not None:
        lines.append(f"# blow_up_rho={_fmt(profile.blow_up_rho)}")
    lines.append("rho,phi,F")
    for i in range(len(profile.rho)):
        lines.append(f"{_fmt(profile.rho[i])},{_fmt(profile.phi[i])},{_fmt(profile.F[i])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_classification_json(record: ClassificationRecord, path,
                              extra: dict | None = None) -> None:
    payload = {
        "kind": record.kind,
        "params": {"n": record.params.n, "mu": record.params.mu, "nu": record.params.nu},
        "zeros": list(record.zeros),
        "witness": record.witness,
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
