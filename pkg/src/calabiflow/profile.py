"""Calabi-symmetric potentials on a truncated rho-grid.

A potential u(rho) with prescribed slopes a at -inf and b at +inf is stored as

    u(rho) = a*rho + (b - a)*log(1 + e^rho) + c0 + c1*sigma(rho) + psi(rho),

with sigma the logistic function. The closed-form part absorbs both linear
growths and the two asymptotic constants, so the sampled correction psi decays
(together with its derivatives) toward the ends of the grid and truncation at
|rho| = L is legitimate. All derivative access goes through 4th-order central
stencils on psi plus exact derivatives of the closed-form part.

The module also exposes "stable" derivative tables built from
q = log(u''/sigma'), which evaluate u'''/u'' and u''''/u'' without the
catastrophic cancellation the raw arrays suffer where u'' ~ e^{-L}.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ClassViolationError, DomainError, InvalidProfileError, ParameterError
from .numerics import derivative_matrix

MIN_GRID_SIZE = 65
MIN_HALF_WIDTH = 10.0
DEFAULT_EPS_BC = 1e-8

# where sigma' drops below this, stencil estimates of psi''/sigma' and of the
# log u'' derivatives sit below the float64 noise floor and are held from the
# outermost reliable node instead (their true values tend to constants there)
RELIABLE_RATIO_FLOOR = 1e-6


@dataclass(frozen=True)
class KahlerClass:
    """Cohomology coefficients (a, b) of -a[D_0] + b[D_inf], 0 < a < b."""

    a: float
    b: float

    def __post_init__(self):
        if not (0.0 < self.a < self.b):
            raise ClassViolationError(
                f"need 0 < a < b, got a={self.a}, b={self.b}")

    def non_collapsed(self, n: int) -> bool:
        """Strict volume non-collapse condition a(n+1) < b(n-1)."""
        return self.a * (n + 1) < self.b * (n - 1)


def sigma_derivatives(rho: np.ndarray) -> tuple[np.ndarray, ...]:
    """Logistic sigma(rho) = e^rho/(1+e^rho) and its first five derivatives."""
    s = expit(rho)
    s1 = s * (1.0 - s)
    s2 = s1 * (1.0 - 2.0 * s)
    s3 = s1 * (1.0 - 6.0 * s + 6.0 * s * s)
    s4 = s1 * (1.0 + s * (-14.0 + s * (36.0 - 24.0 * s)))
    s5 = s1 * (1.0 + s * (-30.0 + s * (150.0 + s * (-240.0 + 120.0 * s))))
    return s, s1, s2, s3, s4, s5


def reference_derivatives(rho: np.ndarray, a: float, b: float,
                          c0: float = 0.0, c1: float = 0.0) -> dict[str, np.ndarray]:
    """Exact derivatives (orders 0..5) of the closed-form reference term."""
    s, s1, s2, s3, s4, s5 = sigma_derivatives(rho)
    log1pexp = np.logaddexp(0.0, rho)
    d = b - a
    return {
        "u": a * rho + d * log1pexp + c0 + c1 * s,
        "u1": a + d * s + c1 * s1,
        "u2": d * s1 + c1 * s2,
        "u3": d * s2 + c1 * s3,
        "u4": d * s3 + c1 * s4,
        "u5": d * s4 + c1 * s5,
    }


@dataclass(frozen=True, eq=False)
class CalabiProfile:
    """Sampled Calabi-symmetric potential on a uniform grid over [-L, L].

    Immutable after construction; all derived arrays are cached lazily and
    the instance is safe to share across threads.
    """

    n: int
    klass: KahlerClass
    L: float
    N: int
    psi: np.ndarray
    c0: float = 0.0
    c1: float = 0.0
    eps_bc: float = DEFAULT_EPS_BC

    def __post_init__(self):
        if self.n < 2:
            raise ParameterError(f"complex dimension n must be >= 2, got {self.n}")
        if self.N % 2 == 0:
            raise ParameterError(f"grid size N must be odd, got {self.N}")
        if self.N < MIN_GRID_SIZE:
            raise ParameterError(f"grid size N must be >= {MIN_GRID_SIZE}")
        if self.L < MIN_HALF_WIDTH:
            raise ParameterError(f"half-width L must be >= {MIN_HALF_WIDTH}")
        if len(self.psi) != self.N:
            raise ParameterError("psi length does not match N")
        psi = np.array(self.psi, dtype=float)
        psi.flags.writeable = False
        object.__setattr__(self, "psi", psi)

    # -- grid ---------------------------------------------------------------

    @cached_property
    def rho(self) -> np.ndarray:
        r = np.linspace(-self.L, self.L, self.N)
        r.flags.writeable = False
        return r

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.N - 1)

    def _dmat(self, order: int):
        return derivative_matrix(self.N, self.h, order)

    # -- closed-form part and psi stencils ------------------------------------

    @cached_property
    def reference(self) -> dict[str, np.ndarray]:
        return reference_derivatives(self.rho, self.klass.a, self.klass.b,
                                     self.c0, self.c1)

    @cached_property
    def psi_derivatives(self) -> dict[int, np.ndarray]:
        return {k: self._dmat(k) @ self.psi for k in (1, 2, 3, 4)}

    @cached_property
    def u(self) -> np.ndarray:
        return self.reference["u"] + self.psi

    @cached_property
    def u1(self) -> np.ndarray:
        return self.reference["u1"] + self.psi_derivatives[1]

    @cached_property
    def u2(self) -> np.ndarray:
        return self.reference["u2"] + self.psi_derivatives[2]

    @cached_property
    def u3(self) -> np.ndarray:
        return self.reference["u3"] + self.psi_derivatives[3]

    @cached_property
    def u4(self) -> np.ndarray:
        return self.reference["u4"] + self.psi_derivatives[4]

    # -- cancellation-free log-derivative tables ------------------------------

    @cached_property
    def u2_ratio(self) -> np.ndarray:
        """A = u''/sigma' = (b-a) + c1*(1-2 sigma) + psi''/sigma', O(1) at the ends."""
        s, s1, *_ = sigma_derivatives(self.rho)
        d = self.klass.b - self.klass.a
        return d + self.c1 * (1.0 - 2.0 * s) + self.psi_derivatives[2] / s1

    @cached_property
    def log_u2_derivatives(self) -> dict[int, np.ndarray]:
        """Derivatives of w = log u'' split as log sigma' + log(u''/sigma').

        w1 = u'''/u'', w2 = (log u'')'', w3 = (log u'')''' evaluated without
        forming the near-cancelling raw ratios at the grid ends.
        """
        A = self.u2_ratio
        if np.any(A <= 0.0) or np.any(~np.isfinite(A)):
            raise InvalidProfileError("u'' <= 0 somewhere on the grid")
        q = np.log(A)
        q -= q[0]  # stencil weight sums are not exactly 0; kill the constant mode
        s, s1, *_ = sigma_derivatives(self.rho)
        one_minus_2s = 1.0 - 2.0 * s
        qd = {k: self._dmat(k) @ q for k in (1, 2, 3)}
        reliable = np.nonzero(s1 >= RELIABLE_RATIO_FLOOR)[0]
        if len(reliable) and (reliable[0] > 0 or reliable[-1] < self.N - 1):
            # A tends to a constant like A_inf + O(e^rho), so q-derivatives
            # decay like sigma'; hold the ratio q^(k)/sigma' from the joint
            # and rescale by the local sigma' (a plain value hold would leave
            # a constant that explodes under later division by u'')
            i_lo, i_hi = int(reliable[0]), int(reliable[-1])
            for arr in qd.values():
                arr[:i_lo] = (arr[i_lo] / s1[i_lo]) * s1[:i_lo]
                arr[i_hi + 1:] = (arr[i_hi] / s1[i_hi]) * s1[i_hi + 1:]
        w1 = one_minus_2s + qd[1]
        w2 = -2.0 * s1 + qd[2]
        w3 = -2.0 * s1 * one_minus_2s + qd[3]
        return {1: w1, 2: w2, 3: w3}

    @cached_property
    def stable_u3(self) -> np.ndarray:
        return self.u2 * self.log_u2_derivatives[1]

    @cached_property
    def stable_u4(self) -> np.ndarray:
        w = self.log_u2_derivatives
        return self.u2 * (w[2] + w[1] ** 2)

    @cached_property
    def stable_u5(self) -> np.ndarray:
        w = self.log_u2_derivatives
        return self.u2 * (w[3] + 3.0 * w[1] * w[2] + w[1] ** 3)

    # -- interpolation --------------------------------------------------------

    @cached_property
    def _hermites(self):
        from scipy.interpolate import CubicHermiteSpline
        d = self.psi_derivatives
        return (
            CubicHermiteSpline(self.rho, self.psi, d[1]),
            CubicHermiteSpline(self.rho, d[1], d[2]),
            CubicHermiteSpline(self.rho, d[2], d[3]),
        )

    def gauge_shift(self, delta: float) -> "CalabiProfile":
        """Same metric, additive constant c0 shifted by delta."""
        return replace(self, c0=self.c0 + delta)


@dataclass(frozen=True)
class Violation:
    """One invariant violation: which invariant, where, and by how much."""

    invariant: str
    index: int
    margin: float


def make_reference_profile(n: int, klass: KahlerClass, L: float = 20.0,
                           N: int = 4001, eps_bc: float = DEFAULT_EPS_BC) -> CalabiProfile:
    """Profile with psi identically zero: u = a rho + (b-a) log(1+e^rho)."""
    return CalabiProfile(n=n, klass=klass, L=float(L), N=int(N),
                         psi=np.zeros(int(N)), eps_bc=eps_bc)


def derivatives(p: CalabiProfile) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Grid arrays (u', u'', u''', u'''') of the reconstructed potential."""
    return p.u1, p.u2, p.u3, p.u4


def interpolate(p: CalabiProfile, rho) -> tuple:
    """(u, u', u'') at rho in [-L, L]; exact at grid nodes.

    Each quantity is a cubic Hermite interpolant of the correction samples
    (with the grid's own stencil derivatives as slopes) plus the exact
    closed-form part, so nodal values coincide with the grid arrays.
    """
    r = np.asarray(rho, dtype=float)
    if np.any(r < -p.L - 1e-12) or np.any(r > p.L + 1e-12):
        raise DomainError(f"rho outside [-{p.L}, {p.L}]")
    r = np.clip(r, -p.L, p.L)
    ref = reference_derivatives(r, p.klass.a, p.klass.b, p.c0, p.c1)
    h_u, h_u1, h_u2 = p._hermites
    u = ref["u"] + h_u(r)
    u1 = ref["u1"] + h_u1(r)
    u2 = ref["u2"] + h_u2(r)
    if np.ndim(rho) == 0:
        return float(u), float(u1), float(u2)
    return u, u1, u2


def validate(p: CalabiProfile) -> list[Violation]:
    """All invariant violations of the profile (empty list iff valid).

    Checked nodewise: a < u' < b, u' strictly increasing, u'' > 0 in the
    interior, and decay |psi|, |psi'| <= eps_bc*(b-a) at both endpoints.
    """
    out: list[Violation] = []
    a, b = p.klass.a, p.klass.b
    u1, u2 = p.u1, p.u2

    lo = u1 - a
    hi = b - u1
    for idx in np.nonzero(lo <= 0.0)[0]:
        out.append(Violation("slope_above_a", int(idx), float(lo[idx])))
    for idx in np.nonzero(hi <= 0.0)[0]:
        out.append(Violation("slope_below_b", int(idx), float(hi[idx])))

    du1 = np.diff(u1)
    for idx in np.nonzero(du1 <= 0.0)[0]:
        out.append(Violation("slope_increasing", int(idx), float(du1[idx])))

    interior = u2[1:-1]
    for idx in np.nonzero(interior <= 0.0)[0]:
        out.append(Violation("convexity", int(idx) + 1, float(interior[idx])))

    tol = p.eps_bc * (b - a)
    psi1 = p.psi_derivatives[1]
    for name, arr in (("boundary_decay_psi", p.psi), ("boundary_decay_dpsi", psi1)):
        for idx in (0, p.N - 1):
            margin = tol - abs(float(arr[idx]))
            if margin < 0.0:
                out.append(Violation(name, idx, margin))
    return out


# -- serialization -------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_profile_csv(p: CalabiProfile, path, extra_metadata: dict | None = None) -> None:
    """CSV with header rho,psi,u,u1,u2,u3,u4 and '#'-prefixed metadata lines."""
    u1, u2, u3, u4 = derivatives(p)
    meta = {
        "n": p.n, "a": p.klass.a, "b": p.klass.b, "L": p.L, "N": p.N,
        "c0": p.c0, "c1": p.c1, "eps_bc": p.eps_bc,
    }
    if extra_metadata:
        meta.update(extra_metadata)
    lines = ["# calabiflow profile v1"]
    lines += [f"# {k}={_fmt(v) if isinstance(v, float) else v}" for k, v in meta.items()]
    lines.append("rho,psi,u,u1,u2,u3,u4")
    cols = (p.rho, p.psi, p.u, u1, u2, u3, u4)
    for i in range(p.N):
        lines.append(",".join(_fmt(c[i]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_profile_csv(path) -> tuple[CalabiProfile, dict]:
    """Inverse of write_profile_csv; returns (profile, metadata dict)."""
    meta: dict[str, str] = {}
    psi_vals: list[float] = []
    header_seen = False
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        if not line.strip():
            continue
        if not header_seen:
            header_seen = True  # column header line
            continue
        psi_vals.append(float(line.split(",")[1]))
    try:
        profile = CalabiProfile(
            n=int(meta["n"]),
            klass=KahlerClass(float(meta["a"]), float(meta["b"])),
            L=float(meta["L"]), N=int(meta["N"]),
            psi=np.array(psi_vals),
            c0=float(meta.get("c0", 0.0)), c1=float(meta.get("c1", 0.0)),
            eps_bc=float(meta.get("eps_bc", DEFAULT_EPS_BC)),
        )
    except KeyError as exc:
        raise ParameterError(f"profile CSV missing metadata key {exc}") from exc
    return profile, meta
