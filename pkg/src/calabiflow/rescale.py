"""Type-I parabolic rescaling of flow snapshots and soliton comparison.

Rescaling the metric by 1/tau, tau = T - t_j, scales the potential and hence
its rho-derivatives: phi = u'/tau and F = u''/tau. The pair (phi, F) is
compared to the self-similar profile as a graph F(phi): the rho coordinate
carries a free translation in both objects (the profile ODE is autonomous and
the flow drifts), while phi-space removes it. The left edge is pinned at
phi = n-1 exactly because a_t/tau = n-1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ParameterError, WindowError
from .flow import FlowState, FlowTrajectory
from .geometry import build_diagnostics
from .profile import CalabiProfile
from .soliton import SolitonProfile, F_closed_form

DEFAULT_WINDOW_DELTA = 1e-3
COMPARISON_SAMPLES = 512


@dataclass(frozen=True, eq=False)
class RescaledProfile:
    """(phi, F) = (u', u'')/tau of one snapshot, as arrays over the grid."""

    t_j: float
    tau: float
    n: int
    rho: np.ndarray
    phi: np.ndarray
    F: np.ndarray

    @property
    def phi_max(self) -> float:
        return float(self.phi[-1])

    def F_of_phi(self, phi_query: np.ndarray) -> np.ndarray:
        """Monotone interpolation of the F(phi) table.

        Restricted to the strictly increasing node range covering the query;
        at the flat far ends adjacent phi values collide in floats and are
        dropped before building the interpolant.
        """
        lo = float(np.min(phi_query))
        hi = float(np.max(phi_query))
        if lo < self.phi[0] - 1e-9 or hi > self.phi_max + 1e-9:
            raise WindowError(
                f"query range [{lo}, {hi}] outside the rescaled table "
                f"[{self.phi[0]}, {self.phi_max}]")
        keep = np.concatenate([[True], np.diff(self.phi) > 0.0])
        phi_nodes = self.phi[keep]
        F_nodes = self.F[keep]
        interp = PchipInterpolator(phi_nodes, F_nodes, extrapolate=True)
        return interp(np.clip(phi_query, phi_nodes[0], phi_nodes[-1]))


def rescale(state: FlowState) -> RescaledProfile:
    """Type-I rescaling of one flow snapshot at its own time (tau = T - t)."""
    p = state.profile
    tau = state.tau
    return RescaledProfile(t_j=state.t, tau=tau, n=p.n, rho=p.rho,
                           phi=p.u1 / tau, F=p.u2 / tau)


def rescaled_profile_object(state: FlowState) -> CalabiProfile:
    """The rescaled snapshot as a CalabiProfile with class (a_t, b_t)/tau.

    The reference family is linear in (a, b, c0, c1), so dividing every
    coefficient and the correction by tau represents exactly the metric
    scaled by 1/tau; curvature scale identities can then be checked by
    evaluating the ordinary geometry functions on it.
    """
    p = state.profile
    tau = state.tau
    from .profile import KahlerClass
    return CalabiProfile(n=p.n, klass=KahlerClass(p.klass.a / tau, p.klass.b / tau),
                         L=p.L, N=p.N, psi=p.psi / tau, c0=p.c0 / tau,
                         c1=p.c1 / tau, eps_bc=p.eps_bc)


@dataclass(frozen=True)
class Discrepancy:
    """Sup and L2 distance between two F(phi) graphs on a window."""

    window: tuple[float, float]
    D_sup: float
    D_l2: float
    n_samples: int


def compare_to_fik(r: RescaledProfile, s: SolitonProfile,
                   phi_window: tuple[float, float] | None = None) -> Discrepancy:
    """sup and L2 discrepancy |F_flow(phi) - F_soliton(phi)| on the window.

    The soliton side is evaluated through its closed form (exact); the flow
    side through the monotone table. The window floor stays above n-1 where
    both graphs vanish, and the ceiling is clipped to the available data.
    """
    n = r.n
    lo = (n - 1) + DEFAULT_WINDOW_DELTA if phi_window is None else phi_window[0]
    hi = 2.0 * n if phi_window is None else phi_window[1]
    hi = min(hi, r.phi_max, float(np.max(s.phi)))
    lo = max(lo, (n - 1) + 1e-12, float(np.min(s.phi)))
    if not lo < hi:
        raise WindowError(f"empty comparison window: lo={lo}, hi={hi}")
    phi_samples = np.linspace(lo, hi, COMPARISON_SAMPLES)
    F_flow = r.F_of_phi(phi_samples)
    F_fik = F_closed_form(phi_samples, s.params)
    diff = np.abs(F_flow - F_fik)
    return Discrepancy(window=(lo, hi), D_sup=float(np.max(diff)),
                       D_l2=float(np.sqrt(np.mean(diff ** 2))),
                       n_samples=COMPARISON_SAMPLES)


@dataclass(frozen=True)
class ConvergenceRow:
    k: int
    t_j: float
    tau: float
    window: tuple[float, float]
    D_sup: float
    D_l2: float
    typeI_proxy: float
    sup_abs_R_raw: float


@dataclass(frozen=True)
class ConvergenceReport:
    rows: tuple[ConvergenceRow, ...]
    decay_exponent: float          # slope of log D_sup against log tau
    raw_curvature_exponent: float  # slope of log sup|R| against log tau

    def monotone_up_to(self, slack: float = 0.05) -> bool:
        d = [r.D_sup for r in self.rows]
        return all(d[i + 1] <= d[i] * (1.0 + slack) for i in range(len(d) - 1))


def convergence_report(traj: FlowTrajectory, s: SolitonProfile,
                       phi_window: tuple[float, float] | None = None,
                       k_min: int = 2) -> ConvergenceReport:
    """Per-checkpoint discrepancies against the soliton plus Type-I history."""
    records = traj.geometric(k_min=k_min)
    if len(records) < 2:
        raise ParameterError("need at least two geometric checkpoints to compare")
    rows = []
    for rec in records:
        state = rec.state
        r = rescale(state)
        disc = compare_to_fik(r, s, phi_window)
        diag = build_diagnostics(state.profile, state.tau)
        proxy = state.tau * max(diag.sup_abs_R, diag.sup_abs_eig)
        rows.append(ConvergenceRow(
            k=rec.k, t_j=state.t, tau=state.tau, window=disc.window,
            D_sup=disc.D_sup, D_l2=disc.D_l2, typeI_proxy=proxy,
            sup_abs_R_raw=diag.sup_abs_R))
    taus = np.array([r.tau for r in rows])
    decay = float(np.polyfit(np.log(taus), np.log([r.D_sup for r in rows]), 1)[0])
    raw_exp = float(np.polyfit(np.log(taus), np.log([r.sup_abs_R_raw for r in rows]), 1)[0])
    return ConvergenceReport(rows=tuple(rows), decay_exponent=decay,
                             raw_curvature_exponent=raw_exp)


def write_convergence_json(report: ConvergenceReport, path, extra: dict | None = None) -> None:
    payload = {
        "decay_exponent": report.decay_exponent,
        "raw_curvature_exponent": report.raw_curvature_exponent,
        "rows": [{
            "k": r.k, "t_j": r.t_j, "tau": r.tau,
            "window": list(r.window), "D_sup": r.D_sup, "D_l2": r.D_l2,
            "typeI_proxy": r.typeI_proxy, "sup_abs_R_raw": r.sup_abs_R_raw,
        } for r in report.rows],
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def write_overlay_csv(r: RescaledProfile, s: SolitonProfile, path,
                      phi_window: tuple[float, float] | None = None) -> None:
    """(phi, F_flow, F_fik) samples for plotting one checkpoint's comparison."""
    from .profile import _fmt
    disc = compare_to_fik(r, s, phi_window)
    phi = np.linspace(disc.window[0], disc.window[1], COMPARISON_SAMPLES)
    F_flow = r.F_of_phi(phi)
    F_fik = F_closed_form(phi, s.params)
    lines = ["# calabiflow rescale overlay v1",
             f"# t_j={_fmt(r.t_j)}", f"# tau={_fmt(r.tau)}",
             f"# window_lo={_fmt(disc.window[0])}", f"# window_hi={_fmt(disc.window[1])}",
             "phi,F_flow,F_fik"]
    for i in range(len(phi)):
        lines.append(f"{_fmt(phi[i])},{_fmt(F_flow[i])},{_fmt(F_fik[i])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
