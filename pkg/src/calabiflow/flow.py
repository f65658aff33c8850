"""Time integration of the scalar flow  du/dt = log u'' + (n-1) log u' - n rho.

The cohomology coefficients move affinely, a_t = a0 - (n-1)t and
b_t = b0 - (n+1)t, and the closed-form reference term of the profile is
advanced with them analytically. Only the bounded correction psi is stepped,
by the theta-scheme

    psi_new = psi_old + dt [ theta g(psi_new) + (1-theta) g(psi_old) ],
    g(psi)  = log(u''/sigma') + (n-1) log u',

which is the full right-hand side minus the exact time derivative of the
reference term; the divergent -n rho and log u'' ~ rho pieces cancel
analytically, so g is finite across the whole grid. Backward Euler
(theta = 1) is the default; theta = 1/2 gives the trapezoid variant used by
refinement studies, and an explicit Heun step exists for short-horizon
cross-checks (its CFL limit ~ h^2 u''_min makes it useless for production).

After each step the correction's endpoint constants are reabsorbed into the
reference gauge fields (c0, c1), so psi stays endpoint-decaying and the
additive gauge is pinned by psi(-L) = 0. The reabsorption rewrites
u = reference + psi without changing u.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (ArtifactError, BlowUpError, CollapseRegimeError, ParameterError,
                     StepFailureError, TimeRangeError)
from .numerics import derivative_matrix
from .profile import (RELIABLE_RATIO_FLOOR, CalabiProfile, KahlerClass, Violation,
                      make_reference_profile, read_profile_csv, sigma_derivatives,
                      validate, write_profile_csv)

SCHEMES = ("backward_euler", "trapezoid", "rk2")


def singular_time(a0: float, n: int) -> float:
    """T = a0/(n-1), when the exceptional divisor is contracted."""
    if a0 <= 0.0 or n < 2:
        raise ParameterError("need a0 > 0 and n >= 2")
    return a0 / (n - 1)


def predicted_class(class0: KahlerClass, n: int, t: float) -> KahlerClass:
    """Class at time t: (a0 - (n-1)t, b0 - (n+1)t)."""
    T = singular_time(class0.a, n)
    if not (0.0 <= t < T):
        raise TimeRangeError(f"t={t} outside [0, T={T})")
    return KahlerClass(class0.a - (n - 1) * t, class0.b - (n + 1) * t)


@dataclass(frozen=True)
class FlowState:
    """One flow snapshot: profile at time t, with singular time T attached."""

    t: float
    T: float
    profile: CalabiProfile

    def __post_init__(self):
        if not (0.0 <= self.t < self.T):
            raise TimeRangeError(f"t={self.t} outside [0, T={self.T})")

    @property
    def n(self) -> int:
        return self.profile.n

    @property
    def tau(self) -> float:
        return self.T - self.t

    @property
    def klass(self) -> KahlerClass:
        return self.profile.klass


def initial_state(n: int, class0: KahlerClass, L: float, N: int,
                  eps_bc: float = 1e-8, psi: np.ndarray | None = None) -> FlowState:
    T = singular_time(class0.a, n)
    if psi is None:
        profile = make_reference_profile(n, class0, L, N, eps_bc=eps_bc)
    else:
        profile = CalabiProfile(n=n, klass=class0, L=L, N=N, psi=psi, eps_bc=eps_bc)
    return FlowState(t=0.0, T=T, profile=profile)


def correction_rate(p: CalabiProfile) -> np.ndarray:
    """d psi/dt = log(u''/sigma') + (n-1) log u' (finite across the grid)."""
    u1 = p.u1
    A = p.u2_ratio
    if np.any(u1 <= 0.0) or np.any(A <= 0.0):
        raise BlowUpError("flow left the admissible slope/convexity window")
    return np.log(A) + (p.n - 1) * np.log(u1)


def rhs(state: FlowState) -> np.ndarray:
    """Full du/dt on the grid, including the linear-in-rho class drift."""
    p = state.profile
    rho = p.rho
    drift = (1 - p.n) * rho - 2.0 * np.logaddexp(0.0, rho)
    return drift + correction_rate(p)


class _Stepper:
    """Grid-resolved evaluator for g(psi) and its Jacobian at a fixed class.

    Where sigma' < BAND_FLOOR the stencil estimate of psi''/sigma' sits below
    the float64 noise floor, so stepped states are projected onto the exact
    asymptotic decay mode there (see _project_bands); i_lo/i_hi bound the
    reliable region.
    """

    BAND_FLOOR = RELIABLE_RATIO_FLOOR

    def __init__(self, n: int, L: float, N: int, h: float):
        self.n = n
        self.N = N
        self.rho = np.linspace(-L, L, N)
        self.D1 = derivative_matrix(N, h, 1)
        self.D2 = derivative_matrix(N, h, 2)
        s, s1, *_ = sigma_derivatives(self.rho)
        self.sigma = s
        self.sigma1 = s1
        self.inv_sigma1 = 1.0 / s1
        self.one_minus_2s = 1.0 - 2.0 * s
        self.identity = sp.identity(N, format="csr")
        reliable = np.nonzero(s1 >= self.BAND_FLOOR)[0]
        self.i_lo = int(reliable[0]) if len(reliable) else 0
        self.i_hi = int(reliable[-1]) if len(reliable) else N - 1
        # Neumann closure psi'(+-L) = 0: the truncation treats the correction
        # as flat beyond the grid; without these rows the stiff quasi-steady
        # relaxation in the far bands populates an unbounded linear mode.
        interior = np.ones(N)
        interior[0] = interior[-1] = 0.0
        self._interior_diag = sp.diags(interior).tocsr()
        bc = sp.lil_matrix((N, N))
        bc[0, :] = self.D1[0, :]
        bc[-1, :] = self.D1[-1, :]
        self._bc_rows = bc.tocsr()

    def ref_parts(self, klass: KahlerClass, c1: float):
        u1_ref = klass.a + (klass.b - klass.a) * self.sigma \
            + c1 * self.sigma * (1.0 - self.sigma)
        A0 = (klass.b - klass.a) + c1 * self.one_minus_2s
        return u1_ref, A0

    def stencil_parts(self, psi: np.ndarray):
        """(psi', psi''/sigma') with the endpoint interpolant alpha + beta sigma
        differentiated exactly.

        Stencils annihilate constants only to eps*|psi|*sum|w|; divided by
        sigma' ~ e^{-L} at the ends that noise would dominate. The genuine
        correction decays like e^rho exactly as sigma' does, so splitting off
        the (1, sigma) modes keeps the quotient accurate across the grid.
        """
        alpha = float(psi[0])
        beta = float(psi[-1]) - alpha
        decayed = psi - (alpha + beta * self.sigma)
        p1 = self.D1 @ decayed + beta * self.sigma1
        p2s = (self.D2 @ decayed) * self.inv_sigma1 + beta * self.one_minus_2s
        return p1, p2s

    def project_bands(self, psi: np.ndarray) -> np.ndarray:
        """Replace band values by the exact asymptotic decay continuation.

        Calabi-regular corrections behave like e^rho (left) and e^{-rho}
        (right); numerically the band nodes can only hold noise on top of
        that mode, and noise there feeds back through psi''/sigma' ~ e^{L}
        amplification on the next step.
        """
        psi = psi.copy()
        rho = self.rho
        i_lo, i_hi = self.i_lo, self.i_hi
        psi[:i_lo] = psi[i_lo] * np.exp(rho[:i_lo] - rho[i_lo])
        psi[i_hi + 1:] = psi[i_hi] * np.exp(rho[i_hi] - rho[i_hi + 1:])
        return psi

    def g_from_parts(self, p1: np.ndarray, p2s: np.ndarray,
                     u1_ref: np.ndarray, A0: np.ndarray):
        u1 = u1_ref + p1
        A = A0 + p2s
        if np.any(u1 <= 0.0) or np.any(A <= 0.0) or not np.all(np.isfinite(A)):
            raise StepFailureError("iterate left the admissible window")
        return np.log(A) + (self.n - 1) * np.log(u1), u1, A

    def hold_bands(self, p2s: np.ndarray) -> np.ndarray:
        """Replace psi''/sigma' beyond the reliable window by its joint value.

        The true ratio tends to a constant (Calabi asymptotics); the stencil
        estimate out there is noise amplified by 1/sigma'. Held values are
        smooth, so differentiating a state evaluation (as the explicit
        predictor does) cannot recycle that noise.
        """
        out = p2s.copy()
        out[:self.i_lo] = p2s[self.i_lo]
        out[self.i_hi + 1:] = p2s[self.i_hi]
        return out

    def g(self, psi: np.ndarray, u1_ref: np.ndarray, A0: np.ndarray):
        p1, p2s = self.stencil_parts(psi)
        return self.g_from_parts(p1, self.hold_bands(p2s), u1_ref, A0)

    def jacobian(self, scale: float, u1: np.ndarray, A: np.ndarray):
        # d g/d psi = diag(1/u'') D2 + (n-1) diag(1/u') D1, u'' = sigma' A;
        # the endpoint rows carry the Neumann closure instead
        inv_u2 = self.inv_sigma1 / A
        J = self.identity - scale * (
            sp.diags(inv_u2) @ self.D2
            + (self.n - 1) * sp.diags(1.0 / u1) @ self.D1)
        return (self._interior_diag @ J + self._bc_rows).tocsc()

    def residual(self, psi: np.ndarray, base: np.ndarray, scale: float,
                 g_val: np.ndarray, p1: np.ndarray) -> np.ndarray:
        F = psi - base - scale * g_val
        F[0] = p1[0]
        F[-1] = p1[-1]
        return F


_STEPPER_CACHE: dict[tuple, _Stepper] = {}


def _stepper_for(p: CalabiProfile) -> _Stepper:
    key = (p.n, p.L, p.N)
    st = _STEPPER_CACHE.get(key)
    if st is None:
        st = _Stepper(p.n, p.L, p.N, p.h)
        _STEPPER_CACHE[key] = st
    return st


def _resplit(psi: np.ndarray, c0: float, c1: float, sigma: np.ndarray):
    """Move psi's endpoint constants into the reference gauge fields."""
    d_lo = float(psi[0])
    d_hi = float(psi[-1])
    psi = psi - (d_lo + (d_hi - d_lo) * sigma)
    return psi, c0 + d_lo, c1 + (d_hi - d_lo)


def step(state: FlowState, dt: float, scheme: str = "backward_euler",
         newton_tol: float = 1e-10, max_newton: int = 30,
         validate_result: bool = True) -> tuple[FlowState, int]:
    """Advance one step of size dt; returns (new state, Newton iterations).

    Raises StepFailureError when the Newton iteration stalls (callers halve
    dt and retry) and BlowUpError when the stepped profile violates the
    admissibility invariants.
    """
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown scheme {scheme!r}")
    if dt <= 0.0:
        raise ParameterError("dt must be positive")
    p = state.profile
    t_new = state.t + dt
    if t_new >= state.T:
        raise TimeRangeError("step would reach or pass the singular time")
    st = _stepper_for(p)
    klass_new = KahlerClass(p.klass.a - (p.n - 1) * dt, p.klass.b - (p.n + 1) * dt)

    ref_old = st.ref_parts(p.klass, p.c1)
    g_old, _, _ = st.g(p.psi, *ref_old)
    newton_iters = 0

    if scheme == "rk2":  # Heun: predictor at the old class, corrector at the new
        psi_star = p.psi + dt * g_old
        ref_new = st.ref_parts(klass_new, p.c1)
        g_star, _, _ = st.g(psi_star, *ref_new)
        psi_new = p.psi + 0.5 * dt * (g_old + g_star)
    else:
        theta = 1.0 if scheme == "backward_euler" else 0.5
        ref_new = st.ref_parts(klass_new, p.c1)
        base = p.psi + dt * (1.0 - theta) * g_old
        # Iterate on the correction to an explicit predictor. The predictor's
        # stencil contributions are frozen once: near the ends they divide by
        # sigma' ~ e^{-L}, and re-evaluating them each iteration injects
        # re-randomized roundoff that puts a floor under the residual.
        psi_pred = p.psi + dt * g_old
        pred1, pred2s = st.stencil_parts(psi_pred)
        u1_ref, A0 = ref_new
        delta = np.zeros(st.N)
        converged = False
        for newton_iters in range(1, max_newton + 1):
            d1, d2s = st.stencil_parts(delta)
            p1_cur = pred1 + d1
            g_new, u1, A = st.g_from_parts(p1_cur, pred2s + d2s, u1_ref, A0)
            residual = st.residual(psi_pred + delta, base, dt * theta, g_new, p1_cur)
            res_norm = float(np.max(np.abs(residual)))
            if res_norm <= newton_tol:
                converged = True
                break
            J = st.jacobian(dt * theta, u1, A)
            delta = delta - splu(J).solve(residual)
        if not converged:
            raise StepFailureError(
                f"Newton stalled at residual {res_norm:.3e} (dt={dt:.3e})")
        psi_new = psi_pred + delta

    psi_new, c0_new, c1_new = _resplit(psi_new, p.c0, p.c1, st.sigma)
    new_profile = CalabiProfile(n=p.n, klass=klass_new, L=p.L, N=p.N,
                                psi=psi_new, c0=c0_new, c1=c1_new, eps_bc=p.eps_bc)
    if validate_result:
        violations = validate(new_profile)
        hard = [v for v in violations if not v.invariant.startswith("boundary_decay")]
        if hard:
            worst = min(hard, key=lambda v: v.margin)
            raise BlowUpError(
                f"invariant {worst.invariant} violated at node {worst.index} "
                f"(margin {worst.margin:.3e}) after step to t={t_new:.6g}")
    return FlowState(t=t_new, T=state.T, profile=new_profile), newton_iters


@dataclass(frozen=True)
class FlowRunConfig:
    """Configuration of one flow run; serialized verbatim into manifests."""

    n: int = 2
    a0: float = 1.0
    b0: float = 4.0
    L: float = 20.0
    N: int = 2049
    eps_stop: float = 1e-2
    cfl: float = 5e-3
    k_max: int = 8
    checkpoints: tuple[float, ...] | None = None
    scheme: str = "backward_euler"
    dt_init: float | None = None
    bc_tol: float = 1e-6
    newton_tol: float = 1e-10
    allow_collapse: bool = False
    record_brackets: bool = True

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["checkpoints"] is not None:
            d["checkpoints"] = list(d["checkpoints"])
        return d


@dataclass
class CheckpointRecord:
    """A saved state plus its neighbors (for time-derivative estimates)."""

    state: FlowState
    kind: str                       # "initial" | "geometric" | "final" | "explicit"
    k: int | None = None            # ladder index when kind == "geometric"
    before: FlowState | None = None
    after: FlowState | None = None
    violations: list[Violation] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.violations)


@dataclass
class RunStats:
    n_steps: int = 0
    n_newton: int = 0
    n_failures: int = 0
    dt_min: float = np.inf
    dt_max: float = 0.0
    final_t: float = 0.0


@dataclass
class FlowTrajectory:
    """Ordered checkpoints of one run plus the configuration that made it."""

    config: FlowRunConfig
    T: float
    checkpoints: list[CheckpointRecord]
    stats: RunStats

    @property
    def states(self) -> list[FlowState]:
        return [c.state for c in self.checkpoints]

    def geometric(self, k_min: int = 2) -> list[CheckpointRecord]:
        return [c for c in self.checkpoints
                if c.kind == "geometric" and c.k is not None and c.k >= k_min]


def checkpoint_schedule(config: FlowRunConfig, T: float) -> list[tuple[float, str, int | None]]:
    """(time, kind, k) triples: t=0, the ladder t_k = T(1-2^-k), and t_stop."""
    t_stop = (1.0 - config.eps_stop) * T
    if config.checkpoints is not None:
        times = sorted(set(float(t) for t in config.checkpoints))
        if any(t < 0.0 or t > t_stop + 1e-12 * T for t in times):
            raise ParameterError("explicit checkpoints must lie in [0, t_stop]")
        return [(t, "explicit", None) for t in times]
    sched: list[tuple[float, str, int | None]] = [(0.0, "initial", None)]
    for k in range(1, config.k_max + 1):
        t_k = T * (1.0 - 2.0 ** (-k))
        if t_k < t_stop - 1e-12 * T:
            sched.append((t_k, "geometric", k))
    sched.append((t_stop, "final", None))
    return sched


def run(config: FlowRunConfig, psi0: np.ndarray | None = None) -> FlowTrajectory:
    """Integrate from t=0 to (1-eps_stop) T with adaptive step control.

    dt halves on step failure, grows by 1.2 on success, and is capped by
    cfl*(T - t); checkpoints are landed on exactly. Every checkpoint is
    validated and flagged (not fatal) if invariants degrade.
    """
    class0 = KahlerClass(config.a0, config.b0)
    n = config.n
    if not class0.non_collapsed(n) and not config.allow_collapse:
        raise CollapseRegimeError(
            f"collapse regime: a0(n+1) = {config.a0 * (n + 1)} >= "
            f"b0(n-1) = {config.b0 * (n - 1)}; refusing (override to force)")
    T = singular_time(config.a0, n)
    state = initial_state(n, class0, config.L, config.N,
                          eps_bc=config.bc_tol, psi=psi0)

    sched = checkpoint_schedule(config, T)
    times = [s[0] for s in sched]
    stats = RunStats()
    records: list[CheckpointRecord] = []
    pending: list[CheckpointRecord] = []  # waiting for their "after" state

    def reached(t_target: float, t: float) -> bool:
        return abs(t - t_target) <= 1e-11 * T

    def record_checkpoint(st: FlowState, kind: str, k, before: FlowState | None):
        rec = CheckpointRecord(state=st, kind=kind, k=k, before=before,
                               violations=validate(st.profile))
        records.append(rec)
        if config.record_brackets:
            pending.append(rec)

    prev_state: FlowState | None = None
    idx = 0
    while idx < len(times) and reached(times[idx], state.t):
        record_checkpoint(state, sched[idx][1], sched[idx][2], None)
        idx += 1

    t_stop = times[-1]
    dt = config.dt_init if config.dt_init is not None else min(1e-4 * T, config.cfl * T)
    while state.t < t_stop - 1e-11 * T:
        dt = min(dt, config.cfl * (T - state.t), t_stop - state.t)
        if idx < len(times):
            dt = min(dt, times[idx] - state.t)
        try:
            new_state, iters = step(state, dt, scheme=config.scheme,
                                    newton_tol=config.newton_tol)
        except StepFailureError:
            stats.n_failures += 1
            dt *= 0.5
            if dt < 1e-14 * T:
                raise BlowUpError(
                    f"step size underflow at t={state.t:.6g} after repeated failures")
            continue
        stats.n_steps += 1
        stats.n_newton += iters
        stats.dt_min = min(stats.dt_min, dt)
        stats.dt_max = max(stats.dt_max, dt)
        for rec in pending:
            if rec.after is None and rec.state.t < new_state.t:
                rec.after = new_state
        pending = [r for r in pending if r.after is None]
        prev_state, state = state, new_state
        if idx < len(times) and reached(times[idx], state.t):
            record_checkpoint(state, sched[idx][1], sched[idx][2], prev_state)
            idx += 1
        dt *= 1.2
    stats.final_t = state.t
    return FlowTrajectory(config=config, T=T, checkpoints=records, stats=stats)


# -- persistence ---------------------------------------------------------------

def _state_metadata(st: FlowState) -> dict:
    return {"t": st.t, "T": st.T}


def save_trajectory(traj: FlowTrajectory, out_dir, extra_manifest: dict | None = None) -> dict:
    """Write per-checkpoint profile CSVs plus manifest.json; returns manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(traj.checkpoints):
        name = f"checkpoint_{i:02d}"
        write_profile_csv(rec.state.profile, out / f"{name}.csv",
                          extra_metadata=_state_metadata(rec.state))
        entry = {
            "file": f"{name}.csv", "t": rec.state.t, "kind": rec.kind,
            "k": rec.k, "flagged": rec.flagged,
            "violations": [[v.invariant, v.index, v.margin] for v in rec.violations],
        }
        for side in ("before", "after"):
            nb = getattr(rec, side)
            if nb is not None:
                fn = f"{name}_{side}.csv"
                write_profile_csv(nb.profile, out / fn,
                                  extra_metadata=_state_metadata(nb))
                entry[side] = {"file": fn, "t": nb.t}
        entries.append(entry)
    manifest = {
        "format": "calabiflow trajectory v1",
        "config": traj.config.as_dict(),
        "T": traj.T,
        "stats": {
            "n_steps": traj.stats.n_steps, "n_newton": traj.stats.n_newton,
            "n_failures": traj.stats.n_failures,
            "dt_min": traj.stats.dt_min, "dt_max": traj.stats.dt_max,
            "final_t": traj.stats.final_t,
        },
        "checkpoints": entries,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _state_from_csv(path: Path) -> FlowState:
    profile, meta = read_profile_csv(path)
    try:
        return FlowState(t=float(meta["t"]), T=float(meta["T"]), profile=profile)
    except KeyError as exc:
        raise ArtifactError(f"{path} lacks flow metadata {exc}") from exc


def load_trajectory(out_dir) -> FlowTrajectory:
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactError(f"no manifest.json under {out}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        cfg_d = dict(manifest["config"])
        if cfg_d.get("checkpoints") is not None:
            cfg_d["checkpoints"] = tuple(cfg_d["checkpoints"])
        config = FlowRunConfig(**cfg_d)
        records = []
        for entry in manifest["checkpoints"]:
            rec = CheckpointRecord(
                state=_state_from_csv(out / entry["file"]),
                kind=entry["kind"], k=entry["k"],
                violations=[Violation(*v) for v in entry.get("violations", [])])
            for side in ("before", "after"):
                if side in entry:
                    setattr(rec, side, _state_from_csv(out / entry[side]["file"]))
            records.append(rec)
        stats = RunStats(**manifest["stats"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"malformed trajectory under {out}: {exc}") from exc
    return FlowTrajectory(config=config, T=manifest["T"], checkpoints=records, stats=stats)
