"""Replica-symmetric saddle-point system, branch selection and observables.

Order parameters: the scalar pair (q2, q2_hat) for the second-order tensor
overlap and the per-readout-atom functions (Q_W(v), Q_W_hat(v)).  The damped
fixed-point iteration follows the update order (hats <- non-hats) then
(non-hats <- hats):

    Qh(v) = (q2 - gamma vbar^2 - E v^2 Q^2) dtau/dQ(v) / (2 gamma)
            + 2 (alpha/gamma) v^2 g'(Q(v)) psi_out'(q_K)
    q2h   = 4 alpha psi_out'(q_K) mu_2^2 / 2
    Q(v)  = posterior_mean_bracket(Qh(v))
    q2    = r2 - mmse_S(q2h + tau(Q))

with dtau/dQ(v) the functional derivative -2 v^2 Q(v) / mmse'(tau) (the
per-atom partial divided by P_v(v); this is what stationarity of the RS
potential requires).  The universal branch Q == 0 is an exact invariant set
of the iteration since g'(0) = 0 and dtau/dQ vanishes with Q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .activations import ActivationSpec
from .potentials import ChannelSpec, PotentialError, PriorKind, posterior_mean_bracket, psi_out, psi_out_qk_derivative, psi_w
from .readouts import ReadoutLaw
from .spectral import SpectralTable, TAU_MAX, mmse_inverse, tau_of_qw

__all__ = [
    "SaddleContext",
    "SaddleState",
    "SaddleSolution",
    "SolverConfig",
    "find_alpha_sp",
    "gen_error_theory",
    "iterate_saddle",
    "mutual_information",
    "rs_potential",
    "simplified_ansatz_solve",
    "solve_branches",
    "stationarity_gradients",
    "universal_state_evolution",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass
class SaddleContext:
    alpha: float
    gamma: float
    activation: ActivationSpec
    readout: ReadoutLaw
    prior: PriorKind
    channel: ChannelSpec
    table: SpectralTable

    @property
    def r2(self) -> float:
        return 1.0 + self.gamma * self.readout.mean**2

    def with_alpha(self, alpha: float) -> "SaddleContext":
        return replace(self, alpha=alpha)


@dataclass
class SaddleState:
    q2: float
    q2_hat: float
    qw: np.ndarray
    qw_hat: np.ndarray

    def copy(self) -> "SaddleState":
        return SaddleState(self.q2, self.q2_hat, self.qw.copy(), self.qw_hat.copy())

    def max_distance(self, other: "SaddleState") -> float:
        return max(
            abs(self.q2 - other.q2),
            abs(self.q2_hat - other.q2_hat),
            float(np.max(np.abs(self.qw - other.qw))),
            float(np.max(np.abs(self.qw_hat - other.qw_hat))),
        )


@dataclass
class SaddleSolution:
    state: SaddleState
    f_rs: float
    branch: str  # universal | specialisation
    eps_opt: float
    mutual_info: float
    converged: bool
    residual: float
    iterations: int = 0
    tau_saturated: bool = False


@dataclass
class SolverConfig:
    damping: float = 0.5
    tol: float = 1e-8
    max_iter: int = 5000


def _uninformative_state(ctx: SaddleContext) -> SaddleState:
    n = ctx.readout.n_atoms
    return SaddleState(0.0, 0.0, np.zeros(n), np.zeros(n))


def _informative_state(ctx: SaddleContext) -> SaddleState:
    n = ctx.readout.n_atoms
    return SaddleState(ctx.r2 - 1e-3, 0.0, np.full(n, 1.0 - 1e-3), np.zeros(n))


def _channel_slope(ctx: SaddleContext, state: SaddleState) -> float:
    """psi_out'(q_K) at the current state (analytic for the Gaussian channel)."""
    act, ro = ctx.activation, ctx.readout
    eg = float(np.sum(ro.probs * ro.values**2 * act.g(state.qw)))
    q_k = act.mu1**2 + act.mu2**2 * state.q2 / 2.0 + eg
    r_k = act.mu1**2 + act.mu2**2 * ctx.r2 / 2.0 + act.g_one
    return psi_out_qk_derivative(ctx.channel, min(q_k, r_k), r_k)


def iterate_saddle(
    ctx: SaddleContext,
    init: SaddleState,
    cfg: Optional[SolverConfig] = None,
) -> SaddleSolution:
    """Damped Picard iteration of the RS saddle-point system."""
    cfg = cfg or SolverConfig()
    th = cfg.damping
    act, ro = ctx.activation, ctx.readout
    av, pv = ro.values, ro.probs
    vbar = ro.mean
    r2 = ctx.r2
    mu2sq = act.mu2**2

    st = init.copy()
    st.qw = np.clip(st.qw, 0.0, 1.0)
    residual = math.inf
    saturated = False
    for it in range(cfg.max_iter):
        tau_res = tau_of_qw(st.qw, ro, ctx.table)
        saturated = tau_res.saturated
        slope = _channel_slope(ctx, st)
        # functional derivative of tau (per-atom partial divided by P_v)
        dtau = np.where(pv > 0, tau_res.dtau_dqw / pv, 0.0)
        # (q2 - gamma vbar^2 - E v^2 Q^2) equals this mmse difference on the
        # q2-equation; the difference form stays finite when tau saturates
        coeff = ctx.table.mmse(tau_res.tau) - ctx.table.mmse(
            min(tau_res.tau + st.q2_hat, 10 * TAU_MAX)
        )
        qw_hat_new = np.clip(
            coeff * dtau / (2.0 * ctx.gamma)
            + 2.0 * (ctx.alpha / ctx.gamma) * av**2 * act.g_prime(st.qw) * slope,
            0.0,
            None,
        )
        q2_hat_new = 4.0 * ctx.alpha * slope * mu2sq / 2.0
        st.qw_hat = th * qw_hat_new + (1 - th) * st.qw_hat
        st.q2_hat = th * q2_hat_new + (1 - th) * st.q2_hat

        qw_new = np.asarray(posterior_mean_bracket(ctx.prior, st.qw_hat))
        tau_new = tau_of_qw(np.clip(qw_new, 0.0, 1.0), ro, ctx.table).tau
        q2_new = r2 - ctx.table.mmse(min(st.q2_hat + tau_new, 10 * TAU_MAX))
        q2_new = min(max(q2_new, 0.0), r2)

        residual = max(
            float(np.max(np.abs(qw_new - st.qw))), abs(q2_new - st.q2)
        )
        st.qw = np.clip(th * qw_new + (1 - th) * st.qw, 0.0, 1.0)
        st.q2 = th * q2_new + (1 - th) * st.q2
        if not (np.all(np.isfinite(st.qw)) and np.isfinite(st.q2)
                and np.all(np.isfinite(st.qw_hat)) and np.isfinite(st.q2_hat)):
            raise PotentialError(
                f"NaN in saddle update at iteration {it}: "
                f"q2={st.q2}, q2_hat={st.q2_hat}, qw={st.qw}, qw_hat={st.qw_hat}"
            )
        if residual < cfg.tol:
            break
    converged = residual < cfg.tol
    branch = "universal" if float(np.max(st.qw)) <= 1e-3 else "specialisation"
    f = rs_potential(st, ctx)
    sol = SaddleSolution(
        state=st,
        f_rs=f,
        branch=branch,
        eps_opt=math.nan,
        mutual_info=math.nan,
        converged=converged,
        residual=residual,
        iterations=it + 1,
        tau_saturated=saturated,
    )
    sol.eps_opt = gen_error_theory(sol, ctx)
    sol.mutual_info = mutual_information(sol, ctx)
    return sol


def rs_potential(state: SaddleState, ctx: SaddleContext) -> float:
    """RS free-entropy potential at the given order parameters."""
    act, ro = ctx.activation, ctx.readout
    av, pv = ro.values, ro.probs
    r2 = ctx.r2
    eg = float(np.sum(pv * av**2 * act.g(np.clip(state.qw, -1.0, 1.0))))
    q_k = act.mu1**2 + act.mu2**2 * state.q2 / 2.0 + eg
    r_k = act.mu1**2 + act.mu2**2 * r2 / 2.0 + act.g_one
    tau = tau_of_qw(np.clip(state.qw, 0.0, 1.0), ro, ctx.table).tau
    arg = state.q2_hat + tau
    if arg > 10 * TAU_MAX:
        raise PotentialError("spectral table range exceeded; extend the eta grid")
    ent = float(np.sum(pv * (psi_w(ctx.prior, state.qw_hat) - 0.5 * state.qw * state.qw_hat)))
    return (
        psi_out(ctx.channel, min(q_k, r_k), r_k)
        + (r2 - state.q2) * state.q2_hat / (4.0 * ctx.alpha)
        + ctx.gamma / ctx.alpha * ent
        + (float(ctx.table.iota(tau)) - float(ctx.table.iota(arg))) / ctx.alpha
    )


def gen_error_theory(solution: SaddleSolution, ctx: SaddleContext) -> float:
    """Bayes-optimal mean-square generalisation error at the solution."""
    act, ro = ctx.activation, ctx.readout
    st = solution.state
    eg = float(np.sum(ro.probs * ro.values**2 * act.g(st.qw)))
    if ctx.channel.tag == "gaussian_linear":
        return (
            ctx.channel.delta
            + 0.5 * act.mu2**2 * (ctx.r2 - st.q2)
            + act.g_one
            - eg
        )
    # generic channel: eps = E_{lam0,lam1}[ E[y^2|lam0] - E[y|lam0] E[y|lam1] ]
    # with centred Gaussian (lam0, lam1), covariance [[r_K, q_K], [q_K, r_K]].
    q_k = act.mu1**2 + act.mu2**2 * st.q2 / 2.0 + eg
    r_k = act.mu1**2 + act.mu2**2 * ctx.r2 / 2.0 + act.g_one
    from numpy.polynomial import hermite_e

    nodes, weights = hermite_e.hermegauss(120)
    weights = weights / _SQRT2PI
    sq = math.sqrt(max(q_k, 0.0))
    sr = math.sqrt(max(r_k - q_k, 0.0))
    shift = ctx.channel.mean_shift
    lam = shift + sq * nodes[:, None] + sr * nodes[None, :]  # (xi, u)
    m1 = ctx.channel.mean_y(lam.ravel()).reshape(lam.shape) @ weights
    m2 = ctx.channel.second_moment_y(lam.ravel()).reshape(lam.shape) @ weights
    return float(np.sum(weights * (m2 - m1**2)))


def mutual_information(solution: SaddleSolution, ctx: SaddleContext) -> float:
    """Mutual information per parameter I(W0; D)/kd at the solution."""
    a_over_g = ctx.alpha / ctx.gamma
    if ctx.channel.tag == "gaussian_linear":
        return -a_over_g * solution.f_rs - 0.5 * a_over_g * math.log(
            2.0 * math.pi * math.e * ctx.channel.delta
        )
    # generic: -(alpha/gamma) f + (alpha/gamma) E_lam int dy P ln P, lam ~ N(0, r_K)
    act, ro = ctx.activation, ctx.readout
    r_k = act.mu1**2 + act.mu2**2 * ctx.r2 / 2.0 + act.g_one
    from numpy.polynomial import hermite_e

    nodes, weights = hermite_e.hermegauss(200)
    weights = weights / _SQRT2PI
    lam = ctx.channel.mean_shift + math.sqrt(r_k) * nodes
    ys, wy = ctx.channel._y_grid(lam)
    p = np.clip(ctx.channel.kernel(ys[:, None], lam[None, :]), 1e-300, None)
    neg_h = float(weights @ ((wy[:, None] * p * np.log(p)).sum(axis=0)))
    return -a_over_g * solution.f_rs + a_over_g * neg_h


def solve_branches(ctx: SaddleContext, cfg: Optional[SolverConfig] = None) -> dict:
    """Solve from uninformative and informative inits; select by max f_RS."""
    uni = iterate_saddle(ctx, _uninformative_state(ctx), cfg)
    info = iterate_saddle(ctx, _informative_state(ctx), cfg)
    if not (uni.converged or info.converged):
        raise PotentialError(
            "both saddle runs unconverged: "
            f"residuals {uni.residual:.3e} (universal init), {info.residual:.3e} (informative init)"
        )
    distinct = uni.state.max_distance(info.state) >= 1e-4
    specialisation = info if (distinct and info.branch == "specialisation") else None
    selected = uni
    if specialisation is not None and specialisation.f_rs > uni.f_rs:
        selected = specialisation
    return {"universal": uni, "specialisation": specialisation, "selected": selected}


def stationarity_gradients(solution: SaddleSolution, ctx: SaddleContext, h: float = 1e-5) -> dict:
    """Central finite differences of rs_potential at the solution."""
    st = solution.state
    grads = {}

    def fd(setter, x0):
        s1, s2 = st.copy(), st.copy()
        setter(s1, x0 + h)
        setter(s2, x0 - h)
        return (rs_potential(s1, ctx) - rs_potential(s2, ctx)) / (2 * h)

    grads["q2"] = fd(lambda s, x: setattr(s, "q2", x), st.q2)
    grads["q2_hat"] = fd(lambda s, x: setattr(s, "q2_hat", x), st.q2_hat)
    for i in range(st.qw.size):
        if st.qw[i] + h < 1.0 and st.qw[i] - h > -1.0:
            def set_qw(s, x, i=i):
                s.qw = s.qw.copy()
                s.qw[i] = x

            grads[f"qw[{i}]"] = fd(set_qw, st.qw[i])
        if st.qw_hat[i] - h >= 0.0 or st.qw_hat[i] > h:
            def set_qwh(s, x, i=i):
                s.qw_hat = s.qw_hat.copy()
                s.qw_hat[i] = x

            grads[f"qw_hat[{i}]"] = fd(set_qwh, st.qw_hat[i])
    return grads


def find_alpha_sp(
    ctx_without_alpha: SaddleContext,
    bracket: tuple[float, float],
    tol: float = 1e-2,
    cfg: Optional[SolverConfig] = None,
    threshold: float = 1e-3,
    per_atom: bool = True,
) -> dict:
    """Specialisation thresholds by bisection on the selected branch.

    Returns {"per_atom": {v: alpha_sp_v}, "alpha_sp": min over atoms}; with
    per_atom=False only the overall transition is bisected (one bisection,
    useful for many-atom readouts).  Raises if the bracket does not straddle
    the overall transition.
    """
    lo, hi = bracket
    ro = ctx_without_alpha.readout
    cfg = cfg or SolverConfig(tol=1e-9, max_iter=20000)
    cache: dict[float, np.ndarray] = {}

    def selected_qw(alpha: float) -> np.ndarray:
        if alpha not in cache:
            branches = solve_branches(ctx_without_alpha.with_alpha(alpha), cfg)
            cache[alpha] = branches["selected"].state.qw
        return cache[alpha]

    qw_lo, qw_hi = selected_qw(lo), selected_qw(hi)
    if float(np.max(qw_lo)) > threshold or float(np.max(qw_hi)) <= threshold:
        raise ValueError(
            f"bracket [{lo}, {hi}] does not straddle the transition: "
            f"max Q_W = {np.max(qw_lo):.2e} at lo, {np.max(qw_hi):.2e} at hi"
        )
    if not per_atom:
        a, b = lo, hi
        while b - a > tol:
            mid = 0.5 * (a + b)
            if float(np.max(selected_qw(mid))) > threshold:
                b = mid
            else:
                a = mid
        alpha_sp = 0.5 * (a + b)
        return {"per_atom": {}, "alpha_sp": alpha_sp}
    per_atom_map: dict[float, float] = {}
    for i, v in enumerate(ro.values):
        if qw_hi[i] <= threshold:
            per_atom_map[float(v)] = math.inf  # not specialised anywhere in bracket
            continue
        a, b = lo, hi
        while b - a > tol:
            mid = 0.5 * (a + b)
            if selected_qw(mid)[i] > threshold:
                b = mid
            else:
                a = mid
        per_atom_map[float(v)] = 0.5 * (a + b)
    return {"per_atom": per_atom_map, "alpha_sp": min(per_atom_map.values())}


# ---------------------------------------------------------------------------
# factorised (diagonal-Gaussian) ansatz and its discrete branch selection
# ---------------------------------------------------------------------------

def _solve_universal(ctx: SaddleContext, cfg: Optional[SolverConfig] = None):
    """Universal branch of the main theory (two-scalar system)."""
    sol = iterate_saddle(ctx, _uninformative_state(ctx), cfg)
    return sol


def _factorised_f(state: SaddleState, ctx: SaddleContext) -> float:
    """Free entropy of the factorised ansatz (log term replaces the iota pair)."""
    act, ro = ctx.activation, ctx.readout
    av, pv = ro.values, ro.probs
    r2 = ctx.r2
    eg = float(np.sum(pv * av**2 * act.g(state.qw)))
    eq2 = float(np.sum(pv * av**2 * state.qw**2))
    q_k = act.mu1**2 + act.mu2**2 * state.q2 / 2.0 + eg
    r_k = act.mu1**2 + act.mu2**2 * r2 / 2.0 + act.g_one
    ent = float(np.sum(pv * (psi_w(ctx.prior, state.qw_hat) - 0.5 * state.qw * state.qw_hat)))
    return (
        psi_out(ctx.channel, min(q_k, r_k), r_k)
        + (r2 - state.q2) * state.q2_hat / (4.0 * ctx.alpha)
        + ctx.gamma / ctx.alpha * ent
        - math.log1p(state.q2_hat * (1.0 - eq2)) / (4.0 * ctx.alpha)
    )


def _iterate_factorised(ctx: SaddleContext, init: SaddleState, cfg: Optional[SolverConfig] = None) -> SaddleSolution:
    cfg = cfg or SolverConfig()
    th = cfg.damping
    act, ro = ctx.activation, ctx.readout
    av, pv = ro.values, ro.probs
    vbar = ro.mean
    r2 = ctx.r2
    st = init.copy()
    residual = math.inf
    for it in range(cfg.max_iter):
        eq2 = float(np.sum(pv * av**2 * st.qw**2))
        slope = _channel_slope(ctx, st)
        denom = 1.0 + st.q2_hat * (1.0 - eq2)
        qw_hat_new = np.clip(
            2.0 * (ctx.alpha / ctx.gamma) * av**2 * act.g_prime(st.qw) * slope
            + av**2 * st.qw * st.q2_hat / (ctx.gamma * denom),
            0.0,
            None,
        )
        q2_hat_new = 2.0 * ctx.alpha * act.mu2**2 * slope
        st.qw_hat = th * qw_hat_new + (1 - th) * st.qw_hat
        st.q2_hat = th * q2_hat_new + (1 - th) * st.q2_hat
        qw_new = np.asarray(posterior_mean_bracket(ctx.prior, st.qw_hat))
        eq2n = float(np.sum(pv * av**2 * qw_new**2))
        q2_new = r2 - (1.0 - eq2n) / (1.0 + st.q2_hat * (1.0 - eq2n))
        residual = max(float(np.max(np.abs(qw_new - st.qw))), abs(q2_new - st.q2))
        st.qw = np.clip(th * qw_new + (1 - th) * st.qw, 0.0, 1.0)
        st.q2 = th * min(max(q2_new, 0.0), r2) + (1 - th) * st.q2
        if residual < cfg.tol:
            break
    branch = "universal" if float(np.max(st.qw)) <= 1e-3 else "specialisation"
    return SaddleSolution(
        state=st,
        f_rs=_factorised_f(st, ctx),
        branch=branch,
        eps_opt=math.nan,
        mutual_info=math.nan,
        converged=residual < cfg.tol,
        residual=residual,
        iterations=it + 1,
    )


def simplified_ansatz_solve(
    ctx: SaddleContext,
    cfg: Optional[SolverConfig] = None,
    alpha_bracket: Optional[tuple[float, float]] = None,
) -> dict:
    """Factorised-ansatz branch comparison.

    Extremises the factorised potential from an informative init (f_sp) and
    the main theory universal potential (f_uni); the model free entropy is
    f_bar = max(f_uni, f_sp).  If alpha_bracket is given, also locates the
    crossing alpha_bar_sp by bisection on sign(f_uni - f_sp).
    """
    sp = _iterate_factorised(ctx, _informative_state(ctx), cfg)
    uni = _solve_universal(ctx, cfg)
    out = {
        "f_sp": sp.f_rs,
        "f_uni": uni.f_rs,
        "f_bar": max(sp.f_rs, uni.f_rs),
        "sp_solution": sp,
        "uni_solution": uni,
        "alpha_bar_sp": None,
    }
    if alpha_bracket is not None:
        lo, hi = alpha_bracket

        def sp_wins(alpha: float) -> bool:
            c = ctx.with_alpha(alpha)
            s = _iterate_factorised(c, _informative_state(c), cfg)
            u = _solve_universal(c, cfg)
            return s.f_rs > u.f_rs and s.branch == "specialisation"

        if sp_wins(lo) or not sp_wins(hi):
            raise ValueError("alpha bracket does not straddle the factorised crossing")
        while hi - lo > 1e-2:
            mid = 0.5 * (lo + hi)
            if sp_wins(mid):
                hi = mid
            else:
                lo = mid
        out["alpha_bar_sp"] = 0.5 * (lo + hi)
    return out


def universal_state_evolution(ctx: SaddleContext, max_iter: int = 500, tol: float = 1e-10):
    """State evolution of the universal two-scalar system.

    Iterates q2h^t = 4 alpha psi_out'(q_K(q2^t, 0)) mu_2^2/2 and
    q2^{t+1} = r2 - mmse(q2h^t); identical to the GAMP-RIE state evolution
    after the change of variables eta_t = q2h^t.
    """
    act = ctx.activation
    st = _uninformative_state(ctx)
    trace = []
    q2 = 0.0
    for _ in range(max_iter):
        st.q2 = q2
        slope = _channel_slope(ctx, st)
        q2h = 2.0 * ctx.alpha * act.mu2**2 * slope
        q2_new = ctx.r2 - ctx.table.mmse(q2h)
        trace.append((q2_new, q2h))
        if abs(q2_new - q2) < tol:
            break
        q2 = q2_new
    return trace
