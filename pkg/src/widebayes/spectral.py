"""Free-probability layer for the extensive-rank matrix denoising subproblem.

Signal: S = W^T diag(v) W / sqrt(kd) with i.i.d. unit-variance entries of W
(k = gamma*d rows); its limiting spectral density solves the weighted
Marchenko-Pastur self-consistency

    m(z) = 1 / ( -z + gamma * E_vt[ vt / (1 + vt m(z)) ] ),   vt = v / sqrt(gamma),

with the convention m(z) = int (x - z)^{-1} dmu(x), Im m > 0 for Im z > 0.
Observation at SNR eta: Y(eta) = sqrt(eta) S + Z with Z a standard GOE, whose
law is the free additive convolution law(sqrt(eta) S) boxplus sc(1).  In the
same convention the two fixed points combine into the single equation

    m(z) = 1 / ( -z - m(z) + sqrt(eta) gamma E_vt[ vt / (1 + sqrt(eta) vt m(z)) ] ).

From the densities: mmse_S(eta) = (1 - (4 pi^2 / 3) int mu_Y(eta)^3) / eta
(I-MMSE route, primary) and iota(eta) = 1/8 + Sigma(mu_Y(eta))/2 (log-energy
route, cross-check).  Fixed points are solved by a branch-guarded damped
Picard warm-up plus vectorised Newton; the cubic integrals are extrapolated
to zero smoothing width (the bias is linear in the width).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from .readouts import ReadoutLaw

__all__ = [
    "ConvergenceError",
    "SpectralDensity",
    "SpectralTable",
    "TAU_MAX",
    "TauResult",
    "build_mmse_table",
    "log_energy",
    "mmse_inverse",
    "observation_esd",
    "signal_esd",
    "tau_of_qw",
]

TABLE_VERSION = 1
TAU_MAX = 1.0e6
_EPS_FRACS = (2.0e-4, 1.0e-4, 5.0e-5)  # smoothing widths for Richardson, x support width


class ConvergenceError(RuntimeError):
    """Stieltjes fixed point failed to contract; carries the last residual."""

    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


@dataclass
class SpectralDensity:
    """Gridded limiting spectral density with its generating law attached."""

    grid: np.ndarray
    density: np.ndarray
    support: tuple[float, float]
    stieltjes: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    def total_mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def moment(self, p: int) -> float:
        return float(np.trapezoid(self.density * self.grid**p, self.grid))


def _guard(m: np.ndarray) -> np.ndarray:
    # keep the physical branch Im m > 0
    return np.where(m.imag <= 0, np.conj(m), m)


def _solve_fp(z, vt, pv, gamma, eta, m0=None, picard=300, tol=1e-12, max_total=10_000):
    """Solve the combined MP/semicircle fixed point at complex z (vectorised).

    eta = None solves the bare signal equation (no semicircle self-energy);
    eta = 0 the pure semicircle; eta > 0 the free convolution.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    m = _guard(m0.astype(complex).copy()) if m0 is not None else _guard(1.0 / (1j - z))
    col = vt[:, None]
    pw = pv[:, None]
    se = math.sqrt(eta) if eta not in (None, 0) else 0.0

    def picard_map(m):
        if eta is None:
            denom = -z + gamma * (pw * col / (1.0 + col * m[None, :])).sum(axis=0)
        elif eta == 0:
            denom = -z - m
        else:
            denom = -z - m + se * gamma * (pw * col / (1.0 + se * col * m[None, :])).sum(axis=0)
        return 1.0 / denom

    def f_and_fp(m):
        if eta is None:
            u = 1.0 + col * m[None, :]
            f = -1.0 / m + gamma * (pw * col / u).sum(axis=0) - z
            fp = 1.0 / m**2 - gamma * (pw * col**2 / u**2).sum(axis=0)
        elif eta == 0:
            f = -1.0 / m - m - z
            fp = 1.0 / m**2 - 1.0
        else:
            u = 1.0 + se * col * m[None, :]
            f = -1.0 / m - m + se * gamma * (pw * col / u).sum(axis=0) - z
            fp = 1.0 / m**2 - 1.0 - se**2 * gamma * (pw * col**2 / u**2).sum(axis=0)
        return f, fp

    total = 0
    residual = np.inf
    while total < max_total:
        for _ in range(picard):
            m = _guard(0.5 * picard_map(m) + 0.5 * m)
        total += picard
        for _ in range(60):
            f, fp = f_and_fp(m)
            m = _guard(m - f / fp)
            total += 1
        f, _ = f_and_fp(m)
        residual = float(np.max(np.abs(f)))
        if residual < tol * max(1.0, float(np.max(np.abs(z)))):
            return m, residual
    raise ConvergenceError("Stieltjes fixed point did not contract", residual)


def _support_bounds(vt, pv, gamma, eta):
    """Conservative bracket for the support of the (convolved) density."""
    vmax = float(np.max(np.abs(vt)))
    edge = gamma * vmax * (1.0 + 1.0 / math.sqrt(gamma)) ** 2
    if eta is None:
        return -edge - 0.5, edge + 0.5
    w = math.sqrt(eta) * edge + 2.0
    return -w - 0.5, w + 0.5


def signal_esd(readout: ReadoutLaw, gamma: float, resolution: int = 4000) -> SpectralDensity:
    """Limiting ESD of W^T diag(v) W / sqrt(kd) for the given readout law.

    The rank deficiency at gamma < 1 puts an atom of mass >= 1 - gamma at
    zero; a locally refined grid resolves its smoothed (Lorentzian-width
    epsilon) image so the trapezoid mass stays within 1e-3 of one.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    vt = readout.values / math.sqrt(gamma)
    pv = readout.probs
    lo, hi = _support_bounds(vt, pv, gamma, None)
    eps = 1e-4 * (hi - lo)
    xs = np.linspace(lo, hi, resolution)
    if gamma < 1:
        # refine around the atom at zero down to the smoothing scale
        half = max(60 * eps, 4 * (hi - lo) / resolution)
        cluster = np.arange(-half, half, eps / 5.0)
        xs = np.unique(np.concatenate([xs, cluster]))
    m, _ = _solve_fp(xs + 1j * eps, vt, pv, gamma, None)
    dens = np.clip(m.imag / math.pi, 0.0, None)

    def stieltjes(z):
        mz, _ = _solve_fp(z, vt, pv, gamma, None)
        return mz

    sd = SpectralDensity(grid=xs, density=dens, support=(lo, hi), stieltjes=stieltjes)
    sd.law = ("weighted_mp", vt, pv, gamma)
    return sd


def observation_esd(signal: SpectralDensity, eta: float, resolution: int = 4000) -> SpectralDensity:
    """ESD of sqrt(eta)*S boxplus sc(1); eta = 0 is the unit semicircle exactly."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if eta == 0:
        xs = np.linspace(-2.0, 2.0, resolution)
        dens = np.sqrt(np.clip(4.0 - xs**2, 0.0, None)) / (2.0 * math.pi)
        sd = SpectralDensity(grid=xs, density=dens, support=(-2.0, 2.0))
        sd.law = getattr(signal, "law", None)
        return sd
    if not hasattr(signal, "law"):
        raise ValueError("signal density lacks its generating law; build it with signal_esd")
    _, vt, pv, gamma = signal.law
    xs, dens_list, _ = _observation_densities(vt, pv, gamma, eta, resolution, (_EPS_FRACS[-1],))
    sd = SpectralDensity(grid=xs, density=dens_list[0], support=(float(xs[0]), float(xs[-1])))
    sd.law = signal.law
    return sd


def _observation_densities(vt, pv, gamma, eta, resolution, eps_fracs):
    """Observation density at several smoothing widths, trimmed to support."""
    lo, hi = _support_bounds(vt, pv, gamma, eta)
    xs = np.linspace(lo, hi, resolution)
    dens = []
    m = None
    for ef in eps_fracs:
        eps = ef * (hi - lo)
        m, _ = _solve_fp(xs + 1j * eps, vt, pv, gamma, eta, m0=m)
        dens.append(np.clip(m.imag / math.pi, 0.0, None))
    nz = np.where(dens[-1] > 1e-12)[0]
    if nz.size:
        i0, i1 = max(int(nz[0]) - 3, 0), min(int(nz[-1]) + 3, resolution - 1)
        xs = xs[i0 : i1 + 1]
        dens = [d[i0 : i1 + 1] for d in dens]
    return xs, dens, m


def _cubic_integral_extrapolated(xs, dens, eps_fracs):
    """(4 pi^2 / 3) int rho^3, extrapolated to zero smoothing width."""
    ts = np.array([(4 * math.pi**2 / 3) * np.trapezoid(d**3, xs) for d in dens])
    if len(eps_fracs) == 1:
        return float(ts[0])
    coef = np.linalg.solve(np.vander(np.asarray(eps_fracs), len(eps_fracs)), ts)
    return float(coef[-1])


def log_energy(mu: SpectralDensity) -> float:
    """Sigma(mu) = int int ln|x - y| dmu(x) dmu(y).

    The log singularity on the diagonal is handled by the closed form for a
    uniform cell: int int over a square of side h equals h^2 (ln h - 3/2) at
    leading order.  Requires a uniform grid.
    """
    xs, dens = mu.grid, mu.density
    h = float(xs[1] - xs[0])
    if not np.allclose(np.diff(xs), h, rtol=1e-6):
        raise ValueError("log_energy expects a uniform grid")
    w = np.full(xs.size, h)
    w[0] = w[-1] = h / 2.0
    mass = dens * w
    mass = mass / mass.sum()
    diff = np.abs(xs[:, None] - xs[None, :])
    np.fill_diagonal(diff, 1.0)
    lg = np.log(diff)
    np.fill_diagonal(lg, 0.0)
    off = float(mass @ lg @ mass)
    diag = float(np.sum(mass**2)) * (math.log(h) - 1.5)
    return off + diag


# ---------------------------------------------------------------------------
# mmse / iota table
# ---------------------------------------------------------------------------

@dataclass
class SpectralTable:
    """Tabulated mmse_S(eta) and iota(eta) with smooth monotone interpolants.

    Beyond eta_max the mmse follows the fitted tail eta*mmse = C - D/sqrt(eta)
    and iota its exact integral.  Route A (I-MMSE cumulative integral) is the
    primary iota; route B (1/8 + Sigma/2) is stored for cross-checks where
    computed.
    """

    eta_grid: np.ndarray
    mmse_values: np.ndarray
    iota_values: np.ndarray
    signal_esd: SpectralDensity
    gamma: float
    readout: ReadoutLaw
    iota_b_values: np.ndarray  # NaN where route B was not evaluated
    tail_C: float
    tail_D: float
    version: int = TABLE_VERSION

    def __post_init__(self):
        ln_eta = np.log(self.eta_grid[1:])
        self._lnm = PchipInterpolator(ln_eta, np.log(self.mmse_values[1:]))
        self._lnm_d = self._lnm.derivative()
        self._eta0 = float(self.eta_grid[1])
        self._mm0 = float(self.mmse_values[1])
        self._eta_max = float(self.eta_grid[-1])
        # iota re-integrated from the smooth mmse interpolant on a refined
        # grid, so that 4 iota'(eta) = mmse(eta) holds to interpolation
        # accuracy (the saddle stationarity checks rely on it)
        u_ref = np.linspace(ln_eta[0], ln_eta[-1], 16 * ln_eta.size)
        eta_ref = np.exp(u_ref)
        mm_ref = np.exp(self._lnm(u_ref))
        head = 0.25 * self._eta0 * (1.0 + self._mm0) / 2.0
        iota_ref = head + np.concatenate(
            [[0.0], np.cumsum(0.25 * (mm_ref[1:] + mm_ref[:-1]) / 2.0 * np.diff(eta_ref))]
        )
        self._io = PchipInterpolator(u_ref, iota_ref)
        self._iota_max = float(iota_ref[-1])
        # monotone inverse interpolant for warm starts of mmse_inverse
        mm = self.mmse_values[1:]
        keep = np.concatenate([[True], np.diff(mm) < 0])
        self._inv = PchipInterpolator(np.log(mm[keep])[::-1], ln_eta[keep][::-1])

    # -- evaluation ------------------------------------------------------
    def mmse(self, eta):
        eta = np.asarray(eta, dtype=float)
        scalar = eta.ndim == 0
        eta = np.atleast_1d(eta)
        out = np.empty_like(eta)
        lo = eta <= self._eta0
        hi = eta >= self._eta_max
        mid = ~lo & ~hi
        out[lo] = 1.0 + (self._mm0 - 1.0) * eta[lo] / self._eta0
        if np.any(mid):
            out[mid] = np.exp(self._lnm(np.log(eta[mid])))
        if np.any(hi):
            e = eta[hi]
            out[hi] = (self.tail_C - self.tail_D / np.sqrt(e)) / e
        return float(out[0]) if scalar else out

    def mmse_prime(self, eta):
        eta = float(eta)
        if eta >= self._eta_max:
            return -(self.tail_C - 1.5 * self.tail_D / math.sqrt(eta)) / eta**2
        if eta <= self._eta0:
            return (self._mm0 - 1.0) / self._eta0
        ln = math.log(eta)
        return float(math.exp(self._lnm(ln)) * self._lnm_d(ln) / eta)

    def iota(self, eta):
        eta = np.asarray(eta, dtype=float)
        scalar = eta.ndim == 0
        eta = np.atleast_1d(eta)
        out = np.empty_like(eta)
        lo = eta <= self._eta0
        hi = eta >= self._eta_max
        mid = ~lo & ~hi
        # I-MMSE from zero with the pinned endpoint mmse(0) = 1
        out[lo] = 0.25 * eta[lo] * (1.0 + self.mmse(eta[lo])) / 2.0
        if np.any(mid):
            out[mid] = self._io(np.log(eta[mid]))
        if np.any(hi):
            e = eta[hi]
            em = self._eta_max
            out[hi] = self._iota_max + 0.25 * (
                self.tail_C * np.log(e / em)
                + 2.0 * self.tail_D * (1.0 / np.sqrt(e) - 1.0 / math.sqrt(em))
            )
        return float(out[0]) if scalar else out

    # -- cache -----------------------------------------------------------
    def cache_key(self) -> str:
        return _cache_key(self.readout, self.gamma, self.eta_grid, self.version)

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"spectral_{self.cache_key()}.npz")
        np.savez(
            path,
            eta_grid=self.eta_grid,
            mmse_values=self.mmse_values,
            iota_values=self.iota_values,
            iota_b_values=self.iota_b_values,
            sig_grid=self.signal_esd.grid,
            sig_density=self.signal_esd.density,
            sig_support=np.asarray(self.signal_esd.support),
            gamma=self.gamma,
            atoms=self.readout.values,
            probs=self.readout.probs,
            tail=np.asarray([self.tail_C, self.tail_D]),
            version=self.version,
        )
        meta = {
            "version": self.version,
            "gamma": self.gamma,
            "eta_max": float(self.eta_grid[-1]),
            "n_eta": int(self.eta_grid.size),
            "readout_atoms": self.readout.values.tolist(),
        }
        with open(path.replace(".npz", ".json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        return path


def _cache_key(readout: ReadoutLaw, gamma: float, eta_grid: np.ndarray, version: int = TABLE_VERSION) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(readout.values, dtype=float).tobytes())
    h.update(np.asarray(readout.probs, dtype=float).tobytes())
    h.update(np.asarray([gamma], dtype=float).tobytes())
    h.update(np.asarray(eta_grid, dtype=float).tobytes())
    h.update(str(version).encode())
    return h.hexdigest()[:16]


def load_table(path: str) -> SpectralTable:
    from .readouts import ReadoutLaw  # local to avoid cycle at import time

    z = np.load(path)
    if int(z["version"]) != TABLE_VERSION:
        raise ValueError(f"cache version {int(z['version'])} != {TABLE_VERSION}")
    readout = ReadoutLaw(values=z["atoms"], probs=z["probs"])
    sig = SpectralDensity(
        grid=z["sig_grid"],
        density=z["sig_density"],
        support=tuple(z["sig_support"]),
    )
    sig.law = ("weighted_mp", readout.values / math.sqrt(float(z["gamma"])), readout.probs, float(z["gamma"]))
    return SpectralTable(
        eta_grid=z["eta_grid"],
        mmse_values=z["mmse_values"],
        iota_values=z["iota_values"],
        iota_b_values=z["iota_b_values"],
        signal_esd=sig,
        gamma=float(z["gamma"]),
        readout=readout,
        tail_C=float(z["tail"][0]),
        tail_D=float(z["tail"][1]),
    )


def default_eta_grid(eta_max: float = 500.0, n_low: int = 90, n_high: int = 26) -> np.ndarray:
    """{0} + geometric [0.005, 10] (dense, cross-check zone) + geometric tail."""
    low = np.geomspace(0.005, 10.0, n_low)
    high = np.geomspace(10.0, eta_max, n_high + 1)[1:]
    return np.concatenate([[0.0], low, high])


def build_mmse_table(
    readout: ReadoutLaw,
    gamma: float,
    eta_grid: Optional[np.ndarray] = None,
    resolution: int = 4000,
    route_b_max: float = 12.0,
    cache_dir: Optional[str] = None,
) -> SpectralTable:
    """Tabulate mmse_S and iota over eta_grid for one (gamma, readout) pair.

    iota route A integrates mmse/4 from zero (primary); route B evaluates
    1/8 + Sigma(mu_Y)/2 up to route_b_max for the internal consistency check.
    Raises on route disagreement beyond 1e-2.
    """
    if eta_grid is None:
        eta_grid = default_eta_grid()
    eta_grid = np.asarray(eta_grid, dtype=float)
    if eta_grid[0] != 0.0 or eta_grid[-1] < 50.0:
        raise ValueError("eta grid must start at 0 and reach at least 50")

    if cache_dir:
        path = os.path.join(cache_dir, f"spectral_{_cache_key(readout, gamma, eta_grid)}.npz")
        if os.path.exists(path):
            return load_table(path)

    sig = signal_esd(readout, gamma, resolution=resolution)
    vt = readout.values / math.sqrt(gamma)
    pv = readout.probs

    mm = np.empty_like(eta_grid)
    iob = np.full_like(eta_grid, np.nan)
    mm[0] = 1.0
    iob[0] = 0.125 + 0.5 * (-0.25)  # exact semicircle log-energy
    for i, eta in enumerate(eta_grid[1:], 1):
        xs, dens, _ = _observation_densities(vt, pv, gamma, eta, resolution, _EPS_FRACS)
        mm[i] = (1.0 - _cubic_integral_extrapolated(xs, dens, _EPS_FRACS)) / eta
        if eta <= route_b_max:
            step = max(1, xs.size // 2200)  # keep the O(N^2) double sum cheap
            mu = SpectralDensity(
                grid=xs[::step], density=dens[-1][::step],
                support=(float(xs[0]), float(xs[-1])),
            )
            iob[i] = 0.125 + 0.5 * log_energy(mu)
    mm = np.minimum.accumulate(np.clip(mm, 0.0, 1.0))
    iota = np.concatenate(
        [[0.0], np.cumsum(0.25 * (mm[1:] + mm[:-1]) / 2.0 * np.diff(eta_grid))]
    )

    sel = eta_grid >= eta_grid[-1] / 10.0
    A = np.c_[np.ones(int(sel.sum())), -1.0 / np.sqrt(eta_grid[sel])]
    (tail_C, tail_D), *_ = np.linalg.lstsq(A, eta_grid[sel] * mm[sel], rcond=None)

    checked = ~np.isnan(iob)
    max_diff = float(np.max(np.abs(iota[checked] - iob[checked])))
    if max_diff > 1e-2:
        raise ConvergenceError("iota route A/B disagree", max_diff)

    table = SpectralTable(
        eta_grid=eta_grid,
        mmse_values=mm,
        iota_values=iota,
        iota_b_values=iob,
        signal_esd=sig,
        gamma=gamma,
        readout=readout,
        tail_C=float(tail_C),
        tail_D=float(tail_D),
    )
    if cache_dir:
        table.save(cache_dir)
    return table


def mmse_inverse(table: SpectralTable, m: float) -> float:
    """eta with mmse_S(eta) = m +- 1e-6, by safeguarded bisection refinement.

    The monotone inverse interpolant provides the starting bracket; m at or
    below zero saturates at TAU_MAX; m below the tabulated minimum uses the
    fitted C/eta tail.
    """
    if m > 1.0:
        raise ValueError("mmse values never exceed 1")
    if m >= 1.0:
        return 0.0
    if m <= 0.0:
        return TAU_MAX
    m_min = table.mmse(table._eta_max)
    if m > m_min:
        if m >= table._mm0:
            # linear head segment, exact inverse
            return table._eta0 * (1.0 - m) / (1.0 - table._mm0)
        eta = float(np.exp(table._inv(math.log(m))))
        for _ in range(8):
            val = table.mmse(eta)
            if abs(val - m) < 1e-10:
                return eta
            step = (val - m) / table.mmse_prime(eta)
            eta = min(max(eta - step, table._eta0), table._eta_max)
        if abs(table.mmse(eta) - m) < 1e-7:
            return eta
        lo, hi = table._eta0, table._eta_max
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = table.mmse(mid)
            if val > m:
                lo = mid
            else:
                hi = mid
            if abs(val - m) < 1e-10 or hi - lo < 1e-12 * max(1.0, hi):
                break
        return 0.5 * (lo + hi)
    eta = table.tail_C / m
    for _ in range(80):
        eta = max((table.tail_C - table.tail_D / math.sqrt(eta)) / m, table._eta_max)
    return min(eta, TAU_MAX)


@dataclass
class TauResult:
    tau: float
    dtau_dqw: np.ndarray  # partial derivative per atom, includes the P_v weight
    saturated: bool


def tau_of_qw(qw: np.ndarray, readout: ReadoutLaw, table: SpectralTable) -> TauResult:
    """Moment-matching multiplier tau = mmse^{-1}(1 - E_v[v^2 Q_W(v)^2]).

    dtau_dqw is the true partial derivative -2 P_v(v) v^2 Q_W(v) / mmse'(tau)
    per atom; divide by P_v(v) for the functional derivative entering the
    saddle-point equations.
    """
    qw = np.asarray(qw, dtype=float)
    if np.any(qw < -1e-12) or np.any(qw > 1 + 1e-12):
        raise ValueError("overlaps must lie in [0, 1]")
    target = 1.0 - float(np.sum(readout.probs * readout.values**2 * qw**2))
    tau = mmse_inverse(table, target)
    saturated = tau >= TAU_MAX
    mp = table.mmse_prime(min(tau, table._eta_max * 0.999999)) if tau < table._eta_max else table.mmse_prime(tau)
    dtau = -2.0 * readout.probs * readout.values**2 * qw / mp
    return TauResult(tau=tau, dtau_dqw=dtau, saturated=saturated)
