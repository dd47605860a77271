"""Car-following acceleration laws (IDM, Gipps, GHR) and their calibration.

All three laws are written against a single "actual leader": the follower's
speed ``v``, the leader's speed ``v_lead`` and the longitudinal gap
``gap = x_lead - x``.  Functions accept scalars or numpy arrays.
"""
from __future__ import annotations

import logging
from dataclasses import astuple, dataclass, fields
from typing import ClassVar, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import qmc

from .kinematics import VehicleState

logger = logging.getLogger(__name__)

EPSILON_GAP = 0.1  # m; closer than this the law is not evaluated
SATURATED_DECEL = -5.0  # m/s^2, used by laws without their own B


def spow(d, e):
    """Sign-preserving power ``sign(d) * |d|**e`` with ``spow(0, e) == 0``."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.where(d == 0.0, 0.0, np.sign(d) * np.abs(d) ** e)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class IdmParams:
    s0: float
    h_d: float
    A: float
    B: float
    v_d: float
    delta: float

    BOUNDS: ClassVar = ((5.0, 30.0), (0.5, 6.0), (0.5, 5.0), (0.5, 5.0), (5.0, 35.0), (0.0, 10.0))


@dataclass(frozen=True)
class GippsParams:
    alpha: float
    beta: float
    gamma: float

    BOUNDS: ClassVar = ((-10.0, 10.0), (-5.0, 5.0), (-5.0, 5.0))


@dataclass(frozen=True)
class GhrParams:
    alpha: float
    beta: float
    gamma: float

    BOUNDS: ClassVar = ((-10.0, 10.0), (-5.0, 5.0), (-5.0, 5.0))


PARAM_TYPES = {"idm": IdmParams, "gipps": GippsParams, "ghr": GhrParams}
FAMILIES = tuple(PARAM_TYPES)


def param_names(family: str) -> list[str]:
    return [f.name for f in fields(PARAM_TYPES[family])]


def in_bounds(p) -> bool:
    return all(lo <= val <= hi for val, (lo, hi) in zip(astuple(p), p.BOUNDS))


# -- acceleration laws -------------------------------------------------------

def idm_acceleration(v, v_lead, gap, p: IdmParams):
    """IDM acceleration; gaps below ``EPSILON_GAP`` return ``-B``.

    Negative own speeds (possible after smoothing) are treated as zero in the
    free-road term.
    """
    v = np.asarray(v, dtype=float)
    v_lead = np.asarray(v_lead, dtype=float)
    gap = np.asarray(gap, dtype=float)
    s_d = p.s0 + p.h_d * v + v * (v - v_lead) / (2.0 * np.sqrt(p.A * p.B))
    ok = gap >= EPSILON_GAP
    safe_gap = np.where(ok, gap, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        acc = p.A * (1.0 - (np.maximum(v, 0.0) / p.v_d) ** p.delta - (s_d / safe_gap) ** 2)
    out = np.where(ok, acc, -p.B)
    return out if out.ndim else float(out)


def gipps_acceleration(v, v_lead, gap, p: GippsParams):
    """``alpha * spow(v_lead - v, beta) / |gap|**gamma``."""
    v = np.asarray(v, dtype=float)
    mag = np.abs(np.asarray(gap, dtype=float))
    ok = mag >= EPSILON_GAP
    safe = np.where(ok, mag, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        acc = p.alpha * spow(np.asarray(v_lead) - v, p.beta) / safe ** p.gamma
    out = np.where(ok, acc, SATURATED_DECEL)
    return out if out.ndim else float(out)


def ghr_acceleration(v, v_lead, gap, p: GhrParams):
    """``alpha * spow(v, beta) * (v_lead - v) / spow(gap, gamma)``."""
    v = np.asarray(v, dtype=float)
    gap = np.asarray(gap, dtype=float)
    ok = gap >= EPSILON_GAP
    safe = np.where(ok, gap, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        acc = p.alpha * spow(v, p.beta) * (np.asarray(v_lead) - v) / spow(safe, p.gamma)
    out = np.where(ok, acc, SATURATED_DECEL)
    return out if out.ndim else float(out)


ACCELERATION = {"idm": idm_acceleration, "gipps": gipps_acceleration, "ghr": ghr_acceleration}


def gap_saturated(ego: VehicleState, leader: VehicleState, family: str) -> bool:
    """True when the gap is too small for the law and saturation applies."""
    gap = leader.x - ego.x
    return abs(gap) < EPSILON_GAP if family == "gipps" else gap < EPSILON_GAP


def idm_accel(ego: VehicleState, leader: VehicleState, p: IdmParams) -> float:
    return idm_acceleration(ego.v, leader.v, leader.x - ego.x, p)


def gipps_accel(ego: VehicleState, leader: VehicleState, p: GippsParams) -> float:
    return gipps_acceleration(ego.v, leader.v, leader.x - ego.x, p)


def ghr_accel(ego: VehicleState, leader: VehicleState, p: GhrParams) -> float:
    return ghr_acceleration(ego.v, leader.v, leader.x - ego.x, p)


def accel(family: str, ego: VehicleState, leader: VehicleState, p) -> float:
    return ACCELERATION[family](ego.v, leader.v, leader.x - ego.x, p)


# -- calibration -------------------------------------------------------------

@dataclass(frozen=True)
class CfParams:
    """Fitted parameters for one family plus fit diagnostics."""

    family: str
    params: IdmParams | GippsParams | GhrParams
    mse: float
    converged: bool
    iterations: int

    def accel(self, ego: VehicleState, leader: VehicleState) -> float:
        return accel(self.family, ego, leader, self.params)

    def to_record(self) -> dict:
        rec = {"family": self.family}
        rec.update({f"p_{k}": v for k, v in zip(param_names(self.family), astuple(self.params))})
        rec.update(mse=self.mse, converged=int(self.converged), iterations=self.iterations)
        return rec


@dataclass
class FitConfig:
    n_starts: int = 16
    seed: int = 0
    maxiter: int = 150  # simplex iterations; the polish supplies the final precision
    xatol: float = 1e-8
    fatol: float = 1e-14
    polish: bool = True
    polish_top: int = 3  # best simplex results handed to the least-squares polish
    polish_nfev: int = 200


def window_model(family: str, v, v_lead, gap):
    """Acceleration of ``family`` over a fixed window, and its Jacobian, as
    functions of the raw parameter vector.

    The law accepts a single vector of shape ``(n_params,)`` or a batch of
    shape ``(k, n_params)``, returning ``(n,)`` or ``(k, n)``.  Everything
    that does not depend on the parameters (gap floor mask, logs of the
    power bases) is computed once.  Agrees with :data:`ACCELERATION` to
    rounding.
    """
    v, v_lead, gap = (np.asarray(a, dtype=float) for a in (v, v_lead, gap))

    def cols(x):
        x = np.asarray(x, dtype=float)
        return [x[..., j, None] for j in range(x.shape[-1])]

    if family == "idm":
        ok = gap >= EPSILON_GAP
        inv_gap = 1.0 / np.where(ok, gap, 1.0)
        v_pos = np.maximum(v, 0.0)
        moving = v_pos > 0
        cross = v * (v - v_lead)
        log_r = np.log(np.where(moving, v_pos, 1.0))

        def parts(x):
            s0, h_d, A, B, v_d, delta = cols(x)
            root = np.sqrt(A * B)
            q = (s0 + h_d * v + cross / (2.0 * root)) * inv_gap
            r_d = np.where(moving, np.exp(delta * (log_r - np.log(v_d))), 0.0 ** delta)
            return A, B, v_d, delta, root, q, r_d

        def law(x):
            A, B, _, _, _, q, r_d = parts(x)
            return np.where(ok, A * (1.0 - r_d - q * q), -B)

        def jac(x):
            A, B, v_d, delta, root, q, r_d = parts(x)
            dq = -2.0 * A * q * inv_gap
            shift = q * cross * inv_gap / (2.0 * root)
            J = np.stack([dq, dq * v, 1.0 - r_d - q * q + shift, A * shift / B,
                          A * delta * r_d / v_d, -A * r_d * (log_r - np.log(v_d))], axis=-1)
            J[~ok] = 0.0
            J[~ok, 3] = -1.0
            return J
        return law, jac

    def signed_log(d):
        nz = d != 0
        return np.sign(d), np.where(nz, np.log(np.abs(np.where(nz, d, 1.0))), 0.0)

    if family == "gipps":
        ok = np.abs(gap) >= EPSILON_GAP
        log_gap = np.log(np.where(ok, np.abs(gap), 1.0))
        factor, log_base = signed_log(v_lead - v)
    elif family == "ghr":
        ok = gap >= EPSILON_GAP
        log_gap = np.log(np.where(ok, gap, 1.0))
        sgn, log_base = signed_log(v)
        factor = sgn * (v_lead - v)
    else:
        raise ValueError(f"unknown family {family!r}")

    def law(x):
        alpha, beta, gamma = cols(x)
        return np.where(ok, alpha * factor * np.exp(beta * log_base - gamma * log_gap), SATURATED_DECEL)

    def jac(x):
        alpha, beta, gamma = cols(x)
        core = np.where(ok, factor * np.exp(beta * log_base - gamma * log_gap), 0.0)
        return np.stack([core, alpha * core * log_base, -alpha * core * log_gap], axis=-1)
    return law, jac


def batch_nelder_mead(fun, x0, lo, hi, maxiter=400, xatol=1e-8, fatol=1e-14):
    """Bound-projected Nelder-Mead run on several starting points at once.

    ``fun`` maps a ``(k, n)`` batch of points to ``k`` objective values.
    Every simplex follows the usual reflect/expand/contract/shrink rules
    with dimension-adapted coefficients; trial points are clipped into
    ``[lo, hi]``, and a converged simplex is rebuilt around its best vertex
    until the rebuild stops improving it.  All simplexes share one vectorized evaluation per move,
    which is far cheaper than looping over starts.  Returns
    ``(best_points, best_values, converged, iterations)`` per start.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    k, n = x0.shape
    rho, chi, psi, sigma = 1.0, 1.0 + 2.0 / n, 0.75 - 0.5 / n, 1.0 - 1.0 / n
    step = 0.05 * (hi - lo)

    def simplex(x):
        s = np.repeat(x[:, None, :], n + 1, axis=1)
        for j in range(n):
            up = s[:, j + 1, j] + step[j]
            s[:, j + 1, j] = np.where(up <= hi[j], up, s[:, j + 1, j] - step[j])
        return s, fun(s.reshape(-1, n)).reshape(len(x), n + 1)

    sim, fsim = simplex(x0)
    rows = np.arange(k)
    active = np.ones(k, dtype=bool)
    iters = np.zeros(k, dtype=int)
    restart_f = np.full(k, np.inf)

    for _ in range(maxiter):
        order = np.argsort(fsim, axis=1, kind="stable")
        sim = np.take_along_axis(sim, order[:, :, None], axis=1)
        fsim = np.take_along_axis(fsim, order, axis=1)
        done = ((np.max(np.abs(sim[:, 1:] - sim[:, :1]), axis=(1, 2)) <= xatol)
                & (np.max(np.abs(fsim[:, 1:] - fsim[:, :1]), axis=1) <= fatol))
        # clipping can flatten a simplex against a bound; rebuild it around
        # the best vertex until a rebuild no longer improves the value
        again = done & active & (fsim[:, 0] < restart_f - fatol)
        if again.any():
            restart_f[again] = fsim[again, 0]
            sim[again], fsim[again] = simplex(sim[again, 0])
            done &= ~again
        active &= ~done
        if not active.any():
            break
        iters[active] += 1
        worst = sim[:, -1]
        cen = sim[:, :-1].mean(axis=1)
        xr = np.clip(cen + rho * (cen - worst), lo, hi)
        xe = np.clip(cen + rho * chi * (cen - worst), lo, hi)
        xoc = np.clip(cen + psi * rho * (cen - worst), lo, hi)
        xic = np.clip(cen - psi * (cen - worst), lo, hi)
        fr, fe, foc, fic = fun(np.concatenate([xr, xe, xoc, xic])).reshape(4, k)

        f_best, f_second, f_worst = fsim[:, 0], fsim[:, -2], fsim[:, -1]
        new_x, new_f = worst.copy(), f_worst.copy()
        expand = fr < f_best
        use_e = expand & (fe < fr)
        reflect = (~expand & (fr < f_second)) | (expand & ~use_e)
        outside = ~expand & ~reflect & (fr < f_worst)
        inside = ~expand & ~reflect & ~outside
        ok_out = outside & (foc <= fr)
        ok_in = inside & (fic < f_worst)
        shrink = (outside & ~ok_out) | (inside & ~ok_in)
        for mask, x, f in ((use_e, xe, fe), (reflect, xr, fr), (ok_out, xoc, foc), (ok_in, xic, fic)):
            new_x[mask], new_f[mask] = x[mask], f[mask]
        upd = active & ~shrink
        sim[upd, -1], fsim[upd, -1] = new_x[upd], new_f[upd]
        shr = active & shrink
        if shr.any():
            pts = sim[shr, :1] + sigma * (sim[shr, 1:] - sim[shr, :1])
            sim[shr, 1:] = pts
            fsim[shr, 1:] = fun(pts.reshape(-1, n)).reshape(-1, n)

    best = np.argmin(fsim, axis=1)
    return sim[rows, best], fsim[rows, best], ~active, iters


def fit_cf(family: str, v, v_lead, gap, a_obs, cfg: FitConfig | None = None) -> CfParams:
    """Bounded multi-start fit minimizing mean squared acceleration error.

    Starts come from a seeded Latin hypercube over the family's bounds and
    all run a bound-projected Nelder-Mead search together.  The
    ``polish_top`` best simplex results are then refined by a bounded
    dogleg least-squares solve.  Ties keep the earliest start.
    """
    cfg = cfg or FitConfig()
    ptype = PARAM_TYPES[family]
    bounds = np.array(ptype.BOUNDS)
    lo, hi = bounds[:, 0], bounds[:, 1]
    arrays = [np.asarray(a, dtype=float) for a in (v, v_lead, gap, a_obs)]
    if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
        raise ValueError("window arrays must be 1-D and share one length")
    law, jac = window_model(family, *arrays[:3])
    a_obs = arrays[3]

    def batch_mse(X):
        r = law(X) - a_obs
        m = np.mean(r * r, axis=-1)
        return np.where(np.isfinite(m), m, 1e12)

    starts = qmc.scale(qmc.LatinHypercube(d=len(lo), seed=cfg.seed).random(cfg.n_starts), lo, hi)
    with np.errstate(all="ignore"):
        xs, fs, conv, nit = batch_nelder_mead(batch_mse, starts, lo, hi, cfg.maxiter,
                                              cfg.xatol, cfg.fatol)
        order = np.argsort(fs, kind="stable")
        best_x, best_f, best_conv = xs[order[0]], float(fs[order[0]]), bool(conv[order[0]])
        iters = int(nit.sum())

        def resid(values):
            r = law(values) - a_obs
            return np.where(np.isfinite(r), r, 1e6)

        span = hi - lo
        for j in order[:cfg.polish_top] if cfg.polish else []:
            if best_f < 1e-16:
                break
            try:
                # keep strictly inside the box; the solver rejects starts on the boundary
                x0 = np.clip(xs[j], lo + 1e-9 * span, hi - 1e-9 * span)
                ls = least_squares(resid, x0, jac=jac, bounds=(lo, hi), method="dogbox",
                                   xtol=1e-10, ftol=1e-10, gtol=1e-10, max_nfev=cfg.polish_nfev)
            except ValueError as exc:  # degenerate Jacobian etc.
                logger.debug("polish skipped: %s", exc)
                continue
            iters += int(ls.nfev)
            x = np.clip(ls.x, lo, hi)
            f = float(batch_mse(x))
            if f < best_f:
                best_x, best_f, best_conv = x, f, ls.status > 0 or best_conv

    return CfParams(family, ptype(*(float(x) for x in best_x)), best_f, best_conv, iters)


def fit_window(family: str, ego: Sequence[VehicleState], leader: Sequence[VehicleState],
               cfg: FitConfig | None = None) -> CfParams:
    """Fit ``family`` to paired (ego, actual-leader) states; the ego's own
    ``a`` field is the observed acceleration."""
    if len(ego) != len(leader) or len(ego) < 2:
        raise ValueError("need equally long ego and leader windows of at least 2 states")
    v = np.array([s.v for s in ego])
    v_lead = np.array([s.v for s in leader])
    gap = np.array([m.x - s.x for s, m in zip(ego, leader)])
    a_obs = np.array([s.a for s in ego])
    return fit_cf(family, v, v_lead, gap, a_obs, cfg)


def params_from_record(rec: dict) -> CfParams:
    family = rec["family"]
    values = [float(rec[f"p_{k}"]) for k in param_names(family)]
    return CfParams(family, PARAM_TYPES[family](*values), float(rec["mse"]),
                    bool(int(rec["converged"])), int(rec["iterations"]))
