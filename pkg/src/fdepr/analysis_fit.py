"""Least-squares fits: exponential decays, (skewed) Lorentzian lines, damped
Rabi oscillations, plus the two routes from fit results to a coupling constant.

All models are fitted with Levenberg-Marquardt (MINPACK via
``scipy.optimize.least_squares``) using analytic Jacobians.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares


class FitError(RuntimeError):
    """The optimizer did not converge or the parameters are not identifiable."""


class NoOscillationError(FitError):
    """The data carry no detectable Rabi oscillation."""


@dataclass
class FitResult:
    names: tuple
    values: np.ndarray
    errors: np.ndarray
    units: tuple
    residual_norm: float
    initial_residual_norm: float
    converged: bool
    nfev: int
    derived: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        if name in self.derived:
            return self.derived[name]
        return float(self.values[self.names.index(name)])

    def error(self, name: str) -> float:
        return float(self.errors[self.names.index(name)])

    def as_dict(self) -> dict:
        out = {n: float(v) for n, v in zip(self.names, self.values)}
        out.update({f"{n}_err": float(e) for n, e in zip(self.names, self.errors)})
        out.update(self.derived)
        return out


def _weights(y, weights):
    if weights is None:
        return np.ones_like(y)
    if isinstance(weights, str):
        if weights != "poisson":
            raise ValueError(f"unknown weighting {weights!r}")
        return 1.0 / np.sqrt(1.0 + np.abs(y))
    w = np.asarray(weights, float)
    if w.shape != y.shape or np.any(w < 0):
        raise ValueError("weights must be non-negative and match the data")
    return w


def _solve(model, jac, x, y, p0, w, names, units, max_nfev=2000) -> FitResult:
    p0 = np.asarray(p0, float)

    def resid(p):
        return w * (model(p, x) - y)

    def jacobian(p):
        return w[:, None] * jac(p, x)

    r0 = resid(p0)
    if not np.all(np.isfinite(r0)):
        raise FitError("model is not finite at the initial guess")
    sol = least_squares(resid, p0, jac=jacobian, method="lm", x_scale="jac", max_nfev=max_nfev,
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if sol.status <= 0 or not np.all(np.isfinite(sol.x)):
        raise FitError(f"fit did not converge: {sol.message}")
    J = sol.jac
    m, n = J.shape
    # rank check: a parameter the data cannot pin down makes J^T J singular
    norms = np.linalg.norm(J, axis=0)
    if np.any(norms == 0):
        raise FitError("parameters are not identifiable from these data")
    sv = np.linalg.svd(J / norms, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-12:
        raise FitError("parameters are not identifiable from these data")
    cost = float(np.sum(sol.fun**2))
    dof = max(m - n, 1)
    cov = np.linalg.pinv(J.T @ J) * (cost / dof)
    errors = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return FitResult(tuple(names), sol.x.copy(), errors, tuple(units), math.sqrt(cost),
                     float(np.linalg.norm(r0)), True, int(sol.nfev))


# --------------------------------------------------------------------------
# exponential


def _exp_model(p, t):
    a, tau, c = p
    return a * np.exp(-t / tau) + c


def _exp_jac(p, t):
    a, tau, c = p
    e = np.exp(-t / tau)
    return np.column_stack([e, a * e * t / tau**2, np.ones_like(t)])


def fit_exponential(t, y, window: tuple[float, float] | None = None, offset: bool = True,
                    weights=None) -> FitResult:
    """Fit y = A exp(-(t - t_w)/T1) + c over ``window`` (default: second half of the trace).

    ``A`` refers to the window start t_w.  ``offset=False`` fixes c = 0.
    """
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    if window is None:
        window = (0.5 * (t[0] + t[-1]), t[-1])
    sel = (t >= window[0]) & (t <= window[1])
    if sel.sum() < 5:
        raise ValueError("need at least 5 points in the fit window")
    ts, ys = t[sel], y[sel]
    w = _weights(ys, weights)
    t0 = ts[0]
    x = ts - t0
    if np.ptp(ys) == 0:
        raise FitError("constant trace: decay time is not identifiable")
    c0 = ys.min() - 0.01 * np.ptp(ys) if offset else 0.0
    z = ys - c0
    good = z > 0
    if good.sum() >= 2:
        slope, icpt = np.polyfit(x[good], np.log(z[good]), 1)
        tau0 = -1.0 / slope if slope < 0 else np.ptp(x)
        a0 = math.exp(icpt)
    else:
        tau0, a0 = np.ptp(x) / 2, ys[0] - c0
    if offset:
        res = _solve(_exp_model, _exp_jac, x, ys, [a0, tau0, c0], w, ("amplitude", "T1_eff", "offset"),
                     ("y", "s", "y"))
    else:
        model = lambda p, t: _exp_model([p[0], p[1], 0.0], t)  # noqa: E731
        jac = lambda p, t: _exp_jac([p[0], p[1], 0.0], t)[:, :2]  # noqa: E731
        r = _solve(model, jac, x, ys, [a0, tau0], w, ("amplitude", "T1_eff"), ("y", "s"))
        res = FitResult(("amplitude", "T1_eff", "offset"), np.append(r.values, 0.0), np.append(r.errors, 0.0),
                        ("y", "s", "y"), r.residual_norm, r.initial_residual_norm, True, r.nfev)
    if res["T1_eff"] <= 0:
        raise FitError("fitted decay time is not positive")
    if res["amplitude"] < 0:
        warnings.warn("fitted amplitude is negative", RuntimeWarning, stacklevel=2)
    res.derived["window_start"] = float(t0)
    return res


# --------------------------------------------------------------------------
# Lorentzian lines


def _lorentz_parts(p, x):
    x0, w0, h, a, s = p
    u = x - x0
    tau = np.tanh(u / w0)
    width = w0 * (1 + s * tau)
    z = u / width
    d = 1 + z**2
    return u, tau, width, z, d


def _lorentz_model(p, x):
    _, _, h, a, _ = p
    *_, d = _lorentz_parts(p, x)
    return a + h / d


def _lorentz_jac(p, x):
    x0, w0, h, a, s = p
    u, tau, width, z, d = _lorentz_parts(p, x)
    df_dz = -h * 2 * z / d**2
    sech2 = 1 - tau**2
    dwidth_dx0 = -s * sech2
    dwidth_dw0 = 1 + s * tau - s * sech2 * u / w0
    dz_dx0 = (-width - u * dwidth_dx0) / width**2
    dz_dw0 = -u * dwidth_dw0 / width**2
    dz_ds = -u * w0 * tau / width**2
    return np.column_stack([df_dz * dz_dx0, df_dz * dz_dw0, 1 / d, np.ones_like(x), df_dz * dz_ds])


def _lorentz_guess(x, y):
    a0 = float(np.median(np.concatenate([y[:max(1, len(y) // 10)], y[-max(1, len(y) // 10):]])))
    k = int(np.argmax(np.abs(y - a0)))
    h0 = float(y[k] - a0)
    half = np.abs(y - a0) >= abs(h0) / 2
    idx = np.nonzero(half)[0]
    w0 = max((x[idx[-1]] - x[idx[0]]) / 2, np.min(np.abs(np.diff(x))))
    return [float(x[k]), float(w0), h0, a0]


def _line_fit(x, y, skew: bool, weights, field_slope, p0=None) -> FitResult:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 7:
        raise ValueError("need at least 7 points")
    guess = list(p0) if p0 is not None else _lorentz_guess(x, y)
    if np.ptp(x) < 2 * abs(guess[1]):
        raise ValueError("data must span at least two line widths")
    w = _weights(y, weights)
    names = ["center", "width", "amplitude", "offset"]
    units = ["x", "x", "y", "y"]
    if skew:
        start = guess[:4] + [guess[4] if len(guess) > 4 else 0.0]
        res = _solve(_lorentz_model, _lorentz_jac, x, y, start, w, names + ["skewness"], units + ["1"])
        if abs(res["skewness"]) >= 1:
            raise FitError("skewness left the range |s| < 1 where the width stays positive")
        res.derived["skew_width"] = float(res["skewness"] * abs(res["width"]))
    else:
        model = lambda p, t: _lorentz_model(np.append(p, 0.0), t)  # noqa: E731
        jac = lambda p, t: _lorentz_jac(np.append(p, 0.0), t)[:, :4]  # noqa: E731
        res = _solve(model, jac, x, y, guess[:4], w, names, units)
    res.values[1] = abs(res.values[1])
    if field_slope is not None:
        res.derived["gamma_inh"] = float(abs(field_slope) * res["width"])
    return res


def fit_lorentzian(x, y, weights=None, field_slope: float | None = None) -> FitResult:
    """Fit a + h / (1 + ((x - x0)/w)^2); ``width`` is the half width at half maximum.

    Pass ``field_slope`` (frequency per unit x, e.g. rad/s per T) when x is a
    field axis to get ``gamma_inh`` in frequency units.
    """
    return _line_fit(x, y, False, weights, field_slope)


def fit_skewed_lorentzian(x, y, weights=None, field_slope: float | None = None, p0=None) -> FitResult:
    """Lorentzian whose width is w0 (1 + s tanh((x - x0)/w0)); s = 0 is the symmetric line."""
    return _line_fit(x, y, True, weights, field_slope, p0)


def fit_sine(x, y, period: float) -> FitResult:
    """y = A sin(2 pi (x - x0)/period) + c with known period; x0 is the rising zero crossing."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    k = 2 * math.pi / period
    design = np.column_stack([np.sin(k * x), np.cos(k * x), np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    a, b, c = coef
    amp = math.hypot(a, b)
    x0 = (-math.atan2(b, a) / k) % period
    resid = y - design @ coef
    dof = max(len(x) - 3, 1)
    cov = np.linalg.pinv(design.T @ design) * float(resid @ resid) / dof
    # propagate (a, b) -> (amp, x0)
    ga = np.array([a / amp, b / amp, 0.0])
    gx = np.array([b / (k * amp**2), -a / (k * amp**2), 0.0])
    errs = np.sqrt([ga @ cov @ ga, gx @ cov @ gx, cov[2, 2]])
    return FitResult(("amplitude", "zero_crossing", "offset"), np.array([amp, x0, c]), errs, ("y", "x", "y"),
                     float(np.linalg.norm(resid)), float(np.linalg.norm(y - y.mean())), True, 1)


# --------------------------------------------------------------------------
# Rabi oscillations


@dataclass(frozen=True)
class RabiModelParams:
    A: float
    omega_r: float
    t_c1: float
    B: float
    t_c2: float
    errors: tuple = ()
    residual_norm: float = 0.0

    def __call__(self, dt):
        return rabi_model(np.array([self.A, self.omega_r, self.t_c1, self.B, self.t_c2]), np.asarray(dt, float))


def rabi_model(p, t):
    a, om, t1, b, t2 = p
    return a * np.sin(om * t / 2) ** 2 * np.exp(-t / t1) + b * (1 - np.exp(-t / t2))


def _rabi_jac(p, t):
    a, om, t1, b, t2 = p
    s2 = np.sin(om * t / 2) ** 2
    e1 = np.exp(-t / t1)
    e2 = np.exp(-t / t2)
    return np.column_stack([
        s2 * e1,
        a * e1 * 0.5 * np.sin(om * t) * t,
        a * s2 * e1 * t / t1**2,
        1 - e2,
        -b * e2 * t / t2**2,
    ])


def spectral_peaks(t, y, n_peaks: int = 3) -> np.ndarray:
    """Angular frequencies of the strongest non-DC spectral peaks, strongest
    first, after removing a quadratic trend."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    tu = np.linspace(t[0], t[-1], len(t))
    yu = np.interp(tu, t, y)
    d = yu - np.polyval(np.polyfit(tu - tu[0], yu, 2), tu - tu[0])
    n = len(d)
    pad = 8 * n
    spec = np.abs(np.fft.rfft(d, pad)) ** 2
    freqs = np.fft.rfftfreq(pad, tu[1] - tu[0])
    lo = int(np.ceil(1.5 * pad / n))  # skip the bins the trend removal leaves behind
    if lo >= len(spec) - 2 or not np.any(spec[lo:] > 0):
        return np.zeros(0)
    s = spec[lo:]
    local = np.nonzero((s[1:-1] >= s[:-2]) & (s[1:-1] >= s[2:]) & (s[1:-1] > 0))[0] + 1
    order = local[np.argsort(s[local])[::-1]][:n_peaks]
    return 2 * math.pi * freqs[lo + order]


def fit_rabi(dt, counts, weights=None, n_starts: int = 5, min_extrema: int = 3,
             min_f: float = 10.0) -> RabiModelParams:
    """Fit A sin^2(Omega dt/2) exp(-dt/T_c1) + B (1 - exp(-dt/T_c2)).

    The fit starts from the strongest spectral peaks and from half and
    double the strongest one, which guards against locking onto a harmonic
    or a noise peak.
    """
    t = np.asarray(dt, float)
    y = np.asarray(counts, float)
    if len(t) < 10:
        raise ValueError("need at least 10 points")
    w = _weights(y, weights)
    peaks = spectral_peaks(t, y)
    span = float(np.ptp(t))
    if peaks.size == 0:
        raise NoOscillationError("detrended data are flat")
    omega0 = float(peaks[0])
    if omega0 * span / math.pi < min_extrema:
        raise NoOscillationError(f"fewer than {min_extrema} extrema within the data span")
    detr = y - np.polyval(np.polyfit(t, y, 2), t)
    a0 = 2 * math.sqrt(2) * float(np.std(detr))
    tail = float(np.mean(y[-max(3, len(y) // 10):]))
    b0 = max(tail - a0 / 2, 1e-3 * max(abs(tail), 1.0))
    best = None
    starts = list(peaks) + [omega0 * 0.5, omega0 * 2.0, omega0 * 0.97, omega0 * 1.03]
    for om_start in starts[:max(1, n_starts)]:
        p0 = [a0, om_start, span / 4, b0, span / 3]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res = _solve(rabi_model, _rabi_jac, t, y, p0, w, ("A", "omega_r", "t_c1", "B", "t_c2"),
                             ("counts", "rad/s", "s", "counts", "s"))
        except FitError:
            continue
        _, _, t1, b, t2 = res.values
        if t1 <= 0 or t2 <= 0 or b < 0:
            continue
        if best is None or res.residual_norm < best.residual_norm:
            best = res
    rss0 = _baseline_residual(t, y, w, b0, span) ** 2
    if best is None:
        if rss0 <= 1e-6 * float(np.sum((w * (y - y.mean())) ** 2)):
            raise NoOscillationError("the non-oscillating model already describes the data")
        best = _reduced_rabi(t, y, w, starts[:max(1, n_starts)], a0, span)
    if best is None:
        raise FitError("no start converged")
    a, om, t1, b, t2 = best.values
    om = abs(om)
    # F statistic for the two oscillation parameters added to the baseline
    rss1 = best.residual_norm**2
    f_stat = (rss0 - rss1) / 2 / (rss1 / max(len(t) - 5, 1)) if rss1 > 0 else math.inf
    if a <= 3 * best.errors[0] or not f_stat > min_f:
        raise NoOscillationError("an oscillation does not improve significantly on the non-oscillating model")
    if t1 <= 0 or t2 <= 0 or b < 0:
        raise FitError("fitted Rabi parameters are unphysical")
    return RabiModelParams(float(a), float(om), float(t1), float(b), float(t2), tuple(best.errors.tolist()),
                           best.residual_norm)


def _reduced_rabi(t, y, w, omegas, a0, span) -> FitResult | None:
    """Fallback when the full model is not identifiable: B = 0, then also no damping."""
    names = ("A", "omega_r", "t_c1", "B", "t_c2")
    units = ("counts", "rad/s", "s", "counts", "s")
    variants = (
        (lambda p: [p[0], p[1], p[2], 0.0, math.inf], [0, 1, 2], lambda om: [a0, om, span]),
        (lambda p: [p[0], p[1], math.inf, 0.0, math.inf], [0, 1], lambda om: [a0, om]),
    )
    for expand, cols, start in variants:
        best = None
        for om in omegas:
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    res = _solve(lambda p, x: rabi_model(expand(p), x),
                                 lambda p, x: np.nan_to_num(_rabi_jac(expand(p), x))[:, cols],
                                 t, y, start(om), w, [names[c] for c in cols], [units[c] for c in cols])
            except FitError:
                continue
            if best is None or res.residual_norm < best.residual_norm:
                best = res
        if best is not None:
            values = np.array(expand(best.values), float)
            errors = np.zeros(5)
            errors[cols] = best.errors
            return FitResult(names, values, errors, units, best.residual_norm, best.initial_residual_norm,
                             True, best.nfev)
    return None


def _baseline_residual(t, y, w, b0, span) -> float:
    """Residual norm of the best non-oscillating model c + B (1 - exp(-t/T))."""

    def model(p, x):
        return p[0] + p[1] * (1 - np.exp(-x / p[2]))

    def jac(p, x):
        e = np.exp(-x / p[2])
        return np.column_stack([np.ones_like(x), 1 - e, -p[1] * e * x / p[2] ** 2])

    best = float(np.linalg.norm(w * (y - np.mean(y))))
    for tau in (span / 10, span / 3, span):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res = _solve(model, jac, t, y, [y[0], b0, tau], w, ("c", "B", "T"), ("", "", ""))
            best = min(best, res.residual_norm)
        except FitError:
            continue
    return best


# --------------------------------------------------------------------------
# coupling constants


def g0_from_rabi(omega_r: float, n_bar: float) -> float:
    if n_bar <= 0:
        raise ValueError("mean photon number must be positive")
    return omega_r / (2 * math.sqrt(n_bar))


def g0_from_purcell(gamma_r: float, kappa: float) -> float:
    if gamma_r <= 0 or kappa <= 0:
        raise ValueError("gamma_r and kappa must be positive")
    return math.sqrt(kappa * gamma_r) / 2
