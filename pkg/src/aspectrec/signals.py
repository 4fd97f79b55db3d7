"""Time-series signals used to identify event type and event period.

All functions accept a :class:`~aspectrec.logstore.TimeSeries` or any 1-d
array-like of daily values.
"""

import itertools
import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from numba import njit

HW_GRID = (0.05, 0.20, 0.35, 0.50, 0.65, 0.80, 0.95)
SPIKEM_TAIL = 30


def _values(ts):
    return np.asarray(ts, dtype=float).ravel()


# -- decomposition, autocorrelation, rank correlation -----------------------

def _centered_trend(y, period):
    n = len(y)
    trend = np.full(n, np.nan)
    if period % 2:
        h = period // 2
        kernel = np.ones(period) / period
    else:
        h = period // 2
        kernel = np.r_[0.5, np.ones(period - 1), 0.5] / period
    if n < len(kernel):
        return trend
    trend[h : n - h] = np.convolve(y, kernel, mode="valid")
    return trend


def decompose(ts, period=7):
    """Classical additive decomposition; returns (trend, seasonal, remainder)."""
    y = _values(ts)
    trend = _centered_trend(y, period)
    detr = y - trend
    phase = np.arange(len(y)) % period
    means = np.array([np.nanmean(detr[phase == i]) if np.any(~np.isnan(detr[phase == i])) else 0.0
                      for i in range(period)])
    means -= means.mean()
    seasonal = means[phase]
    return trend, seasonal, y - trend - seasonal


def seasonality(ts, period=7):
    """Seasonal strength ``max(0, 1 - Var(R) / Var(S + R))``; 0 for a flat series."""
    y = _values(ts)
    if len(y) < 2 * period:
        raise ValueError(f"insufficient data: need {2 * period} points, got {len(y)}")
    trend, seasonal, rem = decompose(y, period)
    ok = ~np.isnan(trend)
    denom = np.var(seasonal[ok] + rem[ok])
    if denom <= 1e-12 * max(1.0, float(np.mean(y**2))):
        return 0.0
    return float(max(0.0, 1.0 - np.var(rem[ok]) / denom))


def autocorr_lag1(ts):
    y = _values(ts)
    if len(y) < 3:
        raise ValueError("autocorrelation needs at least 3 points")
    d = y - y.mean()
    den = float(d @ d)
    if den <= 0:
        raise ValueError("constant series")
    return float(d[:-1] @ d[1:] / den)


def rank_gamma(list_t, list_prev):
    """Goodman-Kruskal gamma between two ranked lists.

    Items missing from a list share the phantom rank ``len(list) + 1`` there;
    tied pairs count as neither concordant nor discordant.
    """
    if not list_t or not list_prev:
        raise ValueError("both ranked lists must be non-empty")
    ra = {x: i + 1 for i, x in enumerate(list_t)}
    rb = {x: i + 1 for i, x in enumerate(list_prev)}
    items = sorted(set(ra) | set(rb))
    a = np.array([ra.get(x, len(list_t) + 1) for x in items])
    b = np.array([rb.get(x, len(list_prev) + 1) for x in items])
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    prod = np.triu(sa * sb, 1)
    nc, nd = int((prod > 0).sum()), int((prod < 0).sum())
    if nc + nd == 0:
        return 0.0
    return (nc - nd) / (nc + nd)


# -- Holt-Winters -----------------------------------------------------------

@dataclass(frozen=True)
class HoltWintersFit:
    alpha: float
    beta: float
    gamma: float
    sse: float
    fitted: np.ndarray  # one-step forecasts for t = period .. n-1
    residuals: np.ndarray
    forecast: np.ndarray  # h-step forecasts beyond the end


def _hw_init(y, m):
    mean1, mean2 = y[:m].mean(), y[m : 2 * m].mean()
    trend = (mean2 - mean1) / m
    level = mean1 + trend * (m - 1) / 2
    centre = np.arange(m) - (m - 1) / 2
    seas = ((y[:m] - mean1 - trend * centre) + (y[m : 2 * m] - mean2 - trend * centre)) / 2
    return level, trend, seas


def _hw_run(y, m, alpha, beta, gamma):
    """Additive Holt-Winters for parameter vectors of equal length G."""
    g = len(alpha)
    level0, trend0, seas0 = _hw_init(y, m)
    level = np.full(g, level0)
    trend = np.full(g, trend0)
    seas = np.tile(seas0, (g, 1))
    n = len(y)
    fitted = np.empty((g, n - m))
    for t in range(m, n):
        k = t % m
        s = seas[:, k]
        fitted[:, t - m] = level + trend + s
        new_level = alpha * (y[t] - s) + (1 - alpha) * (level + trend)
        trend = beta * (new_level - level) + (1 - beta) * trend
        seas[:, k] = gamma * (y[t] - new_level) + (1 - gamma) * s
        level = new_level
    return fitted, level, trend, seas


def holt_winters_fit_forecast(ts, period=7, horizon=1):
    """Additive triple exponential smoothing with grid-searched smoothing constants.

    (alpha, beta, gamma) are picked from ``HW_GRID`` cubed by minimum
    in-sample one-step SSE; ties keep the first grid point.
    """
    y = _values(ts)
    m = period
    if len(y) < 2 * m:
        raise ValueError(f"insufficient data: need {2 * m} points, got {len(y)}")
    grid = np.array(list(itertools.product(HW_GRID, repeat=3)))
    fitted, level, trend, seas = _hw_run(y, m, grid[:, 0], grid[:, 1], grid[:, 2])
    resid = y[m:][None, :] - fitted
    sse = np.einsum("ij,ij->i", resid, resid)
    best = int(np.argmin(sse))
    n = len(y)
    steps = np.arange(1, horizon + 1)
    fc = level[best] + steps * trend[best] + seas[best, (n - 1 + steps) % m]
    a, b, c = grid[best]
    return HoltWintersFit(float(a), float(b), float(c), float(sse[best]), fitted[best],
                          resid[best], fc)


def surprise(ts, period=7):
    """Last-day one-step forecast error in units of the residual std."""
    fit = holt_winters_fit_forecast(ts, period, horizon=1)
    r = fit.residuals
    sigma = float(np.std(r[:-1])) if len(r) > 1 else 0.0
    return float(abs(r[-1]) / (sigma + 1e-9))


# -- SpikeM -----------------------------------------------------------------

@dataclass(frozen=True)
class SpikeMParams:
    n_pop: float
    beta: float
    n_b: int
    s_b: float
    eps: float
    p_a: float
    p_p: float
    p_s: float

    def __post_init__(self):
        if not self.n_pop > 0:
            raise ValueError("population must be > 0")
        if self.beta < 0 or self.s_b < 0 or self.eps < 0:
            raise ValueError("beta, shock size and noise must be >= 0")
        if self.n_b < 0:
            raise ValueError("shock day must be >= 0")
        if not 0 <= self.p_a < 1:
            raise ValueError("periodicity amplitude must lie in [0, 1)")
        if not self.p_p > 0:
            raise ValueError("period must be > 0")

    def as_array(self):
        return np.array(astuple(self), dtype=float)


SPIKEM_FIELDS = tuple(f.name for f in fields(SpikeMParams))


@njit(cache=True)
def _simulate(n_pop, beta, n_b, s_b, eps, p_a, p_p, p_s, out):
    n_days = out.shape[0]
    for i in range(n_days):
        out[i] = 0.0
    remaining = n_pop
    for n in range(n_b, n_days - 1):
        acc = 0.0
        lo = max(n_b, n + 1 - SPIKEM_TAIL)
        for t in range(lo, n + 1):
            x = out[t]
            if t == n_b:
                x += s_b
            acc += x * beta * (n + 1 - t) ** -1.5
        p = 1.0 + p_a * abs(math.sin(2.0 * math.pi * (n + 1 + p_s) / p_p))
        d = p * (remaining * acc + eps)
        if d < 0.0:
            d = 0.0
        if d > remaining:
            d = remaining
        out[n + 1] = d
        remaining -= d


def spikem_simulate(params, n_days):
    """Daily new adopters dB(n) of the SpikeM rise-and-fall model.

    dB(n+1) = p(n+1) * (U(n) * sum_{t=n_b}^{n} (dB(t) + S(t)) f(n+1-t) + eps),
    with f(tau) = beta * tau^-1.5 truncated after 30 days, U(n_b) = N_pop,
    S(n_b) = S_b, p(n) = 1 + p_a |sin(2 pi (n + P_s) / P_p)|, and each value
    clamped into [0, U(n)].
    """
    if n_days <= params.n_b:
        raise ValueError("n_days must exceed the shock day")
    out = np.zeros(int(n_days))
    _simulate(params.n_pop, params.beta, int(params.n_b), params.s_b, params.eps,
              params.p_a, params.p_p, params.p_s, out)
    return out


@njit(cache=True)
def _sse(x, scale, n_b, y, buf):
    _simulate(x[0] * scale[0], x[1] * scale[1], n_b, x[2] * scale[2], x[3] * scale[3],
              x[4] * scale[4], x[5] * scale[5], x[6] * scale[6], buf)
    s = 0.0
    for i in range(y.shape[0]):
        r = buf[i] - y[i]
        s += r * r
    return s


@njit(cache=True)
def _lm(y, n_b, x0, scale, lower, upper, max_iter):
    """Levenberg-Marquardt in scaled coordinates with a central-difference Jacobian.

    Returns (x, sse, iterations, converged). A step is accepted only if it
    lowers the SSE.
    """
    n = y.shape[0]
    k = x0.shape[0]
    x = x0.copy()
    buf = np.empty(n)
    plus = np.empty(n)
    minus = np.empty(n)
    res = np.empty(n)
    J = np.empty((n, k))
    lam = 1e-3
    sse = _sse(x, scale, n_b, y, buf)
    for i in range(n):
        res[i] = buf[i] - y[i]
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        if sse == 0.0:
            converged = True
            break
        for j in range(k):
            h = 1e-6 * max(abs(x[j]), 1.0)
            xp = x.copy()
            xm = x.copy()
            xp[j] = min(x[j] + h, upper[j])
            xm[j] = max(x[j] - h, lower[j])
            _sse(xp, scale, n_b, y, plus)
            _sse(xm, scale, n_b, y, minus)
            dx = xp[j] - xm[j]
            for i in range(n):
                J[i, j] = (plus[i] - minus[i]) / dx if dx > 0 else 0.0
        A = J.T @ J
        g = J.T @ res
        gmax = 0.0
        for j in range(k):
            gmax = max(gmax, abs(g[j]))
        if gmax < 1e-14 * max(sse, 1e-300) ** 0.5:
            converged = True
            break
        improved = False
        while lam <= 1e12:
            M = A.copy()
            for j in range(k):
                M[j, j] += lam * A[j, j] + 1e-12
            step = np.linalg.solve(M, -g)
            xn = x + step
            for j in range(k):
                xn[j] = min(max(xn[j], lower[j]), upper[j])
            sn = _sse(xn, scale, n_b, y, buf)
            if np.isfinite(sn) and sn < sse:
                rel = (sse - sn) / sse
                x = xn
                sse = sn
                for i in range(n):
                    res[i] = buf[i] - y[i]
                lam = max(lam / 10.0, 1e-12)
                improved = True
                if rel < 1e-9:
                    converged = True
                break
            lam *= 10.0
        if not improved:
            converged = True
            break
        if converged:
            break
    return x, sse, it, converged


@dataclass(frozen=True)
class SpikeMFit:
    params: SpikeMParams
    sse: float
    converged: bool
    iterations: int


def _start(y, n_b, rng):
    peak = float(y.max())
    total = float(y.sum())
    background = float(y[: n_b + 1].mean()) if peak > 0 else 0.0
    nxt = float(y[min(n_b + 1, len(y) - 1)])
    if rng is None:
        n_pop = 2.0 * total if total > 0 else 1.0
        beta = 0.5 / n_pop if peak > 0 else 0.0
        return np.array([n_pop, beta, max(nxt, 0.1 * peak), background, 0.1 if peak > 0 else 0.0, 7.0, 0.0])
    n_pop = total * rng.uniform(1.05, 5.0) if total > 0 else 1.0
    beta = rng.uniform(0.05, 2.0) / n_pop
    return np.array([
        n_pop,
        beta,
        peak * rng.uniform(0.05, 1.0),
        background * rng.uniform(0.5, 1.5),
        rng.uniform(0.0, 0.5) if peak > 0 else 0.0,
        float(rng.choice([3.5, 7.0, 14.0])),
        rng.uniform(0.0, 7.0),
    ])


def _fit_one(y, n_b, theta0, max_iter):
    peak = max(float(y.max()), 1e-12)
    total = max(float(y.sum()), 1.0)
    scale = np.array([total, 1.0 / total, peak, peak, 1.0, 7.0, 7.0])
    lower = np.array([1e-9, 0.0, 0.0, 0.0, 0.0, 1.0, -1e6]) / scale
    upper = np.array([1e15, 1e15, 1e15, 1e15, 0.999, 365.0, 1e6]) / scale
    x0 = np.clip(theta0 / scale, lower, upper)
    x, sse, it, conv = _lm(y, n_b, x0, scale, lower, upper, max_iter)
    return x * scale, float(sse), int(it), bool(conv)


def spikem_fit(ts, n_starts=5, max_iter=500, seed=0, screen_iter=40, keep=2):
    """Least-squares SpikeM fit by Levenberg-Marquardt.

    The integer shock day is searched over ``0 .. argmax(ts) - 1``: every
    grid value gets a short screening fit from the deterministic start,
    then the ``keep`` best shock days get ``n_starts`` full fits (one
    deterministic start plus seeded random starts). The lowest SSE wins.
    """
    y = _values(ts)
    if len(y) < 14:
        raise ValueError(f"SpikeM fit needs at least 14 points, got {len(y)}")
    rng = np.random.default_rng(seed)
    last = max(1, int(np.argmax(y)))
    grid = range(0, min(last, len(y) - 1))
    screened = []
    for n_b in grid:
        _, sse, _, _ = _fit_one(y, n_b, _start(y, n_b, None), screen_iter)
        screened.append((sse, n_b))
    screened.sort()
    best = None
    for _, n_b in screened[:keep]:
        for s in range(n_starts):
            theta0 = _start(y, n_b, None if s == 0 else rng)
            theta, sse, it, conv = _fit_one(y, n_b, theta0, max_iter)
            if not np.isfinite(sse):
                continue
            if best is None or sse < best[1]:
                best = (theta, sse, it, conv, n_b)
    if best is None:
        theta = _start(y, 0, None)
        return SpikeMFit(_to_params(theta, 0), float("inf"), False, 0)
    theta, sse, it, conv, n_b = best
    return SpikeMFit(_to_params(theta, n_b), sse, conv, it)


def _to_params(theta, n_b):
    n_pop, beta, s_b, eps, p_a, p_p, p_s = (float(v) for v in theta)
    return SpikeMParams(max(n_pop, 1e-9), max(beta, 0.0), int(n_b), max(s_b, 0.0),
                        max(eps, 0.0), min(max(p_a, 0.0), 0.999), max(p_p, 1.0), p_s)


# -- signal vector ----------------------------------------------------------

SIGNAL_FIELDS = (
    "seasonality_query",
    "seasonality_edits",
    "autocorr_lag1",
    "rank_gamma",
    "surprise",
) + tuple(f"spikem_{f}" for f in SPIKEM_FIELDS)


@dataclass(frozen=True)
class SignalVector:
    seasonality_query: float
    seasonality_edits: float
    autocorr_lag1: float
    rank_gamma: float
    surprise: float
    spikem: SpikeMParams

    def as_array(self):
        head = [self.seasonality_query, self.seasonality_edits, self.autocorr_lag1,
                self.rank_gamma, self.surprise]
        return np.array(head + list(self.spikem.as_array()), dtype=float)


def signal_vector(query_history, edit_history, ranked_now, ranked_prev, period=7, window=21,
                  seed=0):
    """Features for one (entity, hitting day).

    ``query_history`` and ``edit_history`` end at the hitting day.
    Seasonality uses the full histories; the remaining features use the
    trailing ``window`` days of query volume. The SpikeM fit runs on that
    window scaled to unit peak, so its parameters are comparable across
    entities of different popularity.
    """
    q = _values(query_history)
    e = _values(edit_history)
    trail = q[-window:]
    season_q = seasonality(q, period) if len(q) >= 2 * period else 0.0
    season_e = seasonality(e, period) if len(e) >= 2 * period else 0.0
    try:
        ac = autocorr_lag1(trail)
    except ValueError:
        ac = 0.0
    gamma = rank_gamma(ranked_now, ranked_prev) if ranked_now and ranked_prev else 0.0
    sur = surprise(trail, period)
    peak = trail.max()
    fit = spikem_fit(trail / peak if peak > 0 else trail, seed=seed)
    return SignalVector(season_q, season_e, ac, gamma, sur, fit.params)


_LOG_FIELDS = ("surprise", "spikem_n_pop", "spikem_beta", "spikem_s_b", "spikem_eps")


def model_space(X):
    """Map raw signal rows to the space the learners use.

    Scale-like fields get a signed log so that degenerate SpikeM fits do not
    dominate distances, and the SpikeM phase is wrapped into one period.
    """
    X = np.array(X, dtype=float, copy=True).reshape(-1, len(SIGNAL_FIELDS))
    for name in _LOG_FIELDS:
        j = SIGNAL_FIELDS.index(name)
        X[:, j] = np.sign(X[:, j]) * np.log1p(np.abs(X[:, j]))
    j, k = SIGNAL_FIELDS.index("spikem_p_s"), SIGNAL_FIELDS.index("spikem_p_p")
    X[:, j] = np.mod(X[:, j], X[:, k])
    return X
