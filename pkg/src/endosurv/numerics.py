"""Univariate and bivariate standard Gaussian kernels.

Everything here is a pure function of its inputs and safe to call from any
number of threads.  The bivariate CDF follows the Drezner-Genz construction:
Gauss-Legendre quadrature of the tetrachoric series for moderate correlation
and the singularity-subtracted form for |rho| >= 0.925.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TWO_PI = 2.0 * math.pi

# Probabilities fed to the quantile are pulled into this closed interval.
P_CLAMP = 1e-15

# |rho| beyond this is treated as perfectly (anti)correlated.
RHO_DEGENERATE = 1.0 - 1e-12

# 10-point Gauss-Legendre rule on (-1, 1); applied symmetrically, so each
# integral uses 20 evaluations.
_GL_X = np.array([
    0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
    0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
    0.0765265211334973,
])
_GL_W = np.array([
    0.0176140071391521, 0.0406014298003869, 0.0626720483341091,
    0.0832767415767048, 0.1019301198172404, 0.1181945319615184,
    0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
    0.1527533871307259,
])


def norm_pdf(x):
    """Standard Gaussian density."""
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def norm_cdf(x):
    """Standard Gaussian CDF."""
    return special.ndtr(np.asarray(x, dtype=float))


def norm_logcdf(x):
    """log(Phi(x)), stable far into the lower tail."""
    return special.log_ndtr(np.asarray(x, dtype=float))


def norm_quantile(p):
    """Inverse standard Gaussian CDF.

    Inputs are clamped to [1e-15, 1 - 1e-15]; values at or beyond {0, 1}
    raise :class:`DomainError`.
    """
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("quantile argument must lie strictly inside (0, 1)")
    return special.ndtri(np.clip(p, P_CLAMP, 1.0 - P_CLAMP))


def mills_ratio(x):
    """phi(x) / Phi(x), evaluated in log space so the lower tail is exact."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - 0.5 * math.log(_TWO_PI) - special.log_ndtr(x))


def dlog_ndtr(x):
    """First derivative of log Phi (equals the Mills ratio)."""
    return mills_ratio(x)


def d2log_ndtr(x):
    """Second derivative of log Phi: -x*W(x) - W(x)^2 with W the Mills ratio."""
    w = mills_ratio(x)
    return -np.asarray(x, dtype=float) * w - w * w


@dataclass(frozen=True)
class Correlation:
    """Dependence parameter on its unbounded working scale."""

    rho_star: float

    @property
    def rho(self) -> float:
        return math.tanh(self.rho_star)

    @staticmethod
    def from_rho(rho: float) -> "Correlation":
        if not -1.0 < rho < 1.0:
            raise DomainError("rho must lie strictly inside (-1, 1)")
        return Correlation(math.atanh(rho))


def bvn_pdf(a, b, rho):
    """Standard bivariate Gaussian density at (a, b) with correlation rho."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q2 = (1.0 - rho) * (1.0 + rho)
    z = a * a - 2.0 * rho * a * b + b * b
    return np.exp(-0.5 * z / q2) / (_TWO_PI * np.sqrt(q2))


def _bvn_moderate(h, k, rho):
    """Genz quadrature for |rho| < 0.925: P(X <= -h, Y <= -k)."""
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = np.arcsin(rho)
    sn1 = np.sin(asr[..., None] * 0.5 * (1.0 + _GL_X))
    sn2 = np.sin(asr[..., None] * 0.5 * (1.0 - _GL_X))
    f1 = np.exp((sn1 * hk[..., None] - hs[..., None]) / (1.0 - sn1 * sn1))
    f2 = np.exp((sn2 * hk[..., None] - hs[..., None]) / (1.0 - sn2 * sn2))
    total = ((f1 + f2) * _GL_W).sum(axis=-1)
    return total * asr / (2.0 * _TWO_PI) + special.ndtr(-h) * special.ndtr(-k)


def _bvn_extreme(h, k, rho):
    """Genz quadrature for 0.925 <= |rho| < 1: P(X <= -h, Y <= -k)."""
    k = np.where(rho < 0.0, -k, k)
    hk = h * k
    abs_r = np.abs(rho)

    a2 = (1.0 - abs_r) * (1.0 + abs_r)
    a = np.sqrt(a2)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr = -0.5 * (bs / a2 + hk)
    bvn = np.where(
        asr > -100.0,
        a * np.exp(asr) * (1.0 - c * (bs - a2) * (1.0 - d * bs / 5.0) / 3.0
                           + c * d * a2 * a2 / 5.0),
        0.0,
    )
    sqrt_bs = np.sqrt(bs)
    tail = np.where(
        hk > -100.0,
        np.exp(-0.5 * hk) * math.sqrt(_TWO_PI) * special.ndtr(-sqrt_bs / a)
        * sqrt_bs * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0),
        0.0,
    )
    bvn = bvn - tail

    half_a = 0.5 * a
    for sgn in (1.0, -1.0):
        xs = (half_a[..., None] * (1.0 + sgn * _GL_X)) ** 2
        rs = np.sqrt(1.0 - xs)
        asr1 = -0.5 * (bs[..., None] / xs + hk[..., None])
        with np.errstate(under="ignore"):
            t1 = np.exp(-0.5 * bs[..., None] / xs - hk[..., None] / (1.0 + rs)) / rs
            t2 = np.exp(asr1) * (1.0 + c[..., None] * xs * (1.0 + d[..., None] * xs))
        term = np.where(asr1 > -100.0, t1 - t2, 0.0)
        bvn = bvn + half_a * (term * _GL_W).sum(axis=-1)
    bvn = -bvn / _TWO_PI

    pos = bvn + special.ndtr(-np.maximum(h, k))
    neg = -bvn + np.maximum(0.0, special.ndtr(-h) - special.ndtr(-k))
    return np.where(rho > 0.0, pos, neg)


def bvn_cdf(a, b, rho):
    """P(X <= a, Y <= b) for standard bivariate Gaussian (X, Y), corr rho.

    ``a`` and ``b`` may be +-inf (marginalization limits); NaN raises
    :class:`DomainError`.  |rho| within 1e-12 of 1 uses the degenerate
    comonotone/antimonotone form.
    """
    a, b, rho = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float),
        np.asarray(rho, dtype=float))
    if np.any(np.isnan(a)) or np.any(np.isnan(b)) or np.any(np.isnan(rho)):
        raise DomainError("bvn_cdf arguments must not be NaN")
    if np.any(np.abs(rho) > 1.0):
        raise DomainError("correlation must satisfy |rho| <= 1")

    out = np.empty(a.shape, dtype=float)

    special_mask = np.isinf(a) | np.isinf(b)
    if np.any(special_mask):
        av, bv = a[special_mask], b[special_mask]
        res = np.zeros(av.shape, dtype=float)
        m = (av == np.inf) & np.isfinite(bv)
        res[m] = special.ndtr(bv[m])
        m = (bv == np.inf) & np.isfinite(av)
        res[m] = special.ndtr(av[m])
        res[(av == np.inf) & (bv == np.inf)] = 1.0
        out[special_mask] = res

    work = ~special_mask
    aw, bw, rw = a[work], b[work], rho[work]
    res = np.empty(aw.shape, dtype=float)

    deg_pos = rw >= RHO_DEGENERATE
    deg_neg = rw <= -RHO_DEGENERATE
    res[deg_pos] = special.ndtr(np.minimum(aw[deg_pos], bw[deg_pos]))
    res[deg_neg] = np.maximum(
        special.ndtr(aw[deg_neg]) + special.ndtr(bw[deg_neg]) - 1.0, 0.0)

    reg = ~(deg_pos | deg_neg)
    h, k, r = -aw[reg], -bw[reg], rw[reg]
    mod = np.abs(r) < 0.925
    vals = np.empty(h.shape, dtype=float)
    if np.any(mod):
        vals[mod] = _bvn_moderate(h[mod], k[mod], r[mod])
    if np.any(~mod):
        vals[~mod] = _bvn_extreme(h[~mod], k[~mod], r[~mod])
    res[reg] = vals

    out[work] = np.clip(res, 0.0, 1.0)
    if out.ndim == 0:
        return float(out)
    return out


def bvn_cdf_partial_b(a, b, rho):
    """d/db of ``bvn_cdf``: phi(b) * Phi((a - rho*b) / sqrt(1 - rho^2))."""
    a, b, rho = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float),
        np.asarray(rho, dtype=float))
    if np.any(np.isnan(a)) or np.any(np.isnan(b)) or np.any(np.isnan(rho)):
        raise DomainError("bvn_cdf_partial_b arguments must not be NaN")
    if np.any(np.abs(rho) > 1.0):
        raise DomainError("correlation must satisfy |rho| <= 1")

    q = np.sqrt(np.maximum((1.0 - rho) * (1.0 + rho), 0.0))
    num = a - rho * b
    with np.errstate(divide="ignore", invalid="ignore"):
        # degenerate correlation: the inner Phi collapses to an indicator
        arg = np.where(q > 0.0, num / np.where(q > 0.0, q, 1.0),
                       np.where(num == 0.0, 0.0, np.sign(num) * np.inf))
        arg = np.where(np.isinf(a), a, arg)
    phi_b = np.where(np.isinf(b), 0.0, norm_pdf(np.where(np.isinf(b), 0.0, b)))
    out = phi_b * special.ndtr(arg)
    if out.ndim == 0:
        return float(out)
    return out
