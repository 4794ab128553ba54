"""Censored joint log-likelihood, penalty augmentation and derivatives.

Per-row contributions split into four cases by (treatment d, event status):

* d=0 censored:  log P00,           P00 = Phi2(-eta2, -eta1; rho)
* d=1 censored:  log(S - P00),      S   = Phi(-eta1)
* d=0 event:     log P01,           P01 = phi(eta1) * deta1/dy * Phi(c)
* d=1 event:     log(phi(eta1) * deta1/dy - P01)
                                    = same with Phi(-c)

with c = (-eta2 + rho*eta1) / sqrt(1 - rho^2) and rho = tanh(rho_star).
An invalid evaluation (non-finite predictor, vanishing event rate) returns
NaN; the optimizer treats such a point as a rejected step, never an abort.

Scores and Hessians are analytic.  The chain rule through the monotone
reparametrization uses dEta1/dBeta1 = row * E1 and d2Eta1/dBeta1^2 =
diag(row) * E1bar, where E1 holds exp(coef) on reparametrized entries and
E1bar the same with zeros elsewhere.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import InferenceError

LOG_FLOOR = 1e-300
RHO_CAP = 1.0 - 1e-12
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

CASE_LABELS = ("d0_cens", "d1_cens", "d0_event", "d1_event")


def _case_masks(data):
    d = data.treatment.astype(bool)
    ev = data.status.astype(bool)
    return (~d & ~ev), (d & ~ev), (~d & ev), (d & ev)


def _log_phi(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


def _predictors(bundle, delta):
    lay = bundle.layout
    delta = np.asarray(delta, dtype=float)
    beta1 = delta[lay.eq1]
    beta2 = delta[lay.eq2]
    rho_star = float(delta[lay.rho_index])
    u = bundle.eta1(beta1)
    v = bundle.eta2(beta2)
    h = bundle.deta1_dy(beta1)
    rho = float(np.clip(math.tanh(rho_star), -RHO_CAP, RHO_CAP))
    return u, v, h, rho


@dataclass
class LikelihoodParts:
    """Per-row quantities entering Eq. (5)-style contributions."""

    case: np.ndarray          # index into CASE_LABELS
    P00: np.ndarray
    P01: np.ndarray
    S: np.ndarray
    contributions: np.ndarray
    valid: bool

    def labels(self):
        return np.asarray(CASE_LABELS, dtype=object)[self.case]


def likelihood_parts(bundle, delta) -> LikelihoodParts:
    """Full per-row diagnostic breakdown (slower than ``loglik``)."""
    u, v, h, rho = _predictors(bundle, delta)
    a, b = -v, -u
    q = math.sqrt((1.0 - rho) * (1.0 + rho))

    S = nm.norm_cdf(b)
    P00 = nm.bvn_cdf(a, b, rho)
    SP = nm.bvn_cdf(-a, b, -rho)
    c = (a - rho * b) / q
    dens = np.exp(_log_phi(b)) * h
    P01 = dens * nm.norm_cdf(c)
    ev1 = dens * nm.norm_cdf(-c)

    m00, m10, m01, m11 = _case_masks(bundle.data)
    case = np.select([m00, m10, m01, m11], [0, 1, 2, 3])
    contrib = np.empty(bundle.n)
    contrib[m00] = np.log(np.maximum(P00[m00], LOG_FLOOR))
    contrib[m10] = np.log(np.maximum(SP[m10], LOG_FLOOR))
    contrib[m01] = np.log(np.maximum(P01[m01], LOG_FLOOR))
    contrib[m11] = np.log(np.maximum(ev1[m11], LOG_FLOOR))

    valid = bool(np.all(np.isfinite(u)) and np.all(np.isfinite(v))
                 and np.all(np.isfinite(h))
                 and np.all(h[m01 | m11] > 1e-290)
                 and np.all(np.isfinite(contrib)))
    return LikelihoodParts(case=case, P00=P00, P01=P01, S=S,
                           contributions=contrib, valid=valid)


def loglik(bundle, delta):
    """Joint censored log-likelihood; NaN signals an invalid point."""
    u, v, h, rho = _predictors(bundle, delta)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))
            and np.all(np.isfinite(h))):
        return float("nan")
    a, b = -v, -u
    q = math.sqrt((1.0 - rho) * (1.0 + rho))
    m00, m10, m01, m11 = _case_masks(bundle.data)
    mev = m01 | m11
    if np.any(h[mev] <= 1e-290):
        return float("nan")

    total = 0.0
    if np.any(m00):
        p = nm.bvn_cdf(a[m00], b[m00], rho)
        total += float(np.sum(np.log(np.maximum(p, LOG_FLOOR))))
    if np.any(m10):
        p = nm.bvn_cdf(-a[m10], b[m10], -rho)
        total += float(np.sum(np.log(np.maximum(p, LOG_FLOOR))))
    if np.any(m01):
        cc = (a[m01] - rho * b[m01]) / q
        total += float(np.sum(_log_phi(b[m01]) + np.log(h[m01])
                              + nm.norm_logcdf(cc)))
    if np.any(m11):
        cc = (a[m11] - rho * b[m11]) / q
        total += float(np.sum(_log_phi(b[m11]) + np.log(h[m11])
                              + nm.norm_logcdf(-cc)))
    if not np.isfinite(total):
        return float("nan")
    return total


def penalized_loglik(bundle, delta, lam):
    """Eq.-(6)-style objective: loglik minus the quadratic penalty half-form."""
    ll = loglik(bundle, delta)
    if not np.isfinite(ll):
        return float("nan")
    delta = np.asarray(delta, dtype=float)
    return ll - 0.5 * float(delta @ bundle.s_lambda(lam) @ delta)


# ---------------------------------------------------------------------------
# analytic derivatives
# ---------------------------------------------------------------------------

def _phi2_partials(a, b, rho):
    """Value and partials (to second order) of Phi2(a, b; rho)."""
    q2 = (1.0 - rho) * (1.0 + rho)
    q = math.sqrt(q2)
    f = np.maximum(nm.bvn_cdf(a, b, rho), LOG_FLOOR)
    pdf2 = nm.bvn_pdf(a, b, rho)
    fa = nm.norm_pdf(a) * nm.norm_cdf((b - rho * a) / q)
    fb = nm.norm_pdf(b) * nm.norm_cdf((a - rho * b) / q)
    faa = -a * fa - rho * pdf2
    fbb = -b * fb - rho * pdf2
    fab = pdf2
    farho = -pdf2 * (a - rho * b) / q2
    fbrho = -pdf2 * (b - rho * a) / q2
    frhorho = pdf2 * (rho * q2 + a * b * q2
                      - rho * (a * a - 2.0 * rho * a * b + b * b)) / (q2 * q2)
    return {"f": f, "a": fa, "b": fb, "rho": pdf2, "aa": faa, "bb": fbb,
            "ab": fab, "arho": farho, "brho": fbrho, "rhorho": frhorho}


def _log_partials_from(f):
    """Log-derivative ratios of a positive function from its partials.

    In the extreme tail the floored CDF makes these ratios overflow; the
    resulting inf/NaN propagate into the Hessian, where the optimizer's
    finite checks reject the trial.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        v = f["f"]
        la, lb, lr = f["a"] / v, f["b"] / v, f["rho"] / v
        return {
            "a": la, "b": lb, "rho": lr,
            "aa": f["aa"] / v - la * la,
            "bb": f["bb"] / v - lb * lb,
            "ab": f["ab"] / v - la * lb,
            "arho": f["arho"] / v - la * lr,
            "brho": f["brho"] / v - lb * lr,
            "rhorho": f["rhorho"] / v - lr * lr,
        }


def _row_partials(bundle, delta):
    """Per-row derivatives of the log-likelihood wrt (u, v, h, rho)."""
    u, v, h, rho = _predictors(bundle, delta)
    n = bundle.n
    a, b = -v, -u
    q2 = (1.0 - rho) * (1.0 + rho)
    q = math.sqrt(q2)
    m00, m10, m01, m11 = _case_masks(bundle.data)

    keys = ("u", "v", "h", "rho", "uu", "uv", "vv", "uh", "hh",
            "urho", "vrho", "rhorho")
    out = {k: np.zeros(n) for k in keys}

    def fill_censored(mask, la, lb, lr, laa, lbb, lab, lar, lbr, lrr):
        out["u"][mask] = -lb
        out["v"][mask] = -la
        out["rho"][mask] = lr
        out["uu"][mask] = lbb
        out["vv"][mask] = laa
        out["uv"][mask] = lab
        out["urho"][mask] = -lbr
        out["vrho"][mask] = -lar
        out["rhorho"][mask] = lrr

    if np.any(m00):
        f = _phi2_partials(a[m00], b[m00], rho)
        g = _log_partials_from(f)
        fill_censored(m00, g["a"], g["b"], g["rho"], g["aa"], g["bb"],
                      g["ab"], g["arho"], g["brho"], g["rhorho"])
    if np.any(m10):
        f = _phi2_partials(-a[m10], b[m10], -rho)
        g = _log_partials_from(f)
        # G(a, b, rho) = Phi2(-a, b, -rho): chain the two sign flips
        fill_censored(m10,
                      -g["a"], g["b"], -g["rho"],
                      g["aa"], g["bb"], -g["ab"],
                      g["arho"], -g["brho"], g["rhorho"])

    for mask, sign in ((m01, 1.0), (m11, -1.0)):
        if not np.any(mask):
            continue
        am, bm, hm = a[mask], b[mask], h[mask]
        c = (am - rho * bm) / q
        w = nm.mills_ratio(sign * c)
        wp = nm.d2log_ndtr(sign * c)
        c_a = 1.0 / q
        c_b = -rho / q
        c_rho = (rho * am - bm) / q**3
        c_arho = rho / q**3
        c_brho = -1.0 / q**3
        c_rhorho = (am * q2 + 3.0 * rho * (rho * am - bm)) / q**5

        la = sign * w * c_a
        lb = -bm + sign * w * c_b
        lr = sign * w * c_rho
        laa = wp * c_a * c_a
        lab = wp * c_a * c_b
        lbb = -1.0 + wp * c_b * c_b
        lar = wp * c_a * c_rho + sign * w * c_arho
        lbr = wp * c_b * c_rho + sign * w * c_brho
        lrr = wp * c_rho * c_rho + sign * w * c_rhorho

        fill_censored(mask, la, lb, lr, laa, lbb, lab, lar, lbr, lrr)
        out["h"][mask] = 1.0 / hm
        out["hh"][mask] = -1.0 / (hm * hm)

    # map rho to the working scale rho_star via drho/drho* = 1 - rho^2
    t = 1.0 - rho * rho
    out["r"] = out["rho"] * t
    out["rr"] = out["rhorho"] * t * t - 2.0 * rho * t * out["rho"]
    out["ur"] = out["urho"] * t
    out["vr"] = out["vrho"] * t
    return out


def score(bundle, delta):
    """Analytic gradient of ``loglik`` in delta = (beta1, beta2, rho_star)."""
    lay = bundle.layout
    delta = np.asarray(delta, dtype=float)
    if not np.isfinite(loglik(bundle, delta)):
        return np.full(lay.psi, np.nan)
    d = _row_partials(bundle, delta)
    e1 = np.where(bundle.exp_mask1(), np.exp(delta[lay.eq1]), 1.0)
    xe = bundle.X * e1[None, :]
    xpe = bundle.Xp * e1[None, :]
    g = np.empty(lay.psi)
    g[lay.eq1] = xe.T @ d["u"] + xpe.T @ d["h"]
    g[lay.eq2] = bundle.Z.T @ d["v"]
    g[lay.rho_index] = d["r"].sum()
    return g


def hessian(bundle, delta):
    """Analytic Hessian of ``loglik``; symmetric (psi x psi)."""
    lay = bundle.layout
    delta = np.asarray(delta, dtype=float)
    if not np.isfinite(loglik(bundle, delta)):
        return np.full((lay.psi, lay.psi), np.nan)
    d = _row_partials(bundle, delta)
    mask1 = bundle.exp_mask1()
    beta1 = delta[lay.eq1]
    e1 = np.where(mask1, np.exp(beta1), 1.0)
    ebar = np.where(mask1, np.exp(beta1), 0.0)
    xe = bundle.X * e1[None, :]
    xpe = bundle.Xp * e1[None, :]

    hess = np.zeros((lay.psi, lay.psi))
    with np.errstate(over="ignore", invalid="ignore"):
        h11 = xe.T @ (d["uu"][:, None] * xe) + xpe.T @ (d["hh"][:, None] * xpe)
        h11 += np.diag(ebar * (bundle.X.T @ d["u"] + bundle.Xp.T @ d["h"]))
        hess[lay.eq1, lay.eq1] = h11
        h12 = xe.T @ (d["uv"][:, None] * bundle.Z)
        hess[lay.eq1, lay.eq2] = h12
        hess[lay.eq2, lay.eq1] = h12.T
        hess[lay.eq2, lay.eq2] = bundle.Z.T @ (d["vv"][:, None] * bundle.Z)
        h1r = xe.T @ d["ur"]
        hess[lay.eq1, lay.rho_index] = h1r
        hess[lay.rho_index, lay.eq1] = h1r
        h2r = bundle.Z.T @ d["vr"]
        hess[lay.eq2, lay.rho_index] = h2r
        hess[lay.rho_index, lay.eq2] = h2r
        hess[lay.rho_index, lay.rho_index] = d["rr"].sum()
    return hess


def penalized_score(bundle, delta, lam):
    return score(bundle, delta) - bundle.s_lambda(lam) @ np.asarray(delta, dtype=float)


def penalized_hessian(bundle, delta, lam):
    return hessian(bundle, delta) - bundle.s_lambda(lam)


# ---------------------------------------------------------------------------
# univariate building blocks (initial values, the rho = 0 comparator)
# ---------------------------------------------------------------------------

def loglik_survival(bundle, beta1):
    """Censored survival log-likelihood of the outcome equation alone."""
    beta1 = np.asarray(beta1, dtype=float)
    u = bundle.eta1(beta1)
    h = bundle.deta1_dy(beta1)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(h))):
        return float("nan")
    ev = bundle.data.status.astype(bool)
    if np.any(h[ev] <= 1e-290):
        return float("nan")
    total = float(np.sum(nm.norm_logcdf(-u[~ev])))
    total += float(np.sum(_log_phi(u[ev]) + np.log(h[ev])))
    return total if np.isfinite(total) else float("nan")


def score_hessian_survival(bundle, beta1):
    """Analytic gradient and Hessian of ``loglik_survival``."""
    beta1 = np.asarray(beta1, dtype=float)
    u = bundle.eta1(beta1)
    h = bundle.deta1_dy(beta1)
    ev = bundle.data.status.astype(bool)
    lu = np.where(ev, -u, -nm.mills_ratio(-u))
    luu = np.where(ev, -1.0, nm.d2log_ndtr(-u))
    lh = np.where(ev, 1.0 / np.maximum(h, LOG_FLOOR), 0.0)
    lhh = np.where(ev, -1.0 / np.maximum(h, LOG_FLOOR) ** 2, 0.0)

    mask1 = bundle.exp_mask1()
    e1 = np.where(mask1, np.exp(beta1), 1.0)
    ebar = np.where(mask1, np.exp(beta1), 0.0)
    xe = bundle.X * e1[None, :]
    xpe = bundle.Xp * e1[None, :]
    g = xe.T @ lu + xpe.T @ lh
    hess = xe.T @ (luu[:, None] * xe) + xpe.T @ (lhh[:, None] * xpe)
    hess += np.diag(ebar * (bundle.X.T @ lu + bundle.Xp.T @ lh))
    return g, hess


def loglik_probit(bundle, beta2):
    """Probit log-likelihood of the selection equation alone."""
    v = bundle.eta2(np.asarray(beta2, dtype=float))
    if not np.all(np.isfinite(v)):
        return float("nan")
    dvec = bundle.data.treatment.astype(bool)
    total = float(np.sum(nm.norm_logcdf(v[dvec])))
    total += float(np.sum(nm.norm_logcdf(-v[~dvec])))
    return total if np.isfinite(total) else float("nan")


def score_hessian_probit(bundle, beta2):
    """Analytic gradient and Hessian of ``loglik_probit``."""
    v = bundle.eta2(np.asarray(beta2, dtype=float))
    dvec = bundle.data.treatment.astype(bool)
    lv = np.where(dvec, nm.mills_ratio(v), -nm.mills_ratio(-v))
    lvv = np.where(dvec, nm.d2log_ndtr(v), nm.d2log_ndtr(-v))
    g = bundle.Z.T @ lv
    hess = bundle.Z.T @ (lvv[:, None] * bundle.Z)
    return g, hess


# ---------------------------------------------------------------------------
# confounding diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ConfoundingDiagnostics:
    mean: float
    variance: float
    mills: float
    clamped: bool


def selection_bias_moments(eta2, rho):
    """Conditional mean shift and variance of the transformed time given uptake.

    ``rho`` is the structural error correlation.  Returns
    (mean_shift, variance, mills, clamped).
    """
    clamped = bool(eta2 < -37.0)
    mills = float(nm.mills_ratio(eta2))
    mean_shift = rho * mills
    variance = rho * rho * (-eta2 * mills - mills * mills) + 1.0
    return mean_shift, variance, mills, clamped


def confounding_diagnostics(bundle, delta, row) -> ConfoundingDiagnostics:
    """Moments of the transformed event time for row ``row`` given uptake.

    The dependence parameter of the likelihood is the correlation between
    the selection error and the *negated* outcome error, so the structural
    correlation entering these moments is -tanh(rho_star).
    """
    lay = bundle.layout
    delta = np.asarray(delta, dtype=float)
    if not (0 <= row < bundle.n):
        raise InferenceError(f"row {row} out of range")
    eta2 = float(bundle.Z[row] @ delta[lay.eq2])
    rho_struct = -math.tanh(float(delta[lay.rho_index]))
    base = -float(bundle.offsets(delta[lay.eq1], d=1)[row])
    shift, variance, mills, clamped = selection_bias_moments(eta2, rho_struct)
    return ConfoundingDiagnostics(mean=base + shift, variance=variance,
                                  mills=mills, clamped=clamped)


# ---------------------------------------------------------------------------
# finite-difference verification (test oracles and the CLI self-check)
# ---------------------------------------------------------------------------

def finite_difference_score(bundle, delta, step=1e-6):
    delta = np.asarray(delta, dtype=float)
    g = np.empty(delta.size)
    for j in range(delta.size):
        hj = step * max(1.0, abs(delta[j]))
        dp, dm = delta.copy(), delta.copy()
        dp[j] += hj
        dm[j] -= hj
        g[j] = (loglik(bundle, dp) - loglik(bundle, dm)) / (2.0 * hj)
    return g


def finite_difference_hessian(bundle, delta, step=1e-6):
    delta = np.asarray(delta, dtype=float)
    p = delta.size
    hess = np.empty((p, p))
    for j in range(p):
        hj = step * max(1.0, abs(delta[j]))
        dp, dm = delta.copy(), delta.copy()
        dp[j] += hj
        dm[j] -= hj
        hess[:, j] = (score(bundle, dp) - score(bundle, dm)) / (2.0 * hj)
    return 0.5 * (hess + hess.T)
