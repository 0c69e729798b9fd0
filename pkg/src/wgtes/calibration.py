"""Bidirectional detector calibration.

N detectors in series on one waveguide are illuminated from facet A and then from
facet B. The 2N mean photon numbers determine the N detector efficiencies and the two
facet coupling efficiencies by nonlinear least squares. The forward model for
detector k (1-based) launched from A is

    N_k = eta_A exp(-alpha (L1 + (k-1) L2)) prod_{j<k} (1 - eta_j) eta_k N_in

and the mirror image from B. Predictions are ordered (N_1, N'_1, N_2, N'_2, ...).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit, logit
from sklearn.base import BaseEstimator

from ._validation import is_existing_file, check_nonnegative, check_positive, check_probability
from .errors import ConvergenceError, DataError, DomainError


@dataclass(frozen=True)
class CalibrationModel:
    """Known quantities of the calibration: spacing, waveguide extinction, input flux.

    ``alpha`` is the natural extinction coefficient in cm^-1 and lengths are in cm.
    """

    n_detectors: int = 3
    alpha: float = 0.0
    l1: float = 0.5
    l2: float = 0.3
    n_in: float = 1.0

    def __post_init__(self):
        if int(self.n_detectors) != self.n_detectors or self.n_detectors < 3:
            raise DomainError("n_detectors must be an integer >= 3 for an overdetermined fit")
        check_nonnegative(self.alpha, "alpha")
        check_positive(self.l1, "l1")
        check_positive(self.l2, "l2")
        check_positive(self.n_in, "n_in")

    def attenuation(self):
        """exp(-alpha (L1 + (k-1) L2)) for k = 1..N."""
        k = np.arange(self.n_detectors)
        return np.exp(-self.alpha * (self.l1 + k * self.l2))


def dof_check(n_detectors):
    """Counts of measurements and unknowns for N detectors in series."""
    n = int(n_detectors)
    if n < 1:
        raise DomainError("n_detectors must be at least 1")
    return {"n_measurements": 2 * n, "n_unknowns": n + 2, "overdetermined": 2 * n > n + 2}


@dataclass(frozen=True)
class CalibrationMeasurementSet:
    """Mean photon numbers per detector for both launch directions."""

    forward: np.ndarray
    reverse: np.ndarray
    forward_sigma: np.ndarray | None = None
    reverse_sigma: np.ndarray | None = None

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=float)
        rev = np.asarray(self.reverse, dtype=float)
        if fwd.ndim != 1 or fwd.shape != rev.shape:
            raise DataError("forward and reverse must be 1-D with equal length")
        if np.any(~np.isfinite(fwd)) or np.any(~np.isfinite(rev)) or np.any(fwd < 0) or np.any(rev < 0):
            raise DataError("mean photon numbers must be finite and non-negative")
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "reverse", rev)
        if (self.forward_sigma is None) != (self.reverse_sigma is None):
            raise DataError("give sigmas for both directions or for neither")
        if self.forward_sigma is not None:
            fs = np.asarray(self.forward_sigma, dtype=float)
            rs = np.asarray(self.reverse_sigma, dtype=float)
            if fs.shape != fwd.shape or rs.shape != fwd.shape or np.any(fs <= 0) or np.any(rs <= 0):
                raise DataError("sigmas must be positive and match the measurements")
            object.__setattr__(self, "forward_sigma", fs)
            object.__setattr__(self, "reverse_sigma", rs)

    @property
    def n_detectors(self):
        return self.forward.size

    def interleaved(self):
        return _interleave(self.forward, self.reverse)

    def sigma_interleaved(self):
        if self.forward_sigma is None:
            return None
        return _interleave(self.forward_sigma, self.reverse_sigma)

    @classmethod
    def from_interleaved(cls, values, sigma=None):
        values = np.asarray(values, dtype=float)
        if sigma is None:
            return cls(values[0::2], values[1::2])
        sigma = np.asarray(sigma, dtype=float)
        return cls(values[0::2], values[1::2], sigma[0::2], sigma[1::2])

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["direction", "detector_index", "mean_photons", "sigma"])
        for direction, vals, sig in (("A->B", self.forward, self.forward_sigma),
                                     ("B->A", self.reverse, self.reverse_sigma)):
            for k, v in enumerate(vals):
                w.writerow([direction, k + 1, repr(float(v)), "" if sig is None else repr(float(sig[k]))])
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source):
        """Read rows of (direction, detector_index, mean_photons, sigma).

        ``direction`` is "A->B" (or "forward") and "B->A" (or "reverse");
        detector indices are 1-based; ``sigma`` may be left empty for all rows.
        """
        text = Path(source).read_text() if is_existing_file(source) else str(source)
        rows = [r for r in csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))]
        required = {"direction", "detector_index", "mean_photons"}
        if not rows or not required <= set(rows[0]):
            raise DataError(f"measurement CSV needs columns {sorted(required)} (+ optional sigma)")
        data = {"A->B": {}, "B->A": {}}
        alias = {"forward": "A->B", "reverse": "B->A", "A->B": "A->B", "B->A": "B->A"}
        sigmas = {"A->B": {}, "B->A": {}}
        for r in rows:
            try:
                d = alias[r["direction"].strip()]
                k = int(r["detector_index"])
                data[d][k] = float(r["mean_photons"])
                s = (r.get("sigma") or "").strip()
                if s:
                    sigmas[d][k] = float(s)
            except (KeyError, ValueError) as exc:
                raise DataError(f"malformed measurement row {r}: {exc}") from exc
        n = len(data["A->B"])
        if n == 0 or sorted(data["A->B"]) != list(range(1, n + 1)) or sorted(data["B->A"]) != list(range(1, n + 1)):
            raise DataError("each direction needs detector indices 1..N exactly once")
        fwd = [data["A->B"][k] for k in range(1, n + 1)]
        rev = [data["B->A"][k] for k in range(1, n + 1)]
        n_sig = len(sigmas["A->B"]) + len(sigmas["B->A"])
        if n_sig == 0:
            return cls(fwd, rev)
        if n_sig != 2 * n:
            raise DataError("sigma must be given for every row or for none")
        return cls(fwd, rev, [sigmas["A->B"][k] for k in range(1, n + 1)],
                   [sigmas["B->A"][k] for k in range(1, n + 1)])


def _interleave(a, b):
    out = np.empty(2 * len(a))
    out[0::2] = a
    out[1::2] = b
    return out


def _survival_products(eta):
    """prod_{j<k}(1-eta_j) and prod_{j>k}(1-eta_j) for every k."""
    s = 1.0 - eta
    before = np.concatenate([[1.0], np.cumprod(s)[:-1]])
    after = np.concatenate([np.cumprod(s[::-1])[:-1][::-1], [1.0]])
    return before, after


def forward_model(model: CalibrationModel, eta, eta_a, eta_b):
    """Predicted mean photon numbers (N_1, N'_1, ..., N_N, N'_N)."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (model.n_detectors,):
        raise DomainError(f"expected {model.n_detectors} detector efficiencies")
    for v in (*eta, eta_a, eta_b):
        check_probability(v, "efficiency")
    return _predict(model, eta, eta_a, eta_b)


def _predict(model, eta, eta_a, eta_b):
    att = model.attenuation()
    before, after = _survival_products(eta)
    fwd = eta_a * att * before * eta * model.n_in
    rev = eta_b * att[::-1] * after * eta * model.n_in
    return _interleave(fwd, rev)


def _jacobian(model, eta, eta_a, eta_b):
    """d predictions / d (eta_1..eta_N, eta_A, eta_B), rows in interleaved order."""
    n = model.n_detectors
    att = model.attenuation()
    before, after = _survival_products(eta)
    jf = np.zeros((n, n + 2))
    jr = np.zeros((n, n + 2))
    s = 1.0 - eta
    for k in range(n):
        fk = eta_a * att[k] * before[k] * model.n_in
        rk = eta_b * att[n - 1 - k] * after[k] * model.n_in
        jf[k, k] = fk
        jr[k, k] = rk
        for j in range(k):
            # d/d eta_j of prod (1 - eta_i) = -prod / (1 - eta_j), written without division
            jf[k, j] = -eta_a * att[k] * model.n_in * eta[k] * np.prod(np.delete(s[:k], j))
        for j in range(k + 1, n):
            jr[k, j] = -eta_b * att[n - 1 - k] * model.n_in * eta[k] * np.prod(np.delete(s[k + 1:], j - k - 1))
        jf[k, n] = att[k] * before[k] * eta[k] * model.n_in
        jr[k, n + 1] = att[n - 1 - k] * after[k] * eta[k] * model.n_in
    jac = np.empty((2 * n, n + 2))
    jac[0::2] = jf
    jac[1::2] = jr
    return jac


@dataclass(frozen=True)
class EfficiencySolution:
    eta: np.ndarray
    eta_a: float
    eta_b: float
    residual: float
    covariance: np.ndarray
    cost: float = 0.0
    n_starts: int = 1
    alpha: float | None = None

    @property
    def params(self):
        return np.concatenate([self.eta, [self.eta_a, self.eta_b]])

    @property
    def stderr(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def combined_efficiency(self):
        """1 - prod(1 - eta_k) with its linearised standard error."""
        s = 1.0 - self.eta
        total = 1.0 - float(np.prod(s))
        grad = np.array([np.prod(np.delete(s, k)) for k in range(self.eta.size)])
        cov = self.covariance[: self.eta.size, : self.eta.size]
        return total, float(math.sqrt(max(grad @ cov @ grad, 0.0)))

    def to_dict(self):
        total, total_err = self.combined_efficiency()
        d = {
            "eta": [float(v) for v in self.eta],
            "eta_a": float(self.eta_a),
            "eta_b": float(self.eta_b),
            "stderr": [float(v) for v in self.stderr],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "residual": float(self.residual),
            "combined_efficiency": total,
            "combined_efficiency_stderr": total_err,
        }
        if self.alpha is not None:
            d["alpha"] = float(self.alpha)
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _weights(measurements: CalibrationMeasurementSet, weighting):
    meas = measurements.interleaved()
    sigma = measurements.sigma_interleaved()
    if sigma is not None:
        return sigma, True
    if weighting == "relative":
        # zero counts get the smallest non-zero scale so they still constrain the fit
        floor = np.min(meas[meas > 0])
        return np.maximum(meas, floor), False
    if weighting == "uniform":
        return np.ones_like(meas), False
    raise DomainError(f"unknown weighting {weighting!r}")


def solve_efficiencies(model: CalibrationModel, measurements: CalibrationMeasurementSet, *,
                       n_starts=16, random_state=0, weighting="relative", fit_alpha=False,
                       max_nfev=2000) -> EfficiencySolution:
    """Weighted least-squares estimate of (eta_1..eta_N, eta_A, eta_B).

    Parameters are mapped through a logistic so the box [0, 1] is respected, and the
    analytic Jacobian of the forward model is supplied. The best of ``n_starts``
    uniform random starts (seeded by ``random_state``) is returned. Without explicit
    sigmas the covariance is scaled by the reduced chi-square.
    ``fit_alpha`` also fits the extinction coefficient, leaving one fewer degree of
    freedom.
    """
    n = model.n_detectors
    if measurements.n_detectors != n:
        raise DataError(f"expected {n} detectors in the measurements, got {measurements.n_detectors}")
    meas = measurements.interleaved()
    if not np.any(meas > 0):
        raise DataError("all measurements are zero")
    sigma, absolute = _weights(measurements, weighting)
    n_par = n + 2 + int(fit_alpha)
    alpha_scale = max(model.alpha, 0.1)

    def unpack(z):
        p = expit(z[: n + 2])
        a = alpha_scale * math.exp(z[n + 2]) if fit_alpha else model.alpha
        return p, a

    def model_for(a):
        return model if a == model.alpha else CalibrationModel(n, a, model.l1, model.l2, model.n_in)

    def resid(z):
        p, a = unpack(z)
        return (_predict(model_for(a), p[:n], p[n], p[n + 1]) - meas) / sigma

    def jac(z):
        p, a = unpack(z)
        m = model_for(a)
        j = _jacobian(m, p[:n], p[n], p[n + 1]) * (p * (1.0 - p))
        if fit_alpha:
            k = np.arange(n)
            dist = _interleave(m.l1 + k * m.l2, (m.l1 + k * m.l2)[::-1])
            pred = _predict(m, p[:n], p[n], p[n + 1])
            j = np.column_stack([j, -dist * pred * a])
        return j / sigma[:, None]

    rng = np.random.default_rng(random_state)
    best = None
    for _ in range(max(1, int(n_starts))):
        p0 = rng.uniform(0.05, 0.95, size=n + 2)
        z0 = logit(p0)
        if fit_alpha:
            z0 = np.append(z0, math.log(max(model.alpha, 1e-3) / alpha_scale))
        try:
            res = least_squares(resid, z0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                                gtol=1e-15, max_nfev=max_nfev)
        except ValueError:
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise ConvergenceError("least-squares fit failed from every start")
    p, a = unpack(best.x)
    if best.status <= 0:
        raise ConvergenceError(f"fit did not converge: {best.message}", best=p)

    m = model_for(a)
    jn = _jacobian(m, p[:n], p[n], p[n + 1])
    if fit_alpha:
        k = np.arange(n)
        dist = _interleave(m.l1 + k * m.l2, (m.l1 + k * m.l2)[::-1])
        jn = np.column_stack([jn, -dist * _predict(m, p[:n], p[n], p[n + 1])])
    jw = jn / sigma[:, None]
    r = resid(best.x)
    chi2 = float(r @ r)
    dof = meas.size - n_par
    cov = np.linalg.pinv(jw.T @ jw)
    if not absolute:
        cov *= chi2 / dof if dof > 0 else 0.0
    cov = 0.5 * (cov + cov.T)
    return EfficiencySolution(
        eta=p[:n].copy(), eta_a=float(p[n]), eta_b=float(p[n + 1]),
        residual=float(math.sqrt(chi2 / meas.size)), covariance=cov, cost=chi2,
        n_starts=int(n_starts), alpha=float(a) if fit_alpha else None,
    )


def single_direction_solve(model: CalibrationModel, forward, eta_a):
    """Closed-form detector efficiencies from one launch direction.

    With eta_A and alpha known, the forward equations are triangular and are solved
    detector by detector.
    """
    fwd = np.asarray(forward, dtype=float)
    if fwd.shape != (model.n_detectors,):
        raise DataError(f"expected {model.n_detectors} forward measurements")
    if np.any(fwd < 0):
        raise DataError("measurements must be non-negative")
    eta_a = check_probability(eta_a, "eta_a")
    if eta_a == 0:
        raise DomainError("eta_a must be positive")
    att = model.attenuation()
    survival = 1.0
    eta = np.empty_like(fwd)
    for k in range(fwd.size):
        if survival <= 0:
            raise DataError(f"no light survives to detector {k + 1}: inconsistent data")
        eta[k] = fwd[k] / (eta_a * att[k] * survival * model.n_in)
        if eta[k] > 1.0 + 1e-12:
            raise DataError(f"data imply eta_{k + 1} = {eta[k]:.4g} > 1")
        survival *= 1.0 - eta[k]
    return eta


def monte_carlo_scatter(model: CalibrationModel, eta, eta_a, eta_b, *, noise=0.01,
                        n_repeats=500, seed=0, n_starts=2):
    """Refit noisy copies of noiseless data; returns the (n_repeats, N+2) estimates.

    Noise is multiplicative Gaussian with relative standard deviation ``noise``.
    """
    truth = forward_model(model, eta, eta_a, eta_b)
    rng = np.random.default_rng(seed)
    out = np.empty((n_repeats, model.n_detectors + 2))
    for i in range(n_repeats):
        noisy = truth * (1.0 + noise * rng.standard_normal(truth.size))
        noisy = np.clip(noisy, 0.0, None)
        sol = solve_efficiencies(model, CalibrationMeasurementSet.from_interleaved(noisy),
                                 n_starts=n_starts, random_state=seed + i + 1)
        out[i] = sol.params
    return out


class EfficiencyCalibrator(BaseEstimator):
    """Estimator wrapper: ``fit`` a measurement set, ``predict`` the 2N photon numbers.

    Fitted attributes: ``eta_``, ``eta_a_``, ``eta_b_``, ``covariance_``,
    ``residual_`` and ``solution_``.
    """

    def __init__(self, alpha=0.0, l1=0.5, l2=0.3, n_in=1.0, n_starts=16, random_state=0,
                 weighting="relative"):
        self.alpha = alpha
        self.l1 = l1
        self.l2 = l2
        self.n_in = n_in
        self.n_starts = n_starts
        self.random_state = random_state
        self.weighting = weighting

    def _model(self, n):
        return CalibrationModel(n, self.alpha, self.l1, self.l2, self.n_in)

    def fit(self, X, y=None):
        meas = X if isinstance(X, CalibrationMeasurementSet) else CalibrationMeasurementSet.from_interleaved(X)
        sol = solve_efficiencies(self._model(meas.n_detectors), meas, n_starts=self.n_starts,
                                 random_state=self.random_state, weighting=self.weighting)
        self.solution_ = sol
        self.eta_ = sol.eta
        self.eta_a_ = sol.eta_a
        self.eta_b_ = sol.eta_b
        self.covariance_ = sol.covariance
        self.residual_ = sol.residual
        self.n_detectors_ = meas.n_detectors
        return self

    def predict(self, X=None):
        if not hasattr(self, "solution_"):
            raise AttributeError("EfficiencyCalibrator is not fitted yet; call fit first")
        return _predict(self._model(self.n_detectors_), self.eta_, self.eta_a_, self.eta_b_)
