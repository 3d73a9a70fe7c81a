"""Laguerre deconvolution, mean lifetime and phasor features for FLIm waveforms."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz
from scipy.optimize import nnls

from .errors import DegenerateInputError, InputError, ParameterError

BANDS = ("bandA", "bandB")
N_HARMONICS = 3


@dataclass(frozen=True)
class LaguerreBasis:
    order: int
    alpha: float
    n_samples: int
    matrix: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class LaguerreFit:
    coefficients: np.ndarray
    decay: np.ndarray
    residual: float


@dataclass(frozen=True)
class PhasorSet:
    g: np.ndarray
    s: np.ndarray

    def as_flat(self) -> list[float]:
        out = []
        for g, s in zip(self.g, self.s):
            out.extend((float(g), float(s)))
        return out


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered per-band feature layout: LT, LC01..LCL, Ph1g, Ph1s, ... PhKs."""

    bands: tuple[str, ...] = BANDS
    laguerre_order: int = 12
    n_harmonics: int = N_HARMONICS
    intensity_ratio: bool = False

    def band_names(self, band: str) -> list[str]:
        names = [f"{band}_LT"]
        names += [f"{band}_LC{i + 1:02d}" for i in range(self.laguerre_order)]
        for n in range(1, self.n_harmonics + 1):
            names += [f"{band}_Ph{n}g", f"{band}_Ph{n}s"]
        return names

    @property
    def names(self) -> list[str]:
        out = []
        for band in self.bands:
            out += self.band_names(band)
        if self.intensity_ratio:
            out += [f"{band}_IR" for band in self.bands]
        return out

    @property
    def dimension(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class BasisConfig:
    order: int = 12
    alpha: float = 0.6
    ridge: float = 1e-6
    knot_stride: int = 1
    phasor_source: str = "decay"  # "decay" (deconvolved h) or "raw"


def laguerre_basis(order: int, alpha: float, n_samples: int) -> LaguerreBasis:
    """Discrete-time Laguerre functions as columns of an ``n_samples x order`` matrix.

    Built with the usual two-term recursion, then re-orthonormalised on the
    finite record so that truncation never breaks orthonormality.
    """
    if not np.isfinite(alpha) or not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if not 1 <= order <= n_samples:
        raise ParameterError(f"need 1 <= order <= n_samples, got order={order}, n_samples={n_samples}")
    sa = np.sqrt(alpha)
    n = np.arange(n_samples)
    b = np.empty((n_samples, order))
    b[:, 0] = np.sqrt(1.0 - alpha) * sa ** n
    for j in range(1, order):
        col = np.empty(n_samples)
        col[0] = sa * b[0, j - 1]
        for k in range(1, n_samples):
            col[k] = sa * col[k - 1] + sa * b[k, j - 1] - b[k - 1, j - 1]
        b[:, j] = col
    q, r = np.linalg.qr(b)
    # keep each column's sign aligned with the analytic function
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    q.setflags(write=False)
    return LaguerreBasis(order=order, alpha=float(alpha), n_samples=n_samples, matrix=q)


def convolution_matrix(irf: np.ndarray, n_samples: int) -> np.ndarray:
    """Causal, truncated convolution operator: ``conv_matrix @ h == np.convolve(irf, h)[:n]``."""
    irf = np.asarray(irf, dtype=float)
    col = np.zeros(n_samples)
    m = min(len(irf), n_samples)
    col[:m] = irf[:m]
    row = np.zeros(n_samples)
    row[0] = col[0]
    return toeplitz(col, row)


def _least_distance(e: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Minimum-norm z with ``e @ z >= f`` (Lawson & Hanson LDP via NNLS)."""
    m, k = e.shape
    a = np.vstack([e.T, f[None, :]])
    rhs = np.zeros(k + 1)
    rhs[-1] = 1.0
    u, _ = nnls(a, rhs, maxiter=50 * (m + k + 1))
    r = a @ u - rhs
    if abs(r[-1]) < 1e-14:
        raise DegenerateInputError("nonnegativity constraints are infeasible")
    return -r[:k] / r[-1]


class Deconvolver:
    """Constrained Laguerre deconvolution against a fixed IRF.

    Minimises ``||y - irf * (B c)||^2 + ridge_term * ||c||^2`` subject to
    ``B c >= 0`` at every ``knot_stride``-th sample. The unconstrained solution
    is tried first; when it goes negative the problem is reduced to a
    least-distance program and solved exactly with NNLS. The factorisation is
    cached, so reuse one instance across points.
    """

    def __init__(self, irf, basis: LaguerreBasis, ridge: float = 1e-6, knot_stride: int = 1):
        irf = np.asarray(getattr(irf, "samples", irf), dtype=float)
        n = basis.n_samples
        if len(irf) > n:
            raise InputError("irf longer than waveform")
        if not np.all(np.isfinite(irf)):
            raise InputError("non-finite irf samples")
        if knot_stride < 1:
            raise ParameterError("knot_stride must be >= 1")
        self.basis = basis
        self.design = convolution_matrix(irf, n) @ basis.matrix
        gram_scale = np.trace(self.design.T @ self.design) / basis.order
        if gram_scale <= 0:
            raise DegenerateInputError("irf has no energy")
        cond = np.linalg.cond(self.design)
        if not np.isfinite(cond) or cond > 1e12:
            warnings.warn(f"ill-conditioned deconvolution (cond={cond:.3g}); relying on ridge term",
                          RuntimeWarning, stacklevel=2)
        lam = ridge * gram_scale
        a = np.vstack([self.design, np.sqrt(lam) * np.eye(basis.order)])
        self._q, self._r = np.linalg.qr(a)
        self._q = self._q[:n]  # the ridge rows multiply zeros in the augmented target
        self._r_inv = np.linalg.inv(self._r)
        self.knots = basis.matrix[::knot_stride]
        self._e = self.knots @ self._r_inv

    def __call__(self, waveform) -> LaguerreFit:
        y = np.asarray(getattr(waveform, "samples", waveform), dtype=float)
        if y.shape != (self.basis.n_samples,):
            raise InputError(f"waveform length {y.shape} does not match basis length {self.basis.n_samples}")
        if not np.all(np.isfinite(y)):
            raise InputError("non-finite samples")
        if not np.any(y):
            raise DegenerateInputError("all-zero waveform")
        qty = self._q.T @ y
        c = self._r_inv @ qty
        if np.any(self.knots @ c < 0):
            z = _least_distance(self._e, -self._e @ qty)
            c = self._r_inv @ (z + qty)
        h = self.basis.matrix @ c
        resid = float(np.linalg.norm(self.design @ c - y))
        return LaguerreFit(coefficients=c, decay=h, residual=resid)


def deconvolve(waveform, irf, basis: LaguerreBasis, ridge: float = 1e-6, knot_stride: int = 1) -> LaguerreFit:
    """One-shot constrained deconvolution; see :class:`Deconvolver`."""
    return Deconvolver(irf, basis, ridge, knot_stride)(waveform)


def _simpson_weights(n: int, dt: float) -> np.ndarray:
    """Composite Simpson quadrature weights; an even sample count closes with a trapezoid."""
    w = np.zeros(n)
    m = n if n % 2 == 1 else n - 1
    if m >= 3:
        w[:m:2] = 2.0
        w[1:m:2] = 4.0
        w[0] = w[m - 1] = 1.0
        w[:m] *= dt / 3.0
    else:
        w[:m] = dt
    if m < n:
        w[m - 1] += dt / 2.0
        w[m] += dt / 2.0
    return w


def mean_lifetime(h, dt: float) -> float:
    """Intensity-weighted mean time of the decay, sum(t h) / sum(h) under Simpson weights."""
    h = np.asarray(h, dtype=float)
    if h.ndim != 1 or len(h) < 2:
        raise InputError("decay must be a 1-D array with at least 2 samples")
    w = _simpson_weights(len(h), dt) * h
    total = w.sum()
    if not total > 0:
        raise DegenerateInputError("decay has no positive area")
    t = np.arange(len(h)) * dt
    return float((t * w).sum() / total)


def amplitude_weighted_lifetime(h, dt: float) -> float:
    """Decay area over its initial amplitude: sum(a_i tau_i) / sum(a_i) for exponential mixtures."""
    h = np.asarray(h, dtype=float)
    if not h[0] > 0:
        raise DegenerateInputError("decay has no positive amplitude at t=0")
    return float((_simpson_weights(len(h), dt) * h).sum() / h[0])


def phasor_harmonics(h, dt: float, n_max: int = N_HARMONICS) -> PhasorSet:
    """Phasor coordinates of harmonics 1..n_max over the record period.

    Uses the FFT with a periodic trapezoidal end correction, so a continuous
    decay sampled at rate ``1/dt`` maps onto its analytic phasor to O(dt^2).
    The sample one period after t=0 is extrapolated geometrically from the
    record tail.
    """
    h = np.asarray(h, dtype=float)
    if n_max < 1 or n_max >= len(h) // 2:
        raise InputError(f"n_max={n_max} out of range for {len(h)} samples")
    ratio = h[-1] / h[-2] if h[-2] > 0 else 0.0
    h_next = h[-1] * min(max(ratio, 0.0), 1.0)
    spec = np.fft.rfft(h)[: n_max + 1]
    spec = spec - 0.5 * (h[0] - h_next)
    dc = spec[0].real
    if dc <= 0 or not np.isfinite(dc):
        raise DegenerateInputError("zero DC component")
    harm = spec[1:] / dc
    return PhasorSet(g=harm.real.copy(), s=-harm.imag.copy())


class FeatureExtractor:
    """Reusable per-point feature extraction for a fixed IRF and record length."""

    def __init__(self, irf, n_samples: int, dt: float, schema: FeatureSchema | None = None,
                 config: BasisConfig | None = None):
        self.schema = schema or FeatureSchema()
        self.config = config or BasisConfig(order=self.schema.laguerre_order)
        if self.config.order != self.schema.laguerre_order:
            raise InputError("basis order and schema Laguerre order disagree")
        if self.config.phasor_source not in ("decay", "raw"):
            raise ParameterError(f"unknown phasor source {self.config.phasor_source!r}")
        self.dt = float(dt)
        self.basis = laguerre_basis(self.config.order, self.config.alpha, n_samples)
        irfs = irf if isinstance(irf, dict) else {b: irf for b in self.schema.bands}
        shared = {}
        self._deconv = {}
        for band in self.schema.bands:
            if band not in irfs:
                raise InputError(f"no irf for band {band!r}")
            key = id(irfs[band])
            if key not in shared:
                shared[key] = Deconvolver(irfs[band], self.basis, self.config.ridge, self.config.knot_stride)
            self._deconv[band] = shared[key]

    def band_block(self, y: np.ndarray, band: str) -> list[float]:
        fit = self._deconv[band](y)
        h = np.clip(fit.decay, 0.0, None)
        ph_src = h if self.config.phasor_source == "decay" else np.asarray(y, float)
        block = [mean_lifetime(h, self.dt)]
        block.extend(fit.coefficients.tolist())
        block.extend(phasor_harmonics(ph_src, self.dt, self.schema.n_harmonics).as_flat())
        return block

    def __call__(self, waveforms: dict) -> np.ndarray:
        missing = [b for b in self.schema.bands if b not in waveforms]
        if missing:
            raise InputError(f"missing band(s): {', '.join(missing)}")
        out = []
        intensities = []
        for band in self.schema.bands:
            y = np.asarray(getattr(waveforms[band], "samples", waveforms[band]), dtype=float)
            out.extend(self.band_block(y, band))
            intensities.append(float(y.sum()))
        if self.schema.intensity_ratio:
            total = sum(intensities)
            out.extend([v / total if total > 0 else 0.0 for v in intensities])
        return np.asarray(out)

    def transform(self, waves: dict[str, np.ndarray]) -> np.ndarray:
        """Feature matrix for arrays of shape ``(n_points, n_samples)`` keyed by band."""
        missing = [b for b in self.schema.bands if b not in waves]
        if missing:
            raise InputError(f"missing band(s): {', '.join(missing)}")
        n = len(waves[self.schema.bands[0]])
        x = np.empty((n, self.schema.dimension))
        for i in range(n):
            x[i] = self({b: waves[b][i] for b in self.schema.bands})
        return x


def extract_features(waveforms: dict, irf, schema: FeatureSchema | None = None,
                     config: BasisConfig | None = None, dt: float | None = None) -> np.ndarray:
    """Feature vector for one point: per band [LT, LC01.., Ph1g, Ph1s, ...] concatenated.

    ``waveforms`` maps band name to a Waveform (or an array, with ``dt`` given).
    ``irf`` is one array shared by all bands or a dict keyed by band.
    """
    schema = schema or FeatureSchema()
    missing = [b for b in schema.bands if b not in waveforms]
    if missing:
        raise InputError(f"missing band(s): {', '.join(missing)}")
    first = waveforms[schema.bands[0]]
    step = getattr(first, "dt", dt)
    if step is None:
        raise InputError("sample period unknown; pass dt or Waveform objects")
    n = len(np.asarray(getattr(first, "samples", first)))
    return FeatureExtractor(irf, n, step, schema, config)(waveforms)


def write_feature_csv(path, x: np.ndarray, schema: FeatureSchema, keys, provenance: dict | None = None) -> None:
    """Feature matrix as CSV keyed by (patient_id, margin_id, point_id).

    ``provenance`` entries are written first as ``# key: value`` comment lines.
    """
    import csv

    with open(path, "w", newline="") as fh:
        for k in sorted(provenance or {}):
            fh.write(f"# {k}: {provenance[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "margin_id", "point_id"] + schema.names)
        for (pid, mid, ptid), row in zip(keys, x):
            w.writerow([pid, mid, ptid] + [repr(float(v)) for v in row])


def read_feature_csv(path) -> tuple[list[str], list[tuple[str, str, int]], np.ndarray]:
    import csv

    with open(path, newline="") as fh:
        r = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(r)
        keys, rows = [], []
        for rec in r:
            keys.append((rec[0], rec[1], int(rec[2])))
            rows.append([float(v) for v in rec[3:]])
    return header[3:], keys, np.asarray(rows, dtype=float).reshape(len(rows), len(header) - 3)
