"""Signal-processing primitives for PPG/ABP windows.

All functions are pure. Arrays are float64 internally; callers may pass any
real sequence.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import ConfigurationError, RejectionError

DEFAULT_FS = 125.0
WINDOW_S = 5.0
OVERLAP_S = 2.5


@dataclass(frozen=True)
class FilterSpec:
    order: int = 4
    f_low: float = 0.5
    f_high: float = 8.0
    fs: float = DEFAULT_FS

    def validate(self):
        if self.fs <= 0:
            raise ConfigurationError(f"sampling rate must be positive, got {self.fs}")
        if not 0 < self.f_low < self.f_high:
            raise ConfigurationError(
                f"band edges must satisfy 0 < f_low < f_high, got {self.f_low}, {self.f_high}"
            )
        if self.f_high >= self.fs / 2:
            raise ConfigurationError(
                f"f_high={self.f_high} Hz must be below Nyquist ({self.fs / 2} Hz)"
            )
        if self.order < 2 or self.order % 2:
            raise ConfigurationError(f"filter order must be even and >= 2, got {self.order}")


@dataclass(frozen=True)
class IIRCoefficients:
    """Cascade of biquads, one row per section: ``b0 b1 b2 1 a1 a2``."""

    sections: np.ndarray

    @property
    def n_sections(self):
        return self.sections.shape[0]

    @property
    def order(self):
        return 2 * self.n_sections

    def poles(self):
        out = []
        for sec in self.sections:
            out.extend(np.roots(sec[3:]))
        return np.asarray(out)

    def is_stable(self):
        return bool(np.all(np.abs(self.poles()) < 1.0))


@dataclass
class Window:
    samples: np.ndarray
    fs: float = DEFAULT_FS
    source_offset: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self):
        return self.samples.shape[0]


class Reason(str, enum.Enum):
    OK = "ok"
    LOW_SNR = "low_snr"
    SBP_OUT_OF_RANGE = "sbp_out_of_range"
    HR_OUT_OF_RANGE = "hr_out_of_range"
    NO_PEAKS = "no_peaks"


@dataclass(frozen=True)
class QualityVerdict:
    accepted: bool
    reason: Reason

    @classmethod
    def ok(cls):
        return cls(True, Reason.OK)

    @classmethod
    def reject(cls, reason):
        return cls(False, Reason(reason))


@dataclass(frozen=True)
class QualityThresholds:
    snr_min: float = -7.0
    sbp_min: float = 80.0
    sbp_max: float = 180.0
    hr_min: float = 50.0
    hr_max: float = 140.0


def _samples(x):
    if isinstance(x, Window):
        return x.samples, x.fs
    return np.asarray(x, dtype=np.float64), None


# ---------------------------------------------------------------------------
# Filter design and application
# ---------------------------------------------------------------------------


def design_bandpass(spec: FilterSpec) -> IIRCoefficients:
    """Butterworth bandpass as a cascade of ``spec.order`` biquads.

    ``spec.order`` is the order of the analog lowpass prototype; the resulting
    digital bandpass has twice that order. Band edges are pre-warped so the
    -3 dB points land exactly on ``f_low`` and ``f_high`` after the bilinear
    transform. Each section is scaled to unit gain at the digital centre
    frequency, where a Butterworth bandpass peaks at exactly 0 dB.
    """
    spec.validate()
    n = spec.order
    fs2 = 2.0 * spec.fs
    w_lo = fs2 * math.tan(math.pi * spec.f_low / spec.fs)
    w_hi = fs2 * math.tan(math.pi * spec.f_high / spec.fs)
    bw = w_hi - w_lo
    w0 = math.sqrt(w_lo * w_hi)
    omega_c = 2.0 * math.atan(w0 / fs2)
    zc = np.exp(-1j * omega_c)

    sections = []
    # upper-half-plane prototype poles; conjugates are covered by pairing
    for k in range(1, n // 2 + 1):
        p = np.exp(1j * math.pi * (2 * k + n - 1) / (2 * n))
        half = p * bw / 2.0
        root = np.sqrt(half * half - w0 * w0 + 0j)
        for s_pole in (half + root, half - root):
            z_pole = (fs2 + s_pole) / (fs2 - s_pole)
            a1 = -2.0 * z_pole.real
            a2 = abs(z_pole) ** 2
            # zeros at z = +1 and z = -1 (analog zeros at DC and infinity)
            gain = abs(1.0 + a1 * zc + a2 * zc * zc) / abs(1.0 - zc * zc)
            sections.append([gain, 0.0, -gain, 1.0, a1, a2])
    coeffs = IIRCoefficients(np.asarray(sections, dtype=np.float64))
    if not coeffs.is_stable():
        raise ConfigurationError("designed filter is unstable; band too narrow for this order")
    return coeffs


def frequency_response(coeffs: IIRCoefficients, freqs, fs) -> np.ndarray:
    """Complex response of the cascade evaluated on the unit circle."""
    z1 = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / fs)
    h = np.ones_like(z1)
    for b0, b1, b2, _, a1, a2 in coeffs.sections:
        h = h * (b0 + b1 * z1 + b2 * z1 * z1) / (1.0 + a1 * z1 + a2 * z1 * z1)
    return h


def _steady_state(sections):
    # per-section initial state for a unit step, transposed direct form II
    zi = np.zeros((sections.shape[0], 2))
    scale = 1.0
    for i, (b0, b1, b2, _, a1, a2) in enumerate(sections):
        a = np.array([[1.0 + a1, -1.0], [a2, 1.0]])
        rhs = np.array([b1 - a1 * b0, b2 - a2 * b0])
        zi[i] = scale * np.linalg.solve(a, rhs)
        scale *= (b0 + b1 + b2) / (1.0 + a1 + a2)
    return zi


def edge_padding(coeffs: IIRCoefficients, n, decay=1e-3):
    """Mirror-padding length: at least 3x the total order, long enough for the
    slowest pole to decay by ``decay``, and shorter than the signal."""
    radius = float(np.max(np.abs(coeffs.poles())))
    settle = int(math.ceil(math.log(decay) / math.log(radius))) if radius > 0 else 0
    return min(n - 1, max(3 * coeffs.order, settle))


def apply_filter(signal, coeffs: IIRCoefficients) -> np.ndarray:
    """Zero-phase forward-backward filtering with mirror padding at both edges."""
    x, _ = _samples(signal)
    if x.ndim != 1 or x.shape[0] <= 3 * coeffs.order:
        raise RejectionError(
            f"signal of length {x.shape[0]} too short for filter "
            f"(needs > {3 * coeffs.order} samples)"
        )
    if not np.all(np.isfinite(x)):
        raise RejectionError("signal contains non-finite values")
    pad = edge_padding(coeffs, x.shape[0])
    ext = np.pad(x, pad, mode="reflect")
    sos = coeffs.sections
    zi = _steady_state(sos)
    y, _ = sps.sosfilt(sos, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.sosfilt(sos, y, zi=zi * y[0])
    return y[::-1][pad:-pad].copy()


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def window_offsets(n_total, fs=DEFAULT_FS, window_s=WINDOW_S, overlap_s=OVERLAP_S):
    if not window_s > overlap_s >= 0:
        raise ConfigurationError(
            f"need window_s > overlap_s >= 0, got window={window_s}, overlap={overlap_s}"
        )
    n = int(round(fs * window_s))
    hop = int(math.floor(fs * (window_s - overlap_s)))
    if hop < 1:
        raise ConfigurationError("window hop rounds to zero samples")
    if n_total < n:
        return n, np.zeros(0, dtype=np.int64)
    k = (n_total - n) // hop + 1
    return n, np.arange(k, dtype=np.int64) * hop


def segment_windows(signal, fs=DEFAULT_FS, window_s=WINDOW_S, overlap_s=OVERLAP_S):
    x, _ = _samples(signal)
    n, offsets = window_offsets(x.shape[0], fs, window_s, overlap_s)
    return [Window(x[o : o + n].copy(), fs, int(o)) for o in offsets]


# ---------------------------------------------------------------------------
# Quality and label derivation
# ---------------------------------------------------------------------------


def _band(freqs, lo, hi):
    return (freqs >= lo) & (freqs <= hi)


def compute_snr(window, fs=None) -> float:
    """Fundamental-plus-first-harmonic power over residual 0.1-10 Hz power, in dB.

    Returns ``-inf`` for windows without signal power.
    """
    x, wfs = _samples(window)
    fs = fs or wfs or DEFAULT_FS
    if x.shape[0] < 128:
        raise RejectionError(f"window too short for SNR estimate ({x.shape[0]} < 128)")
    if not np.all(np.isfinite(x)):
        raise RejectionError("window contains non-finite values")
    power = np.abs(np.fft.rfft(x - x.mean())) ** 2
    freqs = np.fft.rfftfreq(x.shape[0], 1.0 / fs)
    search = _band(freqs, 0.7, 2.5)
    if not np.any(power[search] > 0):
        return -math.inf
    f0 = freqs[search][np.argmax(power[search])]
    sig = _band(freqs, f0 - 0.2, f0 + 0.2) | _band(freqs, 2 * f0 - 0.2, 2 * f0 + 0.2)
    noise = _band(freqs, 0.1, 10.0) & ~sig
    p_sig = power[sig].sum()
    p_noise = power[noise].sum()
    if p_sig <= 0:
        return -math.inf
    if p_noise <= 0:
        return math.inf
    return float(10.0 * math.log10(p_sig / p_noise))


def detect_peaks(abp_window, fs=None, min_distance_s=0.35, rel_prominence=0.25) -> np.ndarray:
    x, wfs = _samples(abp_window)
    fs = fs or wfs or DEFAULT_FS
    if x.size == 0:
        return np.zeros(0, dtype=np.int64)
    span = float(x.max() - x.min())
    if span <= 0:
        return np.zeros(0, dtype=np.int64)
    distance = max(1, int(math.floor(min_distance_s * fs)))
    peaks, _ = sps.find_peaks(x, distance=distance, prominence=rel_prominence * span)
    return peaks.astype(np.int64)


def _median(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    m = v.shape[0] // 2
    if v.shape[0] % 2:
        return float(v[m])
    return float((v[m - 1] + v[m]) / 2.0)


def derive_sbp(abp_window, peaks) -> float:
    x, _ = _samples(abp_window)
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size == 0:
        raise RejectionError(Reason.NO_PEAKS.value)
    return _median(x[peaks])


def derive_hr(peaks, fs=DEFAULT_FS) -> float:
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size < 2:
        raise RejectionError(Reason.NO_PEAKS.value)
    return 60.0 / (_median(np.diff(peaks)) / fs)


def normalize(window):
    x, wfs = _samples(window)
    std = x.std()
    if not std > 1e-8:
        raise RejectionError(Reason.LOW_SNR.value)
    y = (x - x.mean()) / std
    if isinstance(window, Window):
        return Window(y, window.fs, window.source_offset)
    return y


def quality_gate(snr, sbp, hr, thresholds: QualityThresholds = QualityThresholds()) -> QualityVerdict:
    if not snr >= thresholds.snr_min:
        return QualityVerdict.reject(Reason.LOW_SNR)
    if not thresholds.sbp_min <= sbp <= thresholds.sbp_max:
        return QualityVerdict.reject(Reason.SBP_OUT_OF_RANGE)
    if not thresholds.hr_min <= hr <= thresholds.hr_max:
        return QualityVerdict.reject(Reason.HR_OUT_OF_RANGE)
    return QualityVerdict.ok()


@dataclass
class WindowAssessment:
    verdict: QualityVerdict
    snr: float = math.nan
    sbp: float = math.nan
    hr: float = math.nan
    ppg: np.ndarray | None = field(default=None, repr=False)


def assess_window(ppg_filtered, abp, fs=DEFAULT_FS, thresholds=QualityThresholds(),
                  ppg_raw=None):
    """Label one window pair and decide whether it enters the dataset.

    ``ppg_filtered`` must already be bandpassed. The SNR is estimated on
    ``ppg_raw`` when given (the bandpass would otherwise shape the noise
    floor inside the estimator's reference band). On acceptance the returned
    assessment carries the normalized filtered PPG.
    """
    snr = compute_snr(ppg_filtered if ppg_raw is None else ppg_raw, fs)
    peaks = detect_peaks(abp, fs)
    if peaks.size < 2:
        return WindowAssessment(QualityVerdict.reject(Reason.NO_PEAKS), snr)
    sbp = derive_sbp(abp, peaks)
    hr = derive_hr(peaks, fs)
    verdict = quality_gate(snr, sbp, hr, thresholds)
    if not verdict.accepted:
        return WindowAssessment(verdict, snr, sbp, hr)
    try:
        ppg = normalize(ppg_filtered)
    except RejectionError:
        return WindowAssessment(QualityVerdict.reject(Reason.LOW_SNR), snr, sbp, hr)
    return WindowAssessment(verdict, snr, sbp, hr, ppg)
