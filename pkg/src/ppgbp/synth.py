"""Seeded synthetic PPG/ABP subjects with a learnable, subject-specific SBP link.

Each beat's PPG is a systolic Gaussian plus a dicrotic Gaussian. Systolic
width, dicrotic amplitude ratio and dicrotic delay all move monotonically
with an "effective" SBP, which is the beat's true SBP shifted by the
subject's personal bias. A model trained across subjects therefore sees the
population-average mapping; fine-tuning on one subject can learn its offset.

Generative ranges (per subject, drawn from ``(corpus_seed, subject_id)``):

==============  ======================  ==================================
parameter       range                   effect
==============  ======================  ==================================
width_scale     U(0.95, 1.05)           multiplies both pulse widths
dicrotic_gain   U(0.90, 1.10)           multiplies dicrotic amplitude ratio
phase_offset    U(-0.02, 0.02) s        shifts dicrotic delay
sbp_bias        +-U(5, 15) mmHg         shifts effective SBP of the shape
hr_base         U(60, 90) bpm           mean heart rate
==============  ======================  ==================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SegmentationScheme, SubjectRecord, make_scheme

FS = 125.0
PLATEAU_S = 12.5
# windows lying fully inside one 12.5 s plateau at 5 s / 2.5 s hop
CLEAN_WINDOWS_PER_PLATEAU = 4
OVERSAMPLE = 1.25
EDGE_MARGIN = 0.75


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: int
    width_scale: float
    dicrotic_gain: float
    phase_offset: float
    sbp_bias: float
    hr_base: float
    noise_level: float

    @property
    def morph_params(self):
        return np.array([self.width_scale, self.dicrotic_gain, self.phase_offset, self.sbp_bias])


def _rng(corpus_seed, subject_id, stream):
    return np.random.default_rng([int(corpus_seed), int(subject_id), stream])


def make_profile(corpus_seed, subject_id, noise_level=0.05, bias_range=(5.0, 15.0)):
    rng = _rng(corpus_seed, subject_id, 0)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return SubjectProfile(
        subject_id=int(subject_id),
        width_scale=float(rng.uniform(0.95, 1.05)),
        dicrotic_gain=float(rng.uniform(0.90, 1.10)),
        phase_offset=float(rng.uniform(-0.02, 0.02)),
        sbp_bias=sign * float(rng.uniform(*bias_range)),
        hr_base=float(rng.uniform(60.0, 90.0)),
        noise_level=float(noise_level),
    )


def pulse_shape(sbp_eff, profile: SubjectProfile):
    """(systolic sigma [s], dicrotic ratio, dicrotic delay [s]) for an effective SBP."""
    u = np.clip((np.asarray(sbp_eff, dtype=np.float64) - 80.0) / 100.0, -0.3, 1.3)
    sigma = profile.width_scale * (0.090 - 0.035 * u)
    ratio = profile.dicrotic_gain * (0.75 - 0.50 * u)
    delay = 0.30 - 0.08 * u + profile.phase_offset
    return sigma, ratio, delay


def sbp_trajectory(rng, scheme: SegmentationScheme, n_plateaus):
    """Plateau SBP levels cycling through every bin in shuffled order."""
    levels = []
    while len(levels) < n_plateaus:
        for b in rng.permutation(scheme.n_bins):
            lo, hi = scheme.interval(int(b))
            levels.append(rng.uniform(lo + EDGE_MARGIN, hi - EDGE_MARGIN))
    return np.asarray(levels[:n_plateaus])


def plateau_levels(corpus_seed, subject_id, duration_s, scheme="even10"):
    """SBP level of every 12.5 s plateau of a generated subject (same draws as generation)."""
    if isinstance(scheme, str):
        scheme = make_scheme(scheme)
    n_plateaus = max(1, int(math.ceil(duration_s / PLATEAU_S)))
    return sbp_trajectory(_rng(corpus_seed, subject_id, 1), scheme, n_plateaus)


def _gauss(t, centre, sigma):
    return np.exp(-0.5 * ((t - centre) / sigma) ** 2)


def generate_subject(corpus_seed, subject_id, duration_s, scheme="even10", fs=FS,
                     noise_level=0.05, profile: SubjectProfile | None = None) -> SubjectRecord:
    if isinstance(scheme, str):
        scheme = make_scheme(scheme)
    profile = profile or make_profile(corpus_seed, subject_id, noise_level)
    rng = _rng(corpus_seed, subject_id, 1)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    n_plateaus = max(1, int(math.ceil(duration_s / PLATEAU_S)))
    levels = sbp_trajectory(rng, scheme, n_plateaus)

    # beat onsets: slowly wandering HR around the subject's base rate
    beats = []
    onset = float(rng.uniform(0.0, 0.3))
    while onset < duration_s + 1.0:
        hr = profile.hr_base + 4.0 * math.sin(2 * math.pi * onset / 47.0) + rng.normal(0, 1.0)
        beats.append(onset)
        onset += 60.0 / float(np.clip(hr, 55.0, 120.0))
    beats = np.asarray(beats)
    plateau = np.minimum((beats / PLATEAU_S).astype(int), n_plateaus - 1)
    sbp = levels[plateau] + rng.normal(0.0, 0.3, size=beats.shape[0])
    dbp = 0.55 * sbp + 10.0 + rng.normal(0.0, 0.5, size=beats.shape[0])

    abp = np.zeros(n)
    ppg = np.zeros(n)
    sigma, ratio, delay = pulse_shape(sbp + profile.sbp_bias, profile)
    span = int(1.2 * fs)
    for i, b0 in enumerate(beats):
        lo = max(0, int(b0 * fs) - span // 4)
        hi = min(n, int(b0 * fs) + span)
        if lo >= hi:
            continue
        tt = t[lo:hi] - b0
        # ABP pulse peaks at exactly 1 at the systolic instant
        abp_pulse = _gauss(tt, 0.12, 0.05) + 0.2 * _gauss(tt, 0.42, 0.06)
        abp[lo:hi] += (sbp[i] - dbp[i]) * abp_pulse
        ppg[lo:hi] += _gauss(tt, 0.15, sigma[i]) + ratio[i] * _gauss(tt, 0.15 + delay[i], 1.3 * sigma[i])
    # diastolic level as a smooth per-beat interpolation
    abp += np.interp(t, beats, dbp)
    ppg += profile.noise_level * rng.normal(0.0, 1.0, size=n)
    return SubjectRecord(int(subject_id), float(fs), ppg, abp)


def duration_for(scheme: SegmentationScheme, windows_per_bin_target):
    """Record length that yields the per-bin target with the oversampling margin."""
    per_bin = int(math.ceil(OVERSAMPLE * windows_per_bin_target / CLEAN_WINDOWS_PER_PLATEAU))
    return per_bin * scheme.n_bins * PLATEAU_S


def generate_corpus(corpus_seed, n_subjects, scheme="even10", windows_per_bin_target=50,
                    noise_level=0.05, first_id=1, fs=FS):
    if n_subjects < 5:
        raise ValueError(f"a corpus needs at least 5 subjects, got {n_subjects}")
    if isinstance(scheme, str):
        scheme = make_scheme(scheme)
    duration = duration_for(scheme, windows_per_bin_target)
    return [
        generate_subject(corpus_seed, sid, duration, scheme, fs, noise_level)
        for sid in range(first_id, first_id + n_subjects)
    ]
