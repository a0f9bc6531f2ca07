import dataclasses

import numpy as np
import pytest

from ppgbp import data, dsp, synth
from ppgbp.data import make_scheme

# RMS distance between z-scored PPG records of two subjects sharing trajectory
# and beat timing; the smallest of 198 random profile pairs measured 0.019
MORPH_DISTANCE_FLOOR = 0.01


def zscore(v):
    return (v - v.mean()) / v.std()


class TestProfile:
    def test_ranges(self):
        for sid in range(1, 200):
            p = synth.make_profile(7, sid)
            assert 0.95 <= p.width_scale <= 1.05
            assert 0.90 <= p.dicrotic_gain <= 1.10
            assert -0.02 <= p.phase_offset <= 0.02
            assert 5 <= abs(p.sbp_bias) <= 15
            assert 60 <= p.hr_base <= 90

    def test_determined_by_seed_and_id(self):
        assert synth.make_profile(1, 4) == synth.make_profile(1, 4)
        assert synth.make_profile(1, 4) != synth.make_profile(2, 4)

    def test_shape_monotone(self):
        p = synth.make_profile(0, 1)
        sigma, ratio, delay = synth.pulse_shape(np.linspace(80, 180, 50), p)
        assert np.all(np.diff(sigma) < 0) and np.all(np.diff(ratio) < 0)
        assert np.all(np.diff(delay) < 0)


class TestSubject:
    def test_bit_identical(self):
        a = synth.generate_subject(5, 3, 40.0)
        b = synth.generate_subject(5, 3, 40.0)
        assert a.ppg.tobytes() == b.ppg.tobytes() and a.abp.tobytes() == b.abp.tobytes()

    def test_trajectory_covers_bins(self):
        for name in ("hph", "even4", "dgk", "even10"):
            scheme = make_scheme(name)
            levels = synth.plateau_levels(1, 2, synth.duration_for(scheme, 10), scheme)
            assert np.all((levels >= 80) & (levels <= 180))
            assert set(data.assign_bin(levels, scheme).tolist()) == set(range(scheme.n_bins))

    def test_label_fidelity(self):
        duration = 250.0
        rec = synth.generate_subject(3, 1, duration, "even4", noise_level=0.0)
        levels = synth.plateau_levels(3, 1, duration, "even4")
        n, offsets = dsp.window_offsets(len(rec), rec.fs, 5.0, 2.5)
        checked = 0
        for off in offsets:
            first, last = int(off / rec.fs // 12.5), int((off + n - 1) / rec.fs // 12.5)
            if first != last:
                continue
            w = rec.abp[off : off + n].astype(np.float64)
            assert abs(dsp.derive_sbp(w, dsp.detect_peaks(w)) - levels[first]) <= 1.0
            checked += 1
        assert checked >= 60

    def test_distinct_morphology(self):
        base = synth.make_profile(3, 1, 0.0)
        records = []
        for sid in range(1, 9):
            prof = dataclasses.replace(synth.make_profile(3, sid, 0.0), hr_base=base.hr_base,
                                       subject_id=1)
            records.append(synth.generate_subject(3, 1, 60.0, profile=prof))
        for i in range(len(records)):
            for j in range(i + 1, len(records)):
                assert np.array_equal(records[i].abp, records[j].abp)
                d = np.sqrt(np.mean((zscore(records[i].ppg) - zscore(records[j].ppg)) ** 2))
                assert d > MORPH_DISTANCE_FLOOR

    def test_ingest_roundtrip(self, tmp_path):
        rec = synth.generate_subject(1, 1, 20.0)
        data.write_record(rec, tmp_path / "s.ppgr")
        back = data.read_record(tmp_path / "s.ppgr")
        assert np.array_equal(back.ppg, rec.ppg)


def _gate(records):
    reasons = {}
    parts = []
    for rec in records:
        samples, r = data.preprocess_record(rec)
        parts.append(samples)
        for k, v in r.items():
            reasons[k] = reasons.get(k, 0) + v
    return data.SampleSet.concatenate(parts), reasons


class TestCorpus:
    def test_needs_five(self):
        with pytest.raises(ValueError):
            synth.generate_corpus(0, 4)

    def test_all_eligible(self):
        corpus = synth.generate_corpus(1, 10, "even4", 50)
        assert [r.subject_id for r in corpus] == list(range(1, 11))
        samples, _ = _gate(corpus)
        scheme = make_scheme("even4")
        ids = data.eligible_subjects(data.bin_counts(samples, scheme), scheme, per_bin_quota=50)
        assert ids == list(range(1, 11))

    def test_clean_gate(self):
        _, reasons = _gate(synth.generate_corpus(2, 5, "even4", 50, noise_level=0.0))
        total = sum(reasons.values())
        assert 1 - reasons["low_snr"] / total >= 0.99

    def test_noisy_gate(self):
        _, reasons = _gate(synth.generate_corpus(2, 5, "even4", 50, noise_level=10.0))
        assert reasons["low_snr"] > sum(reasons.values()) / 2
