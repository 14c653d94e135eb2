"""Seeded synthetic 12-lead corpus for desk-scale experiments.

Background: a heartbeat train (QRS and T bumps with per-lead gains),
baseline wander, and additive noise. Positive records additionally carry a
Hann-windowed sinusoidal burst on three leads. Domain ``B`` changes the
noise spectrum (low-passed noise plus mains hum) and the burst frequency,
giving a shifted task for transfer experiments.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter

from .dataset import LabelSet
from .preprocess import PipelineConfig, run_pipeline
from .prng import Prng
from .training import ArrayDataset
from .wfdb import PhysicalRecord, write_record


@dataclass(frozen=True)
class SynthSpec:
    n_records: int = 2000
    seed: int = 0
    domain: str = "A"
    positive_fraction: float = 0.5
    burst_hz: float = 7.0
    burst_leads: int = 3
    burst_amp: tuple = (0.25, 0.45)  # mV
    burst_seconds: tuple = (2.0, 4.0)
    white_noise: float = 0.05  # mV
    colored_noise: float = 0.0  # mV, low-passed
    mains_hz: float = 0.0
    mains_amp: float = 0.0
    frac_1000hz: float = 0.2
    duration_range: tuple = (9.0, 10.0)
    target: str = "AFIB"
    frac_invalid: float = 0.0  # minors, short records and flat leads, for filter tests

    @classmethod
    def domain_a(cls, **kw):
        return cls(**kw)

    @classmethod
    def domain_b(cls, **kw):
        base = dict(domain="B", burst_hz=11.0, white_noise=0.03, colored_noise=0.12,
                    mains_hz=50.0, mains_amp=0.05)
        base.update(kw)
        return cls(**base)


def _lowpass_noise(rng, n, std, alpha=0.97):
    out = lfilter([1.0 - alpha], [1.0, -alpha], rng.normal(n))
    return out * (std / (out.std() + 1e-12))


def synth_record(spec, rng, record_id, positive, fs, duration):
    n = int(round(fs * duration))
    t = np.arange(n) / fs
    hr = 55 + 40 * rng.uniform(1)[0]
    period = 60.0 / hr
    first = period * rng.uniform(1)[0]
    beats = np.arange(first, duration, period)
    jitter = rng.normal(len(beats), 0.0, 0.01)
    qrs = np.zeros(n)
    twave = np.zeros(n)
    for b in beats + jitter:
        qrs += np.exp(-0.5 * ((t - b) / 0.018) ** 2)
        twave += np.exp(-0.5 * ((t - b - 0.28) / 0.06) ** 2)
    gains = (0.4 + 0.8 * rng.uniform(12)) * np.where(rng.uniform(12) < 0.2, -1.0, 1.0)
    tgains = 0.25 * gains * (0.5 + rng.uniform(12))
    sig = gains[:, None] * qrs[None, :] + tgains[:, None] * twave[None, :]
    wander_f = 0.15 + 0.35 * rng.uniform(12)
    wander_p = 2 * np.pi * rng.uniform(12)
    wander_a = 0.05 + 0.2 * rng.uniform(12)
    sig += wander_a[:, None] * np.sin(2 * np.pi * wander_f[:, None] * t[None, :] + wander_p[:, None])
    sig += rng.normal(12 * n, 0.0, spec.white_noise).reshape(12, n)
    if spec.colored_noise > 0:
        sig += np.stack([_lowpass_noise(rng, n, spec.colored_noise) for _ in range(12)])
    if spec.mains_amp > 0:
        ph = 2 * np.pi * rng.uniform(12)
        sig += spec.mains_amp * np.sin(2 * np.pi * spec.mains_hz * t[None, :] + ph[:, None])
    if positive:
        leads = rng.permutation(12)[:spec.burst_leads]
        length_s = spec.burst_seconds[0] + (spec.burst_seconds[1] - spec.burst_seconds[0]) * rng.uniform(1)[0]
        m = int(length_s * fs)
        onset = int(rng.uniform(1)[0] * (n - m))
        env = np.hanning(m)
        freq = spec.burst_hz * (0.95 + 0.1 * rng.uniform(1)[0])
        phase = 2 * np.pi * rng.uniform(1)[0]
        burst = env * np.sin(2 * np.pi * freq * t[:m] + phase)
        amps = spec.burst_amp[0] + (spec.burst_amp[1] - spec.burst_amp[0]) * rng.uniform(len(leads))
        for lead, a in zip(leads, amps):
            sig[lead, onset:onset + m] += a * burst
    return PhysicalRecord(record_id, sig, float(fs))


def _plan(spec):
    """Per-record (positive, fs, duration, age, fold) drawn from the spec seed."""
    rng = Prng(spec.seed)
    n = spec.n_records
    npos = int(round(spec.positive_fraction * n))
    positive = np.zeros(n, dtype=bool)
    positive[rng.permutation(n)[:npos]] = True
    fs = np.where(rng.uniform(n) < spec.frac_1000hz, 1000, 500)
    lo, hi = spec.duration_range
    duration = np.where(rng.uniform(n) < 0.5, 10.0, np.round(lo + (hi - lo) * rng.uniform(n), 2))
    age = np.floor(18 + 72 * rng.uniform(n))
    folds = np.empty(n, dtype=np.int64)
    for cls in (True, False):
        idx = np.flatnonzero(positive == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % 10 + 1
    return positive, fs, duration, age, folds


def generate(spec):
    """Yield ``(PhysicalRecord, positive, meta dict)`` for the whole corpus."""
    positive, fs, duration, age, folds = _plan(spec)
    root = Prng(spec.seed)
    inv = Prng(spec.seed ^ 0x5EED).uniform(spec.n_records)
    for i in range(spec.n_records):
        rng = root.spawn(i + 1)
        rid = str(i + 1)
        a, dur = age[i], duration[i]
        rec = synth_record(spec, rng, rid, bool(positive[i]), int(fs[i]), dur)
        if inv[i] < spec.frac_invalid:
            kind = i % 3
            if kind == 0:
                a = 12.0
            elif kind == 1:
                rec = PhysicalRecord(rid, rec.signals[:, : int(8.5 * rec.sampling_rate)], rec.sampling_rate)
            else:
                rec.signals[4, :] = 0.0
        meta = dict(ecg_id=rid, age=a, sex=int(i % 2), strat_fold=int(folds[i]),
                    filename_hr=f"records{int(fs[i])}/{(i // 1000) * 1000:05d}/{i + 1:05d}_hr")
        yield rec, bool(positive[i]), meta


def generate_dataset(spec, config=PipelineConfig()):
    """Preprocessed ``ArrayDataset`` (labels = burst present) and fold numbers."""
    x = np.empty((spec.n_records, 12, config.target_len), dtype=np.float32)
    ys, ids, folds = [], [], []
    for rec, pos, meta in generate(spec):
        s = run_pipeline(rec, LabelSet({spec.target}) if pos else LabelSet(), config)
        if not hasattr(s, "tensor"):
            continue
        x[len(ids)] = s.tensor
        ys.append(float(pos))
        ids.append(rec.record_id)
        folds.append(meta["strat_fold"])
    if len(ids) < spec.n_records:
        x = x[: len(ids)].copy()
    return ArrayDataset(x, np.array(ys, dtype=np.float32), ids), np.array(folds)


def write_corpus(spec, out_dir, gain=1000.0):
    """Write WFDB records plus a PTB-XL style ``metadata.csv`` under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    meta_path = os.path.join(out_dir, "metadata.csv")
    with open(meta_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ecg_id", "age", "sex", "scp_codes", "strat_fold", "filename_hr"])
        for rec, pos, meta in generate(spec):
            write_record(rec, os.path.join(out_dir, meta["filename_hr"]), gain=gain)
            codes = {spec.target: 100.0, "SR": 0.0} if pos else {"NORM": 100.0, "SR": 0.0}
            w.writerow([meta["ecg_id"], meta["age"], meta["sex"], repr(codes), meta["strat_fold"], meta["filename_hr"]])
    return meta_path


def spec_with(spec, **kw):
    return replace(spec, **kw)
