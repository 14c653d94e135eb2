"""Record -> fixed 12x5000 float32 network input.

Steps per record: reject flat leads, resample to 500 Hz, zero-pad at the
tail to 10 s, z-score each lead over its full padded length.
"""

import io
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import TARGETS, LabelSet
from .errors import ConfigInvalid, DataError, TooLong, TooShort, UnsupportedRate

log = logging.getLogger(__name__)

CACHE_MAGIC = b"ECGP"
CACHE_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    target_rate: int = 500
    target_len: int = 5000
    zscore_epsilon: float = 1e-8
    fir_taps: int = 63
    fir_cutoff: float = 0.9
    flat_tolerance: float = 0.0
    min_len: int = 4500

    def __post_init__(self):
        if self.target_len != self.target_rate * 10:
            raise ConfigInvalid("target_len must equal 10 s at target_rate")
        if self.zscore_epsilon <= 0:
            raise ConfigInvalid("zscore_epsilon must be positive")
        if self.fir_taps % 2 == 0:
            raise ConfigInvalid("fir_taps must be odd")


@dataclass
class PreprocessedSample:
    record_id: str
    tensor: np.ndarray  # (12, 5000) float32
    label: LabelSet


@dataclass
class Rejection:
    record_id: str
    reason: str  # flat_lead | unsupported_rate | too_long | too_short


def detect_flat_leads(rec, tolerance=0.0):
    ptp = rec.signals.max(axis=1) - rec.signals.min(axis=1)
    return [int(i) for i in np.flatnonzero(ptp <= tolerance)]


def lowpass_taps(num_taps=63, cutoff=0.225):
    """Hamming-windowed sinc, ``cutoff`` in cycles/sample, unit DC gain."""
    n = np.arange(num_taps) - (num_taps - 1) / 2
    h = 2 * cutoff * np.sinc(2 * cutoff * n)
    h *= np.hamming(num_taps)
    return h / h.sum()


def resample_to_500(signal, fs_in, config=PipelineConfig()):
    signal = np.asarray(signal, dtype=np.float64)
    if fs_in == 500:
        return signal.copy()
    if fs_in != 1000:
        raise UnsupportedRate(f"cannot resample from {fs_in} Hz")
    # cutoff as a fraction of the output Nyquist (250 Hz), expressed per input sample
    taps = lowpass_taps(config.fir_taps, config.fir_cutoff * 250.0 / 1000.0)
    half = len(taps) // 2
    padded = np.pad(signal, half, mode="reflect")
    filtered = np.convolve(padded, taps, mode="valid")
    return filtered[::2]


def zero_pad(signal, config=PipelineConfig()):
    n = len(signal)
    if n > config.target_len:
        raise TooLong(f"{n} samples exceeds {config.target_len}")
    if n < config.min_len:
        raise TooShort(f"{n} samples is shorter than {config.min_len}")
    out = np.zeros(config.target_len, dtype=np.asarray(signal).dtype)
    out[:n] = signal
    return out


def zscore_lead(signal, epsilon=1e-8):
    x = np.asarray(signal, dtype=np.float64)
    return (x - x.mean()) / (x.std() + epsilon)


def run_pipeline(rec, label=None, config=PipelineConfig()):
    """Return a ``PreprocessedSample`` or a ``Rejection`` with its reason."""
    if detect_flat_leads(rec, config.flat_tolerance):
        return Rejection(rec.record_id, "flat_lead")
    out = np.empty((12, config.target_len), dtype=np.float32)
    try:
        for i in range(12):
            lead = resample_to_500(rec.signals[i], rec.sampling_rate, config)
            out[i] = zscore_lead(zero_pad(lead, config), config.zscore_epsilon)
    except UnsupportedRate:
        return Rejection(rec.record_id, "unsupported_rate")
    except TooLong:
        return Rejection(rec.record_id, "too_long")
    except TooShort:
        return Rejection(rec.record_id, "too_short")
    return PreprocessedSample(rec.record_id, out, label if label is not None else LabelSet())


def run_many(items, config=PipelineConfig(), threads=1):
    """Apply ``run_pipeline`` to (record, label) pairs; output order follows input order."""
    def one(pair):
        return run_pipeline(pair[0], pair[1], config)

    if threads <= 1:
        return [one(p) for p in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, items))


# ---------------------------------------------------------------------------
# ECGP cache

def write_cache(samples, path_or_file):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "wb") if own else path_or_file
    try:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", CACHE_VERSION, len(samples)))
        for s in samples:
            rid = s.record_id.encode("utf-8")
            if s.tensor.shape != (12, 5000):
                raise DataError(f"{s.record_id}: tensor shape {s.tensor.shape}")
            fh.write(struct.pack("<H", len(rid)))
            fh.write(rid)
            fh.write(np.ascontiguousarray(s.tensor, dtype="<f4").tobytes())
            fh.write(bytes(int(f) for f in s.label.flags()))
    finally:
        if own:
            fh.close()


@dataclass
class SampleCache:
    ids: list
    x: np.ndarray  # (N, 12, 5000) float32
    labels: np.ndarray  # (N, 7) uint8

    def __len__(self):
        return len(self.ids)

    def target(self, name):
        return self.labels[:, TARGETS.index(name)].astype(np.float32)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SampleCache([self.ids[i] for i in idx], self.x[idx], self.labels[idx])

    def samples(self):
        return [PreprocessedSample(r, self.x[i], LabelSet.from_flags(self.labels[i]))
                for i, r in enumerate(self.ids)]


def read_cache(path_or_file) -> SampleCache:
    if isinstance(path_or_file, (bytes, bytearray)):
        fh = io.BytesIO(path_or_file)
    elif hasattr(path_or_file, "read"):
        fh = path_or_file
    else:
        fh = open(path_or_file, "rb")
    try:
        if fh.read(4) != CACHE_MAGIC:
            raise DataError("not an ECGP cache")
        head = fh.read(8)
        if len(head) != 8:
            raise DataError("truncated cache header")
        version, count = struct.unpack("<II", head)
        if version != CACHE_VERSION:
            raise DataError(f"unsupported cache version {version}")
        x = np.empty((count, 12, 5000), dtype=np.float32)
        labels = np.empty((count, len(TARGETS)), dtype=np.uint8)
        ids = []
        nbytes = 12 * 5000 * 4
        for i in range(count):
            raw = fh.read(2)
            if len(raw) != 2:
                raise DataError("truncated cache")
            (n,) = struct.unpack("<H", raw)
            ids.append(fh.read(n).decode("utf-8"))
            body = fh.read(nbytes)
            lab = fh.read(len(TARGETS))
            if len(body) != nbytes or len(lab) != len(TARGETS):
                raise DataError("truncated cache")
            x[i] = np.frombuffer(body, dtype="<f4").reshape(12, 5000)
            labels[i] = np.frombuffer(lab, dtype=np.uint8)
        if fh.read(1):
            raise DataError("trailing bytes in cache")
        return SampleCache(ids, x, labels)
    finally:
        if fh is not path_or_file:
            fh.close()
