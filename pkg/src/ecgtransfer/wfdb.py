"""Single-segment WFDB records stored in format 16.

Header (``.hea``) layout handled here::

    <name> <nsig> <fs>[/<counter>] <nsamp> [base time] [base date]
    <file> <fmt>[x..][:..][+off] [<gain>[(<baseline>)][/<units>] [<adcres> [<adczero> [<init> [<checksum> [<block> [<desc>]]]]]]]

Missing fields take the WFDB defaults: gain 200 ADC units per mV, ADC
zero 0, baseline equal to the ADC zero, ADC resolution 12 bits, units mV.
Samples (``.dat``) are little-endian int16, interleaved by frame. The
value -32768 is read as an ordinary sample, not as a missing-value marker.
"""

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRecord, LengthMismatch, MalformedHeader, RangeOverflow, TruncatedData, UnsupportedFormat

DEFAULT_GAIN = 200.0
DEFAULT_ADC_RES = 12
STANDARD_LEADS = ("I", "II", "III", "AVR", "AVL", "AVF", "V1", "V2", "V3", "V4", "V5", "V6")

_FMT_RE = re.compile(r"^(\d+)(?:x\d+)?(?::\d+)?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+0-9]+)\))?(?:/(\S+))?$")


@dataclass
class SignalSpec:
    file_name: str
    fmt: int
    gain: float = DEFAULT_GAIN
    baseline: int = 0
    units: str = "mV"
    adc_resolution: int = DEFAULT_ADC_RES
    adc_zero: int = 0
    init_value: int = 0
    checksum: int = 0
    byte_offset: int = 0
    description: str = ""


@dataclass
class WfdbHeader:
    record_name: str
    num_signals: int
    sampling_rate: float
    num_samples: int
    signals: list = field(default_factory=list)

    @property
    def duration_s(self):
        return self.num_samples / self.sampling_rate


@dataclass
class PhysicalRecord:
    record_id: str
    signals: np.ndarray  # (12, n) mV
    sampling_rate: float
    lead_names: tuple = STANDARD_LEADS

    def __post_init__(self):
        sig = np.asarray(self.signals, dtype=np.float64)
        if sig.ndim != 2 or sig.shape[0] != 12:
            raise InvalidRecord(f"{self.record_id}: expected 12 leads, got shape {sig.shape}")
        if not np.all(np.isfinite(sig)):
            raise InvalidRecord(f"{self.record_id}: non-finite samples")
        if self.sampling_rate <= 0:
            raise InvalidRecord(f"{self.record_id}: sampling rate must be positive")
        self.signals = sig

    @property
    def num_samples(self):
        return self.signals.shape[1]

    @property
    def duration_s(self):
        return self.num_samples / self.sampling_rate


def _to_int(tok, what):
    try:
        return int(tok)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {tok!r}") from None


def _to_float(tok, what):
    try:
        return float(tok)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {tok!r}") from None


def parse_wfdb_header(text: str) -> WfdbHeader:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise MalformedHeader("empty header")
    rec = lines[0].split()
    if len(rec) < 4:
        raise MalformedHeader("record line needs name, signal count, sampling rate and sample count")
    name = rec[0]
    if "/" in name:
        raise UnsupportedFormat("multi-segment records are not supported")
    nsig = _to_int(rec[1], "signal count")
    fs = _to_float(rec[2].split("/")[0], "sampling rate")
    nsamp = _to_int(rec[3], "sample count")
    if nsig < 1:
        raise MalformedHeader("a record needs at least one signal")
    if fs <= 0 or nsamp < 0:
        raise MalformedHeader("sampling rate must be positive and sample count non-negative")
    if len(lines) < 1 + nsig:
        raise MalformedHeader(f"expected {nsig} signal lines, found {len(lines) - 1}")
    signals = []
    for i, line in enumerate(lines[1:1 + nsig]):
        tok = line.split()
        if len(tok) < 2:
            raise MalformedHeader(f"signal line {i + 1} lacks file name and format")
        m = _FMT_RE.match(tok[1])
        if not m:
            raise MalformedHeader(f"bad format field {tok[1]!r}")
        fmt = int(m.group(1))
        if fmt != 16:
            raise UnsupportedFormat(f"signal {i + 1} uses format {fmt}; only format 16 is supported")
        spec = SignalSpec(file_name=tok[0], fmt=fmt, byte_offset=int(m.group(2) or 0))
        baseline = None
        if len(tok) > 2:
            g = _GAIN_RE.match(tok[2])
            if not g:
                raise MalformedHeader(f"bad gain field {tok[2]!r}")
            spec.gain = _to_float(g.group(1), "gain")
            if g.group(2) is not None:
                baseline = int(g.group(2))
            if g.group(3):
                spec.units = g.group(3)
            if spec.gain == 0:
                raise MalformedHeader(f"signal {i + 1} has zero gain")
        if len(tok) > 3:
            spec.adc_resolution = _to_int(tok[3], "ADC resolution")
        if len(tok) > 4:
            spec.adc_zero = _to_int(tok[4], "ADC zero")
        if len(tok) > 5:
            spec.init_value = _to_int(tok[5], "initial value")
        if len(tok) > 6:
            spec.checksum = _to_int(tok[6], "checksum")
        if len(tok) > 8:
            spec.description = " ".join(tok[8:])
        spec.baseline = spec.adc_zero if baseline is None else baseline
        signals.append(spec)
    return WfdbHeader(name, nsig, fs, nsamp, signals)


def read_wfdb_signals(header: WfdbHeader, dat: bytes, record_id=None) -> PhysicalRecord:
    """Convert raw frame-interleaved samples to mV: (digital - baseline) / gain."""
    files = {s.file_name for s in header.signals}
    if len(files) != 1 or len({s.byte_offset for s in header.signals}) != 1:
        raise UnsupportedFormat("all signals must share one sample file")
    offset = header.signals[0].byte_offset
    expected = header.num_signals * header.num_samples * 2
    body = len(dat) - offset
    if body < expected:
        raise TruncatedData(f"{header.record_name}: {body} bytes of samples, expected {expected}")
    if body > expected:
        raise LengthMismatch(f"{header.record_name}: {body} bytes of samples, expected {expected}")
    digital = np.frombuffer(dat, dtype="<i2", count=header.num_signals * header.num_samples, offset=offset)
    digital = digital.reshape(header.num_samples, header.num_signals).T.astype(np.float64)
    gain = np.array([s.gain for s in header.signals])[:, None]
    base = np.array([s.baseline for s in header.signals], dtype=np.float64)[:, None]
    names = tuple(s.description or STANDARD_LEADS[i] if i < 12 else s.description
                  for i, s in enumerate(header.signals))
    return PhysicalRecord(record_id or header.record_name, (digital - base) / gain,
                          header.sampling_rate, lead_names=names)


def digitize(rec: PhysicalRecord, gain, baseline) -> np.ndarray:
    """(nsamp, 12) int16 samples, rounding half to even."""
    gain = np.broadcast_to(np.asarray(gain, dtype=np.float64), (12,))
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), (12,))
    if np.any(gain == 0):
        raise RangeOverflow("gain must be non-zero")
    d = np.rint(rec.signals * gain[:, None] + baseline[:, None])
    if d.size and (d.min() < -32768 or d.max() > 32767):
        raise RangeOverflow(f"{rec.record_id}: samples do not fit in 16 bits at this gain")
    return d.T.astype("<i2")


def _fmt_gain(g):
    return repr(float(g))


def write_wfdb_record(rec: PhysicalRecord, gain=1000.0, baseline=0, record_name=None):
    """Return ``(header_text, dat_bytes)`` for a format-16 record."""
    name = record_name or rec.record_id
    gain = np.broadcast_to(np.asarray(gain, dtype=np.float64), (12,))
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.int64), (12,))
    d = digitize(rec, gain, baseline)
    fs = rec.sampling_rate
    fs_text = str(int(fs)) if float(fs).is_integer() else repr(float(fs))
    lines = [f"{name} 12 {fs_text} {rec.num_samples}"]
    for i in range(12):
        col = d[:, i].astype(np.int64)
        init = int(col[0]) if col.size else 0
        checksum = int(col.sum()) & 0xFFFF
        if checksum >= 0x8000:
            checksum -= 0x10000
        lead = rec.lead_names[i] if i < len(rec.lead_names) else f"L{i + 1}"
        lines.append(f"{name}.dat 16 {_fmt_gain(gain[i])}({int(baseline[i])})/mV 16 {int(baseline[i])} "
                     f"{init} {checksum} 0 {lead}")
    return "\n".join(lines) + "\n", d.tobytes()


def read_record(path, record_id=None) -> PhysicalRecord:
    """Read ``path.hea`` and its sample file (``path`` without extension)."""
    base = str(path)
    if base.endswith(".hea"):
        base = base[:-4]
    with open(base + ".hea", encoding="ascii") as fh:
        header = parse_wfdb_header(fh.read())
    return read_record_with_header(header, os.path.dirname(base), record_id)


def read_record_with_header(header, directory, record_id=None):
    with open(os.path.join(directory, header.signals[0].file_name), "rb") as fh:
        dat = fh.read()
    return read_wfdb_signals(header, dat, record_id)


def read_header(path) -> WfdbHeader:
    base = str(path)
    if not base.endswith(".hea"):
        base += ".hea"
    with open(base, encoding="ascii") as fh:
        return parse_wfdb_header(fh.read())


def write_record(rec: PhysicalRecord, path, gain=1000.0, baseline=0):
    """Write ``<path>.hea`` and ``<path>.dat``; the record name is the basename."""
    base = str(path)
    name = os.path.basename(base)
    header, dat = write_wfdb_record(rec, gain, baseline, record_name=name)
    os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
    with open(base + ".hea", "w", encoding="ascii") as fh:
        fh.write(header)
    with open(base + ".dat", "wb") as fh:
        fh.write(dat)
