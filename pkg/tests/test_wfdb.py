import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgtransfer.errors import LengthMismatch, MalformedHeader, RangeOverflow, TruncatedData, UnsupportedFormat
from ecgtransfer.wfdb import (
    PhysicalRecord, parse_wfdb_header, read_record, read_wfdb_signals, write_record, write_wfdb_record,
)


def header_text(fmt="16", gains=None, name="r001"):
    gains = gains or [1000] * 12
    lines = [f"{name} 12 500 5000"]
    for i, g in enumerate(gains):
        lines.append(f"{name}.dat {fmt} {g}(0)/mV 16 0 0 0 0 L{i}")
    return "\n".join(lines) + "\n"


def test_header_fields():
    h = parse_wfdb_header(header_text())
    assert (h.record_name, h.num_signals, h.sampling_rate, h.num_samples) == ("r001", 12, 500.0, 5000)
    assert all(s.gain == 1000 and s.baseline == 0 and s.fmt == 16 for s in h.signals)
    assert h.signals[3].description == "L3"


def test_ptbxl_style_header():
    text = ("00001_hr 12 500 5000\n"
            "00001_hr.dat 16 1000.0(0)/mV 16 0 -119 1508 0 I\n" * 1)
    text += "".join(f"00001_hr.dat 16 1000.0(0)/mV 16 0 -55 723 0 V{i}\n" for i in range(11))
    h = parse_wfdb_header(text)
    assert h.signals[0].init_value == -119 and h.signals[0].checksum == 1508
    assert h.signals[0].units == "mV" and h.duration_s == 10.0


def test_header_defaults():
    text = "rec 12 500 10\n" + "rec.dat 16\n" * 12
    h = parse_wfdb_header(text)
    assert all(s.gain == 200.0 and s.baseline == 0 and s.adc_zero == 0 for s in h.signals)


def test_baseline_defaults_to_adc_zero():
    text = "rec 12 500 10\n" + "rec.dat 16 200/mV 12 7\n" * 12
    h = parse_wfdb_header(text)
    assert all(s.baseline == 7 for s in h.signals)


def test_unsupported_format():
    with pytest.raises(UnsupportedFormat):
        parse_wfdb_header(header_text(fmt="212"))


def test_zero_gain_is_malformed():
    gains = [1000] * 12
    gains[5] = 0
    with pytest.raises(MalformedHeader):
        parse_wfdb_header(header_text(gains=gains))


@pytest.mark.parametrize("text", ["", "r 12 500", "r x 500 5000\n", "r 12 500 5000\nr.dat 16\n"])
def test_malformed_headers(text):
    with pytest.raises(MalformedHeader):
        parse_wfdb_header(text)


def _header(gain, baseline, nsamp=4):
    lines = [f"r 12 500 {nsamp}"] + [f"r.dat 16 {gain}({baseline})/mV 16 0" for _ in range(12)]
    return parse_wfdb_header("\n".join(lines))


def test_read_formula():
    h = _header(200, 1024, nsamp=1)
    dat = np.full(12, 2048, dtype="<i2").tobytes()
    rec = read_wfdb_signals(h, dat)
    assert np.allclose(rec.signals, 5.12)


def test_digital_equal_baseline_is_zero():
    h = _header(200, 1024)
    rec = read_wfdb_signals(h, np.full(48, 1024, dtype="<i2").tobytes())
    assert np.all(rec.signals == 0)


def test_truncated_and_overlong():
    h = _header(200, 0)
    with pytest.raises(TruncatedData):
        read_wfdb_signals(h, b"\x00" * 95)
    with pytest.raises(LengthMismatch):
        read_wfdb_signals(h, b"\x00" * 98)


def test_frame_interleaving():
    h = _header(1, 0, nsamp=2)
    frames = np.arange(24, dtype="<i2")  # sample-major: frame 0 leads 0..11, then frame 1
    rec = read_wfdb_signals(h, frames.tobytes())
    assert rec.signals[3, 0] == 3 and rec.signals[3, 1] == 15


def test_write_zero_record():
    rec = PhysicalRecord("z", np.zeros((12, 50)), 500.0)
    _, dat = write_wfdb_record(rec, gain=1000)
    assert dat == bytes(12 * 50 * 2)


def test_write_inverse_formula():
    rec = PhysicalRecord("w", np.full((12, 1), 5.12), 500.0)
    _, dat = write_wfdb_record(rec, gain=200, baseline=1024)
    assert np.all(np.frombuffer(dat, dtype="<i2") == 2048)


def test_range_overflow():
    rec = PhysicalRecord("o", np.full((12, 3), 40.0), 500.0)
    with pytest.raises(RangeOverflow):
        write_wfdb_record(rec, gain=1000)


def _random_record(rng, gain):
    n = int(rng.integers(1, 400))
    sig = rng.uniform(-30000, 30000, size=(12, n)) / gain
    return PhysicalRecord("rnd", sig, float(rng.choice([500, 1000])))


def test_round_trip_100_records():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gain = float(rng.choice([200.0, 1000.0, 2.5, 409.6]))
        base = int(rng.integers(-500, 500))
        rec = _random_record(rng, gain)
        rec = PhysicalRecord("rnd", rec.signals - base / gain / 2, rec.sampling_rate)
        text, dat = write_wfdb_record(rec, gain=gain, baseline=base)
        back = read_wfdb_signals(parse_wfdb_header(text), dat)
        assert np.max(np.abs(back.signals - rec.signals)) <= 1 / (2 * gain) + 1e-12
        text2, dat2 = write_wfdb_record(back, gain=gain, baseline=base)
        assert dat2 == dat and text2 == text


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-32768, 32767), min_size=12, max_size=12 * 20).filter(lambda v: len(v) % 12 == 0),
       st.sampled_from([1.0, 200.0, 1000.0, 3.7]), st.integers(-100, 100))
def test_bytes_stable_under_read_write(values, gain, baseline):
    nsamp = len(values) // 12
    h = _header(gain, baseline, nsamp)
    dat = np.array(values, dtype="<i2").tobytes()
    rec = read_wfdb_signals(h, dat)
    _, dat2 = write_wfdb_record(rec, gain=gain, baseline=baseline)
    assert dat2 == dat


def test_files_on_disk(tmp_path, make_record):
    rec = make_record("00001_hr", fs=500, seconds=1.0)
    write_record(rec, tmp_path / "records500" / "00001_hr")
    back = read_record(tmp_path / "records500" / "00001_hr")
    assert back.signals.shape == (12, 500)
    assert np.max(np.abs(back.signals - rec.signals)) <= 1 / 2000 + 1e-12
