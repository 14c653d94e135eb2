import csv

import pytest
from hypothesis import given, strategies as st

from ecgtransfer.dataset import (
    TARGETS, DatasetManifest, LabelSet, ManifestRow, RecordMeta, build_manifest, derive_labels,
    filter_manifest, filter_records, parse_scp_codes, read_manifest, read_metadata, split_by_fold,
    write_manifest,
)
from ecgtransfer.errors import DataError, MissingFold
from ecgtransfer.wfdb import parse_wfdb_header


def test_merges():
    assert derive_labels({"CRBBB": 100, "AFIB": 80}) == {"RBBB", "AFIB"}
    assert derive_labels({"ILBBB": 0}) == {"LBBB"}
    assert derive_labels({}) == LabelSet()
    assert derive_labels({"NORM": 100, "SR": 0}) == LabelSet()


@given(st.dictionaries(st.sampled_from(["CRBBB", "IRBBB", "CLBBB", "ILBBB", "AFIB", "NORM", "PVC", "SR"]),
                       st.floats(0, 100)))
def test_merge_indistinguishable(codes):
    def swap(c):
        return {"CRBBB": "IRBBB", "IRBBB": "CRBBB", "CLBBB": "ILBBB", "ILBBB": "CLBBB"}.get(c, c)
    assert derive_labels(codes) == derive_labels({swap(k): v for k, v in codes.items()})
    flags = derive_labels(codes)
    assert ("RBBB" in flags) == bool({"CRBBB", "IRBBB"} & set(codes))
    assert ("LBBB" in flags) == bool({"CLBBB", "ILBBB"} & set(codes))


def test_labelset_flags_round_trip():
    ls = LabelSet({"1AVB", "PVC"})
    assert LabelSet.from_flags(ls.flags()) == ls
    assert ls.flags() == (False, False, False, False, True, False, True)
    with pytest.raises(ValueError):
        LabelSet({"NORM"})


def test_parse_scp_forms():
    assert parse_scp_codes("{'NORM': 100.0, 'SR': 0.0}") == {"NORM": 100.0, "SR": 0.0}
    assert parse_scp_codes("{NORM:100, SR:0}") == {"NORM": 100.0, "SR": 0.0}
    assert parse_scp_codes('{"1AVB": 50.0}') == {"1AVB": 50.0}
    assert parse_scp_codes("{}") == {}


def _hdr(fs=500, nsamp=5000, nsig=12):
    return parse_wfdb_header(f"r {nsig} {fs} {nsamp}\n" + "r.dat 16 1000(0)/mV 16 0\n" * nsig)


def test_filter_rules():
    metas = [RecordMeta("1", age=17), RecordMeta("2", age=40), RecordMeta("3", age=40),
             RecordMeta("4", age=40), RecordMeta("5", age=None), RecordMeta("6", age=18),
             RecordMeta("7", age=50)]
    headers = {"1": _hdr(), "2": _hdr(nsamp=4250), "3": _hdr(), "4": _hdr(fs=250, nsamp=2500),
               "5": _hdr(), "6": _hdr(fs=1000, nsamp=9000)}
    m = filter_records(metas, headers)
    assert m.ids() == ["3", "6"]
    reasons = {r.record_id: r.reason for r in m.rejections}
    assert reasons == {"1": "age_below_18", "2": "duration", "4": "sampling_rate", "5": "missing_age",
                       "7": "missing_header"}


def test_filter_idempotent():
    metas = [RecordMeta(str(i), age=a) for i, a in enumerate([10, 30, 70, 17.5, 18])]
    m = filter_records(metas, {str(i): _hdr() for i in range(5)})
    again = filter_manifest(m)
    assert again.rows == m.rows


def _rows(folds):
    return [ManifestRow(str(i), "p", 500, 10, 40, "male", LabelSet(), f) for i, f in enumerate(folds)]


def test_split_by_fold():
    m = split_by_fold(DatasetManifest(_rows([10, 9, 3, 1, 10, 8])))
    assert [r.split for r in m.rows] == ["test", "val", "train", "train", "test", "train"]
    assert m.counts() == {"train": 3, "val": 1, "test": 2}
    with pytest.raises(MissingFold):
        split_by_fold(DatasetManifest(_rows([1, None])))


def test_split_counts_per_fold():
    folds = [1 + i % 10 for i in range(200)]
    m = split_by_fold(DatasetManifest(_rows(folds)))
    assert m.counts() == {"train": 160, "val": 20, "test": 20}
    assert sum(m.counts().values()) == len(m)


def test_unique_ids():
    with pytest.raises(DataError):
        DatasetManifest(_rows([1, 2])[:1] * 2)


def test_meta_invariants():
    with pytest.raises(DataError):
        RecordMeta("x", age=-1)
    with pytest.raises(DataError):
        RecordMeta("x", strat_fold=11)


def test_manifest_round_trip(tmp_path):
    rows = _rows([1, 9, 10])
    rows[0].labels = LabelSet({"AFIB", "PVC"})
    m = split_by_fold(DatasetManifest(rows, provenance="unit test"))
    write_manifest(m, tmp_path / "m.csv")
    back = read_manifest(tmp_path / "m.csv")
    assert back.provenance == "unit test"
    assert back.rows == m.rows


def test_metadata_and_build(tmp_path):
    from ecgtransfer.synth import SynthSpec, write_corpus
    meta = write_corpus(SynthSpec(n_records=12, seed=4, frac_invalid=0.5), tmp_path)
    metas = read_metadata(meta)
    assert len(metas) == 12 and all(m.sex in ("male", "female") for m in metas)
    m = build_manifest(meta, tmp_path)
    assert len(m) + len(m.rejections) == 12
    assert all(r.age >= 18 and 9 <= r.duration_s <= 10 for r in m.rows)


def test_metadata_missing_column(tmp_path):
    p = tmp_path / "meta.csv"
    with open(p, "w", newline="") as fh:
        csv.writer(fh).writerows([["ecg_id", "age"], ["1", "40"]])
    with pytest.raises(DataError):
        read_metadata(p)


def test_targets_order():
    assert TARGETS == ("AFIB", "RBBB", "STACH", "SBRAD", "1AVB", "LBBB", "PVC")
