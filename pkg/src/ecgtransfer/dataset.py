"""Record metadata, target labels and dataset manifests."""

import csv
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace

from .errors import DataError, MissingFold
from .wfdb import read_header

log = logging.getLogger(__name__)

TARGETS = ("AFIB", "RBBB", "STACH", "SBRAD", "1AVB", "LBBB", "PVC")
_MERGES = {"CRBBB": "RBBB", "IRBBB": "RBBB", "CLBBB": "LBBB", "ILBBB": "LBBB"}
_DIRECT = {"AFIB", "STACH", "SBRAD", "1AVB", "PVC"}

MIN_AGE = 18
DURATION_RANGE = (9.0, 10.0)
ACCEPTED_RATES = (500.0, 1000.0)
SPLITS = ("train", "val", "test")


class LabelSet(frozenset):
    """Set of positive target names; multi-label."""

    def __new__(cls, positives=()):
        positives = frozenset(positives)
        unknown = positives - set(TARGETS)
        if unknown:
            raise ValueError(f"unknown targets: {sorted(unknown)}")
        return super().__new__(cls, positives)

    def flags(self):
        return tuple(t in self for t in TARGETS)

    @classmethod
    def from_flags(cls, flags):
        return cls(t for t, f in zip(TARGETS, flags) if f)

    def __repr__(self):
        return f"LabelSet({sorted(self, key=TARGETS.index)})"


def derive_labels(scp_codes) -> LabelSet:
    """Any listed code counts as present, whatever its likelihood."""
    out = set()
    for code in scp_codes:
        if code in _DIRECT:
            out.add(code)
        elif code in _MERGES:
            out.add(_MERGES[code])
    return LabelSet(out)


_SCP_PAIR = re.compile(r"""['"]?([A-Za-z0-9_+\-/]+)['"]?\s*:\s*([-+0-9.eE]+|nan)""")


def parse_scp_codes(text: str) -> dict:
    """Parse ``{'NORM': 100.0, 'SR': 0.0}`` or the unquoted ``{NORM:100, SR:0}``."""
    text = text.strip()
    if not text or text in ("{}", "nan"):
        return {}
    return {k: float(v) for k, v in _SCP_PAIR.findall(text)}


@dataclass
class RecordMeta:
    record_id: str
    age: float = None
    sex: str = "unknown"
    strat_fold: int = None
    scp_codes: dict = field(default_factory=dict)
    source: str = "ptbxl"
    filename: str = ""

    def __post_init__(self):
        if self.age is not None and self.age < 0:
            raise DataError(f"{self.record_id}: negative age")
        if self.strat_fold is not None and not 1 <= self.strat_fold <= 10:
            raise DataError(f"{self.record_id}: strat_fold {self.strat_fold} outside 1..10")


def _parse_sex(tok):
    tok = (tok or "").strip().lower()
    # PTB-XL encodes male as 0 and female as 1
    if tok in ("0", "0.0", "m", "male"):
        return "male"
    if tok in ("1", "1.0", "f", "female"):
        return "female"
    return "unknown"


def _opt_float(tok):
    tok = (tok or "").strip()
    if not tok:
        return None
    v = float(tok)
    return None if math.isnan(v) else v


def read_metadata(path, source="ptbxl") -> list:
    """Read a PTB-XL style database table into ``RecordMeta`` rows."""
    metas = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"ecg_id", "age", "sex", "scp_codes", "strat_fold", "filename_hr"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"metadata file lacks columns: {sorted(missing)}")
        for row in reader:
            rid = row["ecg_id"].strip()
            if rid.endswith(".0"):
                rid = rid[:-2]
            fold = _opt_float(row["strat_fold"])
            metas.append(RecordMeta(
                record_id=rid,
                age=_opt_float(row["age"]),
                sex=_parse_sex(row["sex"]),
                strat_fold=None if fold is None else int(fold),
                scp_codes=parse_scp_codes(row["scp_codes"]),
                source=source,
                filename=row["filename_hr"].strip(),
            ))
    return metas


@dataclass
class ManifestRow:
    record_id: str
    path: str
    sampling_rate: float
    duration_s: float
    age: float
    sex: str
    labels: LabelSet
    strat_fold: int = None
    split: str = "train"


@dataclass
class Rejection:
    record_id: str
    reason: str


@dataclass
class DatasetManifest:
    rows: list
    provenance: str = ""
    rejections: list = field(default_factory=list)

    def __post_init__(self):
        ids = [r.record_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise DataError("manifest record ids must be unique")

    def __len__(self):
        return len(self.rows)

    def ids(self):
        return [r.record_id for r in self.rows]

    def subset(self, split):
        return [r for r in self.rows if r.split == split]

    def counts(self):
        return {s: sum(r.split == s for r in self.rows) for s in SPLITS}


def _reject_reason(row):
    if row.age is None:
        return "missing_age"
    if row.age < MIN_AGE:
        return "age_below_18"
    if not DURATION_RANGE[0] <= row.duration_s <= DURATION_RANGE[1]:
        return "duration"
    if float(row.sampling_rate) not in ACCEPTED_RATES:
        return "sampling_rate"
    return None


def filter_rows(rows):
    kept, rejected = [], []
    for row in rows:
        reason = _reject_reason(row)
        if reason is None:
            kept.append(row)
        else:
            rejected.append(Rejection(row.record_id, reason))
            log.info("rejected %s: %s", row.record_id, reason)
    return kept, rejected


def filter_records(metas, headers, provenance="") -> DatasetManifest:
    """Join metadata with headers (dict id -> WfdbHeader) and keep eligible adult records."""
    rows, rejected = [], []
    for meta in metas:
        hdr = headers.get(meta.record_id)
        if hdr is None:
            rejected.append(Rejection(meta.record_id, "missing_header"))
            continue
        if hdr.num_signals != 12:
            rejected.append(Rejection(meta.record_id, "lead_count"))
            continue
        rows.append(ManifestRow(
            record_id=meta.record_id,
            path=meta.filename,
            sampling_rate=hdr.sampling_rate,
            duration_s=hdr.duration_s,
            age=meta.age,
            sex=meta.sex,
            labels=derive_labels(meta.scp_codes),
            strat_fold=meta.strat_fold,
        ))
    kept, more = filter_rows(rows)
    rejected += more
    log.info("filter: kept %d of %d records", len(kept), len(metas))
    return DatasetManifest(kept, provenance, rejected)


def filter_manifest(manifest: DatasetManifest) -> DatasetManifest:
    kept, rejected = filter_rows(manifest.rows)
    return DatasetManifest(kept, manifest.provenance, manifest.rejections + rejected)


def split_by_fold(manifest: DatasetManifest, test_fold=10, val_fold=9) -> DatasetManifest:
    rows = []
    for row in manifest.rows:
        if row.strat_fold is None:
            raise MissingFold(f"{row.record_id} has no strat_fold")
        if row.strat_fold == test_fold:
            split = "test"
        elif row.strat_fold == val_fold:
            split = "val"
        else:
            split = "train"
        rows.append(replace(row, split=split))
    return DatasetManifest(rows, manifest.provenance, list(manifest.rejections))


def build_manifest(metadata_path, records_dir, provenance=None) -> DatasetManifest:
    """Read metadata plus every referenced header from ``records_dir``."""
    metas = read_metadata(metadata_path)
    headers = {}
    for meta in metas:
        hea = os.path.join(records_dir, meta.filename)
        if os.path.exists(hea + ".hea"):
            headers[meta.record_id] = read_header(hea)
    note = provenance or f"metadata={os.path.basename(str(metadata_path))}"
    return filter_records(metas, headers, note)


MANIFEST_COLUMNS = ("record_id", "path", "sampling_rate", "duration_s", "age", "sex", "strat_fold") + TARGETS + ("split",)


def write_manifest(manifest: DatasetManifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if manifest.provenance:
            fh.write(f"# provenance: {manifest.provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            w.writerow([r.record_id, r.path, _num(r.sampling_rate), _num(r.duration_s), _num(r.age), r.sex,
                        "" if r.strat_fold is None else r.strat_fold,
                        *(int(f) for f in r.labels.flags()), r.split])


def _num(v):
    if v is None:
        return ""
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def read_manifest(path) -> DatasetManifest:
    provenance = ""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = []
        for line in fh:
            if line.startswith("# provenance:"):
                provenance = line.split(":", 1)[1].strip()
            elif not line.startswith("#"):
                lines.append(line)
    reader = csv.DictReader(lines)
    missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise DataError(f"manifest lacks columns: {sorted(missing)}")
    for row in reader:
        if row["split"] not in SPLITS:
            raise DataError(f"{row['record_id']}: unknown split {row['split']!r}")
        rows.append(ManifestRow(
            record_id=row["record_id"],
            path=row["path"],
            sampling_rate=float(row["sampling_rate"]),
            duration_s=float(row["duration_s"]),
            age=_opt_float(row["age"]),
            sex=row["sex"],
            labels=LabelSet.from_flags(row[t] == "1" for t in TARGETS),
            strat_fold=int(row["strat_fold"]) if row["strat_fold"] else None,
            split=row["split"],
        ))
    return DatasetManifest(rows, provenance)
