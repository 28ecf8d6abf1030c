"""Synthetic 12-lead ECG generation, dataset container I/O, splits and scarcity subsampling."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import DOWER, EXPAND_12, LEADS, rotation_matrix

log = logging.getLogger(__name__)

RHYTHMS = ("AFIB", "GSVT", "SB", "SR")
GENDERS = ("male", "female")
CHAPMAN_BALANCE = {"AFIB": 0.36, "GSVT": 0.22, "SB": 0.21, "SR": 0.21}
GENDER_BALANCE = {"male": 0.56, "female": 0.44}
SPLITS = ("train", "val", "test")
MAGIC = b"ECG1"
SCHEMA_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class SignalRecord:
    signal: np.ndarray
    sampling_rate_hz: float
    record_id: str
    rhythm: str | None = None
    gender: str | None = None

    def __post_init__(self):
        self.signal = np.ascontiguousarray(self.signal, dtype=np.float32)
        if self.signal.ndim != 2 or self.signal.shape[0] != 12:
            raise DatasetError(f"record {self.record_id}: expected 12 leads, got shape {self.signal.shape}")
        if not np.all(np.isfinite(self.signal)):
            raise DatasetError(f"record {self.record_id}: non-finite values")

    def label(self, task: str) -> str | None:
        return self.rhythm if task == "arrhythmia" else self.gender


@dataclass
class Dataset:
    records: list
    split: dict = field(default_factory=dict)  # record_id -> "train" | "val" | "test"
    provenance: str = ""

    def __len__(self):
        return len(self.records)

    def subset(self, tag: str) -> list:
        if not self.split:
            if tag == "train":
                return list(self.records)
            raise DatasetError("dataset has not been split")
        return [r for r in self.records if self.split[r.record_id] == tag]

    @property
    def length(self) -> int:
        return self.records[0].signal.shape[1]

    @property
    def sampling_rate_hz(self) -> float:
        return self.records[0].sampling_rate_hz


def zscore(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return ((x - mu) / np.where(sd > 0, sd, 1.0)).astype(np.float32)


def labels_array(records, task: str) -> np.ndarray:
    classes = RHYTHMS if task == "arrhythmia" else GENDERS
    out = []
    for r in records:
        lab = r.label(task)
        if lab is None:
            raise DatasetError(f"record {r.record_id} has no {task} label")
        out.append(classes.index(lab))
    return np.array(out, dtype=np.int64)


def signals_array(records) -> np.ndarray:
    return np.stack([r.signal for r in records])


# ---------------------------------------------------------------- synthetic


def _allocate(n: int, proportions: dict) -> dict:
    """Largest-remainder allocation of n items to classes."""
    total = sum(proportions.values())
    if any(v < 0 for v in proportions.values()) or not np.isclose(total, 1.0, atol=1e-6):
        raise DatasetError(f"class proportions must be non-negative and sum to 1, got {proportions}")
    raw = {k: n * v for k, v in proportions.items()}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(raw, key=lambda k: counts[k] - raw[k])[:left]:
        counts[k] += 1
    return counts


# heart-rate bands (bpm) and RR irregularity (relative std) per rhythm
_RATE = {"SB": (40, 55), "SR": (62, 90), "GSVT": (120, 170), "AFIB": (90, 150)}
_RR_JITTER = {"SB": 0.02, "SR": 0.03, "GSVT": 0.02, "AFIB": 0.25}


def _bump(t, centre, width):
    return np.exp(-0.5 * ((t[None, :] - centre[:, None]) / width) ** 2).sum(axis=0)


def _synth_record(rhythm, gender, length, fs, rng):
    t = np.arange(length) / fs
    lo, hi = _RATE[rhythm]
    bpm = rng.uniform(lo, hi) + (6.0 if gender == "female" else 0.0)
    rr = 60.0 / bpm
    beats = []
    tb = -rng.uniform(0, rr)
    while tb < t[-1] + rr:
        beats.append(tb)
        tb += rr * max(0.4, 1 + _RR_JITTER[rhythm] * rng.standard_normal())
    beats = np.array(beats)
    female = gender == "female"
    qrs_w = (0.009 if female else 0.013) * rng.uniform(0.9, 1.1)
    t_amp = (0.45 if female else 0.3) * rng.uniform(0.85, 1.15)
    qt = 0.28 * np.sqrt(rr)
    waves = {
        # (offset from R peak [s], width [s], amplitude, direction in VCG space)
        "Q": (-2.2 * qrs_w, qrs_w, -0.15, (0.3, 0.6, 0.4)),
        "R": (0.0, qrs_w, 1.0, (0.6, 0.75, -0.3)),
        "S": (2.2 * qrs_w, qrs_w, -0.25, (0.2, -0.3, 0.9)),
        "T": (qt, 0.045, t_amp, (0.5, 0.6, 0.3)),
    }
    if rhythm != "AFIB":
        waves["P"] = (-0.16, 0.022, 0.12, (0.5, 0.8, 0.1))
    rot = rotation_matrix(rng.uniform(-0.25, 0.25, size=3))
    vcg = np.zeros((3, length))
    for offset, width, amp, direction in waves.values():
        d = rot @ (np.asarray(direction) / np.linalg.norm(direction))
        vcg += np.outer(d, amp * _bump(t, beats + offset, width))
    if rhythm == "AFIB":
        f = rng.uniform(5, 7)
        vcg += np.outer(rng.normal(0, 0.03, 3), np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)))
    ecg = EXPAND_12 @ (DOWER @ vcg)
    ecg += rng.normal(0, 0.02, size=ecg.shape)
    return zscore(ecg)


def generate_synthetic_ecg(n_records: int, class_spec: dict | None = None, rng: np.random.Generator | None = None,
                           length: int = 256, sampling_rate_hz: float = 125.0, gender_spec: dict | None = None,
                           seed: int | None = None) -> Dataset:
    """Periodic P/QRS/T wavelets in VCG space projected to 12 leads.

    Rhythm classes differ in heart-rate band and beat-interval regularity
    (AFIB is irregular and has no P wave); gender shifts QRS width, T/QRS ratio
    and rate slightly.
    """
    if n_records < 1:
        raise DatasetError("n_records must be >= 1")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0 if seed is None else seed))
    rhythm_counts = _allocate(n_records, class_spec or CHAPMAN_BALANCE)
    gender_counts = _allocate(n_records, gender_spec or GENDER_BALANCE)
    rhythms = [k for k, c in rhythm_counts.items() for _ in range(c)]
    genders = [k for k, c in gender_counts.items() for _ in range(c)]
    rng.shuffle(rhythms)
    rng.shuffle(genders)
    width = len(str(n_records - 1))
    records = [
        SignalRecord(_synth_record(r, g, length, sampling_rate_hz, rng), sampling_rate_hz,
                     f"syn{i:0{width}d}", rhythm=r, gender=g)
        for i, (r, g) in enumerate(zip(rhythms, genders))
    ]
    return Dataset(records, provenance=f"synthetic(seed={seed})" if seed is not None else "synthetic")


# ------------------------------------------------------------- container


def write_record_binary(path: Path, signal: np.ndarray):
    leads, length = signal.shape
    path.write_bytes(MAGIC + struct.pack("<II", leads, length) + signal.astype("<f4").tobytes())


def read_record_binary(path: Path, record_id: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DatasetError(f"record {record_id}: bad magic/header in {path}")
    leads, length = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * leads * length
    if len(raw) != expected:
        raise DatasetError(f"record {record_id}: file {path} has {len(raw)} bytes, header implies {expected}")
    if leads != 12:
        raise DatasetError(f"record {record_id}: expected 12 leads, file has {leads}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(leads, length).astype(np.float32)


def read_record_csv(path: Path, record_id: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    missing = [lead for lead in LEADS if lead not in header]
    if missing:
        raise DatasetError(f"record {record_id}: CSV missing lead columns {missing}")
    arr = np.array(rows, dtype=np.float32).T
    return np.stack([arr[header.index(lead)] for lead in LEADS])


def save_dataset(ds: Dataset, path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    for stale in path.glob("*.ecg"):
        stale.unlink()
    entries = []
    for r in ds.records:
        fname = f"{r.record_id}.ecg"
        write_record_binary(path / fname, r.signal)
        entries.append({"record_id": r.record_id, "file": fname, "rhythm": r.rhythm, "gender": r.gender,
                        "split": ds.split.get(r.record_id)})
    counts = {}
    for r in ds.records:
        if r.rhythm is not None:
            counts[r.rhythm] = counts.get(r.rhythm, 0) + 1
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "sampling_rate_hz": ds.sampling_rate_hz,
        "lead_order": list(LEADS),
        "provenance": ds.provenance,
        "class_counts": dict(sorted(counts.items())),
        "records": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path, normalize: bool = True, sampling_rate_hz: float = 125.0) -> Dataset:
    """Read a dataset directory (manifest + per-record files, or bare per-record CSVs)."""
    path = Path(path)
    mpath = path / "manifest.json"
    if mpath.exists():
        try:
            manifest = json.loads(mpath.read_text())
            fs = float(manifest["sampling_rate_hz"])
            entries = manifest["records"]
            version = manifest["schema_version"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{mpath}: malformed manifest ({exc})") from None
        if version != SCHEMA_VERSION:
            raise DatasetError(f"{mpath}: dataset schema_version {version}, this build reads {SCHEMA_VERSION}")
        if list(manifest.get("lead_order", LEADS)) != list(LEADS):
            raise DatasetError(f"{mpath}: lead order must be {list(LEADS)}")
        provenance = manifest.get("provenance", str(path))
    else:
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DatasetError(f"{path}: no manifest.json and no CSV records")
        fs = sampling_rate_hz
        entries = [{"record_id": f.stem, "file": f.name} for f in files]
        provenance = str(path)
    records, split = [], {}
    for e in entries:
        rid = e["record_id"]
        fpath = path / e["file"]
        if not fpath.exists():
            raise DatasetError(f"record {rid}: missing file {fpath}")
        sig = read_record_csv(fpath, rid) if fpath.suffix == ".csv" else read_record_binary(fpath, rid)
        if not np.all(np.isfinite(sig)):
            raise DatasetError(f"record {rid}: contains NaN or infinite values")
        if normalize:
            sig = zscore(sig)
        records.append(SignalRecord(sig, fs, rid, e.get("rhythm"), e.get("gender")))
        if e.get("split"):
            split[rid] = e["split"]
    return Dataset(records, split if len(split) == len(records) else {}, provenance)


# ---------------------------------------------------------------- splits


def _strata(records, key: str | None):
    groups: dict = {}
    for i, r in enumerate(records):
        lab = r.label(key) if key else None
        groups.setdefault(lab, []).append(i)
    return groups


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0, stratify: str | None = "arrhythmia") -> Dataset:
    """Label-stratified shuffle split into train/val/test."""
    if len(fractions) != 3 or not np.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    if stratify and any(r.label(stratify) is None for r in ds.records):
        stratify = None
    rng = np.random.Generator(np.random.Philox(seed))
    split = {}
    for lab, idx in sorted(_strata(ds.records, stratify).items(), key=lambda kv: str(kv[0])):
        if len(idx) < 3:
            raise DatasetError(f"class {lab!r} has {len(idx)} records; need at least 3 to split")
        idx = list(rng.permutation(idx))
        n_val = max(1, int(round(fractions[1] * len(idx))))
        n_test = max(1, int(round(fractions[2] * len(idx))))
        for j, i in enumerate(idx):
            tag = "test" if j < n_test else "val" if j < n_test + n_val else "train"
            split[ds.records[i].record_id] = tag
    return replace(ds, split=split)


def subsample_fraction(records: list, fraction: float, seed: int = 0, stratify: str | None = "arrhythmia") -> list:
    """Stratified subsample of ``round(fraction * n)`` records; nested across fractions for one seed.

    Records are ordered by ``(within-class rank + jitter) / class size`` so that
    every prefix is close to the class proportions, then the prefix is taken.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(records)
    if stratify and any(r.label(stratify) is None for r in records):
        stratify = None
    rng = np.random.Generator(np.random.Philox(seed))
    keys = np.empty(len(records))
    groups = _strata(records, stratify)
    first = {}
    for lab, idx in sorted(groups.items(), key=lambda kv: str(kv[0])):
        perm = rng.permutation(idx)
        first[lab] = perm[0]
        keys[perm] = (np.arange(len(perm)) + rng.uniform(0.05, 0.95, size=len(perm))) / len(perm)
    order = np.argsort(keys, kind="stable")
    chosen = set(order[: max(1, int(round(fraction * len(records))))].tolist())
    missing = [lab for lab, idx in groups.items() if not chosen.intersection(idx)]
    if missing:
        log.warning("fraction %.4g leaves classes %s empty; keeping one record each", fraction, missing)
        chosen.update(first[lab] for lab in missing)
    return [records[i] for i in sorted(chosen)]
