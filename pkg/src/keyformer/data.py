"""Keystroke data handling.

Raw logs are delimited text with press/release timestamps in milliseconds.
Each session becomes an L x 5 feature matrix with columns

    [HL, IL, PL, RL, KEY]

where HL = release - press of a key, IL = next press - release, PL/RL are
consecutive press-press / release-release intervals (all in seconds), and
KEY is the key code scaled to [0, 1]. The last event of a session has no
successor, so its IL/PL/RL are zero, matching the zero-padding value.
Sequences are sliced or zero-padded to exactly L rows (default 50).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, SchemaError, SizingError
from .tensor import RngState

log = logging.getLogger(__name__)

DEFAULT_SEQUENCE_LENGTH = 50
NUM_FEATURES = 5

CANONICAL_COLUMNS = {
    "subject": "PARTICIPANT_ID",
    "session": "TEST_SECTION_ID",
    "press": "PRESS_TIME",
    "release": "RELEASE_TIME",
    "key": "KEYCODE",
}


@dataclass
class RawKeystrokeEvent:
    """One press/release pair. Times are milliseconds; key_code in [0, 255]."""

    key_code: int
    press_time: float
    release_time: float

    def validate(self) -> None:
        if not 0 <= self.key_code <= 255:
            raise ContractError(f"key_code {self.key_code} outside [0, 255]")
        if self.release_time < self.press_time:
            raise ContractError(
                f"release_time {self.release_time} precedes press_time {self.press_time}")


@dataclass
class Session:
    subject_id: str
    session_id: str
    events: List[RawKeystrokeEvent]


@dataclass
class FeatureSequence:
    """Fixed-length model input: values is L x 5, rows >= true_length are zero."""

    values: np.ndarray
    true_length: int
    subject_id: str
    session_id: str


@dataclass
class DatasetSplit:
    train_subjects: List[str]
    validation_subjects: List[str]
    test_subjects: List[str]

    def validate(self) -> None:
        sets = [set(self.train_subjects), set(self.validation_subjects),
                set(self.test_subjects)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = sets[i] & sets[j]
                if overlap:
                    raise ContractError(f"split sets overlap: {sorted(overlap)[:5]}")


@dataclass
class SyntheticProfile:
    """Per-subject typing style used by the synthetic generator.

    Hold/gap statistics are in seconds. ``session_jitter`` scales the hold
    mean per session; ``tempo_sigma`` is the lognormal sigma of the
    per-session inter-key tempo (gaps swing a lot between sessions, holds
    stay characteristic, mirroring how typing rhythm behaves in practice).
    """

    subject_id: str
    hold_mean: float
    hold_std: float
    gap_mean: float
    gap_std: float
    key_codes: List[int]
    key_probs: List[float]
    key_hold_effects: List[float]
    session_jitter: float
    tempo_sigma: float


# ---------------------------------------------------------------------------
# ingestion


def _open_schema(header: Sequence[str], schema: Optional[Dict[str, str]]) -> Dict[str, int]:
    """Map logical column roles to indices in the header."""
    names = {h.strip(): i for i, h in enumerate(header)}
    mapping = dict(CANONICAL_COLUMNS)
    if schema:
        mapping.update({k: v for k, v in schema.items() if k in mapping})
    idx = {}
    missing = []
    for role, col in mapping.items():
        if col in names:
            idx[role] = names[col]
        else:
            missing.append(col)
    if missing:
        raise SchemaError(
            f"missing required column(s) {missing}; header has {list(names)}")
    return idx


def parse_raw_log(path, schema: Optional[Dict[str, str]] = None) -> List[Session]:
    """Parse a delimited keystroke log into sessions.

    The delimiter (tab or comma) is auto-detected from the header row.
    Malformed rows are skipped and counted; more than 10% skipped raises.
    Events are sorted ascending by press time, ties keeping file order.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise IOError(f"cannot read raw log {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise SchemaError(f"{path} is empty")
    delim = "\t" if lines[0].count("\t") >= lines[0].count(",") else ","
    rows = list(csv.reader(lines, delimiter=delim))
    idx = _open_schema(rows[0], schema)

    grouped: Dict[Tuple[str, str], List[RawKeystrokeEvent]] = {}
    order: List[Tuple[str, str]] = []
    skipped = 0
    total = 0
    for row in rows[1:]:
        if not row or all(not c.strip() for c in row):
            continue
        total += 1
        try:
            subject = row[idx["subject"]].strip()
            session = row[idx["session"]].strip()
            press = float(row[idx["press"]])
            release = float(row[idx["release"]])
            key = int(float(row[idx["key"]]))
            if not subject or not session:
                raise ValueError("empty id")
            key = min(max(key, 0), 255)
            ev = RawKeystrokeEvent(key, press, release)
            ev.validate()
        except (ValueError, IndexError, ContractError):
            skipped += 1
            continue
        k = (subject, session)
        if k not in grouped:
            grouped[k] = []
            order.append(k)
        grouped[k].append(ev)

    if skipped:
        log.warning("parse_raw_log: skipped %d of %d malformed rows in %s",
                    skipped, total, path)
    if total and skipped > 0.1 * total:
        raise SchemaError(
            f"{path}: {skipped}/{total} rows malformed (> 10% budget)")

    sessions = []
    for k in order:
        events = grouped[k]
        events.sort(key=lambda e: e.press_time)  # Python sort is stable: ties keep file order
        sessions.append(Session(subject_id=k[0], session_id=k[1], events=events))
    return sessions


# ---------------------------------------------------------------------------
# features


def extract_features(session: Session, length: int = DEFAULT_SEQUENCE_LENGTH) -> FeatureSequence:
    """Compute the per-keystroke timing features for one session.

    Millisecond timestamps become seconds so features are O(0.1), the same
    scale as the normalised key code. Negative IL (key rollover) is kept.
    """
    if not session.events:
        raise ContractError(f"session {session.subject_id}/{session.session_id} has no events")
    n = len(session.events)
    m = np.zeros((n, NUM_FEATURES), dtype=np.float64)
    for i, ev in enumerate(session.events):
        m[i, 0] = (ev.release_time - ev.press_time) / 1000.0
        if i + 1 < n:
            nxt = session.events[i + 1]
            m[i, 1] = (nxt.press_time - ev.release_time) / 1000.0
            m[i, 2] = (nxt.press_time - ev.press_time) / 1000.0
            m[i, 3] = (nxt.release_time - ev.release_time) / 1000.0
        m[i, 4] = ev.key_code / 255.0
    return pad_or_slice(m, length, session.subject_id, session.session_id)


def pad_or_slice(matrix: np.ndarray, length: int, subject_id: str = "",
                 session_id: str = "") -> FeatureSequence:
    """Keep the first ``length`` rows, or zero-pad up to ``length``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != NUM_FEATURES:
        raise ContractError(f"expected n x {NUM_FEATURES} matrix, got {matrix.shape}")
    if matrix.shape[0] == 0:
        raise ContractError("cannot pad an empty feature matrix")
    if length < 1:
        raise ContractError(f"sequence length must be >= 1, got {length}")
    n = matrix.shape[0]
    out = np.zeros((length, NUM_FEATURES), dtype=np.float32)
    true_length = min(n, length)
    out[:true_length] = matrix[:true_length]
    return FeatureSequence(values=out, true_length=true_length,
                           subject_id=subject_id, session_id=session_id)


def sessions_to_features(sessions: Iterable[Session],
                         length: int = DEFAULT_SEQUENCE_LENGTH) -> List[FeatureSequence]:
    return [extract_features(s, length) for s in sessions]


def group_by_subject(seqs: Iterable[FeatureSequence]) -> Dict[str, List[FeatureSequence]]:
    """Subject -> sessions, preserving each subject's session order."""
    out: Dict[str, List[FeatureSequence]] = {}
    for fs in seqs:
        out.setdefault(fs.subject_id, []).append(fs)
    return out


# ---------------------------------------------------------------------------
# splits


def split_subjects(all_subjects: Sequence[str], sizes: Tuple[int, int, int],
                   rng: RngState,
                   explicit: Optional[Dict[str, Sequence[str]]] = None) -> DatasetSplit:
    """Disjoint train/validation/test subject sets.

    ``explicit`` maps any of train/validation/test to fixed subject lists
    (e.g. to replicate a published protocol split verbatim); remaining sets
    are drawn from the leftover subjects.
    """
    subjects = sorted(set(all_subjects))
    explicit = explicit or {}
    for name, ids in explicit.items():
        unknown = set(ids) - set(subjects)
        if unknown:
            raise SizingError(f"explicit {name} list has unknown subjects {sorted(unknown)[:5]}")

    taken = set()
    for ids in explicit.values():
        taken |= set(ids)
    pool = [s for s in subjects if s not in taken]
    rng.shuffle(pool)

    names = ("train", "validation", "test")
    need = sum(n for name, n in zip(names, sizes) if name not in explicit)
    if need > len(pool):
        raise SizingError(
            f"requested {need} subjects from a pool of {len(pool)}")

    result = {}
    cursor = 0
    for name, n in zip(names, sizes):
        if name in explicit:
            result[name] = list(explicit[name])
        else:
            result[name] = pool[cursor:cursor + n]
            cursor += n
    split = DatasetSplit(result["train"], result["validation"], result["test"])
    split.validate()
    return split


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(num_subjects: int, sessions_per_subject: int,
                       events_per_session: int, rng: RngState,
                       ) -> Tuple[List[Session], List[SyntheticProfile]]:
    """Generate separable-by-construction synthetic keystroke sessions.

    Each subject gets a profile: hold-time mean from [60, 180] ms, inter-key
    gap mean from [40, 400] ms, stds 10-30% of the mean, a preferred key
    distribution, and a per-key hold signature (some keys held longer than
    others, stable across sessions). Hold times are the stable trait: their
    session-to-session jitter is small. The inter-key tempo swings widely
    between sessions (lognormal scale on the gap mean), so raw typing speed
    alone does not identify anyone. Event times are cumulative with
    release >= press always.
    """
    if min(num_subjects, sessions_per_subject, events_per_session) < 1:
        raise ContractError("all synthetic counts must be >= 1")
    key_pool = np.array(sorted({32, 46, 44} | set(range(97, 123))), dtype=int)

    sessions: List[Session] = []
    profiles: List[SyntheticProfile] = []
    for si in range(num_subjects):
        srng = rng.child(f"subject-{si}")
        subject_id = f"synth{si:04d}"
        hold_mean = srng.uniform(60.0, 180.0)
        gap_mean = srng.uniform(40.0, 400.0)
        hold_std = hold_mean * srng.uniform(0.10, 0.30)
        gap_std_frac = srng.uniform(0.10, 0.30)
        weights = srng.uniform(0.5, 1.5, size=len(key_pool)) ** 4
        probs = weights / weights.sum()
        key_effects = srng.uniform(-0.25, 0.25, size=len(key_pool))
        jitter = srng.uniform(0.02, 0.05)
        tempo_sigma = srng.uniform(0.5, 0.8)
        profiles.append(SyntheticProfile(
            subject_id=subject_id, hold_mean=hold_mean / 1000.0,
            hold_std=hold_std / 1000.0, gap_mean=gap_mean / 1000.0,
            gap_std=gap_mean * gap_std_frac / 1000.0,
            key_codes=[int(k) for k in key_pool],
            key_probs=[float(p) for p in probs],
            key_hold_effects=[float(e) for e in key_effects],
            session_jitter=jitter, tempo_sigma=tempo_sigma))

        effect_of = dict(zip(key_pool.tolist(), key_effects))
        for sj in range(sessions_per_subject):
            erng = srng.child(f"session-{sj}")
            scale_h = 1.0 + jitter * erng.normal()
            tempo = float(np.exp(tempo_sigma * erng.normal()))
            session_gap = gap_mean * tempo
            keys = erng.choice(key_pool, size=events_per_session, replace=True, p=probs)
            key_mult = np.array([1.0 + effect_of[int(k)] for k in keys])
            holds = np.maximum(erng.normal(hold_mean * scale_h * key_mult, hold_std),
                               5.0)
            gaps = np.maximum(erng.normal(session_gap, session_gap * gap_std_frac,
                                          events_per_session), 1.0)
            events = []
            t = 0.0
            for e in range(events_per_session):
                press = t
                release = press + holds[e]
                events.append(RawKeystrokeEvent(int(keys[e]), round(press), round(release)))
                t = release + gaps[e]
            sessions.append(Session(subject_id=subject_id,
                                    session_id=f"s{sj:03d}", events=events))
    return sessions, profiles


def write_raw_log(sessions: Iterable[Session], path) -> None:
    """Write sessions in the canonical raw-log column layout (tab-delimited)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow([CANONICAL_COLUMNS["subject"], CANONICAL_COLUMNS["session"],
                    CANONICAL_COLUMNS["press"], CANONICAL_COLUMNS["release"],
                    CANONICAL_COLUMNS["key"]])
        for s in sessions:
            for ev in s.events:
                w.writerow([s.subject_id, s.session_id,
                            _fmt_ms(ev.press_time), _fmt_ms(ev.release_time), ev.key_code])


def _fmt_ms(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


# ---------------------------------------------------------------------------
# processed-feature and manifest files


def write_features(seqs: Iterable[FeatureSequence], path) -> None:
    """One CSV record per session: ids, true_length, then L*5 reals (%.9g)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for fs in seqs:
            row = [fs.subject_id, fs.session_id, str(fs.true_length)]
            row.extend("%.9g" % v for v in fs.values.reshape(-1))
            w.writerow(row)


def read_features(path) -> List[FeatureSequence]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            subject_id, session_id, true_length = row[0], row[1], int(row[2])
            vals = np.array([float(v) for v in row[3:]], dtype=np.float32)
            if vals.size % NUM_FEATURES:
                raise SchemaError(f"{path}: feature row size {vals.size} not a multiple of "
                                  f"{NUM_FEATURES}")
            values = vals.reshape(-1, NUM_FEATURES)
            out.append(FeatureSequence(values=values, true_length=true_length,
                                       subject_id=subject_id, session_id=session_id))
    return out


def write_manifest(path, split: Optional[DatasetSplit] = None,
                   profiles: Optional[List[SyntheticProfile]] = None,
                   extra: Optional[dict] = None) -> None:
    doc: dict = dict(extra or {})
    if split is not None:
        doc["split"] = {
            "train": split.train_subjects,
            "validation": split.validation_subjects,
            "test": split.test_subjects,
            "sizes": [len(split.train_subjects), len(split.validation_subjects),
                      len(split.test_subjects)],
        }
    if profiles is not None:
        doc["profiles"] = [vars(p) for p in profiles]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def split_from_manifest(doc: dict) -> DatasetSplit:
    s = doc["split"]
    split = DatasetSplit(list(s["train"]), list(s["validation"]), list(s["test"]))
    split.validate()
    return split
