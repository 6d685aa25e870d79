"""Verification protocol: genuine/impostor scores, EER variants, DET curves.

Scores are Euclidean distances between embeddings, so genuine scores are
expected to be the smaller ones and a probe is accepted iff its distance is
at or below the threshold. Per subject, the last 5 sessions are probes and
the first E sessions enrol; each probe's distances to the E enrolment
embeddings are averaged into one score. Every other subject contributes one
impostor probe (its first test session, i.e. session -5 in canonical order)
scored the same way, giving n_subjects - 1 impostor scores per subject.

"Average" EER computes a per-subject threshold and averages the per-subject
EERs; "Global" EER pools all scores and uses a single threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ContractError, ProtocolError

log = logging.getLogger(__name__)

NUM_TEST_SESSIONS = 5


@dataclass
class EvalConfig:
    E: int = 5
    num_test_sessions: int = NUM_TEST_SESSIONS
    threshold_policy: str = "both"   # average | global | both

    def validate(self) -> None:
        if self.E < 1:
            raise ContractError(f"E must be >= 1, got {self.E}")
        if self.threshold_policy not in ("average", "global", "both"):
            raise ContractError(f"unknown threshold policy {self.threshold_policy!r}")


@dataclass
class ScoreSet:
    subject_id: str
    genuine: np.ndarray      # exactly num_test_sessions entries
    impostor: np.ndarray     # n_subjects - 1 entries
    E: int


@dataclass
class EERResult:
    eer: float
    threshold: float
    policy: str              # average | global
    E: int


@dataclass
class DETCurve:
    """(threshold, FAR, FRR) triples ordered by decreasing threshold."""

    points: List[Tuple[float, float, float]]


def _session_matrix(subject: str, sessions: Sequence[np.ndarray], E: int) -> np.ndarray:
    m = np.asarray(sessions, dtype=np.float64)
    if m.ndim != 2:
        raise ProtocolError(f"subject {subject}: expected a list of embedding vectors")
    if m.shape[0] < E + NUM_TEST_SESSIONS:
        raise ProtocolError(
            f"subject {subject} has {m.shape[0]} sessions, needs >= {E + NUM_TEST_SESSIONS} "
            f"for E={E}")
    return m


def build_scores(embeddings_by_subject: Dict[str, Sequence[np.ndarray]],
                 E: int) -> List[ScoreSet]:
    """Genuine and impostor score sets for every subject.

    Args:
        embeddings_by_subject: subject -> embeddings in canonical session
            order (>= E + 5 sessions each; first E enrol, last 5 test).
        E: number of enrolment sessions.

    Returns:
        One ScoreSet per subject with 5 genuine and n-1 impostor scores.
    """
    if E < 1:
        raise ContractError(f"E must be >= 1, got {E}")
    subjects = list(embeddings_by_subject)
    mats = {s: _session_matrix(s, embeddings_by_subject[s], E) for s in subjects}
    enrol = {s: m[:E] for s, m in mats.items()}
    tests = {s: m[-NUM_TEST_SESSIONS:] for s, m in mats.items()}
    # one impostor probe per subject: its first test session
    probes = np.stack([tests[s][0] for s in subjects])

    out = []
    for si, s in enumerate(subjects):
        e = enrol[s]                                         # (E, S)
        # mean over enrolment sessions of Euclidean distance
        g = np.sqrt(((tests[s][:, None, :] - e[None, :, :]) ** 2).sum(-1)).mean(1)
        cross = np.sqrt(((probes[:, None, :] - e[None, :, :]) ** 2).sum(-1)).mean(1)
        imp = np.delete(cross, si)
        out.append(ScoreSet(subject_id=s, genuine=g, impostor=imp, E=E))
    return out


def _far_frr(genuine: np.ndarray, impostor: np.ndarray,
             thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gs = np.sort(genuine)
    im = np.sort(impostor)
    frr = 1.0 - np.searchsorted(gs, thresholds, side="right") / gs.size
    far = np.searchsorted(im, thresholds, side="right") / im.size
    return far, frr


def _candidate_thresholds(genuine: np.ndarray, impostor: np.ndarray) -> np.ndarray:
    vals = np.unique(np.concatenate([genuine, impostor]))
    if vals.size == 1:
        return vals
    mids = (vals[:-1] + vals[1:]) / 2.0
    return np.sort(np.concatenate([vals, mids]))


def compute_eer(genuine: Sequence[float], impostor: Sequence[float],
                policy: str = "global", E: int = 0) -> EERResult:
    """EER by exhaustive sweep over score values and their midpoints.

    FRR(t) is the fraction of genuine scores above t, FAR(t) the fraction of
    impostor scores at or below t; the EER is (FAR+FRR)/2 at the threshold
    minimising |FAR-FRR|, ties broken towards the lower threshold.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ContractError("compute_eer requires nonempty genuine and impostor scores")
    cands = _candidate_thresholds(genuine, impostor)
    far, frr = _far_frr(genuine, impostor, cands)
    i = int(np.argmin(np.abs(far - frr)))    # first minimum = lowest threshold
    eer = float((far[i] + frr[i]) / 2.0)
    if eer > 0.5:
        log.warning("EER %.3f exceeds 0.5: genuine scores larger than impostor "
                    "scores, polarity likely inverted", eer)
    return EERResult(eer=eer, threshold=float(cands[i]), policy=policy, E=E)


def average_eer(scoresets: Sequence[ScoreSet]) -> EERResult:
    """Per-subject EER (individual thresholds), averaged over subjects."""
    if not scoresets:
        raise ContractError("average_eer requires at least one subject")
    eers, thrs = [], []
    for ss in scoresets:
        try:
            r = compute_eer(ss.genuine, ss.impostor, policy="average", E=ss.E)
        except ContractError as exc:
            raise ContractError(f"subject {ss.subject_id}: {exc}") from exc
        eers.append(r.eer)
        thrs.append(r.threshold)
    return EERResult(eer=float(np.mean(eers)), threshold=float(np.mean(thrs)),
                     policy="average", E=scoresets[0].E)


def global_eer(scoresets: Sequence[ScoreSet]) -> EERResult:
    """Single-threshold EER over the pooled genuine/impostor scores."""
    if not scoresets:
        raise ContractError("global_eer requires at least one subject")
    genuine = np.concatenate([ss.genuine for ss in scoresets])
    impostor = np.concatenate([ss.impostor for ss in scoresets])
    r = compute_eer(genuine, impostor, policy="global", E=scoresets[0].E)
    return r


def det_curve(genuine: Sequence[float], impostor: Sequence[float],
              num_points: int = 200) -> DETCurve:
    """FAR/FRR trace over all distinct thresholds, subsampled to num_points."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ContractError("det_curve requires nonempty score lists")
    cands = _candidate_thresholds(genuine, impostor)
    far, frr = _far_frr(genuine, impostor, cands)
    order = np.argsort(-cands)               # decreasing threshold
    cands, far, frr = cands[order], far[order], frr[order]
    if num_points and cands.size > num_points:
        idx = np.unique(np.round(np.linspace(0, cands.size - 1, num_points)).astype(int))
        cands, far, frr = cands[idx], far[idx], frr[idx]
    pts = list(zip(cands.tolist(), far.tolist(), frr.tolist()))
    # distance semantics: lowering the acceptance threshold can only reduce FAR
    for a, b in zip(pts, pts[1:]):
        if b[1] > a[1] + 1e-12 or b[2] < a[2] - 1e-12:
            raise ContractError("DET monotonicity violated")
    return DETCurve(points=pts)


def evaluate(embeddings_by_subject: Dict[str, Sequence[np.ndarray]],
             E: int, policy: str = "both") -> Dict[str, EERResult]:
    """Run the protocol end to end for one enrolment configuration."""
    scoresets = build_scores(embeddings_by_subject, E)
    results = {}
    if policy in ("average", "both"):
        results["average"] = average_eer(scoresets)
    if policy in ("global", "both"):
        results["global"] = global_eer(scoresets)
    return results


# ---------------------------------------------------------------------------
# file outputs


def write_scores(scoresets: Sequence[ScoreSet], path) -> None:
    """Line format: subject_id,type,E,score with type in {genuine, impostor}."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("subject_id,type,E,score\n")
        for ss in scoresets:
            for v in ss.genuine:
                fh.write(f"{ss.subject_id},genuine,{ss.E},{v:.9g}\n")
            for v in ss.impostor:
                fh.write(f"{ss.subject_id},impostor,{ss.E},{v:.9g}\n")


def read_scores(path) -> Dict[str, Dict[str, List[float]]]:
    """subject -> {"genuine": [...], "impostor": [...]} from a scores file."""
    out: Dict[str, Dict[str, List[float]]] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        subject, kind, _e, score = line.split(",")
        out.setdefault(subject, {"genuine": [], "impostor": []})[kind].append(float(score))
    return out


def write_det(curve: DETCurve, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("threshold,far,frr\n")
        for t, far, frr in curve.points:
            fh.write(f"{t:.9g},{far:.9g},{frr:.9g}\n")


def export_embeddings(rows: Iterable[Tuple[str, str, np.ndarray]], path) -> None:
    """One CSV row per session: subject_id, session_id, then the S values."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for subject_id, session_id, emb in rows:
            vals = ",".join("%.9g" % v for v in np.asarray(emb).reshape(-1))
            fh.write(f"{subject_id},{session_id},{vals}\n")
