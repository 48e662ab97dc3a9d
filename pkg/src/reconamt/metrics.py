"""Posteriorgram decoding and frame/note-level transcription metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .dataset import FPS, MIN_PITCH, NoteEvent, PianoRoll, notes_to_pianoroll, sort_notes

log = logging.getLogger(__name__)

ONSET_TOLERANCE = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN_TOLERANCE = 0.05
# absorbs float noise in time differences such as 0.33 - 0.28
TIME_SLACK = 1e-9

METRIC_KEYS = (
    "frame.precision",
    "frame.recall",
    "frame.f1",
    "frame.accuracy",
    "micro_ap",
    "note_onset.precision",
    "note_onset.recall",
    "note_onset.f1",
    "note_with_offset.precision",
    "note_with_offset.recall",
    "note_with_offset.f1",
)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, matched: int, n_est: int, n_ref: int) -> "PRF":
        p = matched / n_est if n_est else 0.0
        r = matched / n_ref if n_ref else 0.0
        return cls(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)


def threshold_roll(post, thresh: float = 0.5) -> PianoRoll:
    """Binarise a posteriorgram; a cell is on only if strictly above ``thresh``."""
    values = np.asarray(post)
    return PianoRoll((values > thresh).astype(np.uint8))


def roll_to_notes(roll: PianoRoll, fps: float = FPS) -> list[NoteEvent]:
    """One note per maximal run of active frames in each pitch row."""
    values = roll.values if isinstance(roll, PianoRoll) else np.asarray(roll)
    notes = []
    for row in np.flatnonzero(values.any(axis=1)):
        padded = np.concatenate([[0], values[row].astype(np.int8), [0]])
        edges = np.diff(padded)
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)
        for t0, t1 in zip(starts, ends):
            notes.append(NoteEvent(int(row) + MIN_PITCH, t0 / fps, t1 / fps))
    return sort_notes(notes)


def _align(a: np.ndarray, b: np.ndarray):
    n = max(a.shape[1], b.shape[1])
    pad = lambda m: np.pad(m, ((0, 0), (0, n - m.shape[1])))  # noqa: E731
    return pad(a), pad(b)


def frame_scores(ref: PianoRoll, est: PianoRoll):
    """Cell-wise precision/recall/F1 and accuracy TP / (TP + FP + FN).

    The shorter roll is zero-padded; any 0/0 ratio is reported as 0.
    """
    r, e = _align(np.asarray(ref.values, bool), np.asarray(est.values, bool))
    tp = int(np.sum(r & e))
    fp = int(np.sum(~r & e))
    fn = int(np.sum(r & ~e))
    denom = tp + fp + fn
    return PRF.from_counts(tp, tp + fp, tp + fn), (tp / denom if denom else 0.0)


def micro_ap(scores, labels) -> float:
    """Non-interpolated average precision over all cells pooled together.

    Cells are ranked by descending score (ties keep their original order);
    AP is the mean of precision@k over the ranks k of the positive cells.
    Returns 0 (with a warning) when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"score/label shape mismatch {np.shape(scores)} vs {np.shape(labels)}")
    n_pos = int(y.sum())
    if n_pos == 0:
        log.warning("micro_ap: no positive labels, reporting 0")
        return 0.0
    hits = y[np.argsort(-s, kind="stable")]
    precision_at_k = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision_at_k[hits].sum() / n_pos)


@dataclass
class NoteMatch:
    prf: PRF
    pairs: list  # (ref index, est index)


def note_admissible(ref: NoteEvent, est: NoteEvent, onset_tol: float, with_offset: bool) -> bool:
    if ref.pitch != est.pitch:
        return False
    if abs(ref.onset - est.onset) > onset_tol + TIME_SLACK:
        return False
    if with_offset:
        tol = max(OFFSET_MIN_TOLERANCE, OFFSET_RATIO * (ref.offset - ref.onset))
        if abs(ref.offset - est.offset) > tol + TIME_SLACK:
            return False
    return True


def match_notes(ref, est, onset_tol: float = ONSET_TOLERANCE, offset_rule: str = "none") -> NoteMatch:
    """Maximum-cardinality matching of estimated to reference notes.

    A pair is admissible when the pitches are equal, onsets differ by at most
    ``onset_tol`` and, with ``offset_rule="standard"``, offsets differ by at
    most ``max(50 ms, 20% of the reference duration)``.
    """
    if offset_rule not in ("none", "standard"):
        raise ValueError(f"offset_rule must be 'none' or 'standard', got {offset_rule!r}")
    with_offset = offset_rule == "standard"
    rows, cols = [], []
    for i, r in enumerate(ref):
        for j, e in enumerate(est):
            if note_admissible(r, e, onset_tol, with_offset):
                rows.append(i)
                cols.append(j)
    pairs = []
    if rows:
        graph = csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(ref), len(est)))
        partner = maximum_bipartite_matching(graph, perm_type="column")
        pairs = [(i, int(j)) for i, j in enumerate(partner) if j >= 0]
    return NoteMatch(PRF.from_counts(len(pairs), len(est), len(ref)), pairs)


# --------------------------------------------------------------------------- reports


def score_recording(ref_notes, est_roll: PianoRoll, scores=None, rec_id: str = "") -> dict:
    """All metric families for one recording.

    ``scores`` (88 x T) feeds micro-AP; without it the binary estimate is
    ranked instead.
    """
    est_notes = roll_to_notes(est_roll, est_roll.fps)
    n_frames = est_roll.n_frames
    ref_roll = notes_to_pianoroll(ref_notes, n_frames, est_roll.fps)
    frame, accuracy = frame_scores(ref_roll, est_roll)
    score_matrix = est_roll.values if scores is None else np.asarray(scores)
    onset = match_notes(ref_notes, est_notes, offset_rule="none").prf
    offset = match_notes(ref_notes, est_notes, offset_rule="standard").prf
    row = {
        "id": rec_id,
        "frame.precision": frame.precision,
        "frame.recall": frame.recall,
        "frame.f1": frame.f1,
        "frame.accuracy": accuracy,
        "micro_ap": micro_ap(score_matrix, ref_roll.values),
        "note_onset.precision": onset.precision,
        "note_onset.recall": onset.recall,
        "note_onset.f1": onset.f1,
        "note_with_offset.precision": offset.precision,
        "note_with_offset.recall": offset.recall,
        "note_with_offset.f1": offset.f1,
    }
    if not ref_roll.values.any():
        row["micro_ap_undefined"] = True
    return row


def evaluate_recording(ref_notes, post, rec_id: str = "", thresh: float = 0.5) -> dict:
    """Metrics for one full-length posteriorgram (88 x T)."""
    return score_recording(ref_notes, threshold_roll(post, thresh), scores=post, rec_id=rec_id)


def notes_frame_count(*note_lists, fps: float = FPS) -> int:
    end = max((n.offset for notes in note_lists for n in notes), default=0.0)
    return int(math.ceil(end * fps)) + 1


def evaluate_notes(ref_notes, est_notes, rec_id: str = "", scores=None) -> dict:
    """Metrics when the estimate is a note list (rasterised for frame metrics)."""
    n_frames = notes_frame_count(ref_notes, est_notes)
    if scores is not None:
        n_frames = max(n_frames, np.asarray(scores).shape[1])
        scores = np.pad(np.asarray(scores), ((0, 0), (0, n_frames - np.asarray(scores).shape[1])))
    est_roll = notes_to_pianoroll(est_notes, n_frames)
    return score_recording(ref_notes, est_roll, scores, rec_id)


@dataclass
class EvalReport:
    mean: dict
    std: dict
    per_recording: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {k: {"mean": self.mean[k], "std": self.std[k]} for k in METRIC_KEYS}
        out["n_recordings"] = len(self.per_recording)
        out["per_recording"] = self.per_recording
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def table(self) -> str:
        cols = [
            ("Frame P", "frame.precision"),
            ("Frame R", "frame.recall"),
            ("Frame F1", "frame.f1"),
            ("Note P", "note_onset.precision"),
            ("Note R", "note_onset.recall"),
            ("Note F1", "note_onset.f1"),
            ("Off P", "note_with_offset.precision"),
            ("Off R", "note_with_offset.recall"),
            ("Off F1", "note_with_offset.f1"),
        ]
        cell = lambda k: f"{100 * self.mean[k]:5.1f}±{100 * self.std[k]:4.1f}"  # noqa: E731
        lines = [
            " | ".join(f"{name:>10}" for name, _ in cols),
            " | ".join(f"{cell(k):>10}" for _, k in cols),
            f"micro-AP {cell('micro_ap')}   frame accuracy {cell('frame.accuracy')}",
        ]
        return "\n".join(lines)


def evaluate_dataset(rows) -> EvalReport:
    """Unweighted mean and population standard deviation over recordings."""
    rows = list(rows)
    if not rows:
        raise ValueError("empty test set")
    mean, std = {}, {}
    for k in METRIC_KEYS:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std())
    return EvalReport(mean, std, rows)
