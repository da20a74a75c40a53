"""Trial-file ingestion: kinematics, gesture transcriptions, OSATS metadata,
and the SFRM raw-frame container.

File formats (all fixed by this package, documented in the README):

* kinematics: UTF-8 text, one frame per line, 76 space/tab-separated decimals.
  Column blocks in order MTM1, MTM2, PSM1, PSM2; within each block
  position(3), rotation matrix(9, row-major), linear velocity(3),
  angular velocity(3), gripper angle(1). SI units, sampled at 30 Hz.
* transcription: UTF-8 text lines "start end Gk" with inclusive frame indices.
* meta registry: UTF-8 TSV, header
  trial_id subject_id repetition skill_class osats1..osats6.
* SFRM frames: magic "SFRM", four little-endian uint32
  (n_frames, height, width, channels), then float32 pixels in row-major,
  frame-major order, values in [0, 1].

Parsers are total: any byte input yields a value or one of the typed errors
in :mod:`skillstream.errors`, never an unhandled crash. Rotation-matrix
drift beyond tolerance warns instead of failing because recorded data
accumulates numerical error.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadLabelError,
    DuplicateTrialError,
    EmptyInputError,
    FrameFormatError,
    GestureOutOfRangeError,
    InvertedError,
    NonFiniteError,
    OverlapError,
    RowArityError,
    ScoreRangeError,
    SyncMismatchError,
)

N_COLUMNS = 76
DEFAULT_RATE_HZ = 30.0
MANIPULATORS = ("MTM1", "MTM2", "PSM1", "PSM2")
BLOCK_WIDTH = 19  # position 3 + rotation 9 + linear vel 3 + angular vel 3 + gripper 1
GESTURE_LABELS = tuple(f"G{i}" for i in range(1, 16))
SKILL_CLASSES = ("N", "I", "E")
META_HEADER = ("trial_id", "subject_id", "repetition", "skill_class",
               "osats1", "osats2", "osats3", "osats4", "osats5", "osats6")
SFRM_MAGIC = b"SFRM"


class RotationDriftWarning(UserWarning):
    """Rotation block deviates from orthonormality beyond tolerance."""


@dataclass
class KinematicSeries:
    """T x 76 kinematic matrix plus its sampling rate."""

    rows: np.ndarray
    rate_hz: float = DEFAULT_RATE_HZ

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[1] != N_COLUMNS:
            raise RowArityError(0, 0 if self.rows.ndim != 2 else self.rows.shape[1])

    @property
    def n_frames(self) -> int:
        return self.rows.shape[0]

    def block(self, manipulator: str) -> np.ndarray:
        i = MANIPULATORS.index(manipulator)
        return self.rows[:, i * BLOCK_WIDTH:(i + 1) * BLOCK_WIDTH]

    def positions(self, manipulator: str) -> np.ndarray:
        return self.block(manipulator)[:, 0:3]

    def rotations(self, manipulator: str) -> np.ndarray:
        return self.block(manipulator)[:, 3:12].reshape(-1, 3, 3)

    def linear_velocities(self, manipulator: str) -> np.ndarray:
        return self.block(manipulator)[:, 12:15]

    def angular_velocities(self, manipulator: str) -> np.ndarray:
        return self.block(manipulator)[:, 15:18]

    def gripper_angles(self, manipulator: str) -> np.ndarray:
        return self.block(manipulator)[:, 18]


@dataclass(frozen=True)
class GestureSegment:
    start_frame: int
    end_frame: int
    label: str


@dataclass(frozen=True)
class TrialMeta:
    trial_id: str
    subject_id: str
    repetition: int
    skill_class: str
    osats: tuple[int, int, int, int, int, int]


@dataclass
class FrameSeries:
    """Frame stack with pixel values in [0, 1] prior to model normalization."""

    data: np.ndarray  # (n_frames, height, width, channels) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise FrameFormatError(f"frame stack must be 4-D, got shape {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass
class TrialRecord:
    meta: TrialMeta
    kin: KinematicSeries
    gestures: list[GestureSegment] = field(default_factory=list)
    frames: FrameSeries | None = None


# ------------------------------------------------------------ kinematics

def _check_rotation_drift(rows: np.ndarray, tol: float) -> None:
    eye = np.eye(3)
    for name in MANIPULATORS:
        i = MANIPULATORS.index(name)
        r = rows[:, i * BLOCK_WIDTH + 3:i * BLOCK_WIDTH + 12].reshape(-1, 3, 3)
        defect = np.abs(np.einsum("tji,tjk->tik", r, r) - eye).max(axis=(1, 2))
        bad = defect > tol
        if bad.any():
            warnings.warn(
                f"{name}: {int(bad.sum())} of {len(defect)} rotation matrices exceed "
                f"orthonormality tolerance {tol:g} (worst defect {defect.max():.3g})",
                RotationDriftWarning,
                stacklevel=3,
            )


def parse_kinematics(text: str, rate_hz: float = DEFAULT_RATE_HZ,
                     orthonormal_tol: float = 1e-2) -> KinematicSeries:
    """Parse whitespace-separated numeric rows into a validated series."""
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != N_COLUMNS:
            raise RowArityError(line_no, len(tokens))
        values = np.empty(N_COLUMNS)
        for col, tok in enumerate(tokens, start=1):
            try:
                v = float(tok)
            except ValueError:
                raise NonFiniteError(line_no, col) from None
            if not np.isfinite(v):
                raise NonFiniteError(line_no, col)
            values[col - 1] = v
        rows.append(values)
    if not rows:
        raise EmptyInputError("kinematics input has no rows")
    matrix = np.vstack(rows)
    _check_rotation_drift(matrix, orthonormal_tol)
    return KinematicSeries(matrix, rate_hz)


def write_kinematics(series: KinematicSeries) -> str:
    """Inverse of parse_kinematics; repr-formatted floats round-trip exactly."""
    lines = [" ".join(repr(v) for v in row) for row in series.rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------- transcription

def parse_transcription(text: str) -> list[GestureSegment]:
    """Parse "start end Gk" lines into sorted, non-overlapping segments."""
    segments = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 3:
            raise BadLabelError(line_no, line.strip())
        try:
            start, end = int(tokens[0]), int(tokens[1])
        except ValueError:
            raise BadLabelError(line_no, line.strip()) from None
        label = tokens[2]
        if label not in GESTURE_LABELS:
            raise BadLabelError(line_no, label)
        segments.append(GestureSegment(start, end, label))
    segments.sort(key=lambda s: (s.start_frame, s.end_frame))
    for i, seg in enumerate(segments):
        if seg.start_frame > seg.end_frame:
            raise InvertedError(i)
        if i > 0 and seg.start_frame <= segments[i - 1].end_frame:
            raise OverlapError(i)
    return segments


def write_transcription(segments: list[GestureSegment]) -> str:
    return "".join(f"{s.start_frame} {s.end_frame} {s.label}\n" for s in segments)


# ------------------------------------------------------------------ meta

def parse_meta(text: str) -> list[TrialMeta]:
    """Parse the TSV trial registry, enforcing score ranges and uniqueness."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyInputError("meta registry is empty")
    header = tuple(lines[0].rstrip("\n").split("\t"))
    if header != META_HEADER:
        raise MetaFormatError(f"bad header: expected {META_HEADER}, got {header}")
    metas: list[TrialMeta] = []
    seen_ids: set[str] = set()
    seen_pairs: set[tuple[str, int]] = set()
    for line in lines[1:]:
        fields = line.rstrip("\n").split("\t")
        if len(fields) != len(META_HEADER):
            raise MetaFormatError(f"row {len(metas) + 2}: expected {len(META_HEADER)} fields, "
                                  f"got {len(fields)}")
        trial_id, subject_id, rep_s, skill, *scores = fields
        try:
            repetition = int(rep_s)
            osats = tuple(int(s) for s in scores)
        except ValueError:
            raise MetaFormatError(f"trial {trial_id}: non-integer repetition or score") from None
        if repetition < 1:
            raise MetaFormatError(f"trial {trial_id}: repetition must be >= 1")
        if skill not in SKILL_CLASSES:
            raise MetaFormatError(f"trial {trial_id}: skill class {skill!r} not one of N/I/E")
        for dim, val in enumerate(osats, start=1):
            if not 1 <= val <= 5:
                raise ScoreRangeError(trial_id, dim, val)
        if trial_id in seen_ids:
            raise DuplicateTrialError(trial_id)
        if (subject_id, repetition) in seen_pairs:
            raise DuplicateTrialError(f"{subject_id} repetition {repetition}")
        seen_ids.add(trial_id)
        seen_pairs.add((subject_id, repetition))
        metas.append(TrialMeta(trial_id, subject_id, repetition, skill, osats))
    return metas


def write_meta(metas: list[TrialMeta]) -> str:
    out = ["\t".join(META_HEADER)]
    for m in metas:
        out.append("\t".join([m.trial_id, m.subject_id, str(m.repetition), m.skill_class,
                              *(str(v) for v in m.osats)]))
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ SFRM

def read_sfrm(data: bytes) -> FrameSeries:
    """Decode the SFRM binary frame container."""
    if len(data) < 20 or data[:4] != SFRM_MAGIC:
        raise FrameFormatError("missing SFRM magic")
    n, h, w, c = struct.unpack_from("<4I", data, 4)
    expected = 20 + n * h * w * c * 4
    if len(data) != expected:
        raise FrameFormatError(f"payload is {len(data)} bytes, expected {expected}")
    pixels = np.frombuffer(data, dtype="<f4", offset=20)
    if not np.all(np.isfinite(pixels)):
        raise FrameFormatError("non-finite pixel values")
    return FrameSeries(pixels.reshape(n, h, w, c).copy())


def write_sfrm(frames: FrameSeries) -> bytes:
    header = SFRM_MAGIC + struct.pack("<4I", frames.n_frames, frames.height,
                                      frames.width, frames.channels)
    return header + frames.data.astype("<f4").tobytes()


def read_sfrm_file(path: str | Path) -> FrameSeries:
    return read_sfrm(Path(path).read_bytes())


def write_sfrm_file(path: str | Path, frames: FrameSeries) -> None:
    Path(path).write_bytes(write_sfrm(frames))


# ------------------------------------------------------------ load_trial

def load_trial(kin_path: str | Path, meta: TrialMeta, transcript_path: str | Path | None = None,
               frame_path: str | Path | None = None,
               orthonormal_tol: float = 1e-2) -> TrialRecord:
    """Assemble a full trial record, checking synchronization invariants.

    A missing frame file is legal (kinematic-only trial); models that need
    vision fail later at dataset-assembly time, not here.
    """
    kin = parse_kinematics(Path(kin_path).read_text(), orthonormal_tol=orthonormal_tol)
    gestures: list[GestureSegment] = []
    if transcript_path is not None:
        gestures = parse_transcription(Path(transcript_path).read_text())
    frames = None
    if frame_path is not None:
        frames = read_sfrm_file(frame_path)
        if abs(kin.n_frames - frames.n_frames) > 1:
            raise SyncMismatchError(kin.n_frames, frames.n_frames)
    for i, seg in enumerate(gestures):
        if seg.end_frame >= kin.n_frames:
            raise GestureOutOfRangeError(i, seg.end_frame, kin.n_frames)
    return TrialRecord(meta=meta, kin=kin, gestures=gestures, frames=frames)


def load_dataset(data_dir: str | Path, with_frames: bool = True,
                 orthonormal_tol: float = 1e-2) -> tuple[list[TrialMeta], dict[str, TrialRecord]]:
    """Load a directory tree written by the synthetic generator (or matching it).

    Layout: <dir>/meta.tsv, <dir>/kinematics/<id>.txt,
    <dir>/transcriptions/<id>.txt, optional <dir>/frames/<id>.sfrm.
    """
    root = Path(data_dir)
    registry = parse_meta((root / "meta.tsv").read_text())
    trials: dict[str, TrialRecord] = {}
    for meta in registry:
        kin_path = root / "kinematics" / f"{meta.trial_id}.txt"
        tr_path = root / "transcriptions" / f"{meta.trial_id}.txt"
        fr_path = root / "frames" / f"{meta.trial_id}.sfrm"
        trials[meta.trial_id] = load_trial(
            kin_path, meta,
            transcript_path=tr_path if tr_path.exists() else None,
            frame_path=fr_path if (with_frames and fr_path.exists()) else None,
            orthonormal_tol=orthonormal_tol,
        )
    return registry, trials


def parse_kinematics_file(path: str | Path, **kwargs) -> KinematicSeries:
    return parse_kinematics(Path(path).read_text(), **kwargs)


def normalize_whitespace(text: str) -> str:
    """Canonical single-space form used by the round-trip property."""
    lines = [" ".join(line.split()) for line in text.splitlines() if line.strip()]
    return "\n".join(lines) + "\n"


def _unused_io_guard():  # pragma: no cover
    # keep io imported for type hints in downstream modules
    return io
