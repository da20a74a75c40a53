"""Typed errors raised across the pipeline.

Every declared failure mode maps to one exception class so callers (and the
CLI) can match on type. All carry their diagnostic fields as attributes.
"""

from __future__ import annotations


class SkillStreamError(Exception):
    """Base class for all declared pipeline errors."""


# ---------------------------------------------------------------- ingest

class IngestError(SkillStreamError):
    pass


class EmptyInputError(IngestError):
    pass


class RowArityError(IngestError):
    def __init__(self, line_no: int, found: int, expected: int = 76):
        super().__init__(f"line {line_no}: expected {expected} columns, found {found}")
        self.line_no = line_no
        self.found = found
        self.expected = expected


class NonFiniteError(IngestError):
    def __init__(self, line_no: int, col: int):
        super().__init__(f"line {line_no}, column {col}: value is not a finite number")
        self.line_no = line_no
        self.col = col


class BadLabelError(IngestError):
    def __init__(self, line_no: int, label: str):
        super().__init__(f"line {line_no}: gesture label {label!r} not in G1..G15")
        self.line_no = line_no
        self.label = label


class OverlapError(IngestError):
    def __init__(self, index: int):
        super().__init__(f"segment {index} overlaps its predecessor")
        self.index = index


class InvertedError(IngestError):
    def __init__(self, index: int):
        super().__init__(f"segment {index} has start > end")
        self.index = index


class ScoreRangeError(IngestError):
    def __init__(self, trial_id: str, dim: int, value: int):
        super().__init__(f"trial {trial_id}: osats{dim} = {value} outside [1, 5]")
        self.trial_id = trial_id
        self.dim = dim
        self.value = value


class DuplicateTrialError(IngestError):
    def __init__(self, key: str):
        super().__init__(f"duplicate registry entry: {key}")
        self.key = key


class MetaFormatError(IngestError):
    """Registry header or field does not match the documented TSV format."""


class SyncMismatchError(IngestError):
    def __init__(self, n_kin: int, n_frames: int):
        super().__init__(f"kinematics has {n_kin} rows but frame file has {n_frames} frames")
        self.n_kin = n_kin
        self.n_frames = n_frames


class GestureOutOfRangeError(IngestError):
    def __init__(self, index: int, end_frame: int, n_frames: int):
        super().__init__(
            f"segment {index} ends at frame {end_frame} but trial has only {n_frames} frames"
        )
        self.index = index
        self.end_frame = end_frame
        self.n_frames = n_frames


class FrameFormatError(IngestError):
    """Malformed SFRM container (bad magic, truncated payload, size mismatch)."""


# -------------------------------------------------------------- features

class FeatureError(SkillStreamError):
    pass


class NonRotationError(FeatureError):
    def __init__(self, defect: float, tol: float, frame: int | None = None):
        where = "" if frame is None else f" at frame {frame}"
        super().__init__(f"orthonormality defect {defect:.3g} exceeds tolerance {tol:.3g}{where}")
        self.defect = defect
        self.tol = tol
        self.frame = frame


class TooShortError(FeatureError):
    def __init__(self, n_rows: int):
        super().__init__(f"need at least 2 kinematic rows, got {n_rows}")
        self.n_rows = n_rows


# ----------------------------------------------------------------- folds

class FoldError(SkillStreamError):
    pass


class InsufficientRepetitionsError(FoldError):
    def __init__(self, subject_id: str):
        super().__init__(f"subject {subject_id} has fewer than 2 repetitions")
        self.subject_id = subject_id


class TooFewSubjectsError(FoldError):
    def __init__(self, n: int):
        super().__init__(f"need at least 2 subjects, got {n}")
        self.n = n


class EmptyTrainError(FoldError):
    def __init__(self, score: int):
        super().__init__(f"no trial has score {score} among its first three OSATS dimensions")
        self.score = score


class EmptyTestError(FoldError):
    def __init__(self, detail: str):
        super().__init__(detail)


# --------------------------------------------------------------- metrics

class MetricError(SkillStreamError):
    pass


class DegenerateInputError(MetricError):
    pass


class LengthMismatchError(MetricError):
    def __init__(self, n_a: int, n_b: int):
        super().__init__(f"length mismatch: {n_a} vs {n_b}")
        self.n_a = n_a
        self.n_b = n_b


class EmptyTestSetError(MetricError):
    pass


# -------------------------------------------------------------- autodiff

class AutodiffError(SkillStreamError):
    pass


class NonScalarLossError(AutodiffError):
    def __init__(self, shape: tuple[int, ...]):
        super().__init__(f"backward needs a scalar loss, got shape {shape}")
        self.shape = shape


class NaNDetectedError(AutodiffError):
    def __init__(self, op_name: str):
        super().__init__(f"non-finite values produced by op {op_name!r}")
        self.op_name = op_name


class ShapeMismatchError(AutodiffError):
    def __init__(self, detail: str):
        super().__init__(detail)


# ---------------------------------------------------------------- models

class ModelError(SkillStreamError):
    pass


class BadConfigError(ModelError):
    def __init__(self, detail: str):
        super().__init__(detail)


class ModalityMissingError(ModelError):
    def __init__(self, variant: str, modality: str):
        super().__init__(f"{variant} requires the {modality} modality but none was provided")
        self.variant = variant
        self.modality = modality


# --------------------------------------------------------------- trainer

class TrainerError(SkillStreamError):
    pass


class EmptyFoldError(TrainerError):
    def __init__(self, fold_name: str, split: str):
        super().__init__(f"fold {fold_name}: {split} split produced no windows")
        self.fold_name = fold_name
        self.split = split


class VersionMismatchError(TrainerError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"checkpoint format version {found}, expected {expected}")
        self.found = found
        self.expected = expected


class CorruptBlobError(TrainerError):
    def __init__(self, detail: str):
        super().__init__(detail)


# ---------------------------------------------------------------- stream

class StreamError(SkillStreamError):
    pass


class OutOfOrderError(StreamError):
    def __init__(self, t: int):
        super().__init__(f"timestamp {t} is not increasing")
        self.t = t


class NotInitializedError(StreamError):
    pass


class ParseError(StreamError):
    def __init__(self, line_no: int, detail: str = ""):
        msg = f"line {line_no}: cannot parse message"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.line_no = line_no


# ---------------------------------------------------------------- report

class ReportError(SkillStreamError):
    pass


class EmptyTraceError(ReportError):
    pass
