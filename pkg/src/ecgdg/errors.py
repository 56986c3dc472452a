"""Exception hierarchy. Every error carries a stable ``code`` used by the CLI."""


class EcgDgError(Exception):
    code = "ecgdg_error"

    def __str__(self):
        msg = super().__str__()
        return msg or self.code


# record-io
class MalformedHeader(EcgDgError):
    code = "malformed_header"


class UnsupportedLeadCount(EcgDgError):
    code = "unsupported_lead_count"


class UnsupportedFormat(EcgDgError):
    code = "unsupported_format"


class SizeMismatch(EcgDgError):
    code = "size_mismatch"


class IoFailure(EcgDgError):
    code = "io_failure"


class EmptyDataset(EcgDgError):
    code = "empty_dataset"


# dsp
class InvalidCutoff(EcgDgError):
    code = "invalid_cutoff"


class NonFiniteInput(EcgDgError):
    code = "non_finite_input"


class InvalidRate(EcgDgError):
    code = "invalid_rate"


# tensor / autodiff
class ShapeMismatch(EcgDgError):
    code = "shape_mismatch"


class EmptyTarget(EcgDgError):
    code = "empty_target"


class NotScalar(EcgDgError):
    code = "not_scalar"


class DetachedLoss(EcgDgError):
    code = "detached_loss"


class NoGradients(EcgDgError):
    code = "no_gradients"


class CheckpointMismatch(EcgDgError):
    code = "checkpoint_mismatch"


# model / trainer
class InvalidConfig(EcgDgError):
    code = "invalid_config"


class OutOfRange(EcgDgError):
    code = "out_of_range"


class EmptySplit(EcgDgError):
    code = "empty_split"


class DivergedLoss(EcgDgError):
    code = "diverged_loss"


# dg-harness / synth
class EmptySource(EcgDgError):
    code = "empty_source"


class LabelMapMismatch(EcgDgError):
    code = "label_map_mismatch"


class UnknownClass(EcgDgError):
    code = "unknown_class"
