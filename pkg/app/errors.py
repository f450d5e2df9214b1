"""Exception hierarchy shared by the parsers, kernels and the evaluator."""


class Slam3dError(Exception):
    """Base class for every error raised by this package."""


class UnknownClassError(Slam3dError, ValueError):
    """A class name outside the closed set a format or table accepts."""


# KITTI text formats


class KittiFormatError(Slam3dError, ValueError):
    """A KITTI label, result or calibration record could not be parsed."""


class FieldCountError(KittiFormatError):
    pass


class NumericError(KittiFormatError):
    pass


class RangeError(KittiFormatError):
    pass


class MissingKeyError(KittiFormatError, LookupError):
    pass


# Prior maps and netpbm files


class PriorMapError(Slam3dError, ValueError):
    pass


class DimensionMismatch(PriorMapError):
    pass


class FormatError(PriorMapError):
    pass


class TruncatedData(PriorMapError):
    pass


# Tensors and the fusion pipeline


class ShapeError(Slam3dError, ValueError):
    pass


class ShapeMismatch(ShapeError):
    pass


class NonFiniteError(Slam3dError, ValueError):
    """A tensor or kernel parameter holds NaN or infinity."""


class StateError(Slam3dError, RuntimeError):
    """backward() was called on a kernel that has not run forward()."""


# Evaluation


class EvaluationError(Slam3dError):
    pass


class EmptyGT(EvaluationError, ValueError):
    pass


class InsufficientData(EvaluationError, ValueError):
    pass


class FrameSetMismatch(EvaluationError, ValueError):
    def __init__(self, missing_detections: list[str], missing_labels: list[str]) -> None:
        self.missing_detections = missing_detections
        self.missing_labels = missing_labels
        parts = []
        if missing_detections:
            parts.append(f"no detections for frames {', '.join(missing_detections)}")
        if missing_labels:
            parts.append(f"no labels for frames {', '.join(missing_labels)}")
        super().__init__("; ".join(parts) or "frame sets differ")


class FrameParseErrors(EvaluationError, ValueError):
    """Parse failures collected over a whole directory, keyed by frame id."""

    def __init__(self, failures: list[tuple[str, Exception]]) -> None:
        self.failures = failures
        lines = [f"{frame}: {err}" for frame, err in failures]
        super().__init__(f"{len(failures)} file(s) failed to parse\n" + "\n".join(lines))

    @property
    def frames(self) -> list[str]:
        return [frame for frame, _ in self.failures]
