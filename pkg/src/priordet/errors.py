"""Exception types shared across the package."""


class PriordetError(Exception):
    """Base class for all package errors."""


class InvalidBoxError(PriordetError, ValueError):
    """A bounding box violates its format invariants."""


class ImageSizeError(PriordetError, ValueError):
    """Input image is too small for the requested operation."""


class ConfigError(PriordetError, ValueError):
    """Invalid or inconsistent configuration value."""


class ShuffleError(PriordetError, ValueError):
    """Cross-image shuffle requires at least two images."""


class CropError(PriordetError, ValueError):
    """Requested crop lies fully outside the image frame."""


class BackendError(PriordetError, ValueError):
    """Encoder weights file is missing, malformed, or dimension-mismatched."""


class CapacityError(PriordetError, ValueError):
    """More real targets than query slots; raise N_queries or lower K."""


class MatchingError(PriordetError, ValueError):
    """Cost matrix is non-square or contains non-finite entries."""


class IngestionError(PriordetError, ValueError):
    """Dataset file is malformed (duplicate ids, missing images, bad JSON)."""


class InfeasibleShotError(PriordetError, ValueError):
    """A class has fewer instances than the requested shot count."""


class CheckpointError(PriordetError, ValueError):
    """Checkpoint is corrupt or incompatible with the target model."""


class EvalError(PriordetError, ValueError):
    """Detections reference unknown images or reports cannot be compared."""


class ComparisonError(PriordetError, ValueError):
    """Eval reports cover different ground truth and cannot be compared."""


class TrainingDiverged(PriordetError, RuntimeError):
    """Loss became non-finite; carries a diagnostic dump of the batch."""

    def __init__(self, message, batch_image_ids=None):
        super().__init__(message)
        self.batch_image_ids = list(batch_image_ids or [])
