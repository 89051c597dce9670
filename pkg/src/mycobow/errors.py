"""Exception types raised across the pipeline."""


class MycobowError(Exception):
    """Base class for all pipeline errors."""


class DegenerateImage(MycobowError):
    """Image has no intensity spread (lower limit equals upper limit)."""


class ImageTooSmall(MycobowError):
    """No patch of the requested size fits inside the image."""


class FormatError(MycobowError):
    """A binary file has a bad magic number, version, or truncated body."""


class DimensionMismatch(MycobowError):
    """Matrix dimensions are inconsistent with the model or file header."""


class NonFiniteValue(MycobowError):
    """NaN or infinity encountered where finite values are required."""


class NonFiniteFeature(NonFiniteValue):
    """Classifier training matrix contains NaN or infinity."""


class TooFewPoints(MycobowError):
    """Fewer points than clusters requested."""


class SingleClassError(MycobowError):
    """Classifier training set contains fewer than two distinct labels."""


class MissingSpecies(MycobowError):
    """A cross-validation fold lacks one of the manifest's species."""


class EmptyGrid(MycobowError):
    """Hyperparameter grid contains no points."""


class LengthMismatch(MycobowError):
    """Prediction and truth sequences have different lengths."""


class MixedEncodingKinds(MycobowError):
    """Encoded vectors of different kinds or sizes mixed in one operation."""


class NoForegroundPatches(MycobowError):
    """A scan produced no foreground patch to vote with."""


class ModelMissing(MycobowError):
    """A trained model file required by the command does not exist."""


class MissingDescriptors(MycobowError):
    """Descriptor sets are absent for some gated patches."""

    def __init__(self, patch_ids):
        self.patch_ids = list(patch_ids)
        preview = ", ".join(self.patch_ids[:5])
        if len(self.patch_ids) > 5:
            preview += ", ..."
        super().__init__(
            f"descriptors missing for {len(self.patch_ids)} patches: {preview}"
        )


class ManifestEmpty(MycobowError):
    """Dataset manifest contains no scans."""
