class TacDiffusionError(Exception):
    """
    Base exception for every error raised deliberately by the pipeline.
    """
    message = "TacDiffusion pipeline error."

    def __init__(self, **details: object) -> None:
        self.details = details
        super().__init__(self.message.format(**details))


class ConfigurationError(TacDiffusionError):
    """
    Exception raised when a configuration value is outside its valid range.
    """
    message = "Invalid configuration: {reason}"


class DimensionMismatchError(TacDiffusionError):
    """
    Exception raised when an array does not have the expected shape.
    """
    message = "Dimension mismatch in {where}: expected {expected}, got {actual}."


class StepIndexError(TacDiffusionError):
    """
    Exception raised when a diffusion step index lies outside [1, T].
    """
    message = "Diffusion step {tau} is outside the valid range [1, {T}]."


class NonFiniteValueError(TacDiffusionError):
    """
    Exception raised when a NaN or infinity shows up in a computation.
    """
    message = "Non-finite value encountered in {where}."


class SingularJacobianError(TacDiffusionError):
    """
    Exception raised when the body Jacobian loses full row rank.
    """
    message = "Body Jacobian is rank deficient (rank {rank} < {required}); no pseudo-inverse regularization is applied."


class PlantDivergenceError(TacDiffusionError):
    """
    Exception raised when the simulated plant produces a non-finite state.
    """
    message = "Plant diverged at tick {tick}: {reason}"


class UnknownTaskError(TacDiffusionError):
    """
    Exception raised when a task preset name is not known.
    """
    message = "Unknown task '{name}'. Known tasks: {known}."


class InvalidGeometryError(TacDiffusionError):
    """
    Exception raised when a task geometry violates its invariants.
    """
    message = "Invalid task geometry: {reason}"


class BundleError(TacDiffusionError):
    """
    Base exception for model bundle persistence problems.
    """
    message = "Model bundle error: {reason}"


class CorruptBundleError(BundleError):
    """
    Exception raised when a model bundle cannot be parsed.
    """
    message = "Model bundle {path} is corrupt: {reason}"


class BundleVersionError(BundleError):
    """
    Exception raised when a model bundle was written by an unsupported format version.
    """
    message = "Model bundle {path} has version {found}, expected {expected}."


class IncompatibleBundleError(BundleError):
    """
    Exception raised when a model bundle does not match the observation schema.
    """
    message = "Model bundle {path} is incompatible: {reason}"


class DatasetError(TacDiffusionError):
    """
    Base exception for dataset persistence and preparation problems.
    """
    message = "Dataset error: {reason}"


class ManifestMissingError(DatasetError):
    """
    Exception raised when a dataset directory has no manifest.
    """
    message = "No manifest found in dataset directory {path}."


class SchemaVersionError(DatasetError):
    """
    Exception raised when a dataset manifest has an unsupported schema.
    """
    message = "Dataset manifest {path} is not readable with schema version {expected}: {reason}"


class ChecksumMismatchError(DatasetError):
    """
    Exception raised when an episode file does not match its recorded checksum.
    """
    message = "Checksum mismatch for {path}: manifest {expected}, file {actual}."


class DatasetRowError(DatasetError):
    """
    Exception raised when an episode file contains an invalid row.
    """
    message = "Invalid row {row} in {path}: {reason}"


class EmptyDatasetError(DatasetError):
    """
    Exception raised when an operation needs at least one record.
    """
    message = "Dataset is empty: {reason}"


class DegenerateSplitError(DatasetError):
    """
    Exception raised when a train/validation split leaves one side empty.
    """
    message = "Split of {count} episodes at fraction {fraction} leaves an empty side."


class ExpertValidityError(TacDiffusionError):
    """
    Exception raised when the scripted expert is not good enough to demonstrate.
    """
    message = "Expert produced {successes} successful episodes out of {attempts}; {reason}"


class TrainingDivergenceError(TacDiffusionError):
    """
    Exception raised when the training loss stops being finite.
    """
    message = "Training diverged at epoch {epoch}, step {step}: loss={loss}"
