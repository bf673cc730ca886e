"""Exception types raised across the pipeline."""


class MTArcFaceError(Exception):
    """Base class for every error raised by this package."""


class DatasetError(MTArcFaceError):
    """Missing, empty or unreadable dataset content."""


class PairsFileError(MTArcFaceError):
    pass


class TwinMismatch(MTArcFaceError):
    """Original and masked datasets are not exact filename mirrors."""


class MaskGeometryInvalid(MTArcFaceError):
    pass


class DegenerateEmbedding(MTArcFaceError):
    pass


class NotNormalized(MTArcFaceError):
    pass


class NonFiniteLoss(MTArcFaceError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class InvalidLossTerm(MTArcFaceError):
    pass


class NonFiniteGradient(MTArcFaceError):
    def __init__(self, message, parameter_name=None):
        super().__init__(message)
        self.parameter_name = parameter_name


class ConfigError(MTArcFaceError):
    """Bad or incomplete configuration; surfaces as a usage error in the CLI."""


class CheckpointError(MTArcFaceError):
    pass
