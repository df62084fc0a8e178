"""Exception types raised across the package."""


class DetaError(ValueError):
    pass


class ZeroVector(DetaError):
    pass


class BoxOutOfBounds(DetaError):
    pass


class SideTooLarge(DetaError):
    pass


class ConfigInvalid(DetaError):
    pass


class PoolExhausted(DetaError):
    pass


class SchemaError(DetaError):
    pass


class TooFewClasses(DetaError):
    pass


class TooFewSamples(DetaError):
    pass


class MissingPrevState(DetaError):
    pass


class ZeroEmbedding(DetaError):
    pass


class AllImagesFiltered(DetaError):
    def __init__(self, cls):
        super().__init__(f"every image weight in class {cls} fell below the threshold")
        self.cls = cls


class DegeneratePrototype(DetaError):
    pass


class NonFiniteLoss(DetaError):
    pass


class ClassMismatch(DetaError):
    pass


class EmptyBankClass(DetaError):
    pass


class EmptyList(DetaError):
    pass


class RankSumInvalid(DetaError):
    pass
