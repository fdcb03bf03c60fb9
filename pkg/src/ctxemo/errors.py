"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class CtxemoError(Exception):
    exit_code = 2


class DataError(CtxemoError):
    """Bad input data: corpus files, vocabularies, prediction files."""

    exit_code = 2


class CorpusFormatError(DataError):
    pass


class LabelError(DataError):
    pass


class StatsError(DataError):
    pass


class SplitError(DataError):
    pass


class VocabError(DataError):
    pass


class EvaluationError(DataError):
    pass


class NumericError(CtxemoError):
    """Shape, range, or finiteness violations inside the model."""

    exit_code = 3


class EmbeddingError(NumericError):
    pass


class PoolingError(NumericError):
    pass


class ShapeError(NumericError):
    pass


class LossError(NumericError):
    pass


class WeightError(NumericError):
    pass


class TrainingError(NumericError):
    pass
