from typing import Optional

__all__ = [
    "OrthoProbeError",
    "ConfigError",
    "DataError",
    "MalformedSentenceError",
    "MalformedTaxonomyError",
    "EmbeddingFormatError",
    "AlignmentError",
    "CheckpointError",
    "NumericalError",
]

class OrthoProbeError(Exception):
    """
    Base class for every error raised by ortho-probe.
    """
    exit_code = 1

class ConfigError(OrthoProbeError, ValueError):
    """
    Raised when an experiment configuration is invalid.
    """
    exit_code = 2

    def __init__(self, field: str, message: str) -> None:
        super(ConfigError, self).__init__(f"Invalid configuration field `{field}`: {message}")
        self.field = field

class DataError(OrthoProbeError, ValueError):
    """
    Raised when input data (treebanks, taxonomies, embeddings, checkpoints) is malformed.
    """
    exit_code = 3

class MalformedSentenceError(DataError):
    """
    Raised when a CoNLL-U sentence does not describe a single rooted tree.
    """
    def __init__(self, sentence_id: str, message: str) -> None:
        super(MalformedSentenceError, self).__init__(f"Malformed sentence {sentence_id}: {message}")
        self.sentence_id = sentence_id

class MalformedTaxonomyError(DataError):
    pass

class EmbeddingFormatError(DataError):
    """
    Raised when an OPEMB stream cannot be decoded.
    """
    def __init__(self, offset: int, message: str) -> None:
        super(EmbeddingFormatError, self).__init__(f"{message} (at byte offset {offset})")
        self.offset = offset

class AlignmentError(DataError):
    """
    Raised when embeddings do not line up with the companion treebank.
    """
    def __init__(
        self,
        message: str,
        sentence_index: Optional[int]=None,
        sentence_id: Optional[str]=None
    ) -> None:
        if sentence_id is not None:
            message = f"Sentence {sentence_id} (#{sentence_index}): {message}"
        super(AlignmentError, self).__init__(message)
        self.sentence_index = sentence_index
        self.sentence_id = sentence_id

class CheckpointError(DataError):
    pass

class NumericalError(OrthoProbeError, ArithmeticError):
    """
    Raised when training produces a non-finite loss or gradient.
    """
    exit_code = 4

    def __init__(
        self,
        message: str,
        epoch: Optional[int]=None,
        batch: Optional[int]=None
    ) -> None:
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super(NumericalError, self).__init__(message)
        self.epoch = epoch
        self.batch = batch
