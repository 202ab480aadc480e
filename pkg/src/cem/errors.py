"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CEMError(Exception):
    exit_code = 1
    category = "internal"


class ConfigError(CEMError, ValueError):
    exit_code = 2
    category = "usage"


class DataError(CEMError, ValueError):
    exit_code = 3
    category = "data"


class KnowledgeError(CEMError):
    exit_code = 4
    category = "knowledge"


class MissingKnowledgeError(KnowledgeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TransportError(KnowledgeError):
    def __init__(self, message, retries=0):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class NumericError(CEMError, ArithmeticError):
    exit_code = 5
    category = "numeric"


class DegenerateCorpusError(NumericError, ValueError):
    """All frequency weights collapse to zero; mean-normalization is undefined."""
