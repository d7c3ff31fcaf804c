"""Single-process simulator of a federated neural graph database: clients
hold private knowledge-graph shards, jointly train a query-embedding model
through masked secret aggregation with local differential privacy, and answer
first-order logical queries that may span several shards.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    FedngdbError,
    NumericError,
    ProtocolError,
    RetrievalError,
    SamplingError,
    TrainingError,
    TripleParseError,
    VocabularyError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "EvaluationError",
    "FedngdbError",
    "NumericError",
    "ProtocolError",
    "RetrievalError",
    "SamplingError",
    "TrainingError",
    "TripleParseError",
    "VocabularyError",
    "__version__",
]
