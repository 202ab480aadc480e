"""Commonsense-aware empathetic response generation."""
from .corpus import Dialogue, Vocabulary, build_vocabulary, encode_context, load_dialogues, make_batches
from .knowledge import CacheProvider, CommonsenseBundle, Relation, RemoteProvider, read_cache, write_cache
from .model import CEM, ModelConfig
from .objective import FrequencyTable, compute_frequency_table
from .trainer import TrainConfig, learning_rate_at, train

__version__ = "0.1.0"
