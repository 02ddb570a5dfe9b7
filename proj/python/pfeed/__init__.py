"""Python access to the pfeed pipeline.

Stage functions take an optional config dict (merged onto the defaults, with
unknown keys rejected) and return the stage's summary as a dict.
"""

import json as _json

from . import _pfeed
from ._pfeed import (  # noqa: F401
    ContractError,
    DimensionError,
    DomainError,
    Encoder,
    EncoderConfig,
    Error,
    InputError,
    NumericError,
    SimilarityStore,
    VectorIndex,
    Vocabulary,
    baseline_sigma,
    derive_seed,
    loss_query_to_target,
    loss_target_to_query,
    nearest_rank_percentile,
    random_baseline,
)

__all__ = [
    "default_config", "normalize_config", "synth", "mine", "tokenizer_train", "train", "embed", "index",
    "precompute", "feed", "refresh", "evaluate", "FeedService", "Encoder", "EncoderConfig", "Vocabulary",
    "VectorIndex", "SimilarityStore", "loss_query_to_target", "loss_target_to_query", "nearest_rank_percentile",
    "random_baseline", "baseline_sigma", "derive_seed", "Error", "InputError", "ContractError",
]


def _text(config):
    return _json.dumps(config or {})


def default_config():
    return _json.loads(_pfeed.default_config())


def normalize_config(config=None):
    """Defaults merged with `config`; raises ContractError on bad fields."""
    return _json.loads(_pfeed.normalize_config(_text(config)))


def synth(config=None):
    return _json.loads(_pfeed.run_synth(_text(config)))


def mine(config=None):
    return _json.loads(_pfeed.run_mine(_text(config)))


def tokenizer_train(config=None):
    return _json.loads(_pfeed.run_tokenizer_train(_text(config)))


def train(config=None):
    return _json.loads(_pfeed.run_train(_text(config)))


def embed(config=None):
    return _json.loads(_pfeed.run_embed(_text(config)))


def index(config=None):
    return _json.loads(_pfeed.run_index(_text(config)))


def precompute(config=None):
    return _json.loads(_pfeed.run_precompute(_text(config)))


def feed(customer, config=None):
    return _json.loads(_pfeed.run_feed(_text(config), customer))


def refresh(config=None, mode="batch", active_file=""):
    return _json.loads(_pfeed.run_refresh(_text(config), mode, active_file))


def evaluate(config=None, untrained=False):
    return _json.loads(_pfeed.run_eval(_text(config), untrained))


class FeedService:
    """In-process feed service loaded from a work directory's artifacts."""

    def __init__(self, config=None):
        self._svc = _pfeed.FeedService.from_config(_text(config))

    def ingest(self, customer_id, item_id, event_type, timestamp, session_id=""):
        event = {"customer_id": customer_id, "item_id": item_id, "event_type": event_type, "timestamp": timestamp,
                 "session_id": session_id}
        return self._svc.ingest(_json.dumps(event))

    def refresh(self):
        return self._svc.refresh_active()

    def refresh_all(self):
        self._svc.refresh_all()

    @property
    def customers(self):
        return self._svc.customers()

    def feed(self, customer, surface="all", size=0):
        out = self._svc.feed(customer, surface, size)
        return None if out is None else _json.loads(out)
