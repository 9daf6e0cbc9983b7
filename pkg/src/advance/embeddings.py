"""Feature embeddings and the trainable time-stamp positional code.

Categorical ids map through per-domain tables; continuous values are
min-max scaled by ranges carried in the dataset header. The positional
code is the interleaved cos/sin vector whose pairwise dot products depend
only on the time difference, which is what lets attention weigh behaviors
by recency.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


class EmbeddingTable:
    """One trainable lookup table for a single categorical domain."""

    def __init__(self, name: str, vocab_size: int, dim: int,
                 rng: np.random.Generator | None = None, scale: float = 0.1):
        if vocab_size <= 0 or dim <= 0:
            raise ContractError(f"embedding table {name}: non-positive size")
        self.name = name
        self.vocab_size = vocab_size
        self.dim = dim
        if rng is None:
            rows = np.zeros((vocab_size, dim))
        else:
            rows = rng.normal(0.0, scale, size=(vocab_size, dim))
        self.rows = Tensor(rows, requires_grad=True, name=f"embed.{name}")

    def lookup(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
            raise LookupError(
                f"domain {self.name!r}: id {bad} outside vocabulary [0, {self.vocab_size})"
            )
        return ad.embedding_lookup(self.rows, ids)


class TimePositionalEmbedding:
    """Trainable-frequency positional code over timestamps.

    pos(t) = [cos(w_1 t'), sin(w_1 t'), ..., cos(w_d t'), sin(w_d t')] with
    t' = t - origin and d = dim/2. Initialized on the classical geometric
    frequency ladder w_i = 1/10000^(2i/dim).
    """

    def __init__(self, dim: int, origin: float = 0.0):
        if dim % 2 != 0:
            raise ContractError(f"positional dimension must be even, got {dim}")
        self.dim = dim
        self.origin = float(origin)
        d = dim // 2
        ladder = 1.0 / (10000.0 ** (2.0 * np.arange(d) / dim))
        self.omega = Tensor(ladder, requires_grad=True, name="pos.omega")

    def __call__(self, t) -> Tensor:
        """Rows of positional codes; scalar input yields a (dim,) vector."""
        scalar = np.isscalar(t) or np.asarray(t).ndim == 0
        ts = np.atleast_1d(np.asarray(t, dtype=np.float64)) - self.origin
        out = ad.time_positional(self.omega, ts)
        if scalar:
            out = ad.reshape(out, (self.dim,))
        return out

    def dot_identity(self, delta: float) -> float:
        """Sum of cos(w_i * delta): the value pos(t) . pos(t+delta) must equal."""
        return float(np.cos(self.omega.values * delta).sum())


def scale_continuous(values, lo: float, hi: float) -> np.ndarray:
    """Min-max scale raw continuous features into roughly unit range."""
    if hi <= lo:
        raise ContractError(f"invalid scaling range [{lo}, {hi}]")
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)


class FeatureEmbedder:
    """Maps log records to dense model tokens.

    Holds one table per categorical domain plus linear projections that
    take the concatenated per-domain vectors (and scaled continuous
    features) to the model width. Ad-like tokens share one projection so
    candidates, displayed items, and clicked items live in the same space.
    """

    def __init__(self, vocab: dict[str, int], d_model: int, domain_dim: int,
                 bid_range: tuple[float, float], rng: np.random.Generator):
        self.d_model = d_model
        self.domain_dim = domain_dim
        self.bid_lo, self.bid_hi = float(bid_range[0]), float(bid_range[1])
        dd = domain_dim

        def table(name, key):
            return EmbeddingTable(name, vocab[key], dd, rng)

        self.ad = table("ad", "num_ads")
        self.cat = table("cat", "num_categories")
        self.ad_type = EmbeddingTable("ad_type", 3, dd, rng)
        self.segment = table("segment", "num_segments")
        self.device = table("device", "num_devices")
        self.slot = table("slot", "num_slots")
        self.topic = table("topic", "num_topics")
        # clicked items carry a conversion marker added after projection
        self.conv_flag = EmbeddingTable("conv_flag", 2, d_model, rng, scale=0.05)

        scale = 1.0 / np.sqrt(3 * dd + 1)
        self.w_item = Tensor(rng.normal(0, scale, (3 * dd + 1, d_model)),
                             requires_grad=True, name="embed.w_item")
        scale = 1.0 / np.sqrt(2 * dd)
        self.w_user = Tensor(rng.normal(0, scale, (2 * dd, d_model)),
                             requires_grad=True, name="embed.w_user")
        self.w_ctx = Tensor(rng.normal(0, scale, (2 * dd, d_model)),
                            requires_grad=True, name="embed.w_ctx")

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for t in (self.ad, self.cat, self.ad_type, self.segment, self.device,
                  self.slot, self.topic, self.conv_flag):
            out[t.rows.name] = t.rows
        for w in (self.w_item, self.w_user, self.w_ctx):
            out[w.name] = w
        return out

    def item_tokens(self, ad_ids, cat_ids, type_ids, bids) -> Tensor:
        """Ad-like tokens of shape ids.shape + (d_model,)."""
        parts = [
            self.ad.lookup(ad_ids),
            self.cat.lookup(cat_ids),
            self.ad_type.lookup(type_ids),
        ]
        scaled = scale_continuous(bids, self.bid_lo, self.bid_hi)
        parts.append(Tensor(scaled[..., None]))
        return ad.linear(ad.concat(parts, axis=-1), self.w_item)

    def user_tokens(self, segment_ids, device_ids) -> Tensor:
        feats = ad.concat([self.segment.lookup(segment_ids),
                           self.device.lookup(device_ids)], axis=-1)
        return ad.linear(feats, self.w_user)

    def ctx_tokens(self, slot_ids, topic_ids) -> Tensor:
        feats = ad.concat([self.slot.lookup(slot_ids),
                           self.topic.lookup(topic_ids)], axis=-1)
        return ad.linear(feats, self.w_ctx)

    def embed_features(self, categorical: dict[str, int], continuous: dict[str, float]) -> Tensor:
        """Single-record convenience: one dense vector from raw fields.

        `categorical` maps domain name to id; `continuous` currently
        supports `bid`. Used by tests and the single-auction paths; the
        batched token builders above are the hot path.
        """
        if {"ad_id", "cat_id", "ad_type"} <= categorical.keys():
            vec = self.item_tokens(
                np.array(categorical["ad_id"]),
                np.array(categorical["cat_id"]),
                np.array(categorical["ad_type"]),
                np.array(continuous.get("bid", self.bid_lo)),
            )
        elif {"segment", "device"} <= categorical.keys():
            vec = self.user_tokens(np.array(categorical["segment"]),
                                   np.array(categorical["device"]))
        elif {"slot", "topic"} <= categorical.keys():
            vec = self.ctx_tokens(np.array(categorical["slot"]),
                                  np.array(categorical["topic"]))
        else:
            raise ContractError(f"unrecognized feature bundle: {sorted(categorical)}")
        return ad.reshape(vec, (self.d_model,))
