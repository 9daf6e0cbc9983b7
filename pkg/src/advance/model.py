"""The composed forecaster: embeddings, interest, encoder, summarizer, head.

Construction is deterministic given (config, vocab, seed): every parameter
is drawn from one seeded generator in a fixed order. Serialization writes
a JSON manifest line followed by raw little-endian float64 parameter
bytes, so identical models produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import ContractError, Tensor
from .campaign import CampaignHead, CampaignSummarizer
from .embeddings import FeatureEmbedder, TimePositionalEmbedding
from .encoder import AuctionEncoder, AuctionHeads, EncoderConfig
from .interest import InterestModel
from .ssm import SsmConfig, SsmStack

FORMAT_VERSION = 1


@dataclass
class VariantFlags:
    """Ablation switches; the full model has every flag off."""
    static: bool = False
    pref: bool = False
    aux: bool = False
    accu: bool = False
    reg: bool = False
    ind: bool = False
    s4: bool = False

    def tag(self) -> str:
        on = [k for k, v in asdict(self).items() if v]
        return "+".join(on) if on else "full"


@dataclass
class ModelConfig:
    d_model: int = 256
    domain_dim: int = 64
    n_heads: int = 4
    enc_layers: int = 3
    enc_hidden: int = 1024
    n_state: int = 16
    ssm_layers: int = 3
    mix_hidden: int = 64
    head_hidden: tuple = (128, 64)
    campaign_hidden: tuple = (128, 64)
    max_clicks: int = 300
    display_window: int = 300
    share_time_frequencies: bool = True
    per_channel_bc: bool = False
    variants: VariantFlags = field(default_factory=VariantFlags)

    @staticmethod
    def desk(**overrides) -> "ModelConfig":
        """Desk-scale preset small enough for CPU training loops."""
        cfg = ModelConfig(
            d_model=32, domain_dim=8, n_heads=4, enc_layers=2, enc_hidden=64,
            n_state=8, ssm_layers=2, mix_hidden=48,
            max_clicks=8, display_window=10)
        return replace(cfg, **overrides)

    def to_json(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        d["campaign_hidden"] = list(self.campaign_hidden)
        return d

    @staticmethod
    def from_json(d: dict) -> "ModelConfig":
        d = dict(d)
        d["variants"] = VariantFlags(**d.get("variants", {}))
        d["head_hidden"] = tuple(d.get("head_hidden", (128, 64)))
        d["campaign_hidden"] = tuple(d.get("campaign_hidden", (128, 64)))
        return ModelConfig(**d)


class AdVanceModel:
    """All trainable components plus bookkeeping metadata."""

    def __init__(self, config: ModelConfig, vocab: dict[str, int],
                 bid_range: tuple[float, float], seed: int = 0):
        self.config = config
        self.vocab = dict(vocab)
        self.bid_range = (float(bid_range[0]), float(bid_range[1]))
        self.seed = int(seed)
        self.trained = False
        self.trained_upto_ts = 0.0
        self.data_config_hash = ""

        rng = np.random.default_rng(seed)
        d = config.d_model
        self.pos = TimePositionalEmbedding(d)
        if config.share_time_frequencies:
            self.pos_click = self.pos
        else:
            self.pos_click = TimePositionalEmbedding(d)
            self.pos_click.omega.name = "pos_click.omega"
        self.embedder = FeatureEmbedder(vocab, d, config.domain_dim, bid_range, rng)
        local_cfg = SsmConfig(d, config.n_state, config.ssm_layers,
                              config.mix_hidden, config.per_channel_bc)
        self.local_stack = SsmStack(local_cfg, rng, "local_ssm")
        self.interest = InterestModel(
            self.embedder, self.pos_click, self.local_stack,
            max_clicks=config.max_clicks, display_window=config.display_window,
            static=config.variants.static, pref=config.variants.pref)
        enc_cfg = EncoderConfig(d, config.n_heads, config.enc_layers,
                                config.enc_hidden, tuple(config.head_hidden))
        self.encoder = AuctionEncoder(enc_cfg, rng)
        self.heads = AuctionHeads(enc_cfg, rng)
        self.summarizer = CampaignSummarizer(
            SsmConfig(d, config.n_state, config.ssm_layers,
                      config.mix_hidden, config.per_channel_bc), rng)
        self.camp_head = CampaignHead(d, tuple(config.campaign_hidden), rng)

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {"pos.omega": self.pos.omega}
        if self.pos_click is not self.pos:
            out["pos_click.omega"] = self.pos_click.omega
        out.update(self.embedder.named_params())
        out.update(self.local_stack.named_params())
        out.update(self.encoder.named_params())
        out.update(self.heads.named_params())
        out.update(self.summarizer.named_params())
        out.update(self.camp_head.named_params())
        return out

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    def param_vector(self) -> np.ndarray:
        parts = [self.named_params()[k].values.reshape(-1)
                 for k in sorted(self.named_params())]
        return np.concatenate(parts)

    # -- serialization --------------------------------------------------------

    def save(self, path: str) -> None:
        params = self.named_params()
        names = sorted(params)
        manifest = {
            "format": FORMAT_VERSION,
            "kind": "advance",
            "config": self.config.to_json(),
            "vocab": self.vocab,
            "bid_range": list(self.bid_range),
            "seed": self.seed,
            "trained": self.trained,
            "trained_upto_ts": self.trained_upto_ts,
            "data_config_hash": self.data_config_hash,
            "params": [{"name": n, "shape": list(params[n].values.shape)} for n in names],
        }
        with open(path, "wb") as f:
            f.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
            f.write(b"\n")
            for n in names:
                f.write(params[n].values.astype("<f8").tobytes())

    @staticmethod
    def load(path: str):
        """Load a serialized model; oracle stubs come back as OracleModel."""
        with open(path, "rb") as f:
            manifest = json.loads(f.readline().decode())
            blob = f.read()
        if manifest.get("kind") == "oracle":
            return OracleModel()
        if manifest.get("format") != FORMAT_VERSION:
            raise ContractError(f"unsupported model format {manifest.get('format')}")
        model = AdVanceModel(ModelConfig.from_json(manifest["config"]),
                             manifest["vocab"], tuple(manifest["bid_range"]),
                             manifest["seed"])
        model.trained = bool(manifest["trained"])
        model.trained_upto_ts = float(manifest["trained_upto_ts"])
        model.data_config_hash = manifest["data_config_hash"]
        params = model.named_params()
        offset = 0
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += size * 8
            p = params[entry["name"]]
            if p.values.shape != shape:
                raise ContractError(
                    f"parameter {entry['name']} shape mismatch: file {shape} vs model {p.values.shape}")
            p.values = arr.reshape(shape).astype(np.float64)
        return model

    def check_data_hash(self, header: dict) -> None:
        """Reject logs whose config hash differs from the training data's."""
        if self.data_config_hash and header.get("config_hash") and \
                self.data_config_hash != header["config_hash"]:
            raise ContractError(
                f"config-hash mismatch: model trained on {self.data_config_hash}, "
                f"log has {header['config_hash']}")


class OracleModel:
    """Evaluation stub that reproduces ground truth exactly."""

    kind = "oracle"


def save_oracle_stub(path: str) -> None:
    manifest = {"format": FORMAT_VERSION, "kind": "oracle"}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
        f.write(b"\n")


def config_hash_of(obj: dict) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
