"""Chunked Seq2Seq training: optimizer, config, and the epoch driver.

Each block of auctions contributes the campaign loss at its boundary plus
the auxiliary win/click/conversion losses over every record. The carried
summarizer state is detached between blocks (truncated backpropagation)
unless full_bptt is set, in which case one tape spans the epoch and a
single step fires at its end.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import AdVanceModel, ModelConfig, VariantFlags
from .pipeline import LogData, Pipeline, TrainStats

LOSS_CURVE_COLUMNS = ("epoch", "loss_total", "loss_win", "loss_ctr",
                      "loss_cvr", "loss_campaign")


@dataclass
class TrainConfig:
    chunk_size: int = 100
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.995
    eps: float = 1e-7
    weight_decay: float = 1e-4
    batch_size: int = 32
    loss_weights: tuple = (0.5, 0.5)
    campaign_weight: float = 1.0
    epochs: int = 2
    train_frac: float = 1.0
    grad_clip: float = 10.0
    full_bptt: bool = False
    seed: int = 0
    dtype: str = "float64"
    variants: VariantFlags = field(default_factory=VariantFlags)
    model: ModelConfig = field(default_factory=ModelConfig.desk)

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["model"] = self.model.to_json()
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        d["variants"] = VariantFlags(**d.get("variants", {}))
        d["model"] = ModelConfig.from_json(d["model"]) if "model" in d else ModelConfig.desk()
        d["loss_weights"] = tuple(d.get("loss_weights", (0.5, 0.5)))
        return TrainConfig(**d)

    @staticmethod
    def load(path: str) -> "TrainConfig":
        with open(path) as f:
            return TrainConfig.from_json(json.load(f))


class AdamW:
    """Adaptive moments with decoupled weight decay, deterministic order."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.995, eps: float = 1e-7,
                 weight_decay: float = 1e-4, grad_clip: float | None = None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self) -> None:
        names = [k for k in sorted(self.params) if self.params[k].grad is not None]
        if not names:
            return
        if self.grad_clip is not None:
            sq = sum(float((self.params[k].grad ** 2).sum()) for k in names)
            norm = np.sqrt(sq)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                for k in names:
                    self.params[k].grad = self.params[k].grad * scale
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in names:
            p, g = self.params[k], self.params[k].grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.values = p.values - self.lr * (update + self.weight_decay * p.values)


def build_model(header: dict, config: TrainConfig) -> AdVanceModel:
    """Construct the model for a log header, applying the variant flags."""
    model_cfg = replace(config.model, variants=config.variants)
    model = AdVanceModel(model_cfg, header["vocab"],
                         tuple(header["bid_range"]), seed=config.seed)
    model.data_config_hash = header.get("config_hash", "")
    return model


def train(header: dict, records: list[dict], config: TrainConfig,
          model: AdVanceModel | None = None,
          log_data: LogData | None = None) -> tuple[AdVanceModel, list[dict]]:
    """Train on the leading train_frac of the log; returns model and curves.

    Zero epochs returns the freshly initialized model untouched. A
    non-finite loss aborts with the failing step's component losses.
    """
    if config.dtype == "float32":
        ad.set_default_dtype(np.float32)
    try:
        log = log_data if log_data is not None else LogData(header, records)
        if model is None:
            model = build_model(header, config)
        optimizer = AdamW(model.named_params(), config.learning_rate, config.beta1,
                          config.beta2, config.eps, config.weight_decay,
                          config.grad_clip)
        n_train = int(round(config.train_frac * log.n))
        blocks_per_step = max(1, round(config.batch_size / max(1, len(log.campaigns))))
        pipeline = Pipeline(model, log, config.chunk_size, tuple(config.loss_weights),
                            config.campaign_weight)
        curves: list[dict] = []
        for epoch in range(config.epochs):
            pipeline.reset()
            stats = TrainStats()
            if config.full_bptt:
                _train_epoch_full_bptt(pipeline, n_train, optimizer, stats)
            else:
                pipeline.advance(n_train, train=True, optimizer=optimizer,
                                 stats=stats, blocks_per_step=blocks_per_step)
            row = {"epoch": epoch, **stats.means()}
            curves.append(row)
        model.trained = config.epochs > 0
        if n_train > 0:
            model.trained_upto_ts = float(log.ts[min(n_train, log.n) - 1])
        model.data_config_hash = header.get("config_hash", "")
        return model, curves
    finally:
        ad.set_default_dtype(np.float64)


def _train_epoch_full_bptt(pipeline: Pipeline, n_train: int, optimizer: AdamW,
                           stats: TrainStats) -> None:
    """One tape across every chunk; gradients flow through carried states."""
    pipeline.full_bptt = True
    tape = ad.Tape()
    try:
        with tape:
            pipeline.advance(n_train, train=True, optimizer=None, stats=stats)
            total = pipeline.pending_loss
            if total is None:
                return
            tape.backward(total)
        optimizer.step()
        pipeline.model.zero_grad()
    finally:
        pipeline.full_bptt = False
        pipeline.pending_loss = None


def write_loss_curves(path: str, curves: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(",".join(LOSS_CURVE_COLUMNS) + "\n")
        for row in curves:
            f.write(",".join(
                str(row["epoch"]) if c == "epoch" else f"{row[c]:.10g}"
                for c in LOSS_CURVE_COLUMNS) + "\n")
