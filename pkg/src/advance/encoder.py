"""Per-auction attention encoder and the win/click/conversion heads.

Candidates attend over themselves and over the user-side tokens in one
pass (queries come from candidates, keys and values from the
concatenation), so competitive structure and user value are folded into
each candidate embedding. The fatigue vector is concatenated to every
token before the position-wise MLP. Three supervised heads read the
encoded candidates: a softmax win-rate over the auction, a click
probability, and a conversion probability conditioned on the click, whose
product is the unconditional conversion estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

AD_TYPES = ("CPM", "CPC", "CPA")
AD_TYPE_IDS = {name: i for i, name in enumerate(AD_TYPES)}


@dataclass
class EncoderConfig:
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 3
    mlp_hidden: int = 1024
    head_hidden: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by heads {self.n_heads}")


class EncoderLayer:
    """One attention + fatigue-conditioned MLP block with pre-residual norms."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str):
        d, h = cfg.d_model, cfg.mlp_hidden
        s = 1.0 / np.sqrt(d)
        self.cfg = cfg
        self.w_q = Tensor(rng.normal(0, s, (d, d)), requires_grad=True, name=f"{name}.w_q")
        self.w_k = Tensor(rng.normal(0, s, (d, d)), requires_grad=True, name=f"{name}.w_k")
        self.w_v = Tensor(rng.normal(0, s, (d, d)), requires_grad=True, name=f"{name}.w_v")
        self.mlp_w1 = Tensor(rng.normal(0, 1.0 / np.sqrt(2 * d), (2 * d, h)),
                             requires_grad=True, name=f"{name}.mlp_w1")
        self.mlp_b1 = Tensor(np.zeros(h), requires_grad=True, name=f"{name}.mlp_b1")
        self.mlp_w2 = Tensor(rng.normal(0, 1.0 / np.sqrt(h), (h, d)),
                             requires_grad=True, name=f"{name}.mlp_w2")
        self.mlp_b2 = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.mlp_b2")
        self.ln1_g = Tensor(np.ones(d), requires_grad=True, name=f"{name}.ln1_g")
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.ln1_b")
        self.ln2_g = Tensor(np.ones(d), requires_grad=True, name=f"{name}.ln2_g")
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.ln2_b")

    def named_params(self) -> dict[str, Tensor]:
        ps = (self.w_q, self.w_k, self.w_v, self.mlp_w1, self.mlp_b1,
              self.mlp_w2, self.mlp_b2, self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b)
        return {p.name: p for p in ps}

    def _heads_split(self, x: Tensor, bsz: int, t: int) -> Tensor:
        h = self.cfg.n_heads
        dk = self.cfg.d_model // h
        return ad.transpose(ad.reshape(x, (bsz, t, h, dk)), (0, 2, 1, 3))

    def forward(self, x: Tensor, kv_extra: Tensor | None, fatigue: Tensor,
                key_mask: np.ndarray) -> Tensor:
        """x: (B, K, D) candidates; kv_extra: (B, M, D) side tokens or None;
        fatigue: (B, D); key_mask: (B, K+M) marking real key positions."""
        bsz, k, d = x.shape
        kv = ad.concat([x, kv_extra], axis=1) if kv_extra is not None else x
        t_kv = kv.shape[1]
        q = self._heads_split(ad.linear(x, self.w_q), bsz, k)
        key = self._heads_split(ad.linear(kv, self.w_k), bsz, t_kv)
        val = self._heads_split(ad.linear(kv, self.w_v), bsz, t_kv)
        scores = ad.mul(ad.matmul(q, ad.transpose(key, (0, 1, 3, 2))),
                        1.0 / np.sqrt(d // self.cfg.n_heads))
        attn = ad.softmax(scores, mask=key_mask[:, None, None, :])
        ctx = ad.matmul(attn, val)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, k, d))
        x = ad.layer_norm(ad.add(x, ctx), self.ln1_g, self.ln1_b)

        mlp_in = ad.concat([x, ad.expand_tokens(fatigue, k)], axis=-1)
        h1 = ad.relu(ad.linear(mlp_in, self.mlp_w1, self.mlp_b1))
        out = ad.linear(h1, self.mlp_w2, self.mlp_b2)
        return ad.layer_norm(ad.add(x, out), self.ln2_g, self.ln2_b)


class AuctionEncoder:
    """Stacked encoder turning one auction into per-candidate embeddings."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str = "encoder"):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng, f"{name}.layer{i}") for i in range(cfg.n_layers)]

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.named_params())
        return out

    def encode_batch(self, cands: Tensor, pos_rows: Tensor, side: Tensor | None,
                     fatigue: Tensor, cand_mask: np.ndarray,
                     side_mask: np.ndarray | None) -> Tensor:
        """Encode a batch of auctions with padded candidate/side axes.

        cands: (B, K, D); pos_rows: (B, D) positional code of each auction
        timestamp, added to every candidate; side: (B, M, D) or None;
        masks mark real entries. Returns (B, K, D).
        """
        bsz, k, _ = cands.shape
        if k == 0 or not cand_mask.any(axis=1).all():
            raise ContractError("every auction needs at least one candidate")
        x = ad.add(cands, ad.expand_tokens(pos_rows, k))
        if side is not None and side.shape[1] == 0:
            side = None
        if side is None:
            key_mask = cand_mask
        else:
            key_mask = np.concatenate([cand_mask, side_mask], axis=1)
        for layer in self.layers:
            x = layer.forward(x, side, fatigue, key_mask)
        return x

    def encode_auction(self, candidates: Tensor, side: Tensor, fatigue: Tensor,
                       pos_row: Tensor) -> Tensor:
        """Single-auction convenience: (K, D) candidates, (M, D) side tokens."""
        k = candidates.shape[0]
        if k == 0:
            raise ContractError("encode_auction: empty candidate list")
        m = side.shape[0]
        out = self.encode_batch(
            ad.reshape(candidates, (1, k, candidates.shape[1])),
            ad.reshape(pos_row, (1, pos_row.shape[-1])),
            ad.reshape(side, (1, m, side.shape[1])) if m else None,
            ad.reshape(fatigue, (1, fatigue.shape[-1])),
            np.ones((1, k), dtype=bool),
            np.ones((1, m), dtype=bool) if m else None,
        )
        return ad.reshape(out, (k, candidates.shape[1]))


class Mlp:
    """Plain ReLU MLP used by all prediction heads."""

    def __init__(self, dims: tuple[int, ...], rng: np.random.Generator, name: str):
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            self.weights.append(Tensor(rng.normal(0, 1.0 / np.sqrt(a), (a, b)),
                                       requires_grad=True, name=f"{name}.w{i}"))
            self.biases.append(Tensor(np.zeros(b), requires_grad=True, name=f"{name}.b{i}"))

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.linear(x, w, b)
            if i + 1 < len(self.weights):
                x = ad.relu(x)
        return x


class AuctionHeads:
    """Win-rate, click, and conditional-conversion heads over encoded ads."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str = "heads"):
        dims = (cfg.d_model,) + tuple(cfg.head_hidden) + (1,)
        self.win = Mlp(dims, rng, f"{name}.win")
        self.ctr = Mlp(dims, rng, f"{name}.ctr")
        self.cvr_cond = Mlp(dims, rng, f"{name}.cvr_cond")
        # click/conversion positives are rare; start the probability low
        self.ctr.biases[-1].values[:] = -2.0
        self.cvr_cond.biases[-1].values[:] = -1.0

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for m in (self.win, self.ctr, self.cvr_cond):
            out.update(m.named_params())
        return out

    def win_scores(self, encoded: Tensor) -> Tensor:
        """Unbounded per-candidate advantage scores, shape (..., K)."""
        return ad.reshape(self.win(encoded), encoded.shape[:-1])

    def predict_win_rates(self, encoded: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Softmax distribution over the candidates of each auction."""
        if encoded.shape[-2] < 1:
            raise ContractError("predict_win_rates: no candidates")
        return ad.softmax(self.win_scores(encoded), mask=mask)

    def predict_yield(self, rows: Tensor) -> tuple[Tensor, Tensor]:
        """(pCTR, pCVR) for encoded target rows of shape (..., D).

        pCVR is the exact product of pCTR and the click-conditioned
        conversion probability, so pCVR <= pCTR always.
        """
        pctr = ad.sigmoid(ad.reshape(self.ctr(rows), rows.shape[:-1]))
        cond = ad.sigmoid(ad.reshape(self.cvr_cond(rows), rows.shape[:-1]))
        return pctr, ad.mul(pctr, cond)


def select_representation(encoded: Tensor, target_index: int) -> Tensor:
    """The target ad's row: the single vector the campaign summarizer sees."""
    k = encoded.shape[0]
    if not 0 <= target_index < k:
        raise ContractError(f"target index {target_index} out of range [0, {k})")
    return ad.reshape(ad.select_rows(encoded, np.array([target_index])),
                      (encoded.shape[1],))


@dataclass
class ExpectedPerformance:
    """Per-candidate expectations for one auction, in probability/currency units."""
    win_rate: float
    pctr: float
    pcvr: float
    expected_yield: float
    expected_cost: float

    def increment(self) -> np.ndarray:
        """The 4-vector (cost, exposure, clicks, conversions) this auction adds."""
        return np.array([
            self.expected_cost,
            self.win_rate,
            self.win_rate * self.pctr,
            self.win_rate * self.pcvr,
        ])


def expected_performance(win_rate: float, pctr: float, pcvr: float,
                         ad_type: str, bid_price: float) -> ExpectedPerformance:
    """Expected yield and cost of one auction for the given billing type.

    Yield is the win rate times 1, pCTR, or pCVR for CPM, CPC, and CPA ads
    respectively; cost is the bid price times the yield.
    """
    if ad_type not in AD_TYPE_IDS:
        raise ContractError(f"unknown ad type {ad_type!r}, expected one of {AD_TYPES}")
    if bid_price < 0:
        raise ContractError(f"negative bid price {bid_price}")
    for p, label in ((win_rate, "win_rate"), (pctr, "pctr"), (pcvr, "pcvr")):
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"{label}={p} outside [0, 1]")
    factor = {"CPM": 1.0, "CPC": pctr, "CPA": pcvr}[ad_type]
    y = win_rate * factor
    return ExpectedPerformance(win_rate, pctr, pcvr, y, bid_price * y)


def expected_increments(win: np.ndarray, pctr: np.ndarray, pcvr: np.ndarray,
                        type_ids: np.ndarray, bids: np.ndarray) -> np.ndarray:
    """Vectorized per-auction 4-vector increments (cost, exp, clk, cvr)."""
    factor = np.choose(type_ids, [np.ones_like(pctr), pctr, pcvr])
    cost = bids * win * factor
    return np.stack([cost, win, win * pctr, win * pcvr], axis=-1)
