"""Campaign-level summarization and the final performance head.

A conditional SSM stack streams over the sequence of auction embeddings
(time gaps between member auctions feed the step-size net), and its latest
output is the campaign summary vector. Expected per-auction results
accumulate alongside into a running 4-vector; the head reads both and
emits nonnegative (cost, exposure, clicks, conversions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoder import Mlp
from .ssm import SsmConfig, SsmStack, StackState

PERF_FIELDS = ("cost", "exp", "clk", "cvr")


@dataclass
class CampaignPerformance:
    """Totals of an ad campaign: currency cost and expected event counts."""
    cost: float = 0.0
    exp: float = 0.0
    clk: float = 0.0
    cvr: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.cost, self.exp, self.clk, self.cvr])

    @staticmethod
    def from_array(a) -> "CampaignPerformance":
        a = np.asarray(a, dtype=np.float64)
        return CampaignPerformance(*[float(v) for v in a])

    def validate(self) -> None:
        if (self.as_array() < 0).any():
            raise ContractError(f"negative campaign performance component: {self}")


def accumulate(prev: CampaignPerformance, increment) -> CampaignPerformance:
    """Componentwise sum; increments must be nonnegative."""
    inc = increment.as_array() if isinstance(increment, CampaignPerformance) else np.asarray(increment, dtype=np.float64)
    if inc.shape != (4,):
        raise ContractError(f"increment must be a 4-vector, got shape {inc.shape}")
    if (inc < 0).any():
        raise ContractError(f"negative increment {inc}")
    return CampaignPerformance.from_array(prev.as_array() + inc)


@dataclass
class CampaignSummary:
    """Inputs to the performance head at one moment of a campaign stream."""
    y_last: Tensor | np.ndarray
    p_accu: np.ndarray
    count: int = 1


class CampaignSummarizer:
    """Streaming wrapper around the global conditional SSM stack."""

    def __init__(self, cfg: SsmConfig, rng: np.random.Generator, name: str = "global_ssm"):
        self.cfg = cfg
        self.stack = SsmStack(cfg, rng, name)

    def named_params(self) -> dict[str, Tensor]:
        return self.stack.named_params()

    def summarize(self, embeddings: Tensor, timestamps: np.ndarray,
                  state: StackState | None = None, last_ts: float | None = None,
                  condition: bool = True, reg: bool = False,
                  parallel: bool = False, carry_grad: bool = False) -> tuple[Tensor, Tensor, StackState]:
        """Run the stack over (L, D) auction embeddings at ascending times.

        Returns all outputs, the last output (the summary vector), and the
        carried state for streaming the next segment. `last_ts` is the
        timestamp of the auction preceding this segment, None at stream
        start. The `reg` flag feeds a constant zero gap, discarding the
        irregular spacing.
        """
        timestamps = np.asarray(timestamps, dtype=np.float64)
        length = embeddings.shape[0]
        if length == 0:
            raise ContractError("summarize: empty auction sequence")
        if (np.diff(timestamps) < 0).any():
            raise ContractError("summarize: timestamps must be ascending")
        if last_ts is not None and length and timestamps[0] < last_ts:
            raise ContractError("summarize: segment starts before carried cursor")
        if reg:
            gaps = np.zeros(length)
        else:
            prev = timestamps[0] if last_ts is None else last_ts
            gaps = np.diff(timestamps, prepend=prev)
        ys, new_state = self.stack.forward(embeddings, gaps, state,
                                           condition=condition, parallel=parallel,
                                           carry_grad=carry_grad)
        y_last = ad.select_rows(ys, np.array([length - 1]))
        return ys, ad.reshape(y_last, (embeddings.shape[1],)), new_state


class CampaignHead:
    """MLP over concat(summary vector, normalized accumulation).

    The accumulation is divided by the auction count before entering the
    head and the prediction is scaled back up on output, keeping the MLP
    input bounded on long streams. A final softplus keeps every component
    nonnegative. The `accu` ablation zeroes the accumulation input; the
    `ind` ablation bypasses the head entirely and returns the raw
    accumulation.
    """

    def __init__(self, d_model: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, name: str = "campaign_head"):
        self.d_model = d_model
        self.mlp = Mlp((d_model + 4,) + tuple(hidden) + (4,), rng, name)
        # start near the scale of count-normalized totals, not softplus(0)
        self.mlp.biases[-1].values[:] = -3.0

    def named_params(self) -> dict[str, Tensor]:
        return self.mlp.named_params()

    def predict_normalized(self, y_last: Tensor, p_accu_norm: np.ndarray,
                           accu: bool = False) -> Tensor:
        """Nonnegative normalized prediction; accepts (D,) or batched (S, D)."""
        p_accu_norm = np.asarray(p_accu_norm, dtype=np.float64)
        feats = np.zeros_like(p_accu_norm) if accu else p_accu_norm
        x = ad.concat([y_last if isinstance(y_last, Tensor) else Tensor(y_last),
                       Tensor(feats)], axis=-1)
        return ad.softplus(self.mlp(x))

    def predict_campaign(self, summary: CampaignSummary, accu: bool = False,
                         ind: bool = False) -> CampaignPerformance:
        """Campaign totals so far, from the summary vector and accumulation."""
        if ind:
            return CampaignPerformance.from_array(summary.p_accu)
        count = max(int(summary.count), 1)
        y = summary.y_last if isinstance(summary.y_last, Tensor) else Tensor(summary.y_last)
        pred = self.predict_normalized(y, summary.p_accu / count, accu=accu)
        return CampaignPerformance.from_array(pred.values * count)
