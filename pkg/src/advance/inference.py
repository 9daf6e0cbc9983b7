"""What-if campaign forecasting over a simulated future environment.

The environment is built by predicting qualified impression volume per
future hour (hour-of-day means over the history, standing in for a
dedicated volume forecaster) and sampling that many auction records from
the most recent day's matching traffic. The target ad is inserted into
every sampled auction; the rollout re-estimates win rates and yields,
samples display and click events to evolve each simulated user's fatigue
and click history, and streams the target's embeddings through the global
summarizer. Linear in the number of auctions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .campaign import CampaignPerformance, CampaignSummary
from .datagen import CampaignSpec
from .encoder import AD_TYPE_IDS, AD_TYPES
from .interest import DisplayEvent, UserState
from .model import AdVanceModel
from .pipeline import LogData
from .ssm import StackState

RECORD_CAP = 20000


class EmptyEnvironmentError(ValueError):
    """No historical auctions match the query's targeting."""


@dataclass
class CampaignQuery:
    """Advertiser criteria for one hypothetical campaign."""
    cat_id: int
    ad_type: str
    bid: float
    target_segments: list[int]
    horizon_hours: int
    ad_id: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.ad_type not in AD_TYPE_IDS:
            raise ContractError(f"unknown ad type {self.ad_type!r}, expected {AD_TYPES}")
        if self.bid < 0:
            raise ContractError(f"negative bid {self.bid}")
        if self.horizon_hours < 1:
            raise ContractError(f"horizon must be at least one hour, got {self.horizon_hours}")

    @staticmethod
    def from_json(d: dict) -> "CampaignQuery":
        return CampaignQuery(**d)


@dataclass
class FutureEnvironment:
    """Sampled future auctions plus the volume scaling applied at the cap."""
    auctions: list[dict]
    start_ts: float
    scale: float = 1.0
    hourly_counts: list[int] = field(default_factory=list)


def predict_hourly_volume(log: LogData, query: CampaignQuery,
                          horizon_hours: int) -> list[int]:
    """Hour-of-day mean count of targeting-matched impressions per future hour."""
    match = np.isin(log.segment, query.target_segments)
    if not match.any():
        raise EmptyEnvironmentError(
            f"no auctions match targeting {query.target_segments}")
    hours = (log.ts // 3600.0).astype(int)
    n_hours = int(log.duration_hours)
    per_hour = np.zeros(n_hours)
    np.add.at(per_hour, np.minimum(hours[match], n_hours - 1), 1.0)
    hod_sum = np.zeros(24)
    hod_cnt = np.zeros(24)
    for h in range(n_hours):
        hod_sum[h % 24] += per_hour[h]
        hod_cnt[h % 24] += 1
    overall = per_hour.mean() if n_hours else 0.0
    hod_mean = np.where(hod_cnt > 0, hod_sum / np.maximum(hod_cnt, 1.0), overall)
    start = n_hours
    return [int(round(hod_mean[(start + k) % 24])) for k in range(horizon_hours)]


def build_future_env(log: LogData, query: CampaignQuery) -> FutureEnvironment:
    """Sample the simulated future auction sequence for a query.

    Volumes come from the hour-of-day predictor; records are drawn with
    replacement from the most recent day's matching traffic, keeping their
    competitor candidate lists and users, with each record's offset within
    its hour preserved. Above the 20,000-record cap the sequence is
    truncated and predictions scale linearly.
    """
    counts = predict_hourly_volume(log, query, query.horizon_hours)
    match = np.isin(log.segment, query.target_segments)
    end_ts = float(log.ts[-1])
    recent = np.nonzero(match & (log.ts >= end_ts - 24 * 3600.0))[0]
    if recent.size == 0:
        raise EmptyEnvironmentError(
            f"no recent auctions match targeting {query.target_segments}")
    rng = np.random.default_rng(query.seed)
    start_ts = (np.floor(end_ts / 3600.0) + 1.0) * 3600.0
    auctions = []
    for k, n_k in enumerate(counts):
        if n_k <= 0:
            continue
        picks = rng.choice(recent, size=n_k, replace=True)
        offsets = log.ts[picks] % 3600.0
        order = np.lexsort((picks, offsets))
        for j in order:
            auctions.append({"row": int(picks[j]),
                             "ts": start_ts + k * 3600.0 + float(offsets[j])})
    total = len(auctions)
    scale = 1.0
    if total > RECORD_CAP:
        scale = total / RECORD_CAP
        auctions = auctions[:RECORD_CAP]
    return FutureEnvironment(auctions, start_ts, scale, counts)


def _replay_user_states(model: AdVanceModel, log: LogData) -> dict[int, UserState]:
    """Rebuild every user's display/click history from the log (bookkeeping only)."""
    states: dict[int, UserState] = {}
    for i in range(log.n):
        u = int(log.user[i])
        st = states.get(u)
        if st is None:
            st = model.interest.new_state(u)
            states[u] = st
        off = log.cand_offsets[i] + log.winner[i]
        ev = DisplayEvent(int(log.cand_ad[off]), int(log.cand_cat[off]),
                          int(log.cand_type[off]), float(log.cand_bid[off]),
                          float(log.ts[i]), bool(log.clicked[i]),
                          bool(log.converted[i]))
        st.display_history.append(ev)
        if ev.clicked:
            st.click_history.append(ev)
        st.cursor = ev.ts
    return states


def forecast(model: AdVanceModel, log: LogData, env: FutureEnvironment,
             query: CampaignQuery, expected_value_mode: bool = False,
             seed: int | None = None) -> CampaignPerformance:
    """Roll the model through the simulated environment; linear complexity.

    Display winners are sampled from predicted win rates and clicks from
    pCTR (seeded), evolving each user's interest as the rollout advances;
    expected_value_mode replaces sampling with argmax/threshold decisions
    for variance-free comparisons.
    """
    if not model.trained:
        raise ContractError("forecast requires a trained model")
    if not env.auctions:
        raise EmptyEnvironmentError("empty future environment")
    rng = np.random.default_rng(query.seed if seed is None else seed)
    users = _replay_user_states(model, log)
    cfg = model.config
    d = cfg.d_model
    target_ad = query.ad_id if query.ad_id is not None else model.vocab["num_ads"] - 1
    type_id = AD_TYPE_IDS[query.ad_type]

    ssm_state = StackState.zeros(model.summarizer.cfg)
    p_accu = np.zeros(4)
    count = 0
    y_last: np.ndarray | None = None
    cursor_ts: float | None = None

    with ad.no_grad():
        for item in env.auctions:
            row, ts = item["row"], item["ts"]
            u = int(log.user[row])
            st = users.get(u)
            if st is None:
                st = model.interest.new_state(u)
                users[u] = st
            o0, o1 = log.cand_offsets[row], log.cand_offsets[row + 1]
            ads = np.concatenate([log.cand_ad[o0:o1], [target_ad]])
            cats = np.concatenate([log.cand_cat[o0:o1], [query.cat_id]])
            types = np.concatenate([log.cand_type[o0:o1], [type_id]])
            bids = np.concatenate([log.cand_bid[o0:o1], [query.bid]])
            k = ads.size

            cands = model.embedder.item_tokens(ads, cats, types, bids)
            clicks = model.interest.build_click_sequence(st, ts)
            user_tok = model.embedder.user_tokens(
                np.array([log.segment[row]]), np.array([log.device[row]]))
            ctx_tok = model.embedder.ctx_tokens(
                np.array([log.slot[row]]), np.array([log.topic[row]]))
            side = ad.concat([clicks, user_tok, ctx_tok], axis=0) \
                if clicks.shape[0] else ad.concat([user_tok, ctx_tok], axis=0)
            if cfg.variants.static or cfg.variants.pref:
                fatigue = Tensor(np.zeros(d))
            else:
                window = model.interest.window_events(st, ts)
                fatigue = ad.reshape(model.interest.fatigue_from_events(window), (d,))
            encoded = model.encoder.encode_auction(
                cands, side, fatigue, ad.reshape(model.pos(ts), (d,)))

            win = model.heads.predict_win_rates(
                ad.reshape(encoded, (1, k, d))).values[0]
            pctr_all, pcvr_all = model.heads.predict_yield(encoded)
            p_t = float(win[-1])
            pctr_t, pcvr_t = float(pctr_all.values[-1]), float(pcvr_all.values[-1])
            factor = {"CPM": 1.0, "CPC": pctr_t, "CPA": pcvr_t}[query.ad_type]
            y = p_t * factor
            p_accu += np.array([query.bid * y, p_t, p_t * pctr_t, p_t * pcvr_t])
            count += 1

            if not cfg.variants.ind:
                emb = ad.reshape(ad.select_rows(encoded, np.array([k - 1])), (1, d))
                gap = 0.0 if cursor_ts is None else ts - cursor_ts
                gaps = np.zeros(1) if cfg.variants.reg else np.array([gap])
                ys, ssm_state = model.summarizer.stack.forward(
                    emb, gaps, ssm_state, condition=not cfg.variants.s4)
                y_last = ys.values[-1]
                cursor_ts = ts

            # evolve the simulated environment
            if expected_value_mode:
                widx = int(np.argmax(win))
                clicked = pctr_all.values[widx] > 0.5
            else:
                widx = int(rng.choice(k, p=win / win.sum()))
                clicked = bool(rng.random() < pctr_all.values[widx])
            converted = False
            if clicked and not expected_value_mode:
                cond = pcvr_all.values[widx] / max(pctr_all.values[widx], 1e-12)
                converted = bool(rng.random() < min(cond, 1.0))
            ev = DisplayEvent(int(ads[widx]), int(cats[widx]), int(types[widx]),
                              float(bids[widx]), ts, bool(clicked), converted)
            st.display_history.append(ev)
            if clicked:
                st.click_history.append(ev)
            st.cursor = ts

    if cfg.variants.ind or y_last is None:
        perf = CampaignPerformance.from_array(p_accu * env.scale)
    else:
        summary = CampaignSummary(y_last=y_last, p_accu=p_accu, count=count)
        pred = model.camp_head.predict_campaign(
            summary, accu=cfg.variants.accu, ind=cfg.variants.ind)
        perf = CampaignPerformance.from_array(pred.as_array() * env.scale)
    perf.validate()
    return perf


def resolve_seed(config_seed: int) -> int:
    """ADVANCE_SEED overrides any configured seed when set."""
    env = os.environ.get("ADVANCE_SEED")
    return int(env) if env else int(config_seed)
