"""Streaming engine over auction logs: one pass drives train, eval, or both.

The log is processed in blocks of `chunk_size` records in time order. Each
block is encoded once as a padded batch; every tracked campaign then
extends its own summarizer stream with the rows where its ad was a
candidate. Campaign losses fire at block boundaries, auxiliary losses
cover every record. User display/click bookkeeping advances record by
record, so nothing after a timestamp can influence features at or before
it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import CampaignSpec
from .encoder import AD_TYPE_IDS, expected_increments
from .model import AdVanceModel
from .ssm import StackState

LABEL_EPS = 0.01


class LogData:
    """Columnar view of a parsed log plus per-campaign membership indices."""

    def __init__(self, header: dict, records: list[dict]):
        self.header = header
        n = len(records)
        self.n = n
        self.ts = np.array([r["ts"] for r in records])
        self.user = np.array([r["user_id"] for r in records], dtype=int)
        uf = np.array([r["user_feats"] for r in records], dtype=int).reshape(n, -1)
        cf = np.array([r["ctx_feats"] for r in records], dtype=int).reshape(n, -1)
        self.segment, self.device = uf[:, 0], uf[:, 1]
        self.slot, self.topic = cf[:, 0], cf[:, 1]
        self.winner = np.array([r["winner"] for r in records], dtype=int)
        self.clicked = np.array([r["clicked"] for r in records], dtype=int)
        self.converted = np.array([r["converted"] for r in records], dtype=int)

        counts = np.array([len(r["candidates"]) for r in records], dtype=int)
        self.cand_offsets = np.concatenate([[0], np.cumsum(counts)])
        self.cand_ad = np.empty(self.cand_offsets[-1], dtype=int)
        self.cand_cat = np.empty_like(self.cand_ad)
        self.cand_type = np.empty_like(self.cand_ad)
        self.cand_bid = np.empty(self.cand_offsets[-1])
        pos = 0
        for r in records:
            for c in r["candidates"]:
                self.cand_ad[pos] = c["ad_id"]
                self.cand_cat[pos] = c["cat_id"]
                self.cand_type[pos] = AD_TYPE_IDS[c["ad_type"]]
                self.cand_bid[pos] = c["bid"]
                pos += 1

        self.campaigns = [CampaignSpec.from_json(c) for c in header.get("campaigns", [])]
        self.members: dict[int, np.ndarray] = {}
        self.member_cand: dict[int, np.ndarray] = {}
        self.member_true_inc: dict[int, np.ndarray] = {}
        for spec in self.campaigns:
            rows, cidx = [], []
            for i in range(n):
                lo, hi = self.cand_offsets[i], self.cand_offsets[i + 1]
                hits = np.nonzero(self.cand_ad[lo:hi] == spec.ad_id)[0]
                if hits.size:
                    rows.append(i)
                    cidx.append(int(hits[0]))
            rows = np.array(rows, dtype=int)
            cidx = np.array(cidx, dtype=int)
            self.members[spec.campaign_id] = rows
            self.member_cand[spec.campaign_id] = cidx
            inc = np.zeros((rows.size, 4))
            for j, (i, ci) in enumerate(zip(rows, cidx)):
                if self.winner[i] == ci:
                    inc[j, 1] = 1.0
                    if spec.ad_type == "CPM":
                        inc[j, 0] = spec.bid
                    if self.clicked[i]:
                        inc[j, 2] = 1.0
                        if spec.ad_type == "CPC":
                            inc[j, 0] = spec.bid
                    if self.converted[i]:
                        inc[j, 3] = 1.0
                        if spec.ad_type == "CPA":
                            inc[j, 0] = spec.bid
            self.member_true_inc[spec.campaign_id] = inc

    @property
    def duration_hours(self) -> float:
        return float(self.header["duration_hours"])

    def row_at_or_after(self, ts: float) -> int:
        return int(np.searchsorted(self.ts, ts, side="left"))


@dataclass
class _CampaignRuntime:
    spec: CampaignSpec
    member_pos: int = 0                 # index into the campaign's member arrays
    state: StackState | None = None
    cursor_ts: float | None = None
    p_accu: np.ndarray = field(default_factory=lambda: np.zeros(4))
    count: int = 0
    true_cum: np.ndarray = field(default_factory=lambda: np.zeros(4))
    y_last: np.ndarray | None = None
    boundary_pos: int = 0

    def snapshot(self) -> dict:
        return {
            "member_pos": self.member_pos,
            "state": self.state.copy() if self.state else None,
            "cursor_ts": self.cursor_ts,
            "p_accu": self.p_accu.copy(),
            "count": self.count,
            "true_cum": self.true_cum.copy(),
            "y_last": None if self.y_last is None else self.y_last.copy(),
            "boundary_pos": self.boundary_pos,
        }

    def restore(self, snap: dict) -> None:
        self.member_pos = snap["member_pos"]
        self.state = snap["state"].copy() if snap["state"] else None
        self.cursor_ts = snap["cursor_ts"]
        self.p_accu = snap["p_accu"].copy()
        self.count = snap["count"]
        self.true_cum = snap["true_cum"].copy()
        self.y_last = None if snap["y_last"] is None else snap["y_last"].copy()
        self.boundary_pos = snap["boundary_pos"]


@dataclass
class TrainStats:
    blocks: int = 0
    steps: int = 0
    loss_total: float = 0.0
    loss_win: float = 0.0
    loss_ctr: float = 0.0
    loss_cvr: float = 0.0
    loss_campaign: float = 0.0

    def add(self, total, win, ctr, cvr, camp):
        self.blocks += 1
        self.loss_total += total
        self.loss_win += win
        self.loss_ctr += ctr
        self.loss_cvr += cvr
        self.loss_campaign += camp

    def means(self) -> dict:
        b = max(self.blocks, 1)
        return {
            "loss_total": self.loss_total / b,
            "loss_win": self.loss_win / b,
            "loss_ctr": self.loss_ctr / b,
            "loss_cvr": self.loss_cvr / b,
            "loss_campaign": self.loss_campaign / b,
        }


class Pipeline:
    """Stateful stream over one log for one model."""

    def __init__(self, model: AdVanceModel, log: LogData, chunk_size: int = 100,
                 loss_weights: tuple[float, float] = (0.5, 0.5),
                 campaign_weight: float = 1.0, boundaries: np.ndarray | None = None):
        self.model = model
        self.log = log
        self.chunk_size = int(chunk_size)
        self.loss_weights = loss_weights
        self.campaign_weight = campaign_weight
        if boundaries is None:
            boundaries = np.arange(1, int(log.duration_hours) + 1) * 3600.0
        self.boundaries = boundaries
        self.full_bptt = False
        self.pending_loss: Tensor | None = None
        self.reset()

    def reset(self) -> None:
        self.cursor = 0
        self.displays: dict[int, list] = {}
        self.clicks: dict[int, list] = {}
        self.runtimes = {spec.campaign_id: _CampaignRuntime(spec)
                         for spec in self.log.campaigns}
        nb = self.boundaries.size
        self.pred_cum = {c: np.full((nb, 4), np.nan) for c in self.runtimes}
        self.true_cum = {c: np.full((nb, 4), np.nan) for c in self.runtimes}
        self.counts = {c: np.zeros(nb) for c in self.runtimes}

    # -- stream state copies (for the fine-tuning eval protocol) ------------

    def snapshot(self) -> dict:
        return {
            "cursor": self.cursor,
            "displays": {u: list(v) for u, v in self.displays.items()},
            "clicks": {u: list(v) for u, v in self.clicks.items()},
            "runtimes": {c: r.snapshot() for c, r in self.runtimes.items()},
            "pred_cum": {c: v.copy() for c, v in self.pred_cum.items()},
            "true_cum": {c: v.copy() for c, v in self.true_cum.items()},
            "counts": {c: v.copy() for c, v in self.counts.items()},
        }

    def restore(self, snap: dict) -> None:
        self.cursor = snap["cursor"]
        self.displays = {u: list(v) for u, v in snap["displays"].items()}
        self.clicks = {u: list(v) for u, v in snap["clicks"].items()}
        for c, r in self.runtimes.items():
            r.restore(snap["runtimes"][c])
        self.pred_cum = {c: v.copy() for c, v in snap["pred_cum"].items()}
        self.true_cum = {c: v.copy() for c, v in snap["true_cum"].items()}
        self.counts = {c: v.copy() for c, v in snap["counts"].items()}

    # -- block assembly -------------------------------------------------------

    def _gather_block(self, lo: int, hi: int) -> dict:
        log, cfg = self.log, self.model.config
        flags = cfg.variants
        bsz = hi - lo
        counts = log.cand_offsets[lo + 1:hi + 1] - log.cand_offsets[lo:hi]
        kmax = int(counts.max())
        c_len = 0 if flags.static else cfg.max_clicks
        w_len = 0 if (flags.static or flags.pref) else cfg.display_window

        cand = {k: np.zeros((bsz, kmax), dtype=int) for k in ("ad", "cat", "type")}
        cand_bid = np.zeros((bsz, kmax))
        cand_mask = np.zeros((bsz, kmax), dtype=bool)
        clk = {k: np.zeros((bsz, c_len), dtype=int) for k in ("ad", "cat", "type", "conv")}
        clk_bid = np.zeros((bsz, c_len))
        clk_ts = np.zeros((bsz, c_len))
        clk_mask = np.zeros((bsz, c_len), dtype=bool)
        dsp = {k: np.zeros((bsz, w_len), dtype=int) for k in ("ad", "cat", "type")}
        dsp_bid = np.zeros((bsz, w_len))
        dsp_gap = np.zeros((bsz, w_len))
        dsp_mask = np.zeros((bsz, w_len), dtype=bool)

        for j, i in enumerate(range(lo, hi)):
            o0, o1 = log.cand_offsets[i], log.cand_offsets[i + 1]
            k = o1 - o0
            cand["ad"][j, :k] = log.cand_ad[o0:o1]
            cand["cat"][j, :k] = log.cand_cat[o0:o1]
            cand["type"][j, :k] = log.cand_type[o0:o1]
            cand_bid[j, :k] = log.cand_bid[o0:o1]
            cand_mask[j, :k] = True

            u = log.user[i]
            if c_len:
                hist = self.clicks.get(u)
                if hist:
                    tail = hist[-c_len:]
                    m = len(tail)
                    for q, (a, c, ty, b, ts, cv) in enumerate(tail):
                        clk["ad"][j, q] = a
                        clk["cat"][j, q] = c
                        clk["type"][j, q] = ty
                        clk["conv"][j, q] = cv
                        clk_bid[j, q] = b
                        clk_ts[j, q] = ts
                    clk_mask[j, :m] = True
            if w_len:
                hist = self.displays.get(u)
                if hist:
                    tail = hist[-w_len:]
                    m = len(tail)
                    base = w_len - m
                    prev = None
                    for q, (a, c, ty, b, ts) in enumerate(tail):
                        dsp["ad"][j, base + q] = a
                        dsp["cat"][j, base + q] = c
                        dsp["type"][j, base + q] = ty
                        dsp_bid[j, base + q] = b
                        dsp_gap[j, base + q] = 0.0 if prev is None else ts - prev
                        prev = ts
                    dsp_mask[j, base:] = True

            # commit this auction's display so later rows in the block see it
            o_w = o0 + log.winner[i]
            ev = (int(log.cand_ad[o_w]), int(log.cand_cat[o_w]),
                  int(log.cand_type[o_w]), float(log.cand_bid[o_w]), float(log.ts[i]))
            self.displays.setdefault(u, []).append(ev)
            if log.clicked[i]:
                self.clicks.setdefault(u, []).append(ev + (int(log.converted[i]),))

        return {
            "lo": lo, "hi": hi, "bsz": bsz, "kmax": kmax,
            "ts": log.ts[lo:hi],
            "seg": log.segment[lo:hi], "dev": log.device[lo:hi],
            "slot": log.slot[lo:hi], "topic": log.topic[lo:hi],
            "winner": log.winner[lo:hi],
            "clicked": log.clicked[lo:hi], "converted": log.converted[lo:hi],
            "cand": cand, "cand_bid": cand_bid, "cand_mask": cand_mask,
            "clk": clk, "clk_bid": clk_bid, "clk_ts": clk_ts, "clk_mask": clk_mask,
            "dsp": dsp, "dsp_bid": dsp_bid, "dsp_gap": dsp_gap, "dsp_mask": dsp_mask,
        }

    # -- model forward ---------------------------------------------------------

    def _encode_block(self, b: dict) -> tuple[Tensor, Tensor]:
        """Returns (encoded (B,K,D), win log-probabilities (B,K))."""
        m = self.model
        cfg = m.config
        flags = cfg.variants
        bsz, kmax = b["bsz"], b["kmax"]

        cands = m.embedder.item_tokens(b["cand"]["ad"], b["cand"]["cat"],
                                       b["cand"]["type"], b["cand_bid"])
        side_parts, side_masks = [], []
        if b["clk_mask"].shape[1] and b["clk_mask"].any():
            items = m.embedder.item_tokens(b["clk"]["ad"], b["clk"]["cat"],
                                           b["clk"]["type"], b["clk_bid"])
            conv = m.embedder.conv_flag.lookup(b["clk"]["conv"])
            pos = ad.reshape(m.pos_click(b["clk_ts"].reshape(-1)),
                             b["clk_ts"].shape + (cfg.d_model,))
            side_parts.append(ad.add(ad.add(items, conv), pos))
            side_masks.append(b["clk_mask"])
        user_tok = ad.reshape(m.embedder.user_tokens(b["seg"], b["dev"]),
                              (bsz, 1, cfg.d_model))
        ctx_tok = ad.reshape(m.embedder.ctx_tokens(b["slot"], b["topic"]),
                             (bsz, 1, cfg.d_model))
        side_parts += [user_tok, ctx_tok]
        side_masks += [np.ones((bsz, 1), dtype=bool)] * 2
        side = ad.concat(side_parts, axis=1)
        side_mask = np.concatenate(side_masks, axis=1)

        if b["dsp_mask"].shape[1] and b["dsp_mask"].any():
            dsp_tokens = m.embedder.item_tokens(b["dsp"]["ad"], b["dsp"]["cat"],
                                                b["dsp"]["type"], b["dsp_bid"])
            gaps = np.where(b["dsp_mask"], b["dsp_gap"], 0.0)
            if flags.reg:
                gaps = np.zeros_like(gaps)
            fat_seq = m.local_stack.forward_batched(dsp_tokens, gaps, b["dsp_mask"])
            fatigue = ad.gather_rows(fat_seq, np.full(bsz, b["dsp_mask"].shape[1] - 1))
        else:
            fatigue = Tensor(np.zeros((bsz, cfg.d_model)))

        pos_rows = m.pos(b["ts"])
        encoded = m.encoder.encode_batch(cands, pos_rows, side, fatigue,
                                         b["cand_mask"], side_mask)
        win_logp = ad.log_softmax(m.heads.win_scores(encoded), mask=b["cand_mask"])
        return encoded, win_logp

    def _aux_losses(self, b: dict, encoded: Tensor, win_logp: Tensor):
        bsz = b["bsz"]
        win_ce = ad.neg(ad.reduce_mean(ad.gather_rows(win_logp, b["winner"])))
        winner_rows = ad.gather_rows(encoded, b["winner"])
        z = ad.reshape(self.model.heads.ctr(winner_rows), (bsz,))
        y = b["clicked"].astype(float)
        ctr_bce = ad.reduce_mean(ad.sub(ad.softplus(z), ad.mul(z, Tensor(y))))
        clicked_idx = np.nonzero(b["clicked"])[0]
        if clicked_idx.size:
            rows = ad.select_rows(winner_rows, clicked_idx)
            z2 = ad.reshape(self.model.heads.cvr_cond(rows), (clicked_idx.size,))
            y2 = b["converted"][clicked_idx].astype(float)
            cvr_bce = ad.reduce_mean(ad.sub(ad.softplus(z2), ad.mul(z2, Tensor(y2))))
        else:
            cvr_bce = Tensor(np.zeros(()))
        return win_ce, ctr_bce, cvr_bce

    def _campaign_pass(self, b: dict, encoded: Tensor, win_logp: Tensor,
                       train: bool):
        """Advance every campaign stream through this block.

        All campaigns with members in the block share one right-padded
        batched scan (except under full BPTT, which keeps per-campaign
        tapes so carried states stay differentiable). Returns the campaign
        loss tensor when training, else None.
        """
        m = self.model
        flags = m.config.variants
        log = self.log
        lo, hi, kmax = b["lo"], b["hi"], b["kmax"]
        flat = ad.reshape(encoded, (b["bsz"] * kmax, m.config.d_model))

        segs = []
        for cid, rt in self.runtimes.items():
            rows_all = log.members[cid]
            p0 = rt.member_pos
            p1 = int(np.searchsorted(rows_all, hi, side="left"))
            if p1 > p0:
                segs.append((rt, rows_all[p0:p1], log.member_cand[cid][p0:p1], p0, p1))
        if not segs:
            return Tensor(np.zeros(())) if train else None

        loc_all = np.concatenate([rows - lo for _, rows, _, _, _ in segs])
        tgt_all = np.concatenate([tgt for _, _, tgt, _, _ in segs])
        type_all = np.concatenate([
            np.full(rows.size, AD_TYPE_IDS[rt.spec.ad_type])
            for rt, rows, _, _, _ in segs])
        bid_all = np.concatenate([
            np.full(rows.size, rt.spec.bid) for rt, rows, _, _, _ in segs])
        emb_all = ad.select_rows(flat, loc_all * kmax + tgt_all)
        pctr_all, pcvr_all = m.heads.predict_yield(emb_all)
        p_win_all = np.exp(win_logp.values[loc_all, tgt_all])
        inc_all = expected_increments(p_win_all, pctr_all.values, pcvr_all.values,
                                      type_all, bid_all)
        bounds = np.concatenate([[0], np.cumsum([rows.size for _, rows, _, _, _ in segs])])

        if flags.ind:
            for s, (rt, rows, _, p0, p1) in enumerate(segs):
                sl = slice(bounds[s], bounds[s + 1])
                self._stream_members(rt, log.ts[rows], inc_all[sl],
                                     log.member_true_inc[rt.spec.campaign_id][p0:p1], None)
                rt.member_pos = p1
            return Tensor(np.zeros(())) if train else None

        if self.full_bptt:
            return self._campaign_segments_unbatched(segs, bounds, emb_all, inc_all, train)

        s_cnt = len(segs)
        lengths = np.array([rows.size for _, rows, _, _, _ in segs])
        m_max = int(lengths.max())
        d = m.config.d_model
        pad_idx = np.zeros((s_cnt, m_max), dtype=int)
        pad_mask = np.zeros((s_cnt, m_max), dtype=bool)
        gaps = np.zeros((s_cnt, m_max))
        for s, (rt, rows, _, _, _) in enumerate(segs):
            k = rows.size
            pad_idx[s, :k] = np.arange(bounds[s], bounds[s + 1])
            pad_mask[s, :k] = True
            if not flags.reg:
                ts = log.ts[rows]
                prev = ts[0] if rt.cursor_ts is None else rt.cursor_ts
                gaps[s, :k] = np.diff(ts, prepend=prev)
        emb_pad = ad.row_mask(ad.reshape(ad.select_rows(emb_all, pad_idx.reshape(-1)),
                                         (s_cnt, m_max, d)), pad_mask)
        states = [np.stack([
            (rt.state.layer_states[i] if rt.state is not None
             else np.zeros((d, m.config.n_state)))
            for rt, _, _, _, _ in segs]) for i in range(m.config.ssm_layers)]
        ys_pad, new_states = m.summarizer.stack.forward_segments(
            emb_pad, gaps, states, lengths, condition=not flags.s4)
        y_lasts = ad.gather_rows(ys_pad, lengths - 1)

        for s, (rt, rows, _, p0, p1) in enumerate(segs):
            sl = slice(bounds[s], bounds[s + 1])
            self._stream_members(rt, log.ts[rows], inc_all[sl],
                                 log.member_true_inc[rt.spec.campaign_id][p0:p1],
                                 ys_pad.values[s, :rows.size])
            rt.state = StackState([layer_state[s] for layer_state in new_states])
            rt.cursor_ts = float(log.ts[rows[-1]])
            rt.member_pos = p1

        if not train:
            return None
        labels = np.stack([rt.true_cum / max(rt.count, 1) for rt, _, _, _, _ in segs])
        p_norms = np.stack([rt.p_accu / max(rt.count, 1) for rt, _, _, _, _ in segs])
        preds = m.camp_head.predict_normalized(y_lasts, p_norms, accu=flags.accu)
        scale = 1.0 / (np.abs(labels) + LABEL_EPS)
        ape = ad.mul(ad.absolute(ad.sub(preds, Tensor(labels))), Tensor(scale))
        return ad.reduce_mean(ape)

    def _campaign_segments_unbatched(self, segs, bounds, emb_all, inc_all, train):
        """Per-campaign scans with differentiable carried state (full BPTT)."""
        m = self.model
        flags = m.config.variants
        log = self.log
        losses = []
        for s, (rt, rows, _, p0, p1) in enumerate(segs):
            sl = slice(bounds[s], bounds[s + 1])
            emb = ad.select_rows(emb_all, np.arange(bounds[s], bounds[s + 1]))
            ys, y_last, rt.state = m.summarizer.summarize(
                emb, log.ts[rows], state=rt.state, last_ts=rt.cursor_ts,
                condition=not flags.s4, reg=flags.reg, carry_grad=True)
            self._stream_members(rt, log.ts[rows], inc_all[sl],
                                 log.member_true_inc[rt.spec.campaign_id][p0:p1],
                                 ys.values)
            rt.cursor_ts = float(log.ts[rows[-1]])
            rt.member_pos = p1
            if train:
                count = max(rt.count, 1)
                label = rt.true_cum / count
                pred = m.camp_head.predict_normalized(y_last, rt.p_accu / count,
                                                      accu=flags.accu)
                scale = 1.0 / (np.abs(label) + LABEL_EPS)
                losses.append(ad.reduce_mean(
                    ad.mul(ad.absolute(ad.sub(pred, Tensor(label))), Tensor(scale))))
        if not train:
            return None
        if not losses:
            return Tensor(np.zeros(()))
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        return ad.mul(total, 1.0 / len(losses))

    def _stream_members(self, rt: _CampaignRuntime, ts: np.ndarray,
                        inc: np.ndarray, true_inc: np.ndarray,
                        ys: np.ndarray | None) -> None:
        """Accumulate member auctions, emitting at hour boundaries they cross."""
        with ad.no_grad():
            for j in range(ts.size):
                while (rt.boundary_pos < self.boundaries.size
                       and self.boundaries[rt.boundary_pos] <= ts[j]):
                    self._emit_one(rt)
                rt.p_accu = rt.p_accu + inc[j]
                rt.true_cum = rt.true_cum + true_inc[j]
                rt.count += 1
                if ys is not None:
                    rt.y_last = ys[j].copy()

    def _emit_one(self, rt: _CampaignRuntime) -> None:
        idx = rt.boundary_pos
        cid = rt.spec.campaign_id
        flags = self.model.config.variants
        if rt.count == 0:
            rt.boundary_pos += 1
            return
        if flags.ind or rt.y_last is None:
            pred = rt.p_accu.copy()
        else:
            pred = self.model.camp_head.predict_normalized(
                Tensor(rt.y_last), rt.p_accu / rt.count, accu=flags.accu).values * rt.count
        self.pred_cum[cid][idx] = pred
        self.true_cum[cid][idx] = rt.true_cum
        self.counts[cid][idx] = rt.count
        rt.boundary_pos += 1

    def flush_boundaries(self) -> None:
        """Emit any boundaries left after the final processed record."""
        for rt in self.runtimes.values():
            while rt.boundary_pos < self.boundaries.size:
                self._emit_one(rt)

    # -- public stepping --------------------------------------------------------

    def advance(self, hi_row: int, train: bool = False, optimizer=None,
                stats: TrainStats | None = None, blocks_per_step: int = 1,
                nan_abort: bool = True) -> TrainStats:
        """Process rows [cursor, hi_row) in blocks; optionally train."""
        hi_row = min(hi_row, self.log.n)
        if stats is None:
            stats = TrainStats()
        pending = 0
        while self.cursor < hi_row:
            lo = self.cursor
            hi = min(lo + self.chunk_size, hi_row)
            block = self._gather_block(lo, hi)
            self.cursor = hi
            if train:
                tape = None if self.full_bptt else ad.Tape()
                if tape is not None:
                    tape.__enter__()
                try:
                    encoded, win_logp = self._encode_block(block)
                    if self.model.config.variants.aux:
                        win_ce = ctr_bce = cvr_bce = Tensor(np.zeros(()))
                    else:
                        win_ce, ctr_bce, cvr_bce = self._aux_losses(block, encoded, win_logp)
                    camp = self._campaign_pass(block, encoded, win_logp, train=True)
                    w_win, w_yield = self.loss_weights
                    total = ad.add(
                        ad.mul(camp, self.campaign_weight),
                        ad.add(ad.mul(win_ce, w_win),
                               ad.mul(ad.add(ctr_bce, cvr_bce), w_yield)))
                    parts = (total.item(), win_ce.item(), ctr_bce.item(),
                             cvr_bce.item(), camp.item())
                    if nan_abort and not np.isfinite(parts[0]):
                        raise RuntimeError(
                            f"non-finite loss at block {stats.blocks}: "
                            f"total={parts[0]} win={parts[1]} ctr={parts[2]} "
                            f"cvr={parts[3]} campaign={parts[4]}")
                    if tape is not None:
                        tape.backward(total)
                    else:
                        self.pending_loss = total if self.pending_loss is None \
                            else ad.add(self.pending_loss, total)
                finally:
                    if tape is not None:
                        tape.__exit__(None, None, None)
                stats.add(*parts)
                pending += 1
                if optimizer is not None and pending >= blocks_per_step:
                    optimizer.step()
                    self.model.zero_grad()
                    pending = 0
            else:
                encoded, win_logp = self._encode_block(block)
                self._campaign_pass(block, encoded, win_logp, train=False)
                stats.blocks += 1
        if train and optimizer is not None and pending:
            optimizer.step()
            self.model.zero_grad()
        return stats
