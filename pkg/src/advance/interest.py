"""Per-user interest state: time-positioned clicks and a fatigue vector.

Preference and fatigue are kept apart: clicked items form a short sequence
the encoder attends over (each entry carries its own positional code),
while every displayed item, clicked or not, feeds a local SSM whose output
is the fatigue vector. All reads are strictly causal; a snapshot at time t
never sees an event at or after t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .embeddings import FeatureEmbedder, TimePositionalEmbedding
from .ssm import SsmStack, StackState


@dataclass(frozen=True)
class DisplayEvent:
    """One displayed ad: identity, auction context, and the user's reaction."""
    ad_id: int
    cat_id: int
    type_id: int
    bid: float
    ts: float
    clicked: bool = False
    converted: bool = False


@dataclass
class UserState:
    """Evolving record of what a user saw and clicked, plus fatigue state."""
    user_id: int
    display_history: list[DisplayEvent] = field(default_factory=list)
    click_history: list[DisplayEvent] = field(default_factory=list)
    fatigue: np.ndarray | None = None
    fatigue_ssm_state: StackState | None = None
    cursor: float = 0.0
    checkpoints: list = field(default_factory=list)

    def validate(self) -> None:
        clicks = {(e.ad_id, e.ts) for e in self.click_history}
        displays = {(e.ad_id, e.ts) for e in self.display_history}
        if not clicks <= displays:
            raise ContractError("click history contains an event never displayed")
        ts = [e.ts for e in self.display_history]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ContractError("display history out of order")
        if ts and ts[-1] > self.cursor:
            raise ContractError("event beyond the causal cursor")


class InterestModel:
    """Maintains user states against a shared embedder and local SSM stack.

    `static` drops both the click sequence and the fatigue vector;
    `pref` keeps clicks but zeroes fatigue.
    """

    def __init__(self, embedder: FeatureEmbedder, pos: TimePositionalEmbedding,
                 stack: SsmStack, max_clicks: int = 300, display_window: int = 300,
                 static: bool = False, pref: bool = False, cache_every: int = 100):
        self.embedder = embedder
        self.pos = pos
        self.stack = stack
        self.max_clicks = max_clicks
        self.display_window = display_window
        self.static = static
        self.pref = pref
        self.cache_every = cache_every
        self.d_model = embedder.d_model

    def new_state(self, user_id: int) -> UserState:
        return UserState(
            user_id=user_id,
            fatigue=np.zeros(self.d_model),
            fatigue_ssm_state=StackState.zeros(self.stack.cfg),
        )

    # -- streaming fatigue ------------------------------------------------

    def _embed_event(self, e: DisplayEvent) -> Tensor:
        return self.embedder.item_tokens(
            np.array([e.ad_id]), np.array([e.cat_id]),
            np.array([e.type_id]), np.array([e.bid]))

    def update_fatigue(self, state: UserState, event: DisplayEvent) -> UserState:
        """Fold one displayed item into the user's fatigue, in place.

        Ingestion is monotone: the event timestamp must not precede the
        cursor. The recurrence step uses the gap since the previous event
        (zero for the first one).
        """
        if event.ts < state.cursor:
            raise ContractError(
                f"out-of-order display at t={event.ts} behind cursor {state.cursor}")
        gap = event.ts - state.cursor if state.display_history else 0.0
        x = self._embed_event(event)
        out, new_state = self.stack.forward(x, np.array([gap]), state.fatigue_ssm_state)
        state.fatigue = out.values[-1].copy()
        state.fatigue_ssm_state = new_state
        state.cursor = event.ts
        state.display_history.append(event)
        if event.clicked:
            state.click_history.append(event)
        if len(state.display_history) % self.cache_every == 0:
            state.checkpoints.append((
                len(state.display_history), state.cursor,
                state.fatigue.copy(), state.fatigue_ssm_state.copy()))
        return state

    def snapshot_at(self, state: UserState, t: float) -> UserState:
        """State containing only events strictly before t, fatigue recomputed.

        Uses the latest cached prefix checkpoint so a snapshot costs O(cache
        interval) instead of O(history).
        """
        if t < 0:
            raise ContractError(f"snapshot time must be nonnegative, got {t}")
        events = state.display_history
        keep = 0
        while keep < len(events) and events[keep].ts < t:
            keep += 1

        snap = self.new_state(state.user_id)
        start = 0
        for n_ev, cursor, fat, ssm in state.checkpoints:
            if n_ev <= keep:
                start, snap.cursor = n_ev, cursor
                snap.fatigue = fat.copy()
                snap.fatigue_ssm_state = ssm.copy()
            else:
                break
        tail = events[start:keep]
        if tail:
            gaps = np.empty(len(tail))
            prev = snap.cursor if start > 0 else None
            for i, e in enumerate(tail):
                gaps[i] = 0.0 if prev is None else e.ts - prev
                prev = e.ts
            xs = self.embedder.item_tokens(
                np.array([e.ad_id for e in tail]), np.array([e.cat_id for e in tail]),
                np.array([e.type_id for e in tail]), np.array([e.bid for e in tail]))
            out, new_ssm = self.stack.forward(xs, gaps, snap.fatigue_ssm_state)
            snap.fatigue = out.values[-1].copy()
            snap.fatigue_ssm_state = new_ssm
            snap.cursor = tail[-1].ts
        snap.display_history = list(events[:keep])
        snap.click_history = [e for e in state.click_history if e.ts < t]
        return snap

    def fatigue_of(self, state: UserState) -> np.ndarray:
        """Current fatigue vector, zeroed under the static/pref ablations."""
        if self.static or self.pref:
            return np.zeros(self.d_model)
        return state.fatigue

    # -- windowed fatigue (the model's feature path) -----------------------

    def window_events(self, state: UserState, now: float) -> list[DisplayEvent]:
        """Last <= display_window displays strictly before `now`."""
        if self.static or self.pref:
            return []
        evs = [e for e in state.display_history if e.ts < now]
        return evs[-self.display_window:]

    def fatigue_from_events(self, events: list[DisplayEvent]) -> Tensor:
        """Recompute fatigue over an event window from a zero state.

        This is the feature used by the trained model: a capped window of
        recent displays rescanned with current parameters, so the fatigue
        input is always consistent with the weights being trained.
        """
        if not events:
            return Tensor(np.zeros(self.d_model))
        gaps = np.diff([e.ts for e in events], prepend=events[0].ts)
        xs = self.embedder.item_tokens(
            np.array([e.ad_id for e in events]), np.array([e.cat_id for e in events]),
            np.array([e.type_id for e in events]), np.array([e.bid for e in events]))
        out, _ = self.stack.forward(xs, gaps, None)
        return ad.select_rows(out, np.array([len(events) - 1]))

    # -- preference sequence ----------------------------------------------

    def click_events(self, state: UserState, now: float,
                     max_len: int | None = None) -> list[DisplayEvent]:
        if self.static:
            return []
        cap = self.max_clicks if max_len is None else max_len
        evs = [e for e in state.click_history if e.ts < now]
        return evs[-cap:]

    def build_click_sequence(self, state: UserState, now: float,
                             max_len: int | None = None) -> Tensor:
        """Most recent clicks before `now` as item + conversion-flag + pos rows."""
        evs = self.click_events(state, now, max_len)
        if not evs:
            return Tensor(np.zeros((0, self.d_model)))
        items = self.embedder.item_tokens(
            np.array([e.ad_id for e in evs]), np.array([e.cat_id for e in evs]),
            np.array([e.type_id for e in evs]), np.array([e.bid for e in evs]))
        conv = self.embedder.conv_flag.lookup(np.array([int(e.converted) for e in evs]))
        ts = np.array([e.ts for e in evs])
        return ad.add(ad.add(items, conv), self.pos(ts))
