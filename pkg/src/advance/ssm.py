"""Conditional state-space layers with ZOH discretization and linear scans.

The same layer design is used twice: locally to compress a user's display
history into a fatigue vector, and globally to summarize the sequence of
auction embeddings. Input and output width is D; each of the D channels
carries an N-dimensional hidden state under a diagonal transition. The
input map B, output map C, and step size Delta are functions of the
current token, with the elapsed time interval entering the Delta net so
irregular gaps change how much state decays per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


@dataclass
class SsmConfig:
    d_model: int = 256
    n_state: int = 16
    n_layers: int = 3
    mix_hidden: int = 64
    per_channel_bc: bool = False
    dt_min: float = 0.01
    dt_max: float = 0.1


class SsmLayer:
    """One conditional SSM layer: conditioning nets, diagonal dynamics, mixing.

    The diagonal transition is stored as A = -exp(a_log) so it stays
    strictly negative no matter what the optimizer does; rows initialize to
    the real ladder -1, -2, ..., -N.
    """

    def __init__(self, cfg: SsmConfig, rng: np.random.Generator, name: str):
        d, n = cfg.d_model, cfg.n_state
        self.cfg = cfg
        self.name = name
        bc_out = n * d if cfg.per_channel_bc else n

        self.a_log = Tensor(np.tile(np.log(np.arange(1, n + 1.0)), (d, 1)),
                            requires_grad=True, name=f"{name}.a_log")
        s = 1.0 / np.sqrt(d)
        self.w_b = Tensor(rng.normal(0, s, (d, bc_out)), requires_grad=True, name=f"{name}.w_b")
        self.b_b = Tensor(np.zeros(bc_out), requires_grad=True, name=f"{name}.b_b")
        self.w_c = Tensor(rng.normal(0, s, (d, bc_out)), requires_grad=True, name=f"{name}.w_c")
        self.b_c = Tensor(np.zeros(bc_out), requires_grad=True, name=f"{name}.b_c")
        # low-rank interval-aware step-size net: (D+1) -> N -> D
        self.w_dt1 = Tensor(rng.normal(0, 1.0 / np.sqrt(d + 1), (d + 1, n)),
                            requires_grad=True, name=f"{name}.w_dt1")
        self.w_dt2 = Tensor(rng.normal(0, 1.0 / np.sqrt(n), (n, d)),
                            requires_grad=True, name=f"{name}.w_dt2")
        dt = np.exp(rng.uniform(np.log(cfg.dt_min), np.log(cfg.dt_max), size=d))
        self.b_dt = Tensor(_inv_softplus(dt), requires_grad=True, name=f"{name}.b_dt")

        h = cfg.mix_hidden
        self.mix_w1 = Tensor(rng.normal(0, 1.0 / np.sqrt(d), (d, h)),
                             requires_grad=True, name=f"{name}.mix_w1")
        self.mix_b1 = Tensor(np.zeros(h), requires_grad=True, name=f"{name}.mix_b1")
        self.mix_w2 = Tensor(rng.normal(0, 1.0 / np.sqrt(h), (h, d)),
                             requires_grad=True, name=f"{name}.mix_w2")
        self.mix_b2 = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.mix_b2")

    def named_params(self) -> dict[str, Tensor]:
        ps = (self.a_log, self.w_b, self.b_b, self.w_c, self.b_c,
              self.w_dt1, self.w_dt2, self.b_dt,
              self.mix_w1, self.mix_b1, self.mix_w2, self.mix_b2)
        return {p.name: p for p in ps}

    @property
    def a_diag(self) -> np.ndarray:
        """Current diagonal transition entries, strictly negative."""
        return -np.exp(self.a_log.values)

    def a_tensor(self) -> Tensor:
        return ad.neg(ad.exp(self.a_log))

    def conditional_params(self, x: Tensor, delta_feat: np.ndarray,
                           condition: bool = True) -> tuple[Tensor, Tensor, Tensor]:
        """Token-dependent (Delta, B, C) for a sequence.

        x: (..., L, D) tokens; delta_feat: (..., L) nonnegative second gaps,
        log-scaled before entering the step-size net. With condition=False
        (the non-selective variant) tokens and intervals are ignored and
        only the biases remain.
        """
        delta_feat = np.asarray(delta_feat, dtype=np.float64)
        if (delta_feat < 0).any():
            raise ContractError("conditional_params: negative time interval")
        d, n = self.cfg.d_model, self.cfg.n_state
        lead = x.shape[:-1]
        if not condition:
            zeros = Tensor(np.zeros(lead + (d + 1,)))
            dt_pre = ad.linear(ad.linear(zeros, self.w_dt1), self.w_dt2, self.b_dt)
            zx = Tensor(np.zeros(lead + (d,)))
            b = ad.linear(zx, self.w_b, self.b_b)
            c = ad.linear(zx, self.w_c, self.b_c)
        else:
            gap = Tensor(np.log1p(delta_feat)[..., None])
            xi = ad.concat([x, gap], axis=-1)
            dt_pre = ad.linear(ad.linear(xi, self.w_dt1), self.w_dt2, self.b_dt)
            b = ad.linear(x, self.w_b, self.b_b)
            c = ad.linear(x, self.w_c, self.b_c)
        delta = ad.softplus(dt_pre)
        if self.cfg.per_channel_bc:
            b = ad.reshape(b, lead + (n, d))
            c = ad.reshape(c, lead + (n, d))
        return delta, b, c

    def mix(self, y: Tensor) -> Tensor:
        """Channel mixing with residual; zero weights leave y untouched."""
        h = ad.relu(ad.linear(y, self.mix_w1, self.mix_b1))
        return ad.add(y, ad.linear(h, self.mix_w2, self.mix_b2))


def zoh_discretize(a_diag, b, delta) -> tuple[Tensor, Tensor]:
    """Discretize diagonal continuous dynamics with a zero-order hold.

    Per diagonal entry a: abar = exp(delta*a), bbar = ((exp(delta*a)-1)/a)*b,
    with the removable singularity at a ~ 0 handled as delta*b. Accepts
    either full shapes (a (D,N), delta (L,D), b (L,N) or (L,N,D)) or the
    single-channel convenience (a (N,), b (N,), scalar delta).
    """
    a_t = a_diag if isinstance(a_diag, Tensor) else Tensor(np.asarray(a_diag, dtype=np.float64))
    b_t = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
    delta_t = delta if isinstance(delta, Tensor) else Tensor(np.asarray(delta, dtype=np.float64))
    if a_t.ndim == 1 and b_t.ndim == 1 and delta_t.values.ndim == 0:
        n = a_t.shape[0]
        abar, bbar = ad.zoh_pair(ad.reshape(a_t, (1, n)),
                                 ad.reshape(delta_t, (1, 1)),
                                 ad.reshape(b_t, (1, n)))
        return ad.reshape(abar, (n,)), ad.reshape(bbar, (n,))
    return ad.zoh_pair(a_t, delta_t, b_t)


def scan_sequential(abar, bbar, c, x, h0=None) -> tuple[Tensor, Tensor]:
    """Exact linear recurrence h_t = abar_t*h_{t-1} + bbar_t*x_t, y_t = c_t.h_t.

    O(L*N*D) time. Returns all outputs (L, D) and the final state (D, N);
    an empty sequence returns h0 unchanged and no outputs.
    """
    return _scan(abar, bbar, c, x, h0, parallel=False)


def scan_parallel(abar, bbar, c, x, h0=None) -> tuple[Tensor, Tensor]:
    """Same recurrence via a work-efficient associative prefix combine.

    O(L) work, O(log L) combine depth; outputs match scan_sequential to
    floating reassociation error.
    """
    return _scan(abar, bbar, c, x, h0, parallel=True)


def _scan(abar, bbar, c, x, h0, parallel: bool) -> tuple[Tensor, Tensor]:
    abar = abar if isinstance(abar, Tensor) else Tensor(np.asarray(abar, dtype=np.float64))
    if h0 is None:
        _, d, n = abar.values.shape
        h0 = np.zeros((d, n))
    return ad.ssm_scan(abar, bbar, c, x, h0, parallel=parallel)


@dataclass
class StackState:
    """Carried hidden states for a streaming stack, one (D, N) per layer."""
    layer_states: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def zeros(cfg: SsmConfig) -> "StackState":
        return StackState([np.zeros((cfg.d_model, cfg.n_state)) for _ in range(cfg.n_layers)])

    def copy(self) -> "StackState":
        return StackState([s.copy() for s in self.layer_states])


class SsmStack:
    """Residual stack of conditional SSM layers sharing one time base."""

    def __init__(self, cfg: SsmConfig, rng: np.random.Generator, name: str):
        self.cfg = cfg
        self.name = name
        self.layers = [SsmLayer(cfg, rng, f"{name}.layer{i}") for i in range(cfg.n_layers)]

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.named_params())
        return out

    def forward(self, x: Tensor, gaps: np.ndarray, state: StackState | None = None,
                condition: bool = True, parallel: bool = False,
                carry_grad: bool = False) -> tuple[Tensor, StackState]:
        """Run the stack over one (L, D) sequence segment.

        gaps are nonnegative second intervals (first entry 0 at stream
        start). Carried states are detached unless carry_grad is set.
        """
        if state is None:
            state = StackState.zeros(self.cfg)
        new_states: list = []
        h = x
        for layer, h0 in zip(self.layers, state.layer_states):
            delta, b, c = layer.conditional_params(h, gaps, condition=condition)
            abar, bbar = ad.zoh_pair(layer.a_tensor(), delta, b)
            y, h_t = ad.ssm_scan(abar, bbar, c, h, h0, parallel=parallel)
            h = ad.add(h, layer.mix(y))
            new_states.append(h_t if carry_grad else h_t.values.copy())
        return h, StackState(new_states)

    def forward_segments(self, x: Tensor, gaps: np.ndarray, states: list[np.ndarray],
                         lengths: np.ndarray, condition: bool = True
                         ) -> tuple[Tensor, list[np.ndarray]]:
        """Advance several carried streams at once over right-padded segments.

        x: (S, L, D) with segment s real through lengths[s]; states: one
        (S, D, N) array per layer. Outputs beyond a segment's length are
        garbage and must be ignored; carried states are read at each
        segment's true last position and returned detached.
        """
        s_cnt, length, d = x.shape
        n = self.cfg.n_state
        if self.cfg.per_channel_bc:
            raise ContractError("segment-batched path supports shared B/C only")
        h = x
        pos = np.asarray(lengths) - 1
        new_states: list[np.ndarray] = []
        for layer, h0 in zip(self.layers, states):
            delta, b, c = layer.conditional_params(h, gaps, condition=condition)
            abar, bbar = ad.zoh_pair(layer.a_tensor(), ad.reshape(delta, (s_cnt * length, d)),
                                     ad.reshape(b, (s_cnt * length, n)))
            abar = ad.reshape(abar, (s_cnt, length, d, n))
            bbar = ad.reshape(bbar, (s_cnt, length, d, n))
            y, h_sel = ad.ssm_scan_batch(abar, bbar, c, h, h0, state_positions=pos)
            h = ad.add(h, layer.mix(y))
            new_states.append(h_sel.values.copy())
        return h, new_states

    def forward_batched(self, x: Tensor, gaps: np.ndarray, mask: np.ndarray,
                        condition: bool = True) -> Tensor:
        """Independent scans over (B, L, D) windows, zero states at start.

        mask marks real positions; padded positions stay exactly zero
        between layers so they never perturb the recurrence.
        """
        bsz, length, d = x.shape
        n = self.cfg.n_state
        if self.cfg.per_channel_bc:
            raise ContractError("batched fatigue path supports shared B/C only")
        h = ad.row_mask(x, mask)
        h0 = np.zeros((bsz, d, n))
        for layer in self.layers:
            delta, b, c = layer.conditional_params(h, gaps, condition=condition)
            abar, bbar = ad.zoh_pair(layer.a_tensor(), ad.reshape(delta, (bsz * length, d)),
                                     ad.reshape(b, (bsz * length, n)))
            abar = ad.reshape(abar, (bsz, length, d, n))
            bbar = ad.reshape(bbar, (bsz, length, d, n))
            y, _ = ad.ssm_scan_batch(abar, bbar, c, h, h0)
            h = ad.add(h, ad.row_mask(layer.mix(y), mask))
        return h
