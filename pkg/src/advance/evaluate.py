"""Sliding-window evaluation with cost-share-weighted percentage error.

The model streams once over the log recording cumulative predictions at
every hour boundary; a forecast for step t and horizon h is the predicted
cumulative at t+h minus the value at t, compared against the realized
increment. Errors are aggregated across campaigns weighted by each
campaign's share of realized cost in the window, then averaged over steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import AdVanceModel, OracleModel
from .pipeline import LogData, Pipeline
from .train import AdamW, TrainConfig

METRICS = ("exp", "clk", "cvr", "cost")
METRIC_COLUMN = {"cost": 0, "exp": 1, "clk": 2, "cvr": 3}
DEFAULT_HORIZONS = (1, 6, 12, 24)


class UndefinedMetricError(ValueError):
    """Every campaign had zero ground truth; WMAPE is undefined."""


def wmape(truths, preds, weights, quiet: bool = False) -> float:
    """Cost-share weighted mean absolute percentage error.

    Weights must sum to one. Campaigns whose truth is zero are excluded
    (with a warning) and the remaining weights renormalized; if every truth
    is zero the metric is undefined.
    """
    truths = np.asarray(truths, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if truths.shape != preds.shape or truths.shape != weights.shape:
        raise ValueError(
            f"wmape: mismatched shapes {truths.shape}/{preds.shape}/{weights.shape}")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"wmape: weights sum to {weights.sum()}, expected 1")
    keep = truths != 0.0
    if not keep.any():
        raise UndefinedMetricError("wmape undefined: all ground-truth values are zero")
    if not keep.all() and not quiet:
        warnings.warn(f"wmape: excluding {int((~keep).sum())} zero-truth campaigns",
                      stacklevel=2)
    w = weights[keep]
    w = w / w.sum()
    return float(np.sum(w * np.abs(truths[keep] - preds[keep]) / np.abs(truths[keep])))


@dataclass
class EvalResult:
    """Per-step WMAPE series and their timestep averages."""
    steps: list[int] = field(default_factory=list)
    series: dict = field(default_factory=dict)    # (horizon, metric) -> list aligned to steps
    excluded: int = 0

    def timestep_avg(self, horizon: int, metric: str) -> float:
        vals = np.asarray(self.series[(horizon, metric)], dtype=np.float64)
        if np.isnan(vals).all():
            return float("nan")
        return float(np.nanmean(vals))

    def rows(self) -> list[tuple[int, int, str, float]]:
        out = []
        for (h, metric), vals in sorted(self.series.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            for step, v in zip(self.steps, vals):
                if not np.isnan(v):
                    out.append((step, h, metric, v))
        return out


def write_metrics_csv(path: str, result: EvalResult) -> None:
    with open(path, "w") as f:
        f.write("step,horizon,metric,wmape\n")
        for step, h, metric, v in result.rows():
            f.write(f"{step},{h},{metric},{v:.10g}\n")


def _true_cum_by_hour(log: LogData) -> dict[int, np.ndarray]:
    """Cumulative realized (cost, exp, clk, cvr) at each hour boundary."""
    n_hours = int(log.duration_hours)
    out = {}
    for spec in log.campaigns:
        rows = log.members[spec.campaign_id]
        inc = log.member_true_inc[spec.campaign_id]
        cum = np.zeros((n_hours, 4))
        if rows.size:
            hours = np.minimum((log.ts[rows] // 3600.0).astype(int), n_hours - 1)
            for j, h in enumerate(hours):
                cum[h] += inc[j]
        out[spec.campaign_id] = np.cumsum(cum, axis=0)
    return out


def _collect_streamed(model: AdVanceModel, log: LogData, chunk_size: int) -> tuple[dict, dict]:
    pl = Pipeline(model, log, chunk_size)
    pl.advance(log.n, train=False)
    pl.flush_boundaries()
    return pl.pred_cum, pl.true_cum


def _wmape_grid(pred_cum: dict, true_cum: dict, steps: list[int],
                horizons: tuple[int, ...], n_hours: int) -> EvalResult:
    result = EvalResult(steps=list(steps))
    excluded = 0
    for h in horizons:
        for metric in METRICS:
            col = METRIC_COLUMN[metric]
            series = []
            for t in steps:
                if t + h > n_hours:
                    series.append(float("nan"))
                    continue
                truths, preds, costs = [], [], []
                for cid in pred_cum:
                    p0, p1 = pred_cum[cid][t - 1], pred_cum[cid][t + h - 1]
                    y0, y1 = true_cum[cid][t - 1], true_cum[cid][t + h - 1]
                    if np.isnan(p0).any() or np.isnan(p1).any():
                        continue
                    truths.append(y1[col] - y0[col])
                    preds.append(p1[col] - p0[col])
                    costs.append(max(y1[0] - y0[0], 0.0))
                truths = np.asarray(truths)
                if truths.size == 0 or (truths == 0).all() or sum(costs) <= 0:
                    series.append(float("nan"))
                    continue
                w = np.asarray(costs) / sum(costs)
                excluded += int((truths == 0).sum())
                series.append(wmape(truths, np.asarray(preds), w, quiet=True))
            result.series[(h, metric)] = series
    result.excluded = excluded
    if excluded:
        warnings.warn(f"sliding_eval: {excluded} zero-truth campaign-steps excluded",
                      stacklevel=2)
    return result


def sliding_eval(model, header: dict, records: list[dict],
                 horizons: tuple[int, ...] = DEFAULT_HORIZONS,
                 start_hour: int | None = None, chunk_size: int = 100,
                 fine_tune: bool = False, train_config: TrainConfig | None = None,
                 log_data: LogData | None = None) -> EvalResult:
    """Per-step WMAPE for each horizon and metric, plus timestep averages.

    Steps advance one hour at a time starting after the model's training
    span (or `start_hour`). Horizons running past the end of the log are
    truncated with a warning. With `fine_tune`, the model takes one
    training pass over each newly revealed hour before the next forecast.
    """
    log = log_data if log_data is not None else LogData(header, records)
    n_hours = int(log.duration_hours)
    oracle = isinstance(model, OracleModel)
    if start_hour is None:
        if oracle:
            start_hour = 1
        else:
            start_hour = max(1, int(np.ceil(model.trained_upto_ts / 3600.0)))
    max_h = max(horizons)
    steps = list(range(start_hour, n_hours))
    if not steps:
        raise ValueError("no evaluation steps: training span covers the whole log")
    if steps[-1] + max_h > n_hours:
        warnings.warn(
            f"sliding_eval: horizons beyond hour {n_hours} are truncated", stacklevel=2)

    if oracle:
        truth = _true_cum_by_hour(log)
        return _wmape_grid(truth, truth, steps, horizons, n_hours)

    model.check_data_hash(log.header)
    if not fine_tune:
        pred_cum, true_cum = _collect_streamed(model, log, chunk_size)
        return _wmape_grid(pred_cum, true_cum, steps, horizons, n_hours)

    cfg = train_config if train_config is not None else TrainConfig()
    optimizer = AdamW(model.named_params(), cfg.learning_rate, cfg.beta1,
                      cfg.beta2, cfg.eps, cfg.weight_decay, cfg.grad_clip)
    pl = Pipeline(model, log, chunk_size, tuple(cfg.loss_weights), cfg.campaign_weight)
    pl.advance(log.row_at_or_after(start_hour * 3600.0), train=False)
    pred_cum = {c: np.full((len(pl.boundaries), 4), np.nan) for c in pl.pred_cum}
    true_cum = {c: np.full((len(pl.boundaries), 4), np.nan) for c in pl.true_cum}
    for t in steps:
        snap = pl.snapshot()
        lookahead = min((t + max_h) * 3600.0, log.ts[-1] + 1.0)
        pl.advance(log.row_at_or_after(lookahead), train=False)
        pl.flush_boundaries()
        for cid in pred_cum:
            lo, hi = t - 1, min(t + max_h, n_hours)
            pred_cum[cid][lo:hi] = pl.pred_cum[cid][lo:hi]
            true_cum[cid][lo:hi] = pl.true_cum[cid][lo:hi]
        pl.restore(snap)
        pl.advance(log.row_at_or_after((t + 1) * 3600.0), train=True,
                   optimizer=optimizer)
    return _wmape_grid(pred_cum, true_cum, steps, horizons, n_hours)
