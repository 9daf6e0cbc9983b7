"""Deterministic synthetic RTB world with evolving user interest.

Impressions arrive by an inhomogeneous (24h-sinusoid) point process. Each
qualified impression triggers an auction among tracked campaign ads whose
targeting matches the user plus background filler ads. The winner is the
bid-times-perceived-CTR argmax under Gumbel noise, overridden by a
frequency-cap rule: a user who saw a category too often in a recent window
disqualifies those candidates. A user's true CTR for a category declines
exponentially in recent same-category exposures and recovers with elapsed
time, so realized clicks carry a fatigue signal the models must learn.

Log format: JSON Lines with one header object (schema version,
vocabularies, config hash, campaign specs) followed by one record per
auction. Ground truth is a per-campaign per-hour CSV of realized totals.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import AD_TYPE_IDS

SCHEMA_VERSION = 1


class DatagenError(ValueError):
    """The world configuration cannot produce a valid log."""


class LogParseError(ValueError):
    """A log file line failed to parse."""


@dataclass
class CampaignSpec:
    campaign_id: int
    ad_id: int
    ad_type: str
    bid: float
    target_segments: list[int]
    start_hour: float = 0.0
    end_hour: float = float("inf")

    def to_json(self) -> dict:
        d = asdict(self)
        d["end_hour"] = None if math.isinf(self.end_hour) else self.end_hour
        return d

    @staticmethod
    def from_json(d: dict) -> "CampaignSpec":
        d = dict(d)
        if d.get("end_hour") is None:
            d["end_hour"] = float("inf")
        return CampaignSpec(**d)


@dataclass
class WorldConfig:
    seed: int = 0
    num_users: int = 200
    num_ads: int = 50
    num_categories: int = 8
    num_segments: int = 4
    num_devices: int = 3
    num_slots: int = 4
    num_topics: int = 5
    duration_hours: float = 144.0
    base_rate_per_hour: float = 260.0
    rate_amplitude: float = 0.5
    rate_phase_hours: float = 14.0
    candidates_min: int = 4
    candidates_max: int = 12
    fatigue_rate: float = 0.45
    fatigue_recovery_hours: float = 6.0
    freq_cap: int = 3
    freq_cap_window_hours: float = 1.5
    base_ctr_low: float = 0.05
    base_ctr_high: float = 0.25
    affinity_low: float = 0.35
    affinity_high: float = 1.65
    cvr_low: float = 0.15
    cvr_high: float = 0.4
    win_noise: float = 0.35
    bid_low: float = 0.5
    bid_high: float = 2.0
    # hidden creative wear-out cycle: multiplies true CTR, absent from features
    quality_drift_amplitude: float = 0.3
    quality_drift_period_hours: float = 48.0
    campaigns: list[CampaignSpec] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["campaigns"] = [c.to_json() for c in self.campaigns]
        return d

    @staticmethod
    def from_json(d: dict) -> "WorldConfig":
        d = dict(d)
        d["campaigns"] = [CampaignSpec.from_json(c) for c in d.get("campaigns", [])]
        return WorldConfig(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_config(seed: int = 0, duration_hours: float = 144.0,
                   base_rate_per_hour: float = 260.0) -> WorldConfig:
    """Desk-scale world: 6 tracked campaigns (1 CPM, 2 CPC, 3 CPA)."""
    specs = [
        CampaignSpec(0, 0, "CPM", 1.2, [0, 1, 2]),
        CampaignSpec(1, 1, "CPC", 1.6, [0, 1, 3]),
        CampaignSpec(2, 2, "CPC", 1.3, [1, 2, 3]),
        CampaignSpec(3, 3, "CPA", 1.8, [0, 2, 3]),
        CampaignSpec(4, 4, "CPA", 1.5, [0, 1, 2]),
        CampaignSpec(5, 5, "CPA", 1.9, [1, 2, 3]),
    ]
    return WorldConfig(seed=seed, duration_hours=duration_hours,
                       base_rate_per_hour=base_rate_per_hour, campaigns=specs)


class _World:
    """Static tables drawn once per seed plus the mutable interest state."""

    def __init__(self, cfg: WorldConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.user_segment = rng.integers(0, cfg.num_segments, cfg.num_users)
        self.user_device = rng.integers(0, cfg.num_devices, cfg.num_users)
        activity = rng.uniform(0.5, 1.5, cfg.num_users)
        self.user_weights = activity / activity.sum()
        self.ad_category = rng.integers(0, cfg.num_categories, cfg.num_ads)
        self.ad_quality = rng.uniform(0.7, 1.3, cfg.num_ads)
        self.ad_bid = np.round(rng.uniform(cfg.bid_low, cfg.bid_high, cfg.num_ads), 2)
        self.ad_type_id = rng.integers(0, 3, cfg.num_ads)
        for spec in cfg.campaigns:
            self.ad_bid[spec.ad_id] = spec.bid
            self.ad_type_id[spec.ad_id] = AD_TYPE_IDS[spec.ad_type]
        self.base_ctr = rng.uniform(cfg.base_ctr_low, cfg.base_ctr_high,
                                    (cfg.num_segments, cfg.num_categories))
        self.affinity = rng.uniform(cfg.affinity_low, cfg.affinity_high,
                                    (cfg.num_users, cfg.num_categories))
        self.cvr_cond = rng.uniform(cfg.cvr_low, cfg.cvr_high,
                                    (cfg.num_segments, cfg.num_categories))
        self.drift_phase = rng.uniform(0.0, 2 * math.pi, cfg.num_ads)
        self.drift_period = cfg.quality_drift_period_hours * rng.uniform(
            0.7, 1.3, cfg.num_ads)
        # fatigue accumulator and its last-update time per (user, category)
        self.fatigue = np.zeros((cfg.num_users, cfg.num_categories))
        self.fatigue_t = np.zeros((cfg.num_users, cfg.num_categories))
        self.cap_times: dict[tuple[int, int], list[float]] = {}

    def decayed_fatigue(self, user: int, cat: int, t: float) -> float:
        tau = self.cfg.fatigue_recovery_hours * 3600.0
        dt = t - self.fatigue_t[user, cat]
        return self.fatigue[user, cat] * math.exp(-dt / tau)

    def quality_drift(self, ad: int, t: float) -> float:
        amp = self.cfg.quality_drift_amplitude
        if amp == 0.0:
            return 1.0
        phase = 2 * math.pi * t / (self.drift_period[ad] * 3600.0) + self.drift_phase[ad]
        return math.exp(amp * math.sin(phase))

    def true_ctr(self, user: int, ad: int, t: float) -> float:
        cat = self.ad_category[ad]
        seg = self.user_segment[user]
        base = self.base_ctr[seg, cat] * self.affinity[user, cat] * self.ad_quality[ad]
        base *= self.quality_drift(ad, t)
        mult = math.exp(-self.cfg.fatigue_rate * self.decayed_fatigue(user, cat, t))
        return float(np.clip(base * mult, 1e-4, 0.95))

    def register_exposure(self, user: int, ad: int, t: float) -> None:
        cat = int(self.ad_category[ad])
        self.fatigue[user, cat] = self.decayed_fatigue(user, cat, t) + 1.0
        self.fatigue_t[user, cat] = t
        window = self.cfg.freq_cap_window_hours * 3600.0
        times = self.cap_times.setdefault((user, cat), [])
        cutoff = t - window
        while times and times[0] < cutoff:
            times.pop(0)
        times.append(t)

    def capped(self, user: int, cat: int, t: float) -> bool:
        times = self.cap_times.get((user, int(cat)))
        if not times:
            return False
        cutoff = t - self.cfg.freq_cap_window_hours * 3600.0
        return sum(1 for x in times if x >= cutoff) >= self.cfg.freq_cap


def _arrival_times(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    times = []
    for h in range(int(cfg.duration_hours)):
        lam = cfg.base_rate_per_hour * (
            1.0 + cfg.rate_amplitude * math.sin(2 * math.pi * (h - cfg.rate_phase_hours) / 24.0))
        n = rng.poisson(max(lam, 0.0))
        times.append(h * 3600.0 + np.sort(rng.uniform(0.0, 3600.0, n)))
    ts = np.concatenate(times) if times else np.zeros(0)
    # enforce strictly increasing timestamps
    for i in range(1, ts.size):
        if ts[i] <= ts[i - 1]:
            ts[i] = np.nextafter(ts[i - 1], np.inf)
    return ts


def generate_log(cfg: WorldConfig) -> tuple[dict, list[dict], dict]:
    """Produce (header, records, truth) for one synthetic world.

    `truth` maps campaign_id -> (hours, 4) array of per-hour realized
    (cost, exp, clk, cvr) totals.
    """
    rng = np.random.default_rng(cfg.seed)
    world = _World(cfg, rng)
    present_segments = set(world.user_segment.tolist())
    for spec in cfg.campaigns:
        if not present_segments.intersection(spec.target_segments):
            raise DatagenError(
                f"campaign {spec.campaign_id}: no users match targeting {spec.target_segments}")

    tracked_ids = {spec.ad_id for spec in cfg.campaigns}
    background = np.array([a for a in range(cfg.num_ads) if a not in tracked_ids])
    ts_all = _arrival_times(cfg, rng)
    n_hours = int(cfg.duration_hours)
    truth = {spec.campaign_id: np.zeros((n_hours, 4)) for spec in cfg.campaigns}
    by_ad = {spec.ad_id: spec for spec in cfg.campaigns}

    records: list[dict] = []
    auction_id = 0
    for t in ts_all:
        user = int(rng.choice(cfg.num_users, p=world.user_weights))
        seg = int(world.user_segment[user])
        slot = int(rng.integers(0, cfg.num_slots))
        topic = int(rng.integers(0, cfg.num_topics))
        hour = t / 3600.0
        tracked = [s.ad_id for s in cfg.campaigns
                   if seg in s.target_segments and s.start_hour <= hour < s.end_hour]
        k = int(rng.integers(cfg.candidates_min, cfg.candidates_max + 1))
        k = max(k, len(tracked) + 1)
        fillers = rng.choice(background, size=k - len(tracked), replace=False)
        ads = np.concatenate([np.array(tracked, dtype=int), fillers])
        ads = ads[rng.permutation(k)]

        scores = np.array([world.ad_bid[a] * world.true_ctr(user, a, t) for a in ads])
        eligible = np.array([not world.capped(user, world.ad_category[a], t) for a in ads])
        if not eligible.any():
            continue
        noisy = np.log(scores) + cfg.win_noise * rng.gumbel(size=k)
        noisy[~eligible] = -np.inf
        winner = int(np.argmax(noisy))
        win_ad = int(ads[winner])

        p_click = world.true_ctr(user, win_ad, t)
        clicked = bool(rng.random() < p_click)
        converted = False
        if clicked:
            cat = world.ad_category[win_ad]
            converted = bool(rng.random() < world.cvr_cond[seg, cat])
        world.register_exposure(user, win_ad, t)

        if win_ad in by_ad:
            spec = by_ad[win_ad]
            row = truth[spec.campaign_id][int(hour)]
            row[1] += 1.0
            if spec.ad_type == "CPM":
                row[0] += spec.bid
            if clicked:
                row[2] += 1.0
                if spec.ad_type == "CPC":
                    row[0] += spec.bid
            if converted:
                row[3] += 1.0
                if spec.ad_type == "CPA":
                    row[0] += spec.bid

        records.append({
            "auction_id": auction_id,
            "ts": float(t),
            "user_id": user,
            "user_feats": [seg, int(world.user_device[user])],
            "ctx_feats": [slot, topic],
            "candidates": [
                {"ad_id": int(a),
                 "cat_id": int(world.ad_category[a]),
                 "ad_type": ("CPM", "CPC", "CPA")[int(world.ad_type_id[a])],
                 "bid": float(world.ad_bid[a])}
                for a in ads
            ],
            "winner": winner,
            "clicked": int(clicked),
            "converted": int(converted),
        })
        auction_id += 1

    header = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "duration_hours": cfg.duration_hours,
        "vocab": {
            "num_ads": cfg.num_ads,
            "num_categories": cfg.num_categories,
            "num_segments": cfg.num_segments,
            "num_devices": cfg.num_devices,
            "num_slots": cfg.num_slots,
            "num_topics": cfg.num_topics,
        },
        "bid_range": [cfg.bid_low, max(cfg.bid_high, max((s.bid for s in cfg.campaigns), default=cfg.bid_high))],
        "campaigns": [s.to_json() for s in cfg.campaigns],
    }
    return header, records, truth


# -- serialization ----------------------------------------------------------


def write_log(path: str, header: dict, records: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for r in records:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_log(path: str) -> tuple[dict, list[dict]]:
    records = []
    header = None
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogParseError(f"{path}: malformed line {i}: {e}") from None
            if i == 1:
                if "schema_version" not in obj:
                    raise LogParseError(f"{path}: line 1 is not a log header")
                header = obj
            else:
                if "auction_id" not in obj:
                    raise LogParseError(f"{path}: malformed record at line {i}")
                records.append(obj)
    if header is None:
        raise LogParseError(f"{path}: empty log file")
    return header, records


def write_truth(path: str, truth: dict) -> None:
    with open(path, "w") as f:
        f.write("campaign_id,hour,cost,exp,clk,cvr\n")
        for cid in sorted(truth):
            arr = truth[cid]
            for hour in range(arr.shape[0]):
                cost, exp_, clk, cvr = arr[hour]
                f.write(f"{cid},{hour},{cost:.10g},{exp_:.10g},{clk:.10g},{cvr:.10g}\n")


def read_truth(path: str) -> dict:
    rows: dict[int, list[tuple[int, np.ndarray]]] = {}
    with open(path) as f:
        head = f.readline().strip()
        if head != "campaign_id,hour,cost,exp,clk,cvr":
            raise LogParseError(f"{path}: unexpected truth header {head!r}")
        for i, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                cid, hour, cost, exp_, clk, cvr = line.split(",")
                rows.setdefault(int(cid), []).append(
                    (int(hour), np.array([float(cost), float(exp_), float(clk), float(cvr)])))
            except ValueError as e:
                raise LogParseError(f"{path}: malformed line {i}: {e}") from None
    out = {}
    for cid, items in rows.items():
        n = max(h for h, _ in items) + 1
        arr = np.zeros((n, 4))
        for h, v in items:
            arr[h] = v
        out[cid] = arr
    return out


# -- analysis helpers --------------------------------------------------------


def truth_from_records(header: dict, records: list[dict]) -> dict:
    """Fold the log records into per-campaign per-hour totals.

    Independent of the generator's internal bookkeeping; used to verify
    that emitted ground truth equals the fold over the emitted log.
    """
    campaigns = [CampaignSpec.from_json(c) for c in header["campaigns"]]
    n_hours = int(header["duration_hours"])
    by_ad = {c.ad_id: c for c in campaigns}
    truth = {c.campaign_id: np.zeros((n_hours, 4)) for c in campaigns}
    for r in records:
        win = r["candidates"][r["winner"]]
        spec = by_ad.get(win["ad_id"])
        if spec is None:
            continue
        row = truth[spec.campaign_id][int(r["ts"] // 3600.0)]
        row[1] += 1.0
        if spec.ad_type == "CPM":
            row[0] += spec.bid
        if r["clicked"]:
            row[2] += 1.0
            if spec.ad_type == "CPC":
                row[0] += spec.bid
        if r["converted"]:
            row[3] += 1.0
            if spec.ad_type == "CPA":
                row[0] += spec.bid
    return truth


def realized_ctr_by_exposure_rank(records: list[dict], max_rank: int = 5,
                                  window_hours: float = 6.0) -> np.ndarray:
    """Mean realized CTR grouped by recent same-category exposure count.

    Rank r means the displayed ad was the user's r-th exposure to that
    category within the trailing window. Returns means for ranks 1..max_rank
    (NaN where a rank never occurred).
    """
    window = window_hours * 3600.0
    recent: dict[tuple[int, int], list[float]] = {}
    clicks = [[] for _ in range(max_rank)]
    for r in records:
        win = r["candidates"][r["winner"]]
        key = (r["user_id"], win["cat_id"])
        times = recent.setdefault(key, [])
        cutoff = r["ts"] - window
        while times and times[0] < cutoff:
            times.pop(0)
        rank = len(times) + 1
        if rank <= max_rank:
            clicks[rank - 1].append(r["clicked"])
        times.append(r["ts"])
    return np.array([float(np.mean(c)) if c else float("nan") for c in clicks])


def frequency_cap_violations(header: dict, records: list[dict], cap: int,
                             window_hours: float) -> int:
    """Count winners that should have been disqualified by the cap rule."""
    window = window_hours * 3600.0
    recent: dict[tuple[int, int], list[float]] = {}
    violations = 0
    for r in records:
        win = r["candidates"][r["winner"]]
        key = (r["user_id"], win["cat_id"])
        times = recent.setdefault(key, [])
        cutoff = r["ts"] - window
        while times and times[0] < cutoff:
            times.pop(0)
        if len(times) >= cap:
            violations += 1
        times.append(r["ts"])
    return violations
