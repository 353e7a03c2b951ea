"""Synthetic co-walk scenario generator with exact ground truth.

Movement model: each pair owns a small set of waypoint routes near a home
anchor; walks traverse a route at constant speed (reflecting at the ends),
sampled on a fixed period with Gaussian GPS noise and Bernoulli dropout.
Positive days contain one shared walk executed simultaneously by both
members (independent noise/dropout); negative days contain independent
movement, optionally on the same route at a shifted time (hard negatives).
Every member also takes solo walks on personal routes so images are never
trivially empty.

Output is deterministic: the seed, pair index and day index derive
independent RNG streams, so generation parallelizes without changing
results.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from trajmatch.errors import SynthError
from trajmatch.ingest import MS_PER_DAY, DayTrace, LocationSample, PairDay

METERS_PER_DEG_LAT = 111_320.0


@dataclass(frozen=True)
class ScenarioConfig:
    num_pairs: int = 50
    days_per_pair: int = 10
    co_walk_probability: float = 0.35
    co_walk_start_ms: int = 14 * 3_600_000  # 14:00 local
    co_walk_start_jitter_ms: int = 0
    co_walk_duration_ms: int = 1_800_000  # 30 min
    walking_speed_mps: float = 1.4
    gps_noise_std_m: float = 8.0
    sample_period_s: float = 30.0
    dropout_probability: float = 0.1
    routes_per_pair: int = 3
    route_waypoints: int = 5
    route_extent_m: float = 600.0
    solo_trips_max: int = 2
    solo_trip_duration_ms: int = 1_800_000
    solo_start_mode: str = "random"  # "random" | "routine"
    solo_start_range_ms: tuple[int, int] = (0, MS_PER_DAY)
    hard_negative_probability: float = 0.6
    hard_negative_shift_ms: tuple[int, int] = (1_900_000, 3_200_000)  # B starts this much later
    anomaly_probability: float = 0.0  # chance a solo walk uses a one-off route
    member_home_offset_deg: float = 0.0  # >0 separates the two members' regions
    center_lat: float = 40.44
    center_lon: float = -79.95
    pair_spread_deg: float = 0.05
    tz_offset_minutes: int = 0
    start_date: str = "2026-01-05"
    seed: int = 7

    def validate(self) -> None:
        if not 0.0 <= self.co_walk_probability <= 1.0:
            raise SynthError("co_walk_probability must be in [0, 1]")
        if not 0.0 <= self.dropout_probability < 1.0:
            raise SynthError("dropout_probability must be in [0, 1)")
        if self.co_walk_start_ms + self.co_walk_start_jitter_ms + self.co_walk_duration_ms > MS_PER_DAY:
            raise SynthError("co-walk window does not fit inside the day")
        if self.solo_start_mode not in ("random", "routine"):
            raise SynthError(f"unknown solo_start_mode {self.solo_start_mode!r}")
        lo, hi = self.solo_start_range_ms
        if not (0 <= lo < hi <= MS_PER_DAY) or hi - lo < self.solo_trip_duration_ms:
            raise SynthError("solo_start_range_ms cannot fit a solo walk")
        if self.num_pairs < 1 or self.days_per_pair < 1:
            raise SynthError("need at least one pair and one day")


@dataclass(frozen=True)
class TruthRecord:
    pair_id: str
    local_date: datetime.date
    label: bool
    co_walk_window_ms: Optional[tuple[int, int]]  # [start, end) when label is True
    hard_negative: bool


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    pair_days: list[PairDay]
    truth: dict[tuple[str, str], TruthRecord]  # key: (pair_id, iso date)


class _Route:
    """Waypoint polyline with arclength lookup (meters, local tangent plane)."""

    def __init__(self, waypoints_deg: np.ndarray, anchor_lat: float):
        self.points = waypoints_deg  # [k, 2] (lat, lon)
        self.coslat = math.cos(math.radians(anchor_lat))
        deltas = np.diff(waypoints_deg, axis=0)
        seg_m = np.sqrt(
            (deltas[:, 0] * METERS_PER_DEG_LAT) ** 2
            + (deltas[:, 1] * METERS_PER_DEG_LAT * self.coslat) ** 2
        )
        self.cum = np.concatenate([[0.0], np.cumsum(seg_m)])
        self.length = float(self.cum[-1])
        if self.length <= 0:
            raise SynthError("degenerate route")

    def position(self, arclen_m: float) -> tuple[float, float]:
        """Point at a given arclength, reflecting at the route ends."""
        period = 2.0 * self.length
        s = arclen_m % period
        if s > self.length:
            s = period - s
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.cum) - 2)
        seg_len = self.cum[i + 1] - self.cum[i]
        frac = 0.0 if seg_len <= 0 else (s - self.cum[i]) / seg_len
        p = self.points[i] + frac * (self.points[i + 1] - self.points[i])
        return float(p[0]), float(p[1])


def _make_route(rng: np.random.Generator, anchor: tuple[float, float], extent_m: float,
                waypoints: int) -> _Route:
    lat0, lon0 = anchor
    coslat = math.cos(math.radians(lat0))
    half_lat = extent_m / METERS_PER_DEG_LAT / 2.0
    half_lon = extent_m / (METERS_PER_DEG_LAT * coslat) / 2.0
    pts = np.stack(
        [
            lat0 + rng.uniform(-half_lat, half_lat, size=waypoints),
            lon0 + rng.uniform(-half_lon, half_lon, size=waypoints),
        ],
        axis=1,
    )
    return _Route(pts, lat0)


def _walk_samples(
    route: _Route,
    start_ms: int,
    duration_ms: int,
    cfg: ScenarioConfig,
    rng: np.random.Generator,
    start_arclen_m: float = 0.0,
) -> list[tuple[int, float, float]]:
    """(ms_of_day, lat, lon) fixes for one walk; noise and dropout applied."""
    period_ms = int(cfg.sample_period_s * 1000)
    noise_lat = cfg.gps_noise_std_m / METERS_PER_DEG_LAT
    noise_lon = cfg.gps_noise_std_m / (METERS_PER_DEG_LAT * route.coslat)
    out = []
    t = start_ms
    end = min(start_ms + duration_ms, MS_PER_DAY - 1)
    while t < end:
        s = start_arclen_m + cfg.walking_speed_mps * (t - start_ms) / 1000.0
        lat, lon = route.position(s)
        lat += rng.normal(0.0, noise_lat)
        lon += rng.normal(0.0, noise_lon)
        if rng.random() >= cfg.dropout_probability:
            out.append((int(t), lat, lon))
        t += period_ms
    return out


def _day_date(cfg: ScenarioConfig, day_idx: int) -> datetime.date:
    return datetime.date.fromisoformat(cfg.start_date) + datetime.timedelta(days=day_idx)


def _to_samples(device: str, date: datetime.date, fixes, tz_minutes: int) -> tuple[LocationSample, ...]:
    epoch_day = date.toordinal() - datetime.date(1970, 1, 1).toordinal()
    out = []
    seen = set()
    for ms, lat, lon in sorted(fixes):
        if ms in seen:  # duplicate timestamps keep the first fix
            continue
        seen.add(ms)
        local_ms = epoch_day * MS_PER_DAY + ms
        out.append(LocationSample(device, local_ms - tz_minutes * 60_000, tz_minutes, lat, lon))
    return tuple(out)


def generate(config: ScenarioConfig) -> ScenarioResult:
    """Generate labeled PairDays plus exact co-walk ground truth."""
    config.validate()
    pair_days: list[PairDay] = []
    truth: dict[tuple[str, str], TruthRecord] = {}
    for pair_idx in range(config.num_pairs):
        pair_rng = np.random.default_rng(
            np.random.SeedSequence(config.seed, spawn_key=(pair_idx,))
        )
        pair_id = f"P{pair_idx:03d}"
        dev_a, dev_b = f"{pair_id}A", f"{pair_id}B"
        anchor_a = (
            config.center_lat + pair_rng.uniform(-config.pair_spread_deg, config.pair_spread_deg),
            config.center_lon + pair_rng.uniform(-config.pair_spread_deg, config.pair_spread_deg),
        )
        anchor_b = (
            anchor_a[0] + config.member_home_offset_deg,
            anchor_a[1] + config.member_home_offset_deg,
        )
        shared_routes = [
            _make_route(pair_rng, anchor_a, config.route_extent_m, config.route_waypoints)
            for _ in range(config.routes_per_pair)
        ]
        solo_routes = {
            dev_a: [
                _make_route(pair_rng, anchor_a, config.route_extent_m, config.route_waypoints)
                for _ in range(config.routes_per_pair)
            ],
            dev_b: [
                _make_route(pair_rng, anchor_b, config.route_extent_m, config.route_waypoints)
                for _ in range(config.routes_per_pair)
            ],
        }
        # routine solo walks keep one fixed (route, start) per member
        solo_lo, solo_hi = config.solo_start_range_ms
        solo_hi_start = solo_hi - config.solo_trip_duration_ms
        routine_solo = {
            dev: (
                int(pair_rng.integers(0, config.routes_per_pair)),
                int(pair_rng.integers(solo_lo, solo_hi_start + 1)),
            )
            for dev in (dev_a, dev_b)
        }

        for day_idx in range(config.days_per_pair):
            rng = np.random.default_rng(
                np.random.SeedSequence(config.seed, spawn_key=(pair_idx, day_idx))
            )
            date = _day_date(config, day_idx)
            fixes: dict[str, list] = {dev_a: [], dev_b: []}
            positive = rng.random() < config.co_walk_probability
            window = None
            hard_negative = False

            if positive:
                start = config.co_walk_start_ms
                if config.co_walk_start_jitter_ms > 0:
                    start += int(rng.integers(0, config.co_walk_start_jitter_ms + 1))
                route = shared_routes[int(rng.integers(0, len(shared_routes)))]
                window = (start, start + config.co_walk_duration_ms)
                for dev in (dev_a, dev_b):
                    fixes[dev].extend(
                        _walk_samples(route, start, config.co_walk_duration_ms, config, rng)
                    )
            elif config.member_home_offset_deg == 0.0 and rng.random() < config.hard_negative_probability:
                # same route, disjoint times: spatial overlap without co-walking
                hard_negative = True
                route = shared_routes[int(rng.integers(0, len(shared_routes)))]
                start_a = config.co_walk_start_ms
                if config.co_walk_start_jitter_ms > 0:
                    start_a += int(rng.integers(0, config.co_walk_start_jitter_ms + 1))
                shift = int(rng.integers(config.hard_negative_shift_ms[0],
                                         config.hard_negative_shift_ms[1] + 1))
                start_b = min(start_a + shift, MS_PER_DAY - config.co_walk_duration_ms - 1)
                fixes[dev_a].extend(
                    _walk_samples(route, start_a, config.co_walk_duration_ms, config, rng)
                )
                fixes[dev_b].extend(
                    _walk_samples(route, start_b, config.co_walk_duration_ms, config, rng)
                )

            for dev in (dev_a, dev_b):
                n_solo = int(rng.integers(1, config.solo_trips_max + 1))
                for trip in range(n_solo):
                    if rng.random() < config.anomaly_probability:
                        route = _make_route(rng, anchor_a if dev == dev_a else anchor_b,
                                            config.route_extent_m, config.route_waypoints)
                        start = int(rng.integers(solo_lo, solo_hi_start + 1))
                    elif config.solo_start_mode == "routine":
                        ridx, start = routine_solo[dev]
                        route = solo_routes[dev][ridx]
                        if trip > 0:
                            continue  # routine mode: exactly one solo walk per member
                    else:
                        route = solo_routes[dev][int(rng.integers(0, config.routes_per_pair))]
                        start = int(rng.integers(solo_lo, solo_hi_start + 1))
                    fixes[dev].extend(
                        _walk_samples(route, start, config.solo_trip_duration_ms, config, rng,
                                      start_arclen_m=float(rng.uniform(0, route.length)))
                    )

            samples_a = _to_samples(dev_a, date, fixes[dev_a], config.tz_offset_minutes)
            samples_b = _to_samples(dev_b, date, fixes[dev_b], config.tz_offset_minutes)
            if not samples_a or not samples_b:
                # dropout wiped a member's day: regenerate deterministically rarely
                # happens with default settings; skip the day entirely
                continue
            pair_days.append(
                PairDay(
                    pair_id,
                    date,
                    DayTrace(dev_a, date, samples_a),
                    DayTrace(dev_b, date, samples_b),
                    positive,
                )
            )
            truth[(pair_id, date.isoformat())] = TruthRecord(
                pair_id, date, positive, window, hard_negative
            )
    return ScenarioResult(config, pair_days, truth)


# --- preset scenarios --------------------------------------------------------

def benchmark_config(seed: int = 7) -> ScenarioConfig:
    """Default end-to-end benchmark corpus: separable plus hard negatives."""
    return ScenarioConfig(seed=seed)


def disjoint_home_config(seed: int = 7, num_pairs: int = 15, days_per_pair: int = 7) -> ScenarioConfig:
    """No co-walks and members living in disjoint regions (overlap soundness)."""
    return ScenarioConfig(
        num_pairs=num_pairs,
        days_per_pair=days_per_pair,
        co_walk_probability=0.0,
        hard_negative_probability=0.0,
        member_home_offset_deg=0.02,  # ~2.2 km: boxes can never meet
        seed=seed,
    )


def routine_pair_config(seed: int = 0, days: int = 20) -> ScenarioConfig:
    """One pair, daily co-walk in a fixed window, routine solo walks elsewhere."""
    return ScenarioConfig(
        num_pairs=1,
        days_per_pair=days,
        co_walk_probability=1.0,
        co_walk_start_ms=15 * 3_600_000,  # 15:00, inside layer 4 of 5
        co_walk_duration_ms=1_800_000,
        solo_start_mode="routine",
        solo_trips_max=1,
        # keep solo walks in the morning layers so the planted window owns layer 4
        solo_start_range_ms=(6 * 3_600_000, 13 * 3_600_000),
        seed=seed,
    )


def truth_records_json(result: ScenarioResult) -> list[dict]:
    out = []
    for (pair_id, date), rec in sorted(result.truth.items()):
        out.append(
            {
                "record": "truth",
                "pair_id": pair_id,
                "local_date": date,
                "label": rec.label,
                "co_walk_window_ms": list(rec.co_walk_window_ms) if rec.co_walk_window_ms else None,
                "hard_negative": rec.hard_negative,
            }
        )
    return out
