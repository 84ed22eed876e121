"""Seeded synthetic herds with a planted pre-clinical behavior signature.

Each cow gets its own baseline per channel plus i.i.d. daily noise. Case
cows drift away from their baseline over ``lead_days`` before day 0 and stay
shifted afterwards; each case has a matched healthy twin sharing parity,
reproduction status and calving date.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from ._seeding import check_seed
from .herd_data import (
    CHANNELS,
    PROPORTION_CHANNELS,
    BehaviorDay,
    CowProfile,
    LesionObservation,
    write_behavior,
    write_lesions,
    write_profiles,
)

# (low, high) range of per-cow baseline means, and day-to-day noise std
DEFAULT_BASELINES = {
    "non_active": (0.40, 0.46, 0.02),
    "active": (0.20, 0.24, 0.015),
    "highly_active": (0.04, 0.06, 0.008),
    "eating": (0.18, 0.22, 0.015),
    "ruminating": (0.30, 0.36, 0.02),
    "ear_temp": (37.8, 38.6, 0.3),
}

# lactation periods as DIM ranges used when drawing calving dates
_PERIOD_DIM = {"early": (10, 100), "mid": (101, 199), "late": (200, 300)}


@dataclass
class SynthConfig:
    """Generator settings.

    ``shifts`` maps channel -> shift in units of that channel's noise std,
    applied fully from day 0 on and ramped in over ``lead_days`` before it.
    ``noise_scale`` multiplies every channel's noise std.
    """

    n_cases: int = 21
    n_extra_healthy: int = 0
    trial_days: int = 60
    start_date: date = date(2023, 1, 2)
    baselines: dict = field(default_factory=lambda: dict(DEFAULT_BASELINES))
    noise_scale: float = 1.0
    lead_days: int = 4
    shifts: dict = field(default_factory=lambda: {"active": -3.0, "non_active": 3.0})
    ramp: str = "linear"
    lesion_days: int = 5
    digressing_days: int = 3
    min_history: int = 14
    seed: int = 0

    def validate(self) -> None:
        if self.n_cases < 0 or self.n_extra_healthy < 0:
            raise ValueError("cow counts must be >= 0")
        if self.lead_days < 0:
            raise ValueError("lead_days must be >= 0")
        if self.ramp not in ("linear", "step"):
            raise ValueError(f"ramp must be 'linear' or 'step', got {self.ramp!r}")
        if self.lesion_days < 2:
            raise ValueError("lesion_days must be >= 2 so episodes enroll")
        if self.min_history < 7:
            raise ValueError("min_history must be >= 7 clean sensor days")
        unknown = set(self.shifts) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels in shifts: {sorted(unknown)}")
        if not all(np.isfinite(v) for v in self.shifts.values()):
            raise ValueError("shifts must be finite")
        if set(self.baselines) != set(CHANNELS):
            raise ValueError("baselines must cover every channel")
        if self.min_history > self.trial_days - self.lesion_days:
            raise ValueError(
                f"infeasible: day 0 needs {self.min_history} prior days and {self.lesion_days} lesion days "
                f"within a {self.trial_days}-day trial"
            )
        check_seed(self.seed)


def shift_fraction(days_before_day0: int, lead_days: int, ramp: str) -> float:
    """Share of the full shift applied ``days_before_day0`` days before day 0
    (zero or negative means day 0 or later)."""
    d = days_before_day0
    if d <= 0:
        return 1.0
    if d >= lead_days:
        return 0.0
    return 1.0 - d / lead_days if ramp == "linear" else 1.0


@dataclass
class SynthHerd:
    behavior: list[BehaviorDay]
    lesions: list[LesionObservation]
    profiles: list[CowProfile]
    case_day0: dict[str, date]
    control_of: dict[str, str]

    def csv_texts(self) -> tuple[str, str, str]:
        out = []
        for writer, records in ((write_behavior, self.behavior), (write_lesions, self.lesions), (write_profiles, self.profiles)):
            buf = io.StringIO()
            writer(records, buf)
            out.append(buf.getvalue())
        return tuple(out)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, text in zip(("behavior", "lesions", "profiles"), self.csv_texts()):
            p = out_dir / f"{name}.csv"
            p.write_text(text, encoding="utf-8")
            paths[name] = p
        return paths


def build(config: SynthConfig) -> SynthHerd:
    config.validate()
    rng = np.random.default_rng(config.seed)
    days = [config.start_date + timedelta(days=i) for i in range(config.trial_days)]
    n_cows = 2 * config.n_cases + config.n_extra_healthy
    width = max(3, len(str(n_cows)))
    ids = [f"cow{i + 1:0{width}d}" for i in rng.permutation(n_cows)]
    case_ids = ids[: config.n_cases]
    control_ids = ids[config.n_cases: 2 * config.n_cases]
    extra_ids = ids[2 * config.n_cases:]

    profiles: list[CowProfile] = []
    case_day0: dict[str, date] = {}
    used_calving: set[date] = set()
    last_day0 = config.trial_days - config.lesion_days
    for case, control in zip(case_ids, control_ids):
        day0 = days[int(rng.integers(config.min_history, last_day0 + 1))]
        parity = int(rng.integers(1, 6))
        repro = ("open", "pregnant")[int(rng.integers(2))]
        period = ("early", "mid", "late")[int(rng.integers(3))]
        lo, hi = _PERIOD_DIM[period]
        # distinct calving dates make each case's own twin its unique nearest-DIM match
        while True:
            calving = day0 - timedelta(days=int(rng.integers(lo, hi + 1)))
            if calving not in used_calving:
                break
        used_calving.add(calving)
        case_day0[case] = day0
        profiles.append(CowProfile(case, parity, repro, calving))
        profiles.append(CowProfile(control, parity, repro, calving))
    for cow in extra_ids:
        calving = config.start_date - timedelta(days=int(rng.integers(10, 300)))
        profiles.append(CowProfile(cow, int(rng.integers(1, 6)), ("open", "pregnant")[int(rng.integers(2))], calving))
    profiles.sort(key=lambda p: p.cow_id)

    behavior: list[BehaviorDay] = []
    lesions: list[LesionObservation] = []
    noise = np.array([config.baselines[c][2] for c in CHANNELS]) * config.noise_scale
    shift = np.array([config.shifts.get(c, 0.0) for c in CHANNELS]) * noise
    prop = np.array([c in PROPORTION_CHANNELS for c in CHANNELS])
    decimals = np.where(prop, 4, 2)
    for cow in sorted(ids):
        base = np.array([rng.uniform(config.baselines[c][0], config.baselines[c][1]) for c in CHANNELS])
        eps = rng.standard_normal((len(days), len(CHANNELS))) * noise
        day0 = case_day0.get(cow)
        for t, day in enumerate(days):
            vals = base + eps[t]
            if day0 is not None:
                vals = vals + shift * shift_fraction((day0 - day).days, config.lead_days, config.ramp)
            vals = np.where(prop, np.clip(vals, 0.0, 1.0), vals)
            vals = [round(float(v), int(d)) for v, d in zip(vals, decimals)]
            behavior.append(BehaviorDay(cow, day, *vals))
            status, size = "none", "none"
            if day0 is not None:
                since = (day - day0).days
                if 0 <= since < config.lesion_days:
                    status = "active"
                    size = ("small", "medium", "large")[int(rng.integers(3))]
                elif config.lesion_days <= since < config.lesion_days + config.digressing_days:
                    status, size = "digressing", "small"
            lesions.append(LesionObservation(cow, day, status, size))
    return SynthHerd(behavior, lesions, profiles, case_day0, dict(zip(case_ids, control_ids)))


def generate(config: SynthConfig) -> tuple[str, str, str]:
    """CSV texts ``(behavior, lesions, profiles)`` for ``config``."""
    return build(config).csv_texts()
