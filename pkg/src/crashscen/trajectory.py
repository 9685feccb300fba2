"""Trajectory accuracy and criticality metrics for one scenario.

Distances used by near-miss, TTC and interaction intensity are
center-to-center; collisions are oriented bounding-rectangle overlaps
found with the separating axis test.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID_TOL = 1e-6
STILL_SPEED = 1e-6


class TrajectoryError(ValueError):
    pass


def _arr(values, n: int | None = None) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 0 and n is not None:
        a = np.full(n, float(a))
    return a


@dataclass(frozen=True, eq=False)
class AgentTrack:
    agent_id: str
    role: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    heading: np.ndarray
    length: np.ndarray
    width: np.ndarray

    def __post_init__(self) -> None:
        t = _arr(self.t)
        n = t.size
        if t.ndim != 1 or n == 0:
            raise TrajectoryError(f"{self.agent_id}: empty track")
        if self.role not in ("ego", "other"):
            raise TrajectoryError(f"{self.agent_id}: role must be 'ego' or 'other', got {self.role!r}")
        for name in ("t", "x", "y", "vx", "vy", "heading", "length", "width"):
            a = _arr(getattr(self, name), n)
            if a.shape != (n,):
                raise TrajectoryError(f"{self.agent_id}: field {name} has {a.size} samples, expected {n}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if n > 1:
            steps = np.diff(t)
            if np.any(steps <= 0):
                raise TrajectoryError(f"{self.agent_id}: timestamps must be strictly increasing")
            if np.max(np.abs(steps - steps[0])) > GRID_TOL:
                raise TrajectoryError(f"{self.agent_id}: sample spacing is not uniform")
        if np.any(self.length <= 0) or np.any(self.width <= 0):
            raise TrajectoryError(f"{self.agent_id}: vehicle dimensions must be positive")

    @classmethod
    def from_positions(
        cls,
        agent_id: str,
        role: str,
        t: Sequence[float],
        x: Sequence[float],
        y: Sequence[float],
        length: float | Sequence[float] = 4.5,
        width: float | Sequence[float] = 1.8,
        vx: Sequence[float] | None = None,
        vy: Sequence[float] | None = None,
        heading: Sequence[float] | None = None,
    ) -> AgentTrack:
        """Build a track, filling missing velocities by central differences."""
        t, x, y = _arr(t), _arr(x), _arr(y)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise TrajectoryError(f"{agent_id}: timestamps must be strictly increasing")
        if vx is None or vy is None:
            vx, vy = finite_difference_velocity(t, x, y)
        vx, vy = _arr(vx), _arr(vy)
        if heading is None:
            heading = heading_from_velocity(vx, vy)
        return cls(agent_id, role, t, x, y, vx, vy, _arr(heading, t.size), _arr(length, t.size), _arr(width, t.size))

    def __len__(self) -> int:
        return self.t.size

    @property
    def positions(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def velocities(self) -> np.ndarray:
        return np.column_stack([self.vx, self.vy])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (self.agent_id, self.role) == (other.agent_id, other.role) and all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self)[2:]
        )


def finite_difference_velocity(t: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if t.size < 2:
        return np.zeros_like(x), np.zeros_like(y)
    return np.gradient(x, t), np.gradient(y, t)


def heading_from_velocity(vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Heading along the velocity; stationary samples keep the last moving heading."""
    heading = np.zeros(vx.size)
    last = None
    for i in range(vx.size):
        if math.hypot(vx[i], vy[i]) > STILL_SPEED:
            last = math.atan2(vy[i], vx[i])
        heading[i] = last if last is not None else 0.0
    first_moving = next((i for i in range(vx.size) if math.hypot(vx[i], vy[i]) > STILL_SPEED), None)
    if first_moving is not None:
        heading[:first_moving] = heading[first_moving]
    return heading


@dataclass(frozen=True)
class TrajectorySet:
    ego: AgentTrack
    others: tuple[AgentTrack, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "others", tuple(self.others))
        if self.ego.role != "ego":
            raise TrajectoryError("ego track must have role 'ego'")
        for o in self.others:
            if o.role != "other":
                raise TrajectoryError(f"{o.agent_id}: only one ego track is allowed")
            if o.t.shape != self.ego.t.shape or np.max(np.abs(o.t - self.ego.t)) > GRID_TOL:
                raise TrajectoryError(f"{o.agent_id}: timestamps differ from the ego grid")

    @property
    def t(self) -> np.ndarray:
        return self.ego.t

    @property
    def steps(self) -> int:
        return self.ego.t.size

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if self.steps > 1 else 0.0

    @property
    def agents(self) -> tuple[AgentTrack, ...]:
        return (self.ego,) + self.others

    @classmethod
    def from_tracks(cls, tracks: Iterable[AgentTrack]) -> TrajectorySet:
        tracks = list(tracks)
        egos = [tr for tr in tracks if tr.role == "ego"]
        if len(egos) != 1:
            raise TrajectoryError(f"expected exactly one ego track, found {len(egos)}")
        return cls(egos[0], tuple(tr for tr in tracks if tr.role != "ego"))


@dataclass(frozen=True)
class CriticalityConfig:
    tau_ttc: float = 3.0
    tau_pet: float = 1.5
    theta_c: float = 0.3
    theta_ttc: float = 1.0
    theta_pet: float = 0.5
    theta_d: float = 2.0
    w1: float = 5
    w2: float = 5
    w3: float = 4
    w4: float = 3
    delta_safety: float = 1.0
    d_min_floor: float = 0.5
    interaction_range: float = 20.0
    conflict_cell: float = 2.0
    ttc_mode: str = "closing"

    def __post_init__(self) -> None:
        for name in ("tau_ttc", "tau_pet", "theta_c", "theta_ttc", "theta_pet", "theta_d",
                     "delta_safety", "d_min_floor", "interaction_range", "conflict_cell"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise ValueError("weights must be nonnegative")
        if self.ttc_mode not in ("closing", "projected"):
            raise ValueError("ttc_mode must be 'closing' or 'projected'")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)

    @classmethod
    def from_json(cls, path: str | Path) -> CriticalityConfig:
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# -- displacement --------------------------------------------------------------


def _check_same_grid(a: AgentTrack, b: AgentTrack) -> None:
    if a.t.shape != b.t.shape or np.max(np.abs(a.t - b.t)) > GRID_TOL:
        raise TrajectoryError(f"tracks {a.agent_id!r} and {b.agent_id!r} are on different time grids")


def displacement(predicted: AgentTrack, reference: AgentTrack) -> np.ndarray:
    _check_same_grid(predicted, reference)
    return np.hypot(predicted.x - reference.x, predicted.y - reference.y)


def ade(predicted: AgentTrack, reference: AgentTrack) -> float:
    return float(np.mean(displacement(predicted, reference)))


def fde(predicted: AgentTrack, reference: AgentTrack) -> float:
    return float(displacement(predicted, reference)[-1])


# -- collision -----------------------------------------------------------------


def box_corners(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals; touching is not overlap."""
    for poly in (a, b):
        for i in range(len(poly)):
            edge = poly[(i + 1) % len(poly)] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if max(pa.min(), pb.min()) >= min(pa.max(), pb.max()):
                return False
    return True


def _corners_at(track: AgentTrack, i: int) -> np.ndarray:
    return box_corners(track.x[i], track.y[i], track.heading[i], track.length[i], track.width[i])


def collision_flags(ts: TrajectorySet) -> np.ndarray:
    if not ts.others:
        raise TrajectoryError("collision metrics need at least one other agent")
    flags = np.zeros(ts.steps, dtype=bool)
    for i in range(ts.steps):
        ego_box = _corners_at(ts.ego, i)
        flags[i] = any(boxes_overlap(ego_box, _corners_at(o, i)) for o in ts.others)
    return flags


def collision_probability(ts: TrajectorySet) -> float:
    return float(np.mean(collision_flags(ts)))


def center_distances(ts: TrajectorySet) -> np.ndarray:
    """Array of shape (others, steps) with ego-to-agent center distances."""
    if not ts.others:
        return np.zeros((0, ts.steps))
    return np.stack([np.hypot(o.x - ts.ego.x, o.y - ts.ego.y) for o in ts.others])


def near_miss_probability(ts: TrajectorySet, cfg: CriticalityConfig = CriticalityConfig()) -> float:
    if not ts.others:
        raise TrajectoryError("near-miss metrics need at least one other agent")
    d = center_distances(ts).min(axis=0)
    return float(np.mean(d < ts.ego.length + cfg.delta_safety))


# -- time to collision ---------------------------------------------------------


def ttc_series(ts: TrajectorySet, cfg: CriticalityConfig = CriticalityConfig()) -> dict[str, np.ndarray]:
    """Per-agent TTC; ``inf`` marks steps with no relative motion."""
    if not ts.others:
        raise TrajectoryError("TTC needs at least one other agent")
    out = {}
    for o in ts.others:
        rx, ry = o.x - ts.ego.x, o.y - ts.ego.y
        vrx, vry = ts.ego.vx - o.vx, ts.ego.vy - o.vy
        d = np.hypot(rx, ry)
        if cfg.ttc_mode == "closing":
            speed = np.hypot(vrx, vry)
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                speed = np.where(d > 0, (rx * vrx + ry * vry) / d, np.hypot(vrx, vry))
        ttc = np.full(ts.steps, np.inf)
        moving = speed >= STILL_SPEED
        ttc[moving] = d[moving] / speed[moving]
        out[o.agent_id] = ttc
    return out


def critical_ttc_events(series: dict[str, np.ndarray], cfg: CriticalityConfig = CriticalityConfig()) -> list[tuple[str, int, float]]:
    return [(aid, int(i), float(v[i])) for aid, v in series.items() for i in np.flatnonzero(v < cfg.tau_ttc)]


# -- post-encroachment time ----------------------------------------------------


@dataclass(frozen=True)
class PetEvent:
    cell: tuple[int, int]
    agent_id: str
    ego_interval: tuple[float, float]
    other_interval: tuple[float, float]
    pet: float
    critical: bool

    def to_dict(self) -> dict:
        return asdict(self)


def cell_of(x: float, y: float, size: float) -> tuple[int, int]:
    return (math.floor(x / size), math.floor(y / size))


def occupancy_intervals(track: AgentTrack, size: float) -> dict[tuple[int, int], list[tuple[float, float]]]:
    """Maximal runs of consecutive samples whose center lies in the same cell."""
    runs: dict[tuple[int, int], list[tuple[float, float]]] = defaultdict(list)
    current = None
    start = 0
    for i in range(len(track)):
        c = cell_of(track.x[i], track.y[i], size)
        if c != current:
            if current is not None:
                runs[current].append((float(track.t[start]), float(track.t[i - 1])))
            current, start = c, i
    if current is not None:
        runs[current].append((float(track.t[start]), float(track.t[-1])))
    return runs


def pet_between(ego_iv: tuple[float, float], other_iv: tuple[float, float]) -> float | None:
    """Gap between the first vehicle leaving a cell and the second entering it.

    Returns ``None`` when the occupancy intervals overlap (a shared-cell
    encounter belongs to the collision path, not PET).
    """
    e_in, e_out = ego_iv
    o_in, o_out = other_iv
    if o_in > e_out:
        return abs(e_out - o_in)
    if e_in > o_out:
        return abs(o_out - e_in)
    return None


def pet_events(ts: TrajectorySet, cfg: CriticalityConfig = CriticalityConfig()) -> list[PetEvent]:
    ego_runs = occupancy_intervals(ts.ego, cfg.conflict_cell)
    events = []
    for o in ts.others:
        other_runs = occupancy_intervals(o, cfg.conflict_cell)
        for cell in sorted(ego_runs.keys() & other_runs.keys()):
            for e_iv in ego_runs[cell]:
                for o_iv in other_runs[cell]:
                    pet = pet_between(e_iv, o_iv)
                    if pet is not None:
                        events.append(PetEvent(cell, o.agent_id, e_iv, o_iv, pet, pet < cfg.tau_pet))
    return events


# -- interaction intensity -----------------------------------------------------


def interaction_intensity(ts: TrajectorySet, cfg: CriticalityConfig = CriticalityConfig()) -> np.ndarray:
    d = center_distances(ts)
    if d.size == 0:
        return np.zeros(ts.steps)
    in_range = d <= cfg.interaction_range
    return np.where(in_range, 1.0 / np.maximum(d, cfg.d_min_floor), 0.0).sum(axis=0)


# -- composite score -----------------------------------------------------------

LEVELS = ("Critical", "High", "Moderate", "Low")


def emergency_level(score: float) -> str:
    if score >= 10:
        return "Critical"
    if score >= 6:
        return "High"
    if score >= 3:
        return "Moderate"
    return "Low"


def emergency_score(
    p_collision: float,
    min_ttc: float,
    min_pet: float,
    min_distance: float,
    cfg: CriticalityConfig = CriticalityConfig(),
) -> tuple[float, str]:
    indicators = (
        p_collision > cfg.theta_c,
        min_ttc < cfg.theta_ttc,
        min_pet < cfg.theta_pet,
        min_distance < cfg.theta_d,
    )
    score = sum(w for w, fired in zip(cfg.weights, indicators) if fired)
    if all(float(w).is_integer() for w in cfg.weights):
        score = int(score)
    return score, emergency_level(score)


def _finite_mean(values: np.ndarray) -> float | None:
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else None


@dataclass
class CriticalityReport:
    p_collision: float
    p_near_miss: float
    min_distance: float
    min_ttc: float
    avg_ttc: float | None
    avg_ttc_critical: float | None
    min_pet: float
    avg_pet: float | None
    avg_interaction: float
    score: float
    level: str
    ttc_critical_events: int = 0
    pet_critical_events: int = 0
    ade: float | None = None
    fde: float | None = None
    series: dict = field(default_factory=dict, repr=False)

    def to_dict(self, include_series: bool = False) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "series"}
        for k, v in out.items():
            if isinstance(v, float) and math.isinf(v):
                out[k] = None if k in ("min_ttc", "min_pet") else v
        if include_series:
            out["series"] = self.series
        return out

    @classmethod
    def from_dict(cls, data: dict) -> CriticalityReport:
        data = dict(data)
        data.pop("series", None)
        for k in ("min_ttc", "min_pet"):
            if data.get(k) is None:
                data[k] = math.inf
        return cls(**data)


def evaluate(
    ts: TrajectorySet,
    cfg: CriticalityConfig = CriticalityConfig(),
    reference: TrajectorySet | None = None,
) -> CriticalityReport:
    flags = collision_flags(ts)
    dists = center_distances(ts)
    min_per_step = dists.min(axis=0)
    ttc = ttc_series(ts, cfg)
    all_ttc = np.concatenate(list(ttc.values()))
    critical_ttc = all_ttc[all_ttc < cfg.tau_ttc]
    pets = pet_events(ts, cfg)
    pet_values = np.array([p.pet for p in pets])
    intensity = interaction_intensity(ts, cfg)

    p_c = float(flags.mean())
    min_ttc = float(all_ttc.min())
    min_pet = float(pet_values.min()) if pets else math.inf
    d_min = float(min_per_step.min())
    score, level = emergency_score(p_c, min_ttc, min_pet, d_min, cfg)
    report = CriticalityReport(
        p_collision=p_c,
        p_near_miss=float(np.mean(min_per_step < ts.ego.length + cfg.delta_safety)),
        min_distance=d_min,
        min_ttc=min_ttc,
        avg_ttc=_finite_mean(all_ttc),
        avg_ttc_critical=_finite_mean(critical_ttc),
        min_pet=min_pet,
        avg_pet=float(pet_values.mean()) if pets else None,
        avg_interaction=float(intensity.mean()),
        score=score,
        level=level,
        ttc_critical_events=int(critical_ttc.size),
        pet_critical_events=sum(p.critical for p in pets),
        series={
            "t": ts.t.tolist(),
            "collision": flags.astype(int).tolist(),
            "min_distance": min_per_step.tolist(),
            "interaction": intensity.tolist(),
            "ttc": {k: [None if math.isinf(v) else v for v in s.tolist()] for k, s in ttc.items()},
        },
    )
    if reference is not None:
        report.ade = ade(ts.ego, reference.ego)
        report.fde = fde(ts.ego, reference.ego)
    return report


# -- file formats --------------------------------------------------------------

CSV_COLUMNS = ("t", "agent_id", "role", "x", "y", "vx", "vy", "heading", "length", "width")


def _opt(v) -> float | None:
    if v is None or (isinstance(v, str) and not v.strip()):
        return None
    return float(v)


def _tracks_from_rows(rows: Iterable[dict]) -> TrajectorySet:
    grouped: dict[str, list[dict]] = defaultdict(list)
    for row in rows:
        grouped[str(row["agent_id"])].append(row)
    tracks = []
    for aid, samples in grouped.items():
        samples.sort(key=lambda r: float(r["t"]))
        roles = {r["role"] for r in samples}
        if len(roles) != 1:
            raise TrajectoryError(f"{aid}: inconsistent role values {sorted(roles)}")
        col = lambda k: [_opt(r.get(k)) for r in samples]  # noqa: E731
        vx, vy, hd = col("vx"), col("vy"), col("heading")
        tracks.append(
            AgentTrack.from_positions(
                aid,
                roles.pop(),
                col("t"),
                col("x"),
                col("y"),
                col("length"),
                col("width"),
                vx=None if None in vx or None in vy else vx,
                vy=None if None in vx or None in vy else vy,
                heading=None if None in hd else hd,
            )
        )
    return TrajectorySet.from_tracks(tracks)


def read_trajectory_csv(path: str | Path) -> TrajectorySet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise TrajectoryError("trajectory CSV has no header")
        missing = {"t", "agent_id", "role", "x", "y", "length", "width"} - set(reader.fieldnames)
        if missing:
            raise TrajectoryError(f"trajectory CSV lacks columns {sorted(missing)}")
        return _tracks_from_rows(list(reader))


def read_trajectory_json(path: str | Path) -> TrajectorySet:
    data = json.loads(Path(path).read_text())
    rows = []
    for agent in data["agents"]:
        for s in agent["samples"]:
            rows.append({"agent_id": agent["agent_id"], "role": agent["role"], **s})
    return _tracks_from_rows(rows)


def read_trajectories(path: str | Path) -> TrajectorySet:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return read_trajectory_json(path)
    return read_trajectory_csv(path)


def trajectory_rows(ts: TrajectorySet) -> list[dict]:
    rows = []
    for tr in ts.agents:
        for i in range(len(tr)):
            rows.append({
                "t": float(tr.t[i]), "agent_id": tr.agent_id, "role": tr.role,
                "x": float(tr.x[i]), "y": float(tr.y[i]), "vx": float(tr.vx[i]), "vy": float(tr.vy[i]),
                "heading": float(tr.heading[i]), "length": float(tr.length[i]), "width": float(tr.width[i]),
            })
    return rows


def write_trajectory_csv(ts: TrajectorySet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in trajectory_rows(ts):
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def write_trajectory_json(ts: TrajectorySet, path: str | Path) -> None:
    agents = []
    for tr in ts.agents:
        samples = [
            {k: float(getattr(tr, k)[i]) for k in ("t", "x", "y", "vx", "vy", "heading", "length", "width")}
            for i in range(len(tr))
        ]
        agents.append({"agent_id": tr.agent_id, "role": tr.role, "samples": samples})
    Path(path).write_text(json.dumps({"agents": agents}, indent=2))
