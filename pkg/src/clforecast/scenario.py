"""Scenario data model, on-disk format and the flat CSV log importer.

A scenario holds a static map and one state track per agent.  Track states
are stored as an ``(T, 6)`` float array with columns
``[x, y, heading, vx, vy, valid]`` where ``T = t_in_steps + 1 + t_pred_steps``:
``t_in_steps`` history steps, the current step, then the future.  Units are
meters, radians, seconds and m/s throughout.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

FORMAT_VERSION = 1
DEFAULT_LENGTH = 4.5
DEFAULT_WIDTH = 2.0
SIG_DIGITS = 9

STATE_COLUMNS = ("x", "y", "heading", "vx", "vy", "valid")


class ScenarioParseError(ValueError):
    """The file is not a well-formed scenario document."""


class ScenarioValidationError(ValueError):
    """A scenario violates one of the data-model invariants."""


class PolylineKind(str, Enum):
    LANE_CENTER = "lane_center"
    BOUNDARY = "boundary"
    CROSSWALK = "crosswalk"


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w <= -math.pi, w + 2.0 * math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def quantize(x):
    """Round to the serialized precision (9 significant digits)."""
    if isinstance(x, np.ndarray):
        return np.vectorize(quantize, otypes=[float])(x) if x.size else x.astype(float)
    return float(format(float(x), f".{SIG_DIGITS}g"))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


class AgentState(NamedTuple):
    position: tuple[float, float]
    heading: float
    velocity: tuple[float, float]
    valid: bool


@dataclass(frozen=True, eq=False)
class MapPolyline:
    id: int
    points: np.ndarray
    kind: PolylineKind

    def __post_init__(self):
        object.__setattr__(self, "points", _readonly(np.asarray(self.points, dtype=float).reshape(-1, 2)))
        object.__setattr__(self, "kind", PolylineKind(self.kind))

    def __eq__(self, other):
        if not isinstance(other, MapPolyline):
            return NotImplemented
        return self.id == other.id and self.kind == other.kind and np.array_equal(self.points, other.points)


@dataclass(frozen=True, eq=False)
class AgentTrack:
    agent_id: int
    is_ego: bool
    length: float
    width: float
    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", _readonly(np.asarray(self.states, dtype=float).reshape(-1, 6)))

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, 0:2]

    @property
    def valid(self) -> np.ndarray:
        return self.states[:, 5] > 0.5

    def state(self, step: int) -> AgentState:
        x, y, h, vx, vy, v = self.states[step]
        return AgentState((x, y), h, (vx, vy), bool(v > 0.5))

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.is_ego == other.is_ego
            and self.length == other.length
            and self.width == other.width
            and np.array_equal(self.states, other.states)
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    scenario_id: str
    dt: float
    t_in_steps: int
    t_pred_steps: int
    map: tuple[MapPolyline, ...] = ()
    tracks: tuple[AgentTrack, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "map", tuple(self.map))
        object.__setattr__(self, "tracks", tuple(self.tracks))
        validate_scenario(self)

    @property
    def n_steps(self) -> int:
        return self.t_in_steps + 1 + self.t_pred_steps

    @property
    def current_step(self) -> int:
        """Index of "now" in every track's state array."""
        return self.t_in_steps

    @property
    def ego_index(self) -> int:
        return next(i for i, t in enumerate(self.tracks) if t.is_ego)

    @property
    def ego(self) -> AgentTrack:
        return self.tracks[self.ego_index]

    def ordered_tracks(self) -> list[AgentTrack]:
        """Tracks with the ego first, surrounding agents in file order."""
        ego = self.ego_index
        return [self.tracks[ego]] + [t for i, t in enumerate(self.tracks) if i != ego]

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.scenario_id == other.scenario_id
            and self.dt == other.dt
            and self.t_in_steps == other.t_in_steps
            and self.t_pred_steps == other.t_pred_steps
            and self.map == other.map
            and self.tracks == other.tracks
        )


def validate_scenario(s: Scenario) -> None:
    if not (s.dt > 0 and math.isfinite(s.dt)):
        raise ScenarioValidationError(f"scenario {s.scenario_id}: dt must be positive, got {s.dt}")
    if s.t_in_steps < 1 or s.t_pred_steps < 1:
        raise ScenarioValidationError(f"scenario {s.scenario_id}: t_in_steps and t_pred_steps must be >= 1")
    for poly in s.map:
        pts = poly.points
        if len(pts) < 2:
            raise ScenarioValidationError(f"polyline {poly.id}: needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ScenarioValidationError(f"polyline {poly.id}: non-finite coordinate")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ScenarioValidationError(f"polyline {poly.id}: repeated consecutive point")
    n_ego = sum(1 for t in s.tracks if t.is_ego)
    if n_ego != 1:
        raise ScenarioValidationError(f"scenario {s.scenario_id}: expected exactly one ego track, found {n_ego}")
    ids = [t.agent_id for t in s.tracks]
    if len(set(ids)) != len(ids):
        raise ScenarioValidationError(f"scenario {s.scenario_id}: duplicate agent_id")
    for t in s.tracks:
        where = f"agent {t.agent_id}"
        if not (t.length > 0 and t.width > 0):
            raise ScenarioValidationError(f"{where}: length and width must be positive")
        if t.states.shape != (s.n_steps, 6):
            raise ScenarioValidationError(
                f"{where}: states has {t.states.shape[0]} rows, expected {s.n_steps}"
            )
        valid = t.valid
        if not np.all(np.isin(t.states[:, 5], (0.0, 1.0))):
            raise ScenarioValidationError(f"{where}: valid column must be 0 or 1")
        if not np.all(np.isfinite(t.states[valid, :5])):
            raise ScenarioValidationError(f"{where}: non-finite value in a valid state")
        h = t.states[valid, 2]
        if np.any(h <= -math.pi) or np.any(h > math.pi):
            raise ScenarioValidationError(f"{where}: heading outside (-pi, pi]")
        idx = np.flatnonzero(valid)
        if idx.size and idx[-1] - idx[0] + 1 != idx.size:
            raise ScenarioValidationError(f"{where}: gap in valid states")
        if t.is_ego and not valid.all():
            raise ScenarioValidationError(f"{where}: ego track must be valid at every step")


class GroundTruth(NamedTuple):
    ego: np.ndarray  # (T_pred, 2)
    scene_ids: tuple[int, ...]
    scene: np.ndarray  # (A-1, T_pred, 2)
    scene_valid: np.ndarray  # (A-1, T_pred) bool


def extract_ground_truth(s: Scenario) -> GroundTruth:
    fut = slice(s.current_step + 1, s.n_steps)
    tracks = s.ordered_tracks()
    others = tracks[1:]
    scene = np.stack([t.positions[fut] for t in others]) if others else np.zeros((0, s.t_pred_steps, 2))
    valid = np.stack([t.valid[fut] for t in others]) if others else np.zeros((0, s.t_pred_steps), bool)
    return GroundTruth(
        ego=np.array(tracks[0].positions[fut]),
        scene_ids=tuple(t.agent_id for t in others),
        scene=np.where(valid[..., None], scene, 0.0),
        scene_valid=valid,
    )


# ---------------------------------------------------------------------------
# serialization


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ScenarioValidationError(f"cannot serialize non-finite number {x}")
    q = float(format(x, f".{SIG_DIGITS}g"))
    return repr(q) if q != 0.0 else "0.0"


def dumps_scenario(s: Scenario) -> str:
    """Canonical text form. Numbers carry 9 significant digits."""
    out = ["{"]
    out.append(f'  "format_version": {FORMAT_VERSION},')
    out.append(f'  "scenario_id": {json.dumps(s.scenario_id)},')
    out.append(f'  "dt": {_num(s.dt)},')
    out.append(f'  "t_in_steps": {int(s.t_in_steps)},')
    out.append(f'  "t_pred_steps": {int(s.t_pred_steps)},')
    polys = []
    for p in s.map:
        pts = ", ".join(f"[{_num(x)}, {_num(y)}]" for x, y in p.points)
        polys.append(f'    {{"id": {int(p.id)}, "kind": "{p.kind.value}", "points": [{pts}]}}')
    out.append('  "map": [' + ("\n" + ",\n".join(polys) + "\n  " if polys else "") + "],")
    tracks = []
    for t in s.tracks:
        rows = ",\n".join(
            "        [" + ", ".join(_num(v) for v in row[:5]) + (", true]" if row[5] > 0.5 else ", false]")
            for row in t.states
        )
        tracks.append(
            "    {\n"
            f'      "agent_id": {int(t.agent_id)},\n'
            f'      "is_ego": {"true" if t.is_ego else "false"},\n'
            f'      "length": {_num(t.length)},\n'
            f'      "width": {_num(t.width)},\n'
            f'      "states": [\n{rows}\n      ]\n'
            "    }"
        )
    out.append('  "tracks": [' + ("\n" + ",\n".join(tracks) + "\n  " if tracks else "") + "]")
    out.append("}")
    return "\n".join(out) + "\n"


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(s), encoding="utf-8")


_TOP_KEYS = {"format_version", "scenario_id", "dt", "t_in_steps", "t_pred_steps", "map", "tracks"}
_POLY_KEYS = {"id", "kind", "points"}
_TRACK_KEYS = {"agent_id", "is_ego", "length", "width", "states"}


def _no_duplicates(pairs):
    d = {}
    for k, v in pairs:
        if k in d:
            raise ScenarioParseError(f"duplicate key {k!r}")
        d[k] = v
    return d


def _check_keys(obj, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ScenarioParseError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ScenarioParseError(f"{where}: unknown field(s) {unknown}")
    missing = sorted(allowed - set(obj))
    if missing:
        raise ScenarioParseError(f"{where}: missing field(s) {missing}")


def _real(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioParseError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioParseError(f"{where}: expected an integer, got {v!r}")
    return v


def loads_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(f"malformed document: {e}") from e
    _check_keys(doc, _TOP_KEYS, "scenario")
    if doc["format_version"] != FORMAT_VERSION:
        raise ScenarioParseError(f"unsupported format_version {doc['format_version']!r}")
    if not isinstance(doc["scenario_id"], str):
        raise ScenarioParseError("scenario_id must be a string")
    polys = []
    for i, p in enumerate(doc["map"]):
        where = f"map[{i}]"
        _check_keys(p, _POLY_KEYS, where)
        try:
            kind = PolylineKind(p["kind"])
        except ValueError:
            raise ScenarioParseError(f"{where}: unknown polyline kind {p['kind']!r}") from None
        pts = p["points"]
        if not isinstance(pts, list) or any(not isinstance(q, list) or len(q) != 2 for q in pts):
            raise ScenarioParseError(f"{where}: points must be a list of [x, y]")
        pts = [[_real(a, where), _real(b, where)] for a, b in pts]
        polys.append(MapPolyline(_int(p["id"], where), np.array(pts).reshape(-1, 2), kind))
    tracks = []
    for i, t in enumerate(doc["tracks"]):
        where = f"tracks[{i}]"
        _check_keys(t, _TRACK_KEYS, where)
        if not isinstance(t["is_ego"], bool):
            raise ScenarioParseError(f"{where}: is_ego must be a boolean")
        rows = []
        for k, row in enumerate(t["states"]):
            w = f"{where}.states[{k}]"
            if not isinstance(row, list) or len(row) != 6 or not isinstance(row[5], bool):
                raise ScenarioParseError(f"{w}: expected [x, y, heading, vx, vy, valid]")
            rows.append([_real(v, w) for v in row[:5]] + [1.0 if row[5] else 0.0])
        tracks.append(
            AgentTrack(
                agent_id=_int(t["agent_id"], where),
                is_ego=t["is_ego"],
                length=_real(t["length"], where),
                width=_real(t["width"], where),
                states=np.array(rows, dtype=float).reshape(-1, 6),
            )
        )
    return Scenario(
        scenario_id=doc["scenario_id"],
        dt=_real(doc["dt"], "dt"),
        t_in_steps=_int(doc["t_in_steps"], "t_in_steps"),
        t_pred_steps=_int(doc["t_pred_steps"], "t_pred_steps"),
        map=polys,
        tracks=tracks,
    )


def load_scenario(path) -> Scenario:
    return loads_scenario(Path(path).read_text(encoding="utf-8"))


def canonicalize(s: Scenario) -> Scenario:
    """Return ``s`` with every float rounded to the serialized precision."""
    return loads_scenario(dumps_scenario(s))


# ---------------------------------------------------------------------------
# flat CSV import

CSV_COLUMNS = ("scenario_id", "agent_id", "step", "x", "y", "heading", "vx", "vy", "is_ego", "length", "width")


def import_csv_log(
    path,
    dt: float = 0.5,
    t_in_steps: int = 2,
    t_pred_steps: int = 12,
) -> list[Scenario]:
    """Read a flat CSV log into scenarios, one per ``scenario_id``.

    ``step`` counts from 0 at the oldest history frame.  Steps missing for an
    agent become invalid states.  Empty ``length``/``width`` fall back to the
    4.5 m x 2.0 m vehicle default.  Maps are not part of the CSV log.
    """
    n_steps = t_in_steps + 1 + t_pred_steps
    grouped: dict[str, dict[int, dict]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != set(CSV_COLUMNS):
            raise ScenarioParseError(f"CSV header must be exactly {list(CSV_COLUMNS)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            where = f"line {lineno}"
            try:
                aid = int(row["agent_id"])
                step = int(row["step"])
                vals = [float(row[c]) for c in ("x", "y", "heading", "vx", "vy")]
                is_ego = row["is_ego"].strip().lower() in ("1", "true", "yes")
                length = float(row["length"]) if row["length"].strip() else DEFAULT_LENGTH
                width = float(row["width"]) if row["width"].strip() else DEFAULT_WIDTH
            except (TypeError, ValueError) as e:
                raise ScenarioParseError(f"{where}: {e}") from e
            if not 0 <= step < n_steps:
                raise ScenarioParseError(f"{where}: step {step} outside [0, {n_steps})")
            agents = grouped.setdefault(row["scenario_id"], {})
            a = agents.setdefault(aid, {"is_ego": is_ego, "length": length, "width": width, "rows": {}})
            if step in a["rows"]:
                raise ScenarioParseError(f"{where}: duplicate step {step} for agent {aid}")
            vals[2] = wrap_angle(vals[2])
            a["rows"][step] = vals + [1.0]
    out = []
    for sid, agents in grouped.items():
        tracks = []
        for aid, a in agents.items():
            states = np.zeros((n_steps, 6))
            for k, v in a["rows"].items():
                states[k] = v
            tracks.append(AgentTrack(aid, a["is_ego"], a["length"], a["width"], states))
        out.append(Scenario(sid, dt, t_in_steps, t_pred_steps, (), tracks))
    return out


def states_from_positions(
    positions: np.ndarray, dt: float, prev: Sequence[float] | None = None, valid: Iterable[bool] | None = None
) -> np.ndarray:
    """Build kinematically consistent state rows from a position sequence.

    Velocity is the backward difference over ``dt`` and heading its angle;
    ``prev`` supplies the position one step before ``positions[0]``.
    """
    positions = np.asarray(positions, dtype=float)
    prev_pt = positions[0] if prev is None else np.asarray(prev, dtype=float)
    d = np.diff(np.vstack([prev_pt, positions]), axis=0)
    heading = np.arctan2(d[:, 1], d[:, 0])
    rows = np.column_stack([positions, wrap_angle(heading), d / dt, np.ones(len(positions))])
    if valid is not None:
        rows[:, 5] = np.asarray(list(valid), dtype=float)
    return rows
