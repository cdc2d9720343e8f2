"""Grid road network, shortest-path vehicle mobility, trace I/O, and splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import networkx as nx
import numpy as np


class TraceParseError(ValueError):
    """Raised for malformed trace CSV files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass
class RoadNetwork:
    junctions: np.ndarray        # (J, 2) meters
    segments: list               # [(i, j, speed_limit_mps)]
    extent: tuple                # (xmin, ymin, xmax, ymax)

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(len(self.junctions)))
        for i, j, v in self.segments:
            length = float(np.linalg.norm(self.junctions[i] - self.junctions[j]))
            g.add_edge(i, j, length=length, speed=v)
        return g


@dataclass
class TraceSet:
    dt: float
    # per vehicle: (T+1, 3) array of (x, y, heading)
    vehicles: list

    @property
    def duration(self) -> int:
        return self.vehicles[0].shape[0] - 1 if self.vehicles else 0

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)


def generate_grid_network(rows: int, cols: int, spacing: float,
                          speed_limit: float) -> RoadNetwork:
    """Manhattan grid: rows x cols junctions, all axis-neighbor pairs joined."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs rows >= 2 and cols >= 2")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    junctions = np.array([(c * spacing, r * spacing)
                          for r in range(rows) for c in range(cols)])
    segments = []
    for r in range(rows):
        for c in range(cols):
            idx = r * cols + c
            if c + 1 < cols:
                segments.append((idx, idx + 1, float(speed_limit)))
            if r + 1 < rows:
                segments.append((idx, idx + cols, float(speed_limit)))
    extent = (0.0, 0.0, (cols - 1) * spacing, (rows - 1) * spacing)
    return RoadNetwork(junctions=junctions, segments=segments, extent=extent)


def _wrap_angle(a: float) -> float:
    """Map angle into (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


class _Router:
    """Shortest-path route lookup with caching over the junction graph."""

    def __init__(self, net: RoadNetwork):
        self.g = net.graph()
        if not nx.is_connected(self.g):
            raise ValueError("road network must be connected")
        self.junctions = net.junctions
        self._cache = {}

    def route(self, src: int, dst: int) -> list:
        key = (src, dst)
        if key not in self._cache:
            self._cache[key] = nx.shortest_path(self.g, src, dst, weight="length")
        return self._cache[key]

    def speed(self, i: int, j: int) -> float:
        return self.g.edges[i, j]["speed"]


class _Vehicle:
    """A vehicle moving along shortest-path routes at segment speed limits."""

    def __init__(self, router: _Router, start: int, speed_factor: float,
                 rng: np.random.Generator):
        self.router = router
        self.rng = rng
        self.speed_factor = speed_factor
        self.node = start          # last junction reached
        self.route = []            # remaining junctions ahead of self.node
        self.seg_pos = 0.0         # meters advanced on current segment
        self.pos = router.junctions[start].copy()
        self._pick_destination()

    def _pick_destination(self):
        n = len(self.router.junctions)
        dst = self.node
        while dst == self.node:
            dst = int(self.rng.integers(0, n))
        self.route = self.router.route(self.node, dst)[1:]

    def advance(self, dt: float) -> np.ndarray:
        remaining = dt
        while remaining > 1e-12:
            if not self.route:
                self._pick_destination()
            nxt = self.route[0]
            a = self.router.junctions[self.node]
            b = self.router.junctions[nxt]
            seg_len = float(np.linalg.norm(b - a))
            v = self.router.speed(self.node, nxt) * self.speed_factor
            room = seg_len - self.seg_pos
            step = v * remaining
            if step < room:
                self.seg_pos += step
                remaining = 0.0
            else:
                remaining -= room / v
                self.node = nxt
                self.route.pop(0)
                self.seg_pos = 0.0
            a = self.router.junctions[self.node]
            if self.route:
                b = self.router.junctions[self.route[0]]
                seg_len = float(np.linalg.norm(b - a))
                frac = self.seg_pos / seg_len if seg_len > 0 else 0.0
                self.pos = a + frac * (b - a)
            else:
                self.pos = a.copy()
        return self.pos.copy()


def simulate_traces(net: RoadNetwork, n_vehicles: int, duration_s: float,
                    dt: float, seed: int) -> TraceSet:
    """Spawn vehicles at random junctions and roll shortest-path mobility.

    Deterministic given the seed: each vehicle consumes its own substream.
    """
    if n_vehicles < 1:
        raise ValueError("need at least one vehicle")
    if duration_s < dt:
        raise ValueError("duration must cover at least one step")
    router = _Router(net)
    n_steps = int(round(duration_s / dt))
    vehicles = []
    root = np.random.SeedSequence(seed)
    for child in root.spawn(n_vehicles):
        rng = np.random.default_rng(child)
        start = int(rng.integers(0, len(net.junctions)))
        factor = float(rng.uniform(0.8, 1.0))
        veh = _Vehicle(router, start, factor, rng)
        track = np.zeros((n_steps + 1, 3))
        track[0, :2] = veh.pos
        prev = veh.pos.copy()
        heading0 = None
        for t in range(1, n_steps + 1):
            pos = veh.advance(dt)
            track[t, :2] = pos
            d = pos - prev
            if np.linalg.norm(d) > 1e-9:
                track[t, 2] = _wrap_angle(math.atan2(d[1], d[0]))
                if heading0 is None:
                    heading0 = track[t, 2]
            else:
                track[t, 2] = track[t - 1, 2]
            prev = pos.copy()
        track[0, 2] = heading0 if heading0 is not None else 0.0
        # backfill stationary prefix headings with first motion direction
        for t in range(1, n_steps + 1):
            if np.all(track[t, :2] == track[0, :2]):
                track[t, 2] = track[0, 2]
            else:
                break
        vehicles.append(track)
    return TraceSet(dt=float(dt), vehicles=vehicles)


_TRACE_HEADER = ["vehicle_id", "t", "x_m", "y_m", "heading_rad"]


def save_traces(traces: TraceSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(_TRACE_HEADER)
        for vid, track in enumerate(traces.vehicles):
            for t in range(track.shape[0]):
                w.writerow([vid, t,
                            f"{track[t, 0]:.9f}",
                            f"{track[t, 1]:.9f}",
                            f"{track[t, 2]:.12f}"])


def load_traces(path, dt: float = 1.0) -> TraceSet:
    per_vehicle = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceParseError("empty trace file", 1)
        if header != _TRACE_HEADER:
            raise TraceParseError(f"bad header {header!r}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise TraceParseError(f"expected 5 columns, got {len(row)}", lineno)
            try:
                vid = int(row[0])
                t = int(row[1])
                x, y, h = float(row[2]), float(row[3]), float(row[4])
            except ValueError as e:
                raise TraceParseError(str(e), lineno)
            if t < 0:
                raise TraceParseError("negative timestep", lineno)
            seq = per_vehicle.setdefault(vid, [])
            if t != len(seq):
                raise TraceParseError(
                    f"non-monotone timestep {t} for vehicle {vid}", lineno)
            seq.append((x, y, h))
    if not per_vehicle:
        raise TraceParseError("no data rows", 2)
    lengths = {len(seq) for seq in per_vehicle.values()}
    if len(lengths) != 1:
        raise TraceParseError("vehicle sequences have unequal lengths")
    vehicles = [np.array(per_vehicle[vid]) for vid in sorted(per_vehicle)]
    return TraceSet(dt=float(dt), vehicles=vehicles)


def split_vehicles(traces: TraceSet, train_fraction: float,
                   seed: int) -> tuple:
    """Disjoint train/test partition of vehicles, sizes round(n*f) / rest."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = traces.n_vehicles
    if n < 2:
        raise ValueError("need at least 2 vehicles to split")
    k = int(round(n * train_fraction))
    k = min(max(k, 1), n - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    train_ids = sorted(order[:k].tolist())
    test_ids = sorted(order[k:].tolist())
    train = TraceSet(dt=traces.dt, vehicles=[traces.vehicles[i] for i in train_ids])
    test = TraceSet(dt=traces.dt, vehicles=[traces.vehicles[i] for i in test_ids])
    return train, test
