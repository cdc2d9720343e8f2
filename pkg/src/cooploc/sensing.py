"""Noisy internal/external measurements and heterogeneous domain graphs.

Internal measurements are GNSS-like absolute position fixes; external
measurements are range/bearing observations of neighbors within the
measurement radius. Communication connectivity is an independent graph with
a larger radius and random symmetric link failures.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np


@dataclass
class NoiseConfig:
    sigma_gnss: float = 10.0        # meters, per-axis std
    sigma_range: float = 3.0        # meters
    sigma_bearing: float = math.pi / 180.0   # radians (1 degree)
    rho_meas: float = 500.0         # meters
    rho_comm: float = 1000.0        # meters
    p_fail: float = 0.1             # per-pair per-step link failure probability

    def __post_init__(self):
        for name in ("sigma_gnss", "sigma_range", "sigma_bearing",
                     "rho_meas", "rho_comm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.p_fail <= 1.0:
            raise ValueError("p_fail must lie in [0, 1]")


@dataclass
class InternalMeasurement:
    vehicle: int
    t: int
    pos_meas: np.ndarray   # (2,) meters


@dataclass
class ExternalMeasurement:
    observer: int
    subject: int
    t: int
    range_meas: float      # meters, >= 0
    bearing_meas: float    # radians in (-pi, pi]


@dataclass
class DomainGraphs:
    t: int
    meas_adj: np.ndarray   # (N, N) bool, symmetric, false diagonal
    comm_adj: np.ndarray   # (N, N) bool, symmetric, false diagonal


def wrap_angle(a: float) -> float:
    """Map angle into (-pi, pi]."""
    w = math.remainder(float(a), 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def sense_internal(true_pos, cfg: NoiseConfig, rng: np.random.Generator,
                   vehicle: int = 0, t: int = 0) -> InternalMeasurement:
    p = np.asarray(true_pos, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("true position must be finite")
    noise = rng.normal(0.0, cfg.sigma_gnss, size=2) if cfg.sigma_gnss > 0 else np.zeros(2)
    return InternalMeasurement(vehicle=vehicle, t=t, pos_meas=p + noise)


def sense_external(pos_a, pos_b, cfg: NoiseConfig, rng: np.random.Generator,
                   observer: int = 0, subject: int = 1, t: int = 0) -> ExternalMeasurement:
    a = np.asarray(pos_a, dtype=np.float64)
    b = np.asarray(pos_b, dtype=np.float64)
    d = b - a
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        raise ValueError("coincident positions have no defined bearing")
    n_r = rng.normal(0.0, cfg.sigma_range) if cfg.sigma_range > 0 else 0.0
    n_th = rng.normal(0.0, cfg.sigma_bearing) if cfg.sigma_bearing > 0 else 0.0
    rng_meas = max(0.0, dist + n_r)
    bearing = wrap_angle(math.atan2(d[1], d[0]) + n_th)
    return ExternalMeasurement(observer=observer, subject=subject, t=t,
                               range_meas=rng_meas, bearing_meas=bearing)


def build_domain_graphs(positions, cfg: NoiseConfig, rng: np.random.Generator,
                        t: int = 0) -> DomainGraphs:
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 1:
        raise ValueError("need at least one position")
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    # coincident vehicles have no defined bearing, so no measurement edge
    meas = (dist <= cfg.rho_meas) & (dist > 0.0)
    comm = dist <= cfg.rho_comm
    np.fill_diagonal(meas, False)
    np.fill_diagonal(comm, False)
    # one failure draw per unordered pair within comm radius, upper triangle order
    for i in range(n):
        for j in range(i + 1, n):
            if comm[i, j] and cfg.p_fail > 0:
                if rng.random() < cfg.p_fail:
                    comm[i, j] = comm[j, i] = False
    return DomainGraphs(t=t, meas_adj=meas, comm_adj=comm)


def encode_external(m: ExternalMeasurement, cfg: NoiseConfig) -> np.ndarray:
    """Length-3 network input feature for one external measurement."""
    return np.array([m.range_meas / cfg.rho_meas,
                     math.cos(m.bearing_meas),
                     math.sin(m.bearing_meas)])


@dataclass
class Episode:
    """One vehicle group over a fixed window, with everything a rollout needs."""
    vehicle_ids: list                  # global trace ids (group order)
    truth: np.ndarray                  # (T, N, 2) meters
    internal: np.ndarray               # (T, N, 2) meters
    ext_range: np.ndarray              # (T, N, N) meters; [t, observer, subject]
    ext_bearing: np.ndarray            # (T, N, N) radians
    meas_adj: np.ndarray               # (T, N, N) bool
    comm_adj: np.ndarray               # (T, N, N) bool
    cfg: NoiseConfig

    @property
    def window(self) -> int:
        return self.truth.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.truth.shape[1]

    def external_measurements(self, t: int) -> list:
        out = []
        obs, subj = np.nonzero(self.meas_adj[t])
        for a, b in zip(obs.tolist(), subj.tolist()):
            out.append(ExternalMeasurement(
                observer=a, subject=b, t=t,
                range_meas=float(self.ext_range[t, a, b]),
                bearing_meas=float(self.ext_bearing[t, a, b])))
        return out

    def validate(self) -> None:
        T, N = self.truth.shape[:2]
        if self.internal.shape != (T, N, 2):
            raise ValueError("internal shape mismatch")
        for name in ("ext_range", "ext_bearing", "meas_adj", "comm_adj"):
            if getattr(self, name).shape != (T, N, N):
                raise ValueError(f"{name} shape mismatch")
        for t in range(T):
            for adj in (self.meas_adj[t], self.comm_adj[t]):
                if np.any(adj != adj.T):
                    raise ValueError("adjacency must be symmetric")
                if np.any(np.diag(adj)):
                    raise ValueError("adjacency diagonal must be false")
            d = self.truth[t][:, None, :] - self.truth[t][None, :, :]
            dist = np.sqrt((d ** 2).sum(axis=2))
            if np.any(dist[self.meas_adj[t]] > self.cfg.rho_meas + 1e-9):
                raise ValueError("meas edge beyond measurement radius")
            br = self.ext_bearing[t][self.meas_adj[t]]
            if np.any((br <= -math.pi) | (br > math.pi)):
                raise ValueError("bearing out of (-pi, pi]")
            if np.any(self.ext_range[t][self.meas_adj[t]] < 0):
                raise ValueError("negative range")


def _episode_streams(seed, episode_index: int):
    """Independent substreams so comm-graph settings never shift noise draws."""
    root = np.random.SeedSequence(entropy=seed, spawn_key=(episode_index,))
    sel, internal, external, comm = root.spawn(4)
    return (np.random.default_rng(sel), np.random.default_rng(internal),
            np.random.default_rng(external), np.random.default_rng(comm))


def make_episode(traces, group_size: int, window: int, cfg: NoiseConfig,
                 seed, episode_index: int = 0, max_tries: int = 200) -> Episode:
    """Sample a focal vehicle + window, then synthesize all measurements.

    The group is the focal vehicle plus its (group_size - 1) nearest
    neighbors at the window start; all of them must lie within rho_meas.
    """
    if traces.duration + 1 < window:
        raise ValueError("traces shorter than requested window")
    if traces.n_vehicles < group_size:
        raise ValueError("not enough vehicles for requested group size")
    rng_sel, rng_int, rng_ext, rng_comm = _episode_streams(seed, episode_index)
    n = traces.n_vehicles
    pos_all = np.stack(traces.vehicles)[:, :, :2]   # (n, T_total+1, 2)
    n_starts = traces.duration + 1 - window

    group = None
    start = None
    for _ in range(max_tries):
        focal = int(rng_sel.integers(0, n))
        s = int(rng_sel.integers(0, n_starts + 1))
        d = np.linalg.norm(pos_all[:, s, :] - pos_all[focal, s, :], axis=1)
        d[focal] = np.inf
        near = np.nonzero(d <= cfg.rho_meas)[0]
        if len(near) >= group_size - 1:
            nearest = near[np.argsort(d[near], kind="stable")][:group_size - 1]
            group = sorted([focal] + nearest.tolist())
            start = s
            break
    if group is None:
        raise RuntimeError(
            "no vehicle group with enough nearby neighbors found; "
            "generate denser traces or reduce group_size")

    N = group_size
    truth = np.transpose(pos_all[group, start:start + window, :], (1, 0, 2))
    internal = truth + rng_int.normal(0.0, cfg.sigma_gnss, size=truth.shape)
    ext_range = np.zeros((window, N, N))
    ext_bearing = np.zeros((window, N, N))
    meas_adj = np.zeros((window, N, N), dtype=bool)
    comm_adj = np.zeros((window, N, N), dtype=bool)
    for t in range(window):
        graphs = build_domain_graphs(truth[t], cfg, rng_comm, t=t)
        meas_adj[t] = graphs.meas_adj
        comm_adj[t] = graphs.comm_adj
        obs, subj = np.nonzero(meas_adj[t])
        for a, b in zip(obs.tolist(), subj.tolist()):
            m = sense_external(truth[t, a], truth[t, b], cfg, rng_ext,
                               observer=a, subject=b, t=t)
            ext_range[t, a, b] = m.range_meas
            ext_bearing[t, a, b] = m.bearing_meas
    ep = Episode(vehicle_ids=group, truth=truth, internal=internal,
                 ext_range=ext_range, ext_bearing=ext_bearing,
                 meas_adj=meas_adj, comm_adj=comm_adj, cfg=cfg)
    ep.validate()
    return ep


# ---------------------------------------------------------------------------
# episode serialization (JSON lines, one line per timestep)


def save_episode(ep: Episode, path) -> None:
    ids = ep.vehicle_ids
    with open(path, "w", encoding="utf-8") as f:
        for t in range(ep.window):
            obs, subj = np.nonzero(ep.meas_adj[t])
            mo, ms = np.nonzero(np.triu(ep.meas_adj[t]))
            co, cs = np.nonzero(np.triu(ep.comm_adj[t]))
            rec = {
                "t": t,
                "truth": {str(ids[i]): [ep.truth[t, i, 0], ep.truth[t, i, 1]]
                          for i in range(len(ids))},
                "internal": {str(ids[i]): [ep.internal[t, i, 0], ep.internal[t, i, 1]]
                             for i in range(len(ids))},
                "external": [[ids[a], ids[b],
                              ep.ext_range[t, a, b], ep.ext_bearing[t, a, b]]
                             for a, b in zip(obs.tolist(), subj.tolist())],
                "meas_edges": [[ids[a], ids[b]] for a, b in zip(mo.tolist(), ms.tolist())],
                "comm_edges": [[ids[a], ids[b]] for a, b in zip(co.tolist(), cs.tolist())],
            }
            f.write(json.dumps(rec) + "\n")


def load_episode(path, cfg: NoiseConfig) -> Episode:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: {e}")
    if not records:
        raise ValueError(f"{path}: empty episode file")
    ids = sorted(int(k) for k in records[0]["truth"].keys())
    index = {vid: i for i, vid in enumerate(ids)}
    T, N = len(records), len(ids)
    truth = np.zeros((T, N, 2))
    internal = np.zeros((T, N, 2))
    ext_range = np.zeros((T, N, N))
    ext_bearing = np.zeros((T, N, N))
    meas_adj = np.zeros((T, N, N), dtype=bool)
    comm_adj = np.zeros((T, N, N), dtype=bool)
    for t, rec in enumerate(records):
        if rec["t"] != t:
            raise ValueError(f"{path}: non-contiguous timesteps at t={rec['t']}")
        for key, arr in (("truth", truth), ("internal", internal)):
            for vid_s, xy in rec[key].items():
                arr[t, index[int(vid_s)]] = xy
        for a, b, r, th in rec["external"]:
            ext_range[t, index[a], index[b]] = r
            ext_bearing[t, index[a], index[b]] = th
        for a, b in rec["meas_edges"]:
            meas_adj[t, index[a], index[b]] = meas_adj[t, index[b], index[a]] = True
        for a, b in rec["comm_edges"]:
            comm_adj[t, index[a], index[b]] = comm_adj[t, index[b], index[a]] = True
    ep = Episode(vehicle_ids=ids, truth=truth, internal=internal,
                 ext_range=ext_range, ext_bearing=ext_bearing,
                 meas_adj=meas_adj, comm_adj=comm_adj, cfg=cfg)
    ep.validate()
    return ep


def noise_config_to_dict(cfg: NoiseConfig) -> dict:
    return asdict(cfg)


def noise_config_from_dict(d: dict) -> NoiseConfig:
    return NoiseConfig(**d)
