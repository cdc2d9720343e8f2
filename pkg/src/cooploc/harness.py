"""Experiment orchestration: dataset generation, training, evaluation, sweeps.

All commands are deterministic functions of (config, master seed): RNG
streams are keyed by (master seed, purpose tag, episode index), and every
CSV artifact gets a provenance JSON next to it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import baselines, mlcl, world
from .sensing import (Episode, NoiseConfig, load_episode, make_episode,
                      noise_config_from_dict, noise_config_to_dict,
                      save_episode)


class ConfigError(ValueError):
    """Bad experiment configuration (maps to CLI exit code 2)."""


ALL_SCHEMES = ("mlcl", "nc", "gcn", "ekf", "mle", "naive")


@dataclass
class ExperimentConfig:
    # world (desk scale)
    rows: int = 6
    cols: int = 6
    spacing: float = 150.0
    speed_limit: float = 14.0
    n_vehicles: int = 96
    duration_s: float = 600.0
    dt: float = 1.0
    train_fraction: float = 0.5
    # noise / connectivity
    sigma_gnss: float = 10.0
    sigma_range: float = 3.0
    sigma_bearing: float = np.pi / 180.0
    rho_meas: float = 500.0
    rho_comm: float = 1000.0
    p_fail: float = 0.1
    # episodes
    group_size: int = 6
    window: int = 20
    n_train_episodes: int = 1600
    n_test_episodes: int = 60
    # training; lr_schedule "lr:steps,lr:steps" overrides (lr, steps)
    lr: float = 0.0005
    lr_schedule: str = "0.002:600,0.001:1400,0.0005:2000,0.0001:400"
    batch_size: int = 32
    steps: int = 500
    d_s: int = 32
    d_m: int = 32
    hidden: int = 128
    scale: float = 1000.0
    eval_every: int = 25
    clip_norm: float = 1.0          # global gradient norm; 0 disables clipping
    # experiment
    schemes: tuple = ALL_SCHEMES
    sweep_values: tuple = ()
    seed: int = 0
    # baselines
    ekf_accel_std: float = 1.0

    def noise(self) -> NoiseConfig:
        return NoiseConfig(sigma_gnss=self.sigma_gnss,
                           sigma_range=self.sigma_range,
                           sigma_bearing=self.sigma_bearing,
                           rho_meas=self.rho_meas, rho_comm=self.rho_comm,
                           p_fail=self.p_fail)

    def train_config(self, disable_comm: bool = False) -> mlcl.TrainConfig:
        return mlcl.TrainConfig(
            lr=self.lr, batch_size=self.batch_size, window=self.window,
            group_size=self.group_size, steps=self.steps, seed=self.seed,
            disable_comm=disable_comm, scale=self.scale,
            eval_every=self.eval_every,
            clip_norm=self.clip_norm if self.clip_norm > 0 else None)

    def dims(self) -> mlcl.MlclDims:
        return mlcl.MlclDims(d_s=self.d_s, d_m=self.d_m, hidden=self.hidden)

    def validate(self) -> None:
        for s in self.schemes:
            if s not in ALL_SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}")
        if self.sweep_values and any(v < 0 for v in self.sweep_values):
            raise ConfigError("sweep values must be non-negative")
        if list(self.sweep_values) != sorted(self.sweep_values):
            raise ConfigError("sweep values must be sorted ascending")
        for name in ("rows", "cols", "n_vehicles", "group_size", "window",
                     "n_train_episodes", "n_test_episodes", "steps",
                     "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        parse_lr_schedule(self)


def parse_lr_schedule(cfg: ExperimentConfig) -> list:
    """Training stages as (lr, steps) pairs; defaults to one (lr, steps) stage."""
    if not cfg.lr_schedule:
        return [(cfg.lr, cfg.steps)]
    stages = []
    for part in cfg.lr_schedule.split(","):
        try:
            lr_s, steps_s = part.split(":")
            stage = (float(lr_s), int(steps_s))
        except ValueError:
            raise ConfigError(f"bad lr_schedule entry {part!r}; "
                              "expected 'lr:steps,...'")
        if stage[0] <= 0 or stage[1] < 1:
            raise ConfigError(f"bad lr_schedule entry {part!r}")
        stages.append(stage)
    return stages


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def parse_config_file(path) -> dict:
    """Flat `key = value` config file; '#' starts a comment."""
    overrides = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        overrides[key] = value
    return overrides


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    values = dataclasses.asdict(cfg)
    for key, raw in overrides.items():
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        try:
            if key in ("schemes",):
                parsed = tuple(s.strip() for s in str(raw).split(",") if s.strip())
            elif key in ("sweep_values",):
                parsed = tuple(float(s) for s in str(raw).split(",") if s.strip())
            elif isinstance(current, bool):
                parsed = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(raw)
            elif isinstance(current, float):
                parsed = float(raw)
            else:
                parsed = raw
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {raw!r}")
        values[key] = parsed
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_file(path))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    cfg.validate()
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_provenance(path, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"config_hash": config_hash(cfg), "seed": cfg.seed,
                   "version": __version__}, f, sort_keys=True)
        f.write("\n")


def _purpose_seed(master_seed: int, purpose: str) -> list:
    tag = int.from_bytes(hashlib.sha256(purpose.encode()).digest()[:8], "big")
    return [int(master_seed), tag]


def generate_episodes(traces, cfg: ExperimentConfig, purpose: str, count: int,
                      noise: NoiseConfig | None = None,
                      group_size: int | None = None) -> list:
    noise = noise if noise is not None else cfg.noise()
    gs = group_size if group_size is not None else cfg.group_size
    seed = _purpose_seed(cfg.seed, purpose)
    eps = []
    for i in range(count):
        eps.append(make_episode(traces, gs, cfg.window, noise,
                                seed=seed, episode_index=i))
    return eps


# ---------------------------------------------------------------------------
# dataset generation


def cmd_gen(cfg: ExperimentConfig, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    net = world.generate_grid_network(cfg.rows, cfg.cols, cfg.spacing,
                                      cfg.speed_limit)
    traces = world.simulate_traces(net, cfg.n_vehicles, cfg.duration_s,
                                   cfg.dt, seed=cfg.seed)
    train_traces, test_traces = world.split_vehicles(traces,
                                                     cfg.train_fraction,
                                                     seed=cfg.seed)
    world.save_traces(train_traces, os.path.join(out_dir, "traces_train.csv"))
    world.save_traces(test_traces, os.path.join(out_dir, "traces_test.csv"))
    ep_dir = os.path.join(out_dir, "episodes")
    os.makedirs(ep_dir, exist_ok=True)
    files = {"train": [], "test": []}
    for split, trc, count in (("train", train_traces, cfg.n_train_episodes),
                              ("test", test_traces, cfg.n_test_episodes)):
        eps = generate_episodes(trc, cfg, purpose=split, count=count)
        for i, ep in enumerate(eps):
            name = f"{split}_{i:04d}.jsonl"
            save_episode(ep, os.path.join(ep_dir, name))
            files[split].append(name)
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "noise": noise_config_to_dict(cfg.noise()),
        "window": cfg.window,
        "group_size": cfg.group_size,
        "dt": cfg.dt,
        "episodes": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


def load_dataset(dataset_dir):
    path = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read dataset manifest: {e}")
    noise = noise_config_from_dict(manifest["noise"])
    ep_dir = os.path.join(dataset_dir, "episodes")
    train = [load_episode(os.path.join(ep_dir, n), noise)
             for n in manifest["episodes"]["train"]]
    test = [load_episode(os.path.join(ep_dir, n), noise)
            for n in manifest["episodes"]["test"]]
    return train, test, manifest


def load_test_traces(dataset_dir, dt: float):
    return world.load_traces(os.path.join(dataset_dir, "traces_test.csv"), dt=dt)


# ---------------------------------------------------------------------------
# training


def cmd_train(cfg: ExperimentConfig, dataset_dir, scheme: str, out_dir) -> dict:
    if scheme not in ("mlcl", "nc", "gcn"):
        raise ConfigError(f"scheme {scheme!r} is not trainable")
    os.makedirs(out_dir, exist_ok=True)
    train_eps, test_eps, _ = load_dataset(dataset_dir)
    base = cfg.train_config(disable_comm=(scheme == "nc"))
    train_fn = baselines.gcn_train if scheme == "gcn" else mlcl.train
    if scheme == "gcn":
        params = baselines.init_gcn_params(cfg.hidden, seed=cfg.seed)
    else:
        params = mlcl.init_mlcl_params(cfg.dims(), seed=cfg.seed)
    curve = []
    adam = None
    start = 0
    for lr, steps in parse_lr_schedule(cfg):
        tcfg = dataclasses.replace(base, lr=lr, steps=steps)
        params, stage_curve, adam = train_fn(params, train_eps, tcfg,
                                             eval_episodes=test_eps,
                                             start_step=start, adam=adam)
        curve.extend(stage_curve)
        start += steps
    ckpt = os.path.join(out_dir, f"{scheme}.npz")
    if scheme == "gcn":
        baselines.save_gcn_params(params, ckpt)
    else:
        mlcl.save_mlcl_params(params, ckpt)
    curve_path = os.path.join(out_dir, f"{scheme}_curve.csv")
    with open(curve_path, "w", encoding="utf-8") as f:
        f.write("step,train_loss_m,eval_mae_m\n")
        for step, loss, eval_mae in curve:
            ev = "" if np.isnan(eval_mae) else f"{eval_mae:.6f}"
            f.write(f"{step},{loss:.6f},{ev}\n")
    write_provenance(os.path.join(out_dir, f"{scheme}_curve.provenance.json"), cfg)
    final_eval = next(c[2] for c in reversed(curve) if not np.isnan(c[2]))
    return {"checkpoint": ckpt, "curve": curve_path, "final_eval_mae": final_eval}


# ---------------------------------------------------------------------------
# scheme evaluation plumbing


def scheme_estimates(scheme: str, ep: Episode, cfg: ExperimentConfig,
                     checkpoints: dict) -> np.ndarray:
    if scheme == "naive":
        return baselines.naive_estimate(ep)
    if scheme == "ekf":
        return baselines.ekf_run(ep, dt=cfg.dt, accel_std=cfg.ekf_accel_std)
    if scheme == "mle":
        return baselines.mle_window(ep).estimates
    if scheme == "gcn":
        return baselines.gcn_estimate(checkpoints["gcn"], ep, scale=cfg.scale)
    if scheme in ("mlcl", "nc"):
        params = checkpoints[scheme]
        rec = mlcl.rollout(params, ep, disable_comm=(scheme == "nc"),
                           scale=cfg.scale)
        return rec.estimates
    raise ConfigError(f"unknown scheme {scheme!r}")


def load_checkpoints(cfg: ExperimentConfig, paths: dict) -> dict:
    out = {}
    for scheme, path in paths.items():
        if scheme == "gcn":
            out[scheme] = baselines.load_gcn_params(path)
        else:
            out[scheme] = mlcl.load_mlcl_params(path)
    return out


def bootstrap_stderr(values, n_resamples: int = 1000, seed: int = 0) -> float:
    """Std error of the mean via bootstrap over per-episode values."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(777,)))
    idx = rng.integers(0, v.size, size=(n_resamples, v.size))
    return float(np.std(v[idx].mean(axis=1)))


@dataclass
class ResultRow:
    scheme: str
    axis: str
    axis_value: float
    mae_m: float
    stderr_m: float
    n_episodes: int


def write_result_table(rows, path, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("scheme,axis,axis_value,mae_m,stderr_m,n_episodes\n")
        for r in rows:
            f.write(f"{r.scheme},{r.axis},{r.axis_value:g},"
                    f"{r.mae_m:.6f},{r.stderr_m:.6f},{r.n_episodes}\n")
    write_provenance(str(path) + ".provenance.json", cfg)


def per_episode_mae(scheme: str, episodes, cfg: ExperimentConfig,
                    checkpoints: dict, tail: int | None = None):
    per = []
    for ep in episodes:
        est, tru = scheme_estimates(scheme, ep, cfg, checkpoints), ep.truth
        if tail is not None:
            est, tru = est[-tail:], tru[-tail:]
        per.append(mlcl.mae_value(est, tru))
    return per


def write_estimates_csv(scheme: str, episodes, estimates, path) -> None:
    """Per-vehicle-step estimates: scheme,episode,vehicle_id,t,xhat_m,yhat_m,err_m."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("scheme,episode,vehicle_id,t,xhat_m,yhat_m,err_m\n")
        for e, (ep, est) in enumerate(zip(episodes, estimates)):
            err = np.linalg.norm(est - ep.truth, axis=-1)
            for t in range(ep.window):
                for i, vid in enumerate(ep.vehicle_ids):
                    f.write(f"{scheme},{e},{vid},{t},"
                            f"{est[t, i, 0]:.6f},{est[t, i, 1]:.6f},"
                            f"{err[t, i]:.6f}\n")


def cmd_eval(cfg: ExperimentConfig, dataset_dir, checkpoint_paths: dict,
             out_path) -> list:
    """Per-timestep MAE averaged over test episodes, per scheme."""
    _, test_eps, _ = load_dataset(dataset_dir)
    checkpoints = load_checkpoints(cfg, checkpoint_paths)
    rows = []
    for scheme in cfg.schemes:
        per_step = np.zeros((len(test_eps), cfg.window))
        for e, ep in enumerate(test_eps):
            est = scheme_estimates(scheme, ep, cfg, checkpoints)
            per_step[e] = np.linalg.norm(est - ep.truth, axis=-1).mean(axis=1)
        for t in range(cfg.window):
            rows.append(ResultRow(
                scheme=scheme, axis="t", axis_value=float(t),
                mae_m=float(per_step[:, t].mean()),
                stderr_m=bootstrap_stderr(per_step[:, t], seed=cfg.seed),
                n_episodes=len(test_eps)))
    write_result_table(rows, out_path, cfg)
    return rows


def cmd_sweep_n(cfg: ExperimentConfig, dataset_dir, checkpoint_paths: dict,
                out_path, sizes=None) -> list:
    """Evaluate fixed checkpoints on regenerated episodes of varying group size."""
    sizes = [int(v) for v in (sizes or cfg.sweep_values or range(2, 9))]
    test_traces = load_test_traces(dataset_dir, cfg.dt)
    checkpoints = load_checkpoints(cfg, checkpoint_paths)
    rows = []
    for size in sizes:
        eps = generate_episodes(test_traces, cfg, purpose="sweep_n",
                                count=cfg.n_test_episodes, group_size=size)
        for scheme in cfg.schemes:
            per = per_episode_mae(scheme, eps, cfg, checkpoints)
            rows.append(ResultRow(
                scheme=scheme, axis="n_vehicles", axis_value=float(size),
                mae_m=float(np.mean(per)),
                stderr_m=bootstrap_stderr(per, seed=cfg.seed),
                n_episodes=len(eps)))
    write_result_table(rows, out_path, cfg)
    return rows


def cmd_sweep_range(cfg: ExperimentConfig, dataset_dir, checkpoint_paths: dict,
                    out_path, ranges=None) -> list:
    """Evaluate fixed checkpoints across communication radii.

    Measurement noise draws are shared across radii: only the communication
    graph (its own RNG substream) changes between sweep points.
    """
    ranges = [float(v) for v in (ranges if ranges is not None
                                 else (cfg.sweep_values or
                                       (0.0, 100.0, 200.0, 400.0, 800.0)))]
    test_traces = load_test_traces(dataset_dir, cfg.dt)
    checkpoints = load_checkpoints(cfg, checkpoint_paths)
    rows = []
    for rho in ranges:
        noise = dataclasses.replace(cfg.noise(), rho_comm=rho)
        eps = generate_episodes(test_traces, cfg, purpose="sweep_range",
                                count=cfg.n_test_episodes, noise=noise)
        for scheme in cfg.schemes:
            per = per_episode_mae(scheme, eps, cfg, checkpoints)
            rows.append(ResultRow(
                scheme=scheme, axis="comm_range", axis_value=rho,
                mae_m=float(np.mean(per)),
                stderr_m=bootstrap_stderr(per, seed=cfg.seed),
                n_episodes=len(eps)))
    write_result_table(rows, out_path, cfg)
    return rows
