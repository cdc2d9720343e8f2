"""Comparison schemes: naive, centralized EKF, windowed MLE (LM), and GCN.

The no-cooperation scheme is the MLCL model with communication disabled and
lives in `mlcl` (TrainConfig.disable_comm).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .sensing import Episode, NoiseConfig, wrap_angle


# ---------------------------------------------------------------------------
# naive


def naive_estimate(ep: Episode) -> np.ndarray:
    """Internal measurements taken verbatim as position estimates."""
    return ep.internal.copy()


# ---------------------------------------------------------------------------
# centralized EKF, joint constant-velocity state (x, y, vx, vy) per vehicle


@dataclass
class EkfState:
    mean: np.ndarray        # (4N,)
    cov: np.ndarray         # (4N, 4N)
    accel_std: float = 1.0  # white-acceleration process noise, m/s^2

    @property
    def n_vehicles(self) -> int:
        return self.mean.shape[0] // 4

    def positions(self) -> np.ndarray:
        return self.mean.reshape(-1, 4)[:, :2].copy()


def ekf_init(internal0: np.ndarray, cfg: NoiseConfig,
             accel_std: float = 1.0, vel_var: float = 100.0) -> EkfState:
    """Start at the first internal fix; zero velocity with large variance."""
    n = internal0.shape[0]
    mean = np.zeros(4 * n)
    cov = np.zeros((4 * n, 4 * n))
    for i in range(n):
        mean[4 * i:4 * i + 2] = internal0[i]
        cov[4 * i, 4 * i] = cfg.sigma_gnss ** 2
        cov[4 * i + 1, 4 * i + 1] = cfg.sigma_gnss ** 2
        cov[4 * i + 2, 4 * i + 2] = vel_var
        cov[4 * i + 3, 4 * i + 3] = vel_var
    return EkfState(mean=mean, cov=cov, accel_std=accel_std)


def _cv_blocks(dt: float, accel_std: float):
    f = np.array([[1, 0, dt, 0],
                  [0, 1, 0, dt],
                  [0, 0, 1, 0],
                  [0, 0, 0, 1]], dtype=float)
    q = accel_std ** 2 * np.array(
        [[dt ** 4 / 4, 0, dt ** 3 / 2, 0],
         [0, dt ** 4 / 4, 0, dt ** 3 / 2],
         [dt ** 3 / 2, 0, dt ** 2, 0],
         [0, dt ** 3 / 2, 0, dt ** 2]], dtype=float)
    return f, q


def ekf_predict(state: EkfState, dt: float) -> EkfState:
    n = state.n_vehicles
    f1, q1 = _cv_blocks(dt, state.accel_std)
    F = np.kron(np.eye(n), f1)
    Q = np.kron(np.eye(n), q1)
    mean = F @ state.mean
    cov = F @ state.cov @ F.T + Q
    cov = 0.5 * (cov + cov.T)
    return EkfState(mean=mean, cov=cov, accel_std=state.accel_std)


def measurement_model(mean: np.ndarray, internal_idx, externals, cfg: NoiseConfig):
    """Stacked measurement prediction h, Jacobian H, and noise diag R.

    internal_idx: vehicle indices with a GNSS fix this step.
    externals: list of (observer, subject, range_meas, bearing_meas).
    """
    dim = mean.shape[0]
    rows_h, rows_H, rows_r, z = [], [], [], []
    for i in internal_idx:
        for axis in range(2):
            h = mean[4 * i + axis]
            H = np.zeros(dim)
            H[4 * i + axis] = 1.0
            rows_h.append(h)
            rows_H.append(H)
            rows_r.append(cfg.sigma_gnss ** 2)
    for (a, b, r_meas, th_meas) in externals:
        pa = mean[4 * a:4 * a + 2]
        pb = mean[4 * b:4 * b + 2]
        d = pb - pa
        dist = float(np.linalg.norm(d))
        if dist < 1e-9:
            raise FloatingPointError("coincident EKF means in range model")
        # range
        H = np.zeros(dim)
        H[4 * b:4 * b + 2] = d / dist
        H[4 * a:4 * a + 2] = -d / dist
        rows_h.append(dist)
        rows_H.append(H)
        rows_r.append(cfg.sigma_range ** 2)
        z.append(("range", r_meas))
        # bearing
        H = np.zeros(dim)
        grad = np.array([-d[1], d[0]]) / (dist ** 2)
        H[4 * b:4 * b + 2] = grad
        H[4 * a:4 * a + 2] = -grad
        rows_h.append(math.atan2(d[1], d[0]))
        rows_H.append(H)
        rows_r.append(cfg.sigma_bearing ** 2)
        z.append(("bearing", th_meas))
    return np.array(rows_h), np.array(rows_H), np.array(rows_r)


def ekf_update(state: EkfState, internal: np.ndarray | None, externals,
               cfg: NoiseConfig) -> EkfState:
    """Joint EKF update with GNSS plus range/bearing terms, Joseph form."""
    n = state.n_vehicles
    internal_idx = list(range(n)) if internal is not None else []
    h, H, r_diag = measurement_model(state.mean, internal_idx, externals, cfg)
    if h.size == 0:
        return state
    z = []
    if internal is not None:
        z.extend(internal.reshape(-1).tolist())
    for (a, b, r_meas, th_meas) in externals:
        z.append(r_meas)
        z.append(th_meas)
    z = np.array(z)
    innov = z - h
    # wrap bearing innovations: they sit after GNSS terms at odd offsets
    base = 2 * len(internal_idx)
    for k in range(len(externals)):
        innov[base + 2 * k + 1] = wrap_angle(innov[base + 2 * k + 1])
    if not np.all(np.isfinite(innov)):
        raise FloatingPointError("non-finite EKF innovation")
    R = np.diag(r_diag)
    S = H @ state.cov @ H.T + R
    K = state.cov @ H.T @ np.linalg.inv(S)
    mean = state.mean + K @ innov
    ikh = np.eye(state.mean.shape[0]) - K @ H
    cov = ikh @ state.cov @ ikh.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    return EkfState(mean=mean, cov=cov, accel_std=state.accel_std)


def ekf_run(ep: Episode, dt: float = 1.0, accel_std: float = 1.0) -> np.ndarray:
    """Filter the whole episode; returns (T, N, 2) position estimates."""
    state = ekf_init(ep.internal[0], ep.cfg, accel_std=accel_std)
    ext0 = [(m.observer, m.subject, m.range_meas, m.bearing_meas)
            for m in ep.external_measurements(0)]
    state = ekf_update(state, None, ext0, ep.cfg)
    out = np.zeros_like(ep.truth)
    out[0] = state.positions()
    for t in range(1, ep.window):
        state = ekf_predict(state, dt)
        ext = [(m.observer, m.subject, m.range_meas, m.bearing_meas)
               for m in ep.external_measurements(t)]
        state = ekf_update(state, ep.internal[t], ext, ep.cfg)
        out[t] = state.positions()
    return out


# ---------------------------------------------------------------------------
# windowed maximum likelihood via Levenberg-Marquardt


@dataclass
class MleResult:
    estimates: np.ndarray   # (T, N, 2)
    cost: float             # sum of squared weighted residuals
    iterations: int
    converged: bool


def mle_residuals(p: np.ndarray, ep: Episode,
                  accel_prior_std: float | None = None, dt: float = 1.0):
    """Weighted residual vector and dense Jacobian at positions p (T, N, 2).

    With `accel_prior_std` set, a constant-velocity motion prior adds one
    residual per vehicle, axis, and interior timestep penalizing the second
    difference of position (acceleration) at that weight.
    """
    T, N = ep.window, ep.n_vehicles
    n_vars = 2 * T * N
    res = []
    jac_rows = []

    def var(t, i, axis):
        return 2 * (t * N + i) + axis

    w_g = 1.0 / ep.cfg.sigma_gnss if ep.cfg.sigma_gnss > 0 else 1.0
    w_r = 1.0 / ep.cfg.sigma_range if ep.cfg.sigma_range > 0 else 1.0
    w_b = 1.0 / ep.cfg.sigma_bearing if ep.cfg.sigma_bearing > 0 else 1.0
    for t in range(T):
        for i in range(N):
            for axis in range(2):
                row = np.zeros(n_vars)
                row[var(t, i, axis)] = w_g
                res.append(w_g * (p[t, i, axis] - ep.internal[t, i, axis]))
                jac_rows.append(row)
    for t in range(T):
        obs, subj = np.nonzero(ep.meas_adj[t])
        for a, b in zip(obs.tolist(), subj.tolist()):
            d = p[t, b] - p[t, a]
            dist = float(np.linalg.norm(d))
            if dist < 1e-9:
                dist = 1e-9
            row = np.zeros(n_vars)
            g = d / dist
            row[var(t, b, 0)], row[var(t, b, 1)] = w_r * g
            row[var(t, a, 0)], row[var(t, a, 1)] = -w_r * g
            res.append(w_r * (dist - ep.ext_range[t, a, b]))
            jac_rows.append(row)
            row = np.zeros(n_vars)
            g = np.array([-d[1], d[0]]) / (dist ** 2)
            row[var(t, b, 0)], row[var(t, b, 1)] = w_b * g
            row[var(t, a, 0)], row[var(t, a, 1)] = -w_b * g
            res.append(w_b * wrap_angle(
                math.atan2(d[1], d[0]) - ep.ext_bearing[t, a, b]))
            jac_rows.append(row)
    if accel_prior_std is not None and T >= 3:
        w_a = 1.0 / (accel_prior_std * dt * dt)
        for t in range(1, T - 1):
            for i in range(N):
                for axis in range(2):
                    row = np.zeros(n_vars)
                    row[var(t - 1, i, axis)] = w_a
                    row[var(t, i, axis)] = -2.0 * w_a
                    row[var(t + 1, i, axis)] = w_a
                    res.append(w_a * (p[t - 1, i, axis] - 2.0 * p[t, i, axis]
                                      + p[t + 1, i, axis]))
                    jac_rows.append(row)
    return np.array(res), np.array(jac_rows)


def mle_cost(p: np.ndarray, ep: Episode,
             accel_prior_std: float | None = None) -> float:
    r, _ = mle_residuals(p, ep, accel_prior_std=accel_prior_std)
    return float(r @ r)


def mle_window(ep: Episode, max_iter: int = 200, rel_tol: float = 1e-10,
               lam0: float = 1e-3, lam_cap: float = 1e10,
               accel_prior_std: float | None = None) -> MleResult:
    """Non-causal joint position fit over the whole window.

    Levenberg-Marquardt with additive damping: x10 on reject, /10 on accept,
    initialized at the internal measurements.
    """
    p = ep.internal.copy()

    def residuals(q):
        return mle_residuals(q, ep, accel_prior_std=accel_prior_std)

    r, J = residuals(p)
    cost = float(r @ r)
    lam = lam0
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        A = J.T @ J + lam * np.eye(J.shape[1])
        g = J.T @ r
        try:
            delta = np.linalg.solve(A, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        p_new = p + delta.reshape(p.shape)
        r_new, J_new = residuals(p_new)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            rel_drop = (cost - cost_new) / max(cost, 1e-300)
            p, r, J, cost = p_new, r_new, J_new, cost_new
            lam = max(lam / 10.0, 1e-12)
            if rel_drop < rel_tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > lam_cap:
                break
        if cost <= 1e-20:
            converged = True
            break
    return MleResult(estimates=p, cost=cost, iterations=it, converged=converged)


# ---------------------------------------------------------------------------
# GCN baseline: two graph-convolution layers (measurement, then communication
# domain), no temporal state


@dataclass
class GcnParams:
    layer1: tc.DenseLayer    # in -> hidden, aggregated over measurement graph
    layer2: tc.DenseLayer    # hidden -> hidden, aggregated over comm graph
    head1: tc.DenseLayer     # hidden -> hidden
    head2: tc.DenseLayer     # hidden -> 2

    def tensors(self) -> list:
        out = []
        for layer in (self.layer1, self.layer2, self.head1, self.head2):
            out.extend(tc.dense_params(layer))
        return out

    def named_tensors(self) -> dict:
        named = {}
        for name, layer in (("layer1", self.layer1), ("layer2", self.layer2),
                            ("head1", self.head1), ("head2", self.head2)):
            named[f"{name}.W"] = layer.W
            named[f"{name}.b"] = layer.b
        return named


GCN_IN_DIM = 5   # normalized internal fix (2) + pooled external encoding (3)


def init_gcn_params(hidden: int, seed: int) -> GcnParams:
    rng = np.random.default_rng(seed)
    return GcnParams(layer1=tc.init_dense(GCN_IN_DIM, hidden, rng),
                     layer2=tc.init_dense(hidden, hidden, rng),
                     head1=tc.init_dense(hidden, hidden, rng),
                     head2=tc.init_dense(hidden, 2, rng))


def save_gcn_params(params: GcnParams, path) -> None:
    tc.save_checkpoint(path, params.named_tensors())


def load_gcn_params(path) -> GcnParams:
    named = tc.load_checkpoint(path)

    def dense(name):
        return tc.DenseLayer(W=tc.Tensor(named[f"{name}.W"]),
                             b=tc.Tensor(named[f"{name}.b"]))

    return GcnParams(layer1=dense("layer1"), layer2=dense("layer2"),
                     head1=dense("head1"), head2=dense("head2"))


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization of (adjacency + self loops)."""
    a = adj.astype(float) + np.eye(adj.shape[0])
    d = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_node_features(ep: Episode, t: int, scale: float) -> np.ndarray:
    N = ep.n_vehicles
    feats = np.zeros((N, GCN_IN_DIM))
    feats[:, :2] = ep.internal[t] / scale
    obs, subj = np.nonzero(ep.meas_adj[t])
    th = ep.ext_bearing[t, obs, subj]
    enc = np.stack([ep.ext_range[t, obs, subj] / ep.cfg.rho_meas,
                    np.cos(th), np.sin(th)], axis=1)
    np.add.at(feats[:, 2:], obs, enc)
    return feats


def gcn_forward(params: GcnParams, ep: Episode, t: int,
                scale: float = 1000.0) -> tc.Tensor:
    """Per-timestep estimates (N, 2) in meters; no state carries across steps."""
    x = tc.Tensor(gcn_node_features(ep, t, scale))
    a_meas = tc.Tensor(normalized_adjacency(ep.meas_adj[t]))
    a_comm = tc.Tensor(normalized_adjacency(ep.comm_adj[t]))
    h1 = tc.relu(tc.dense_forward(params.layer1, tc.matmul(a_meas, x)))
    h2 = tc.relu(tc.dense_forward(params.layer2, tc.matmul(a_comm, h1)))
    out = tc.dense_forward(params.head2, tc.relu(tc.dense_forward(params.head1, h2)))
    return tc.scale(out, scale)


def gcn_estimate(params: GcnParams, ep: Episode, scale: float = 1000.0) -> np.ndarray:
    return np.stack([gcn_forward(params, ep, t, scale).data
                     for t in range(ep.window)])


def evaluate_gcn(params: GcnParams, episodes, scale: float = 1000.0,
                 tail: int | None = None):
    from .mlcl import mae_value

    per_episode = []
    for ep in episodes:
        est, tru = gcn_estimate(params, ep, scale), ep.truth
        if tail is not None:
            est, tru = est[-tail:], tru[-tail:]
        per_episode.append(mae_value(est, tru))
    return per_episode, float(np.mean(per_episode))


def gcn_train(params: GcnParams, episodes, cfg, eval_episodes=None,
              start_step: int = 0, adam: tc.AdamState | None = None):
    """Same loss/optimizer/loop shape as mlcl.train, per timestep independently."""
    if not episodes:
        raise ValueError("empty training dataset")
    tensors = params.tensors()
    if adam is None:
        adam = tc.init_adam(tensors, lr=cfg.lr)
    else:
        adam.lr = cfg.lr
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.seed, spawn_key=(1, start_step)))
    curve = []
    guard = 1e-24
    for k in range(cfg.steps):
        step = start_step + k + 1
        idx = rng.choice(len(episodes), size=min(cfg.batch_size, len(episodes)),
                         replace=False)
        batch = [episodes[i] for i in sorted(idx.tolist())]
        tc.zero_grads(tensors)
        with tc.relaxed_checks():
            losses = []
            for ep in batch:
                ests = [gcn_forward(params, ep, t, cfg.scale)
                        for t in range(ep.window)]
                est = tc.concat(ests, axis=0)
                flat = ep.truth.reshape(-1, 2)
                d = tc.sub(est, tc.Tensor(flat))
                sq = tc.reduce_sum(tc.mul(d, d), axis=1)
                dist = tc.sqrt(tc.add(sq, tc.Tensor(np.full(flat.shape[0], guard))))
                losses.append(tc.reduce_mean(dist))
            total = tc.scale(tc.sum_pool(losses), 1.0 / len(losses))
            tc.backward(total)
        if not np.isfinite(total.data):
            raise tc.NumericHealthError(f"GCN loss non-finite at step {step}")
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                 for t in tensors]
        if cfg.clip_norm is not None:
            norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
            if norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
        tc.adam_step(tensors, grads, adam)
        eval_mae = float("nan")
        if eval_episodes is not None and (
                k == cfg.steps - 1 or step % cfg.eval_every == 0):
            _, eval_mae = evaluate_gcn(params, eval_episodes, scale=cfg.scale)
        curve.append((step, float(total.data), eval_mae))
    return params, curve, adam
