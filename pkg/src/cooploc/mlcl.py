"""Four-unit recurrent message-passing localizer.

Units (one shared parameter set for every vehicle):
  - mtnn: builds the message a sender transmits to one comm neighbor from the
    sender's previous state and its external measurement of that neighbor.
  - mrnn: digests one neighbor's incoming message plus the local external
    measurement of that neighbor into a latent vector; latents are sum-pooled.
  - sunn: GRU state update from pooled latents and the internal measurement.
  - lenn: decodes the state into a position estimate.

Missing links are handled by zero-fill switching: absent measurement edges
zero the external-measurement input, absent communication edges zero the
incoming message. A neighbor participates iff it has at least one live edge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .sensing import Episode


@dataclass
class MlclDims:
    d_s: int = 32      # state width
    d_m: int = 32      # message / latent width
    hidden: int = 128  # FNN hidden width


@dataclass
class TrainConfig:
    lr: float = 0.0005
    batch_size: int = 32
    window: int = 20
    group_size: int = 10
    steps: int = 500
    seed: int = 0
    disable_comm: bool = False
    scale: float = 1000.0          # position normalization, meters
    eval_every: int = 25
    clip_norm: float | None = None


@dataclass
class MlclParams:
    dims: MlclDims
    mtnn1: tc.DenseLayer
    mtnn2: tc.DenseLayer
    mrnn1: tc.DenseLayer
    mrnn2: tc.DenseLayer
    sunn: tc.GruCell
    lenn1: tc.DenseLayer
    lenn2: tc.DenseLayer

    def tensors(self) -> list:
        out = []
        for layer in (self.mtnn1, self.mtnn2, self.mrnn1, self.mrnn2,
                      self.lenn1, self.lenn2):
            out.extend(tc.dense_params(layer))
        out.extend(tc.gru_params(self.sunn))
        return out

    def named_tensors(self) -> dict:
        named = {}
        for name, layer in (("mtnn1", self.mtnn1), ("mtnn2", self.mtnn2),
                            ("mrnn1", self.mrnn1), ("mrnn2", self.mrnn2),
                            ("lenn1", self.lenn1), ("lenn2", self.lenn2)):
            named[f"{name}.W"] = layer.W
            named[f"{name}.b"] = layer.b
        for gname, t in zip(("W_z", "W_r", "W_h", "U_z", "U_r", "U_h",
                             "b_z", "b_r", "b_h"), tc.gru_params(self.sunn)):
            named[f"sunn.{gname}"] = t
        named["__dims__"] = tc.Tensor(
            np.array([self.dims.d_s, self.dims.d_m, self.dims.hidden], dtype=float))
        return named


def init_mlcl_params(dims: MlclDims, seed: int) -> MlclParams:
    rng = np.random.default_rng(seed)
    d_s, d_m, h = dims.d_s, dims.d_m, dims.hidden
    return MlclParams(
        dims=dims,
        mtnn1=tc.init_dense(d_s + 3, h, rng), mtnn2=tc.init_dense(h, d_m, rng),
        mrnn1=tc.init_dense(d_m + 3, h, rng), mrnn2=tc.init_dense(h, d_m, rng),
        sunn=tc.init_gru(d_m + 2, d_s, rng),
        lenn1=tc.init_dense(d_s, h, rng), lenn2=tc.init_dense(h, 2, rng))


def save_mlcl_params(params: MlclParams, path) -> None:
    tc.save_checkpoint(path, params.named_tensors())


def load_mlcl_params(path) -> MlclParams:
    named = tc.load_checkpoint(path)
    d_s, d_m, h = (int(v) for v in named["__dims__"])
    dims = MlclDims(d_s=d_s, d_m=d_m, hidden=h)

    def dense(name):
        return tc.DenseLayer(W=tc.Tensor(named[f"{name}.W"]),
                             b=tc.Tensor(named[f"{name}.b"]))

    gru = tc.GruCell(**{k: tc.Tensor(named[f"sunn.{k}"])
                        for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h",
                                  "b_z", "b_r", "b_h")})
    return MlclParams(dims=dims,
                      mtnn1=dense("mtnn1"), mtnn2=dense("mtnn2"),
                      mrnn1=dense("mrnn1"), mrnn2=dense("mrnn2"),
                      sunn=gru, lenn1=dense("lenn1"), lenn2=dense("lenn2"))


def _two_layer(l1: tc.DenseLayer, l2: tc.DenseLayer, x) -> tc.Tensor:
    return tc.dense_forward(l2, tc.relu(tc.dense_forward(l1, x)))


# ---------------------------------------------------------------------------
# unit-level forward functions (vector contracts)


def mtnn_forward(params: MlclParams, s_prev, e_feat=None) -> tc.Tensor:
    """Message from a sender's previous state and its measurement of the receiver."""
    s = tc._as_tensor(s_prev)
    if e_feat is None:
        e_feat = np.zeros(3) if s.data.ndim == 1 else np.zeros((s.data.shape[0], 3))
    e = tc._as_tensor(e_feat)
    axis = 1 if s.data.ndim == 2 else 0
    return _two_layer(params.mtnn1, params.mtnn2, tc.concat([s, e], axis=axis))


def mrnn_forward(params: MlclParams, m_in=None, e_feat=None) -> tc.Tensor:
    """Latent for one neighbor; either input may be zero-filled when absent."""
    if m_in is None:
        m_in = np.zeros(params.dims.d_m)
    if e_feat is None:
        e_feat = np.zeros(3)
    a, b = tc._as_tensor(m_in), tc._as_tensor(e_feat)
    axis = 1 if a.data.ndim == 2 else 0
    return _two_layer(params.mrnn1, params.mrnn2, tc.concat([a, b], axis=axis))


def aggregate_and_update(params: MlclParams, latents, i_feat, s_prev) -> tc.Tensor:
    """Sum-pool neighbor latents, append the internal measurement, step the GRU."""
    pooled = tc.sum_pool(latents, width=params.dims.d_m)
    i = tc._as_tensor(i_feat)
    axis = 1 if pooled.data.ndim == 2 else 0
    x = tc.concat([pooled, i], axis=axis)
    return tc.gru_forward(params.sunn, x, tc._as_tensor(s_prev))


def lenn_forward(params: MlclParams, s_t, scale: float = 1000.0) -> tc.Tensor:
    """Decode state to a position estimate in meters."""
    return tc.scale(_two_layer(params.lenn1, params.lenn2, s_t), scale)


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutRecord:
    estimates: np.ndarray          # (T, N, 2) meters
    states: np.ndarray             # (T, N, d_s)
    messages: list                 # per t: (senders, receivers, (E, d_m) array)
    est_tensor: tc.Tensor          # (T*N, 2) graph node, rows in (t, vehicle) order
    loss: float = 0.0


@dataclass
class _StepPlan:
    senders: np.ndarray
    receivers: np.ndarray
    comm_efeat: np.ndarray         # (E_c, 3) sender's view of receiver
    urec: np.ndarray               # union-pair receivers (sorted, then neighbor)
    unb: np.ndarray                # union-pair neighbors
    union_efeat: np.ndarray        # (E_u, 3) receiver's view of neighbor
    m_sel: np.ndarray              # index into message rows, or E_c for "no message"
    i_feat: np.ndarray             # (N, 2)


def _plan_steps(ep: Episode, disable_comm: bool, scale: float) -> list:
    plans = []
    N = ep.n_vehicles
    for t in range(ep.window):
        meas = ep.meas_adj[t]
        comm = np.zeros_like(meas) if disable_comm else ep.comm_adj[t]
        efeat = np.zeros((N, N, 3))
        obs, subj = np.nonzero(meas)
        th = ep.ext_bearing[t, obs, subj]
        efeat[obs, subj, 0] = ep.ext_range[t, obs, subj] / ep.cfg.rho_meas
        efeat[obs, subj, 1] = np.cos(th)
        efeat[obs, subj, 2] = np.sin(th)
        senders, receivers = np.nonzero(comm)
        union = meas | comm
        urec, unb = np.nonzero(union)
        midx = np.full((N, N), len(senders), dtype=np.intp)
        midx[senders, receivers] = np.arange(len(senders))
        plans.append(_StepPlan(
            senders=senders, receivers=receivers,
            comm_efeat=efeat[senders, receivers],
            urec=urec, unb=unb,
            union_efeat=efeat[urec, unb],
            m_sel=midx[unb, urec],
            i_feat=ep.internal[t] / scale))
    return plans


def _run_plans(params: MlclParams, plans, n_vehicles: int, scale: float,
               collect: bool = False):
    """Execute per-step plans; returns (est_tensor, states, messages)."""
    d_s, d_m = params.dims.d_s, params.dims.d_m
    T = len(plans)
    s = tc.Tensor(np.zeros((n_vehicles, d_s)))
    zero_msg = tc.Tensor(np.zeros((1, d_m)))
    states = np.zeros((T, n_vehicles, d_s)) if collect else None
    messages = [] if collect else None
    ests = []
    for t in range(T):
        p = plans[t]
        n_comm = len(p.senders)
        n_union = len(p.urec)
        if n_comm > 0:
            mt_in = tc.concat([tc.gather_rows(s, p.senders),
                               tc.Tensor(p.comm_efeat)], axis=1)
            msgs = _two_layer(params.mtnn1, params.mtnn2, mt_in)
            if collect:
                messages.append((p.senders.copy(), p.receivers.copy(),
                                 msgs.data.copy()))
            padded = tc.concat([msgs, zero_msg], axis=0)
            m_in = tc.gather_rows(padded, p.m_sel)
        else:
            if collect:
                messages.append((p.senders.copy(), p.receivers.copy(),
                                 np.zeros((0, d_m))))
            m_in = tc.Tensor(np.zeros((n_union, d_m)))
        if n_union > 0:
            mr_in = tc.concat([m_in, tc.Tensor(p.union_efeat)], axis=1)
            latents = _two_layer(params.mrnn1, params.mrnn2, mr_in)
            pooled = tc.segment_sum(latents, p.urec, n_vehicles)
        else:
            pooled = tc.Tensor(np.zeros((n_vehicles, d_m)))
        gx = tc.concat([pooled, tc.Tensor(p.i_feat)], axis=1)
        s = tc.gru_forward(params.sunn, gx, s)
        if collect:
            states[t] = s.data
        ests.append(lenn_forward(params, s, scale))
    return tc.concat(ests, axis=0), states, messages


def rollout(params: MlclParams, ep: Episode, disable_comm: bool = False,
            scale: float = 1000.0) -> RolloutRecord:
    """Vectorized forward pass over the episode window.

    Messages at step t are built from states at t-1 and step-t measurements,
    then delivered within step t. The initial state is the zero vector.
    """
    N, T = ep.n_vehicles, ep.window
    plans = _plan_steps(ep, disable_comm, scale)
    est_tensor, states, messages = _run_plans(params, plans, N, scale,
                                              collect=True)
    estimates = est_tensor.data.reshape(T, N, 2).copy()
    return RolloutRecord(estimates=estimates, states=states,
                         messages=messages, est_tensor=est_tensor)


def _merged_plans(episodes, disable_comm: bool, scale: float):
    """Fuse a batch of same-window episodes into one block-diagonal graph."""
    T = episodes[0].window
    if any(ep.window != T for ep in episodes):
        raise ValueError("batched episodes must share a window length")
    per_ep = [_plan_steps(ep, disable_comm, scale) for ep in episodes]
    offsets = np.cumsum([0] + [ep.n_vehicles for ep in episodes])
    merged = []
    for t in range(T):
        senders, receivers, comm_ef = [], [], []
        urec, unb, union_ef, m_sel, i_feat = [], [], [], [], []
        msg_off = 0
        for k, plans in enumerate(per_ep):
            p = plans[t]
            off = offsets[k]
            e_c = len(p.senders)
            senders.append(p.senders + off)
            receivers.append(p.receivers + off)
            comm_ef.append(p.comm_efeat)
            urec.append(p.urec + off)
            unb.append(p.unb + off)
            union_ef.append(p.union_efeat)
            m_sel.append(np.where(p.m_sel == e_c, -1, p.m_sel + msg_off))
            msg_off += e_c
            i_feat.append(p.i_feat)
        sel = np.concatenate(m_sel) if m_sel else np.zeros(0, dtype=np.intp)
        sel = np.where(sel < 0, msg_off, sel).astype(np.intp)
        merged.append(_StepPlan(
            senders=np.concatenate(senders).astype(np.intp),
            receivers=np.concatenate(receivers).astype(np.intp),
            comm_efeat=np.concatenate(comm_ef) if comm_ef else np.zeros((0, 3)),
            urec=np.concatenate(urec).astype(np.intp),
            unb=np.concatenate(unb).astype(np.intp),
            union_efeat=np.concatenate(union_ef) if union_ef else np.zeros((0, 3)),
            m_sel=sel,
            i_feat=np.concatenate(i_feat)))
    return merged, offsets


def rollout_reference(params: MlclParams, ep: Episode,
                      disable_comm: bool = False,
                      scale: float = 1000.0) -> np.ndarray:
    """Loop-built rollout with explicit zero vectors for every missing input.

    The switching logic (which neighbors participate, which inputs are
    zero-filled) is implemented by plain Python loops over edges instead of
    the production gather/scatter indexing; the dense/GRU kernels are then
    applied to the assembled matrices exactly as in `rollout`, so agreement
    is bitwise. Returns estimates only, (T, N, 2).
    """
    N, T = ep.n_vehicles, ep.window
    d_s, d_m = params.dims.d_s, params.dims.d_m
    s = tc.Tensor(np.zeros((N, d_s)))
    out = np.zeros((T, N, 2))
    for t in range(T):
        meas = ep.meas_adj[t]
        comm = np.zeros_like(meas) if disable_comm else ep.comm_adj[t]

        def efeat(observer, subject):
            if not meas[observer, subject]:
                return np.zeros(3)
            th = ep.ext_bearing[t, observer, subject]
            return np.array([ep.ext_range[t, observer, subject] / ep.cfg.rho_meas,
                             np.cos(th), np.sin(th)])

        # messages, one row per directed comm edge in (sender, receiver) order
        comm_edges = [(a, b) for a in range(N) for b in range(N) if comm[a, b]]
        msg_of = {}
        if comm_edges:
            mt_rows = [np.concatenate([s.data[a], efeat(a, b)])
                       for a, b in comm_edges]
            msgs = _two_layer(params.mtnn1, params.mtnn2,
                              tc.Tensor(np.array(mt_rows))).data
            msg_of = {edge: msgs[k] for k, edge in enumerate(comm_edges)}
        # latents, one row per (receiver, neighbor) with at least one live edge
        union_edges = [(a, b) for a in range(N) for b in range(N)
                       if meas[a, b] or comm[a, b]]
        pooled = np.zeros((N, d_m))
        if union_edges:
            mr_rows = [np.concatenate([msg_of.get((b, a), np.zeros(d_m)),
                                       efeat(a, b)])
                       for a, b in union_edges]
            latents = _two_layer(params.mrnn1, params.mrnn2,
                                 tc.Tensor(np.array(mr_rows))).data
            for k, (a, _) in enumerate(union_edges):
                pooled[a] = pooled[a] + latents[k]
        gx = tc.Tensor(np.concatenate([pooled, ep.internal[t] / scale], axis=1))
        s = tc.gru_forward(params.sunn, gx, s)
        out[t] = lenn_forward(params, s, scale).data
    return out


# ---------------------------------------------------------------------------
# loss / training / evaluation

_SQRT_GUARD = 1e-24  # keeps the radial-error gradient finite at zero error


def loss_mae(record: RolloutRecord, truth: np.ndarray) -> tc.Tensor:
    """Mean Euclidean position error in meters, differentiable."""
    T, N = truth.shape[:2]
    flat = truth.reshape(T * N, 2)
    d = tc.sub(record.est_tensor, tc.Tensor(flat))
    sq = tc.reduce_sum(tc.mul(d, d), axis=1)
    dist = tc.sqrt(tc.add(sq, tc.Tensor(np.full(T * N, _SQRT_GUARD))))
    return tc.reduce_mean(dist)


def mae_value(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Plain numpy mean Euclidean error (the evaluation metric)."""
    return float(np.mean(np.linalg.norm(estimates - truth, axis=-1)))


def evaluate(params: MlclParams, episodes, scale: float = 1000.0,
             disable_comm: bool = False, tail: int | None = None):
    """Per-episode MAE plus the aggregate mean. `tail` restricts to last steps."""
    per_episode = []
    for ep in episodes:
        rec = rollout(params, ep, disable_comm=disable_comm, scale=scale)
        est, tru = rec.estimates, ep.truth
        if tail is not None:
            est, tru = est[-tail:], tru[-tail:]
        per_episode.append(mae_value(est, tru))
    return per_episode, float(np.mean(per_episode))


def batch_gradients(params: MlclParams, episodes, disable_comm: bool,
                    scale: float):
    """Mean loss over a batch and its gradients w.r.t. the shared parameters.

    The batch runs as one merged block-diagonal rollout; the loss is the
    average over episodes of the per-episode MAE.
    """
    tensors = params.tensors()
    tc.zero_grads(tensors)
    T = episodes[0].window
    with tc.relaxed_checks():
        plans, offsets = _merged_plans(episodes, disable_comm, scale)
        n_total = int(offsets[-1])
        est, _, _ = _run_plans(params, plans, n_total, scale)
        truth = np.concatenate([np.concatenate([ep.truth[t] for ep in episodes])
                                for t in range(T)])
        d = tc.sub(est, tc.Tensor(truth))
        sq = tc.reduce_sum(tc.mul(d, d), axis=1)
        dist = tc.sqrt(tc.add(sq, tc.Tensor(np.full(truth.shape[0], _SQRT_GUARD))))
        w_row = np.zeros(n_total)
        for k, ep in enumerate(episodes):
            w_row[offsets[k]:offsets[k + 1]] = 1.0 / (len(episodes) * T *
                                                      ep.n_vehicles)
        weights = np.tile(w_row, T)
        total = tc.reduce_sum(tc.mul(dist, tc.Tensor(weights)))
        tc.backward(total)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
             for t in tensors]
    return float(total.data), grads


def train(params: MlclParams, episodes, cfg: TrainConfig,
          eval_episodes=None, start_step: int = 0, adam: tc.AdamState | None = None):
    """Mini-batch BPTT training of the shared parameter set.

    Returns (params, curve, adam) where curve rows are
    (step, train_loss_m, eval_mae_m or nan).
    """
    if not episodes:
        raise ValueError("empty training dataset")
    tensors = params.tensors()
    if adam is None:
        adam = tc.init_adam(tensors, lr=cfg.lr)
    else:
        adam.lr = cfg.lr
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.seed, spawn_key=(start_step,)))
    curve = []
    for k in range(cfg.steps):
        step = start_step + k + 1
        idx = rng.choice(len(episodes), size=min(cfg.batch_size, len(episodes)),
                         replace=False)
        batch = [episodes[i] for i in sorted(idx.tolist())]
        loss, grads = batch_gradients(params, batch, cfg.disable_comm, cfg.scale)
        if not np.isfinite(loss):
            raise tc.NumericHealthError(
                f"training loss became non-finite at step {step}")
        if cfg.clip_norm is not None:
            norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
            if norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
        tc.adam_step(tensors, grads, adam)
        eval_mae = float("nan")
        if eval_episodes is not None and (
                k == cfg.steps - 1 or step % cfg.eval_every == 0):
            _, eval_mae = evaluate(params, eval_episodes,
                                   scale=cfg.scale, disable_comm=cfg.disable_comm)
        curve.append((step, loss, eval_mae))
    return params, curve, adam
