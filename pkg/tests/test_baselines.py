import dataclasses
import math

import numpy as np
import pytest

from cooploc import baselines, mlcl, sensing
from cooploc.sensing import NoiseConfig


def make_manual_episode(truth, cfg, internal=None, ranges=None, bearings=None,
                        meas=None, comm=None):
    """Episode with hand-specified measurements (no noise synthesis)."""
    truth = np.asarray(truth, dtype=float)
    T, N = truth.shape[:2]
    internal = truth.copy() if internal is None else np.asarray(internal, float)
    meas = np.zeros((T, N, N), bool) if meas is None else np.asarray(meas, bool)
    comm = meas.copy() if comm is None else np.asarray(comm, bool)
    rr = np.zeros((T, N, N)) if ranges is None else np.asarray(ranges, float)
    bb = np.zeros((T, N, N)) if bearings is None else np.asarray(bearings, float)
    ep = sensing.Episode(vehicle_ids=list(range(N)), truth=truth,
                         internal=internal, ext_range=rr, ext_bearing=bb,
                         meas_adj=meas, comm_adj=comm, cfg=cfg)
    ep.validate()
    return ep


def single_vehicle_episode(small_traces, default_noise, seed=21):
    return sensing.make_episode(small_traces, 1, 20, default_noise, seed=seed)


class TestNaive:
    def test_equals_internal_and_is_a_copy(self, sample_episode):
        est = baselines.naive_estimate(sample_episode)
        assert np.array_equal(est, sample_episode.internal)
        est[0, 0, 0] += 1.0
        assert est[0, 0, 0] != sample_episode.internal[0, 0, 0]


def reference_scalar_kf(internal, sigma, accel_std, dt=1.0, vel_var=100.0):
    """Independent per-axis (position, velocity) Kalman filter oracle."""
    T = internal.shape[0]
    F = np.array([[1.0, dt], [0.0, 1.0]])
    Q = accel_std ** 2 * np.array([[dt ** 4 / 4, dt ** 3 / 2],
                                   [dt ** 3 / 2, dt ** 2]])
    Hm = np.array([[1.0, 0.0]])
    R = np.array([[sigma ** 2]])
    out = np.zeros((T, 2))
    for axis in range(2):
        x = np.array([internal[0, axis], 0.0])
        P = np.diag([sigma ** 2, vel_var])
        out[0, axis] = x[0]
        for t in range(1, T):
            x = F @ x
            P = F @ P @ F.T + Q
            S = Hm @ P @ Hm.T + R
            K = P @ Hm.T @ np.linalg.inv(S)
            x = x + (K @ (internal[t, axis] - Hm @ x)).ravel()
            P = (np.eye(2) - K @ Hm) @ P
            out[t, axis] = x[0]
    return out


class TestEkf:
    def test_predict_matches_closed_form(self):
        cfg = NoiseConfig()
        st = baselines.ekf_init(np.array([[10.0, 20.0]]), cfg, accel_std=2.0)
        st.mean[2:4] = [3.0, -1.0]
        pred = baselines.ekf_predict(st, dt=1.0)
        assert np.allclose(pred.mean[:2], [13.0, 19.0])
        assert np.allclose(pred.mean[2:4], [3.0, -1.0])
        f1, q1 = baselines._cv_blocks(1.0, 2.0)
        want_cov = f1 @ st.cov @ f1.T + q1
        assert np.allclose(pred.cov, 0.5 * (want_cov + want_cov.T))

    def test_single_vehicle_matches_scalar_kf(self, small_traces, default_noise):
        ep = single_vehicle_episode(small_traces, default_noise)
        got = baselines.ekf_run(ep, accel_std=1.0)
        want = reference_scalar_kf(ep.internal[:, 0, :],
                                   default_noise.sigma_gnss, 1.0)
        assert np.allclose(got[:, 0, :], want, atol=1e-9)

    def test_measurement_jacobian_matches_finite_difference(self):
        cfg = NoiseConfig()
        rng = np.random.default_rng(0)
        mean = rng.normal(scale=100.0, size=8)
        externals = [(0, 1, 120.0, 0.3), (1, 0, 118.0, -2.9)]

        h0, H, _ = baselines.measurement_model(mean, [0, 1], externals, cfg)
        step = 1e-6
        for j in range(8):
            mp, mm = mean.copy(), mean.copy()
            mp[j] += step
            mm[j] -= step
            hp, _, _ = baselines.measurement_model(mp, [0, 1], externals, cfg)
            hm, _, _ = baselines.measurement_model(mm, [0, 1], externals, cfg)
            fd = (hp - hm) / (2 * step)
            assert np.allclose(H[:, j], fd, atol=1e-4)

    def test_update_reduces_position_uncertainty(self):
        cfg = NoiseConfig()
        st = baselines.ekf_init(np.array([[0.0, 0.0], [100.0, 0.0]]), cfg)
        externals = [(0, 1, 100.0, 0.0)]
        upd = baselines.ekf_update(st, np.array([[0.0, 0.0], [100.0, 0.0]]),
                                   externals, cfg)
        pos = [0, 1, 4, 5]
        assert np.trace(upd.cov[np.ix_(pos, pos)]) < np.trace(st.cov[np.ix_(pos, pos)])

    def test_cooperation_beats_gnss_only_filtering(self):
        # with a near-perfect range/bearing sensor the joint filter must win
        cfg = NoiseConfig(sigma_range=0.1, sigma_bearing=0.001, p_fail=0.0)
        rng = np.random.default_rng(1)
        T, N = 20, 3
        truth = np.zeros((T, N, 2))
        base = np.array([[0.0, 0.0], [120.0, 0.0], [0.0, 130.0]])
        for t in range(T):
            truth[t] = base + np.array([5.0 * t, 2.0 * t])
        internal = truth + rng.normal(0, cfg.sigma_gnss, truth.shape)
        meas = np.zeros((T, N, N), bool)
        rr = np.zeros((T, N, N))
        bb = np.zeros((T, N, N))
        for t in range(T):
            for a in range(N):
                for b in range(N):
                    if a == b:
                        continue
                    meas[t, a, b] = True
                    d = truth[t, b] - truth[t, a]
                    rr[t, a, b] = max(0.0, np.linalg.norm(d)
                                      + rng.normal(0, cfg.sigma_range))
                    bb[t, a, b] = sensing.wrap_angle(
                        math.atan2(d[1], d[0]) + rng.normal(0, cfg.sigma_bearing))
        ep = make_manual_episode(truth, cfg, internal, rr, bb, meas)
        ep_alone = dataclasses.replace(ep, meas_adj=np.zeros_like(meas),
                                       ext_range=np.zeros_like(rr),
                                       ext_bearing=np.zeros_like(bb))
        coop = mlcl.mae_value(baselines.ekf_run(ep), truth)
        alone = mlcl.mae_value(baselines.ekf_run(ep_alone), truth)
        assert coop < alone

    def test_bearing_innovation_wraps(self):
        cfg = NoiseConfig()
        st = baselines.ekf_init(np.array([[0.0, 0.0], [-100.0, 1.0]]), cfg)
        # true bearing near +pi; a measurement just below -pi must not produce
        # a ~2*pi innovation
        externals = [(0, 1, 100.0, -math.pi + 0.005)]
        upd = baselines.ekf_update(st, None, externals, cfg)
        assert np.all(np.abs(upd.mean - st.mean) < 10.0)

    def test_beats_naive_on_sampled_episodes(self, small_traces, default_noise):
        maes_ekf, maes_naive = [], []
        for i in range(5):
            ep = sensing.make_episode(small_traces, 6, 20, default_noise,
                                      seed=60, episode_index=i)
            maes_ekf.append(mlcl.mae_value(baselines.ekf_run(ep), ep.truth))
            maes_naive.append(mlcl.mae_value(baselines.naive_estimate(ep),
                                             ep.truth))
        assert np.mean(maes_ekf) < np.mean(maes_naive)


class TestMle:
    def test_gnss_only_returns_internal(self, small_traces, default_noise):
        ep = single_vehicle_episode(small_traces, default_noise)
        res = baselines.mle_window(ep)
        assert res.converged
        assert np.allclose(res.estimates, ep.internal, atol=1e-12)
        assert res.cost == pytest.approx(0.0, abs=1e-18)

    def test_residuals_at_truth_with_exact_measurements(self):
        cfg = NoiseConfig()
        truth = np.array([[[0.0, 0.0], [80.0, 60.0]]])
        meas = np.ones((1, 2, 2), bool)
        meas[:, [0, 1], [0, 1]] = False
        rr = np.zeros((1, 2, 2))
        bb = np.zeros((1, 2, 2))
        rr[0, 0, 1] = rr[0, 1, 0] = 100.0
        bb[0, 0, 1] = math.atan2(60, 80)
        bb[0, 1, 0] = sensing.wrap_angle(math.atan2(-60, -80))
        ep = make_manual_episode(truth, cfg, ranges=rr, bearings=bb, meas=meas)
        r, J = baselines.mle_residuals(truth, ep)
        assert np.allclose(r, 0.0, atol=1e-12)
        assert J.shape == (4 + 4, 4)

    def test_jacobian_matches_finite_difference(self, small_traces,
                                                default_noise):
        ep = sensing.make_episode(small_traces, 3, 2, default_noise, seed=61)
        p = ep.internal.copy()
        r0, J = baselines.mle_residuals(p, ep)
        flat = p.reshape(-1)
        step = 1e-6
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            rp, _ = baselines.mle_residuals(p, ep)
            flat[j] = orig - step
            rm, _ = baselines.mle_residuals(p, ep)
            flat[j] = orig
            assert np.allclose(J[:, j], (rp - rm) / (2 * step), atol=1e-4)

    def test_optimum_confirmed_by_grid_search(self):
        # tiny problem (2 vehicles, 1 step, 4 variables) so an exhaustive
        # lattice around the solver's answer is feasible
        cfg = NoiseConfig(sigma_gnss=5.0, sigma_range=1.0, sigma_bearing=0.05)
        truth = np.array([[[0.0, 0.0], [40.0, 30.0]]])
        internal = truth + np.array([[[4.0, -3.0], [-2.0, 5.0]]])
        meas = np.ones((1, 2, 2), bool)
        meas[:, [0, 1], [0, 1]] = False
        rr = np.zeros((1, 2, 2))
        bb = np.zeros((1, 2, 2))
        rr[0, 0, 1] = 51.0
        rr[0, 1, 0] = 49.5
        bb[0, 0, 1] = math.atan2(30, 40) + 0.02
        bb[0, 1, 0] = sensing.wrap_angle(math.atan2(-30, -40) - 0.01)
        ep = make_manual_episode(truth, cfg, internal, rr, bb, meas)
        res = baselines.mle_window(ep)
        assert res.converged
        offsets = np.arange(-0.5, 0.51, 0.1)
        best_grid = np.inf
        for da in offsets:
            for db in offsets:
                for dc in offsets:
                    for dd in offsets:
                        p = res.estimates + np.array(
                            [[[da, db], [dc, dd]]])
                        best_grid = min(best_grid, baselines.mle_cost(p, ep))
        assert res.cost <= best_grid + 1e-9

    def test_cost_not_worse_than_initialization(self, small_traces,
                                                default_noise):
        ep = sensing.make_episode(small_traces, 3, 2, default_noise, seed=62)
        res = baselines.mle_window(ep)
        assert res.cost <= baselines.mle_cost(ep.internal, ep) + 1e-12
        assert res.iterations <= 200

    def test_motion_prior_adds_second_difference_residuals(self, small_traces,
                                                           default_noise):
        ep = sensing.make_episode(small_traces, 3, 5, default_noise, seed=64)
        r0, _ = baselines.mle_residuals(ep.internal, ep)
        r1, J1 = baselines.mle_residuals(ep.internal, ep, accel_prior_std=1.0)
        T, N = ep.window, ep.n_vehicles
        assert r1.size == r0.size + 2 * (T - 2) * N
        assert J1.shape == (r1.size, 2 * T * N)

    def test_strong_motion_prior_straightens_trajectory(self, small_traces,
                                                        default_noise):
        ep = sensing.make_episode(small_traces, 2, 8, default_noise, seed=65)
        res = baselines.mle_window(ep, accel_prior_std=1e-4)
        accel = np.diff(res.estimates, n=2, axis=0)
        assert np.max(np.abs(accel)) < 0.05  # near-constant velocity

    def test_beats_naive_on_sampled_episodes(self, small_traces, default_noise):
        maes_mle, maes_naive = [], []
        for i in range(3):
            ep = sensing.make_episode(small_traces, 6, 20, default_noise,
                                      seed=63, episode_index=i)
            res = baselines.mle_window(ep)
            maes_mle.append(mlcl.mae_value(res.estimates, ep.truth))
            maes_naive.append(mlcl.mae_value(ep.internal, ep.truth))
        assert np.mean(maes_mle) < np.mean(maes_naive)


class TestGcn:
    def test_normalized_adjacency_path_graph(self):
        adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], bool)
        got = baselines.normalized_adjacency(adj)
        # degrees with self loops: 2, 3, 2
        want = np.array([[1 / 2, 1 / math.sqrt(6), 0],
                         [1 / math.sqrt(6), 1 / 3, 1 / math.sqrt(6)],
                         [0, 1 / math.sqrt(6), 1 / 2]])
        assert np.allclose(got, want, atol=1e-12)

    def test_isolated_node_reduces_to_mlp(self, small_traces, default_noise):
        ep = single_vehicle_episode(small_traces, default_noise)
        params = baselines.init_gcn_params(16, seed=0)
        got = baselines.gcn_forward(params, ep, 0).data
        x = baselines.gcn_node_features(ep, 0, 1000.0)[0]
        h1 = np.maximum(params.layer1.W.data @ x + params.layer1.b.data, 0)
        h2 = np.maximum(params.layer2.W.data @ h1 + params.layer2.b.data, 0)
        h3 = np.maximum(params.head1.W.data @ h2 + params.head1.b.data, 0)
        want = 1000.0 * (params.head2.W.data @ h3 + params.head2.b.data)
        assert np.allclose(got[0], want, atol=1e-9)

    def test_matches_loop_aggregation_oracle(self, sample_episode):
        ep = sample_episode
        params = baselines.init_gcn_params(8, seed=1)
        t = 0
        got = baselines.gcn_forward(params, ep, t).data
        x = baselines.gcn_node_features(ep, t, 1000.0)
        am = baselines.normalized_adjacency(ep.meas_adj[t])
        ac = baselines.normalized_adjacency(ep.comm_adj[t])
        N = ep.n_vehicles
        agg = np.array([sum(am[i, j] * x[j] for j in range(N)) for i in range(N)])
        h1 = np.maximum(agg @ params.layer1.W.data.T + params.layer1.b.data, 0)
        agg2 = np.array([sum(ac[i, j] * h1[j] for j in range(N)) for i in range(N)])
        h2 = np.maximum(agg2 @ params.layer2.W.data.T + params.layer2.b.data, 0)
        h3 = np.maximum(h2 @ params.head1.W.data.T + params.head1.b.data, 0)
        want = 1000.0 * (h3 @ params.head2.W.data.T + params.head2.b.data)
        assert np.allclose(got, want, atol=1e-9)

    def test_permutation_equivariance(self, sample_episode):
        ep = sample_episode
        params = baselines.init_gcn_params(8, seed=2)
        perm = np.random.default_rng(3).permutation(ep.n_vehicles)
        ep_p = sensing.Episode(
            vehicle_ids=[ep.vehicle_ids[i] for i in perm],
            truth=ep.truth[:, perm], internal=ep.internal[:, perm],
            ext_range=ep.ext_range[:, perm][:, :, perm],
            ext_bearing=ep.ext_bearing[:, perm][:, :, perm],
            meas_adj=ep.meas_adj[:, perm][:, :, perm],
            comm_adj=ep.comm_adj[:, perm][:, :, perm], cfg=ep.cfg)
        a = baselines.gcn_estimate(params, ep)
        b = baselines.gcn_estimate(params, ep_p)
        assert np.allclose(a[:, perm], b, atol=1e-9)

    def test_training_reduces_eval_error(self, small_traces, default_noise):
        eps = [sensing.make_episode(small_traces, 5, 10, default_noise,
                                    seed=70, episode_index=i) for i in range(6)]
        params = baselines.init_gcn_params(16, seed=4)
        _, before = baselines.evaluate_gcn(params, eps)
        cfg = mlcl.TrainConfig(lr=0.002, steps=30, batch_size=6)
        baselines.gcn_train(params, eps, cfg)
        _, after = baselines.evaluate_gcn(params, eps)
        assert after < before

    def test_checkpoint_round_trip(self, sample_episode, tmp_path):
        params = baselines.init_gcn_params(8, seed=5)
        path = tmp_path / "gcn.npz"
        baselines.save_gcn_params(params, path)
        back = baselines.load_gcn_params(path)
        a = baselines.gcn_estimate(params, sample_episode)
        b = baselines.gcn_estimate(back, sample_episode)
        assert np.array_equal(a, b)
