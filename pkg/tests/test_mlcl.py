import dataclasses

import numpy as np
import pytest

from cooploc import mlcl, sensing
from cooploc import tensorcore as tc
from tests.conftest import central_difference


@pytest.fixture(scope="module")
def tiny_params():
    return mlcl.init_mlcl_params(mlcl.MlclDims(d_s=6, d_m=5, hidden=8), seed=3)


@pytest.fixture(scope="module")
def desk_params():
    return mlcl.init_mlcl_params(mlcl.MlclDims(), seed=1)


def strip_comm(ep: sensing.Episode) -> sensing.Episode:
    return dataclasses.replace(ep, comm_adj=np.zeros_like(ep.comm_adj))


class TestUnitContracts:
    def test_shapes(self, desk_params):
        d = desk_params.dims
        s = np.zeros(d.d_s)
        assert mlcl.mtnn_forward(desk_params, s, np.zeros(3)).shape == (d.d_m,)
        assert mlcl.mrnn_forward(desk_params, np.zeros(d.d_m), np.zeros(3)).shape == (d.d_m,)
        st = mlcl.aggregate_and_update(desk_params, [], np.zeros(2), s)
        assert st.shape == (d.d_s,)
        assert mlcl.lenn_forward(desk_params, st).shape == (2,)

    def test_mtnn_matches_manual_composition(self, tiny_params):
        p = tiny_params
        rng = np.random.default_rng(0)
        s = rng.normal(size=p.dims.d_s)
        e = rng.normal(size=3)
        got = mlcl.mtnn_forward(p, s, e).data
        x = np.concatenate([s, e])
        h = np.maximum(p.mtnn1.W.data @ x + p.mtnn1.b.data, 0.0)
        want = p.mtnn2.W.data @ h + p.mtnn2.b.data
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_zero_fill_defaults(self, tiny_params):
        p = tiny_params
        s = np.random.default_rng(1).normal(size=p.dims.d_s)
        assert np.array_equal(mlcl.mtnn_forward(p, s).data,
                              mlcl.mtnn_forward(p, s, np.zeros(3)).data)
        assert np.array_equal(mlcl.mrnn_forward(p).data,
                              mlcl.mrnn_forward(p, np.zeros(p.dims.d_m),
                                                np.zeros(3)).data)

    def test_lenn_scale(self, tiny_params):
        s = np.random.default_rng(2).normal(size=tiny_params.dims.d_s)
        a = mlcl.lenn_forward(tiny_params, s, scale=1.0).data
        b = mlcl.lenn_forward(tiny_params, s, scale=1000.0).data
        assert np.allclose(b, 1000.0 * a, rtol=1e-12)

    def test_pooling_is_order_invariant_sum(self, tiny_params):
        p = tiny_params
        rng = np.random.default_rng(3)
        lat = [tc.Tensor(rng.normal(size=p.dims.d_m)) for _ in range(4)]
        i = rng.normal(size=2)
        s = rng.normal(size=p.dims.d_s)
        a = mlcl.aggregate_and_update(p, lat, i, s).data
        b = mlcl.aggregate_and_update(p, lat[::-1], i, s).data
        assert np.allclose(a, b, atol=1e-12)


class TestRollout:
    def test_reference_agreement_bitwise(self, tiny_params, sample_episode):
        rec = mlcl.rollout(tiny_params, sample_episode)
        ref = mlcl.rollout_reference(tiny_params, sample_episode)
        assert np.array_equal(rec.estimates, ref)

    def test_reference_agreement_disable_comm(self, tiny_params, sample_episode):
        rec = mlcl.rollout(tiny_params, sample_episode, disable_comm=True)
        ref = mlcl.rollout_reference(tiny_params, sample_episode,
                                     disable_comm=True)
        assert np.array_equal(rec.estimates, ref)

    def test_disable_comm_equals_empty_comm_graph(self, tiny_params,
                                                  sample_episode):
        a = mlcl.rollout(tiny_params, sample_episode, disable_comm=True)
        b = mlcl.rollout(tiny_params, strip_comm(sample_episode))
        assert np.array_equal(a.estimates, b.estimates)

    def test_temporal_causality(self, tiny_params, sample_episode):
        """Estimates up to time t never depend on later measurements."""
        ep = sample_episode
        rng = np.random.default_rng(4)
        cut = 12
        perturbed = dataclasses.replace(
            ep, internal=ep.internal.copy(),
            ext_range=ep.ext_range.copy())
        perturbed.internal[cut:] += rng.normal(size=perturbed.internal[cut:].shape)
        perturbed.ext_range[cut:] += 0.5
        a = mlcl.rollout(tiny_params, ep).estimates
        b = mlcl.rollout(tiny_params, perturbed).estimates
        assert np.array_equal(a[:cut], b[:cut])
        assert not np.array_equal(a[cut:], b[cut:])

    def test_permutation_equivariance(self, tiny_params, sample_episode):
        ep = sample_episode
        perm = np.random.default_rng(5).permutation(ep.n_vehicles)
        ep_p = sensing.Episode(
            vehicle_ids=[ep.vehicle_ids[i] for i in perm],
            truth=ep.truth[:, perm], internal=ep.internal[:, perm],
            ext_range=ep.ext_range[:, perm][:, :, perm],
            ext_bearing=ep.ext_bearing[:, perm][:, :, perm],
            meas_adj=ep.meas_adj[:, perm][:, :, perm],
            comm_adj=ep.comm_adj[:, perm][:, :, perm], cfg=ep.cfg)
        a = mlcl.rollout(tiny_params, ep).estimates
        b = mlcl.rollout(tiny_params, ep_p).estimates
        assert np.allclose(a[:, perm], b, atol=1e-9)

    def test_message_rows_match_unit_contract(self, tiny_params, sample_episode):
        p = tiny_params
        rec = mlcl.rollout(p, sample_episode)
        t = next(t for t in range(sample_episode.window)
                 if len(rec.messages[t][0]) > 0 and t > 0)
        senders, receivers, msgs = rec.messages[t]
        prev_states = rec.states[t - 1]
        for k in range(len(senders)):
            a, b = int(senders[k]), int(receivers[k])
            if sample_episode.meas_adj[t, a, b]:
                th = sample_episode.ext_bearing[t, a, b]
                e = np.array([sample_episode.ext_range[t, a, b]
                              / sample_episode.cfg.rho_meas,
                              np.cos(th), np.sin(th)])
            else:
                e = np.zeros(3)
            want = mlcl.mtnn_forward(p, prev_states[a], e).data
            assert np.allclose(msgs[k], want, atol=1e-12)


class TestGradients:
    def test_bptt_matches_central_difference(self, sample_episode):
        p = mlcl.init_mlcl_params(mlcl.MlclDims(d_s=4, d_m=3, hidden=5), seed=8)
        ep = dataclasses.replace(
            sample_episode,
            truth=sample_episode.truth[:4], internal=sample_episode.internal[:4],
            ext_range=sample_episode.ext_range[:4],
            ext_bearing=sample_episode.ext_bearing[:4],
            meas_adj=sample_episode.meas_adj[:4],
            comm_adj=sample_episode.comm_adj[:4])

        def loss_value():
            rec = mlcl.rollout(p, ep)
            return float(mlcl.loss_mae(rec, ep.truth).data)

        tensors = p.tensors()
        tc.zero_grads(tensors)
        rec = mlcl.rollout(p, ep)
        tc.backward(mlcl.loss_mae(rec, ep.truth))
        worst = 0.0
        for t in tensors:
            fd = central_difference(loss_value, t.data, step=1e-6)
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            denom = max(np.abs(fd).max(), np.abs(g).max(), 1e-8)
            worst = max(worst, np.abs(g - fd).max() / denom)
        assert worst < 1e-3

    def test_mtnn_gradients_gated_by_comm(self, tiny_params, sample_episode):
        p = tiny_params
        for disable, expect_zero in ((True, True), (False, False)):
            tensors = p.tensors()
            tc.zero_grads(tensors)
            rec = mlcl.rollout(p, sample_episode, disable_comm=disable)
            tc.backward(mlcl.loss_mae(rec, sample_episode.truth))
            mt_norm = sum(float(np.abs(t.grad).sum())
                          for t in tc.dense_params(p.mtnn1)
                          + tc.dense_params(p.mtnn2) if t.grad is not None)
            if expect_zero:
                assert mt_norm == 0.0
            else:
                assert mt_norm > 0.0

    def test_batch_loss_equals_mean_of_episode_losses(self, tiny_params,
                                                      small_traces,
                                                      default_noise):
        eps = [sensing.make_episode(small_traces, 5, 8, default_noise,
                                    seed=30, episode_index=i) for i in range(3)]
        loss, _ = mlcl.batch_gradients(tiny_params, eps, False, 1000.0)
        singles = []
        for ep in eps:
            rec = mlcl.rollout(tiny_params, ep)
            singles.append(float(mlcl.loss_mae(rec, ep.truth).data))
        assert loss == pytest.approx(np.mean(singles), abs=1e-12)


class TestTrain:
    def _episodes(self, small_traces, default_noise, n=6):
        return [sensing.make_episode(small_traces, 5, 10, default_noise,
                                     seed=40, episode_index=i) for i in range(n)]

    def test_zero_lr_keeps_params(self, small_traces, default_noise):
        eps = self._episodes(small_traces, default_noise)
        p = mlcl.init_mlcl_params(mlcl.MlclDims(d_s=6, d_m=5, hidden=8), seed=2)
        before = [t.data.copy() for t in p.tensors()]
        cfg = mlcl.TrainConfig(lr=0.0, steps=3, batch_size=4)
        mlcl.train(p, eps, cfg)
        for b, t in zip(before, p.tensors()):
            assert np.array_equal(b, t.data)

    def test_small_lr_reduces_loss(self, small_traces, default_noise):
        eps = self._episodes(small_traces, default_noise)
        p = mlcl.init_mlcl_params(mlcl.MlclDims(d_s=6, d_m=5, hidden=8), seed=2)
        loss0, _ = mlcl.batch_gradients(p, eps, False, 1000.0)
        cfg = mlcl.TrainConfig(lr=0.001, steps=25, batch_size=6)
        mlcl.train(p, eps, cfg)
        loss1, _ = mlcl.batch_gradients(p, eps, False, 1000.0)
        assert loss1 < loss0

    def test_training_deterministic(self, small_traces, default_noise):
        eps = self._episodes(small_traces, default_noise)
        outs = []
        for _ in range(2):
            p = mlcl.init_mlcl_params(mlcl.MlclDims(d_s=6, d_m=5, hidden=8),
                                      seed=2)
            cfg = mlcl.TrainConfig(lr=0.001, steps=5, batch_size=4, seed=9)
            _, curve, _ = mlcl.train(p, eps, cfg)
            outs.append((curve, [t.data.copy() for t in p.tensors()]))
        assert np.allclose(outs[0][0], outs[1][0], equal_nan=True, rtol=0, atol=0)
        for a, b in zip(outs[0][1], outs[1][1]):
            assert np.array_equal(a, b)

    def test_resumed_run_continues_step_numbering(self, small_traces,
                                                  default_noise):
        eps = self._episodes(small_traces, default_noise)
        p = mlcl.init_mlcl_params(mlcl.MlclDims(d_s=4, d_m=3, hidden=4), seed=0)
        cfg = mlcl.TrainConfig(lr=0.001, steps=3, batch_size=4)
        _, c1, adam = mlcl.train(p, eps, cfg)
        _, c2, _ = mlcl.train(p, eps, cfg, start_step=3, adam=adam)
        assert [row[0] for row in c1 + c2] == [1, 2, 3, 4, 5, 6]

    def test_empty_dataset_rejected(self):
        p = mlcl.init_mlcl_params(mlcl.MlclDims(d_s=4, d_m=3, hidden=4), seed=0)
        with pytest.raises(ValueError):
            mlcl.train(p, [], mlcl.TrainConfig())

    def test_curve_rows(self, small_traces, default_noise):
        eps = self._episodes(small_traces, default_noise)
        p = mlcl.init_mlcl_params(mlcl.MlclDims(d_s=4, d_m=3, hidden=4), seed=0)
        cfg = mlcl.TrainConfig(lr=0.001, steps=4, batch_size=4, eval_every=2)
        _, curve, _ = mlcl.train(p, eps, cfg, eval_episodes=eps[:2])
        assert [row[0] for row in curve] == [1, 2, 3, 4]
        assert all(np.isfinite(row[1]) for row in curve)
        assert np.isnan(curve[0][2]) and np.isfinite(curve[1][2])
        assert np.isfinite(curve[3][2])  # final step always evaluated


class TestCheckpointRoundTrip:
    def test_params_round_trip(self, tiny_params, sample_episode, tmp_path):
        path = tmp_path / "params.npz"
        mlcl.save_mlcl_params(tiny_params, path)
        back = mlcl.load_mlcl_params(path)
        assert back.dims == tiny_params.dims
        a = mlcl.rollout(tiny_params, sample_episode).estimates
        b = mlcl.rollout(back, sample_episode).estimates
        assert np.array_equal(a, b)


class TestMetrics:
    def test_mae_value_hand_computed(self):
        est = np.array([[[0.0, 0.0], [3.0, 4.0]]])
        tru = np.array([[[0.0, 1.0], [0.0, 0.0]]])
        assert mlcl.mae_value(est, tru) == pytest.approx(3.0)  # (1 + 5) / 2

    def test_loss_mae_matches_metric(self, tiny_params, sample_episode):
        rec = mlcl.rollout(tiny_params, sample_episode)
        loss = float(mlcl.loss_mae(rec, sample_episode.truth).data)
        metric = mlcl.mae_value(rec.estimates, sample_episode.truth)
        assert loss == pytest.approx(metric, rel=1e-9)

    def test_evaluate_zero_params_is_mean_truth_norm(self, tiny_params,
                                                     sample_episode):
        zero = mlcl.init_mlcl_params(tiny_params.dims, seed=0)
        for t in zero.named_tensors().values():
            t.data[...] = 0.0
        per, agg = mlcl.evaluate(zero, [sample_episode])
        want = float(np.mean(np.linalg.norm(sample_episode.truth, axis=-1)))
        assert per[0] == pytest.approx(want, rel=1e-12)
        assert agg == pytest.approx(want, rel=1e-12)

    def test_evaluate_tail(self, tiny_params, sample_episode):
        per, agg = mlcl.evaluate(tiny_params, [sample_episode], tail=5)
        rec = mlcl.rollout(tiny_params, sample_episode)
        want = mlcl.mae_value(rec.estimates[-5:], sample_episode.truth[-5:])
        assert per[0] == pytest.approx(want)
        assert agg == pytest.approx(want)
