import math

import numpy as np
import pytest

from editflow import flowgen as fg
from editflow import microworld as mw
from editflow import numcore as nc
from editflow import objectives as ob
from editflow import reflector as rf


def tiny_world(n=8, seed=0):
    return mw.gen_dataset(n, seed=seed, frames=2, height=2, width=2)[0]


def tiny_flow_cfg():
    return fg.FlowConfig(frames=2, height=2, width=2, d_video=4, d_instr=3,
                         d_understand=3, d_cond=4, hidden=5, instr_buckets=8)


def tiny_critic(seed=3):
    cfg = rf.CriticConfig(frames=2, height=2, width=2, k_frames=2, hidden1=8, hidden2=6)
    store = nc.ParamStore(seed=seed)
    rf.init_params(store, cfg)
    return store, cfg


def make_state(objective="sft", seed=0, critic=None, optimizer="adamw", lr=3e-3):
    flow_cfg = tiny_flow_cfg()
    store = nc.ParamStore(seed=seed)
    fg.init_params(store, flow_cfg)
    return ob.TrainState(
        store=store, flow_cfg=flow_cfg,
        critic_store=critic[0] if critic else None,
        critic_cfg=critic[1] if critic else None,
        opt=nc.OptimizerConfig(kind=optimizer, lr=lr, weight_decay=0.0),
    )


class TestFmLoss:
    def test_zero(self):
        v = [np.ones(4), np.zeros(4)]
        total, per = ob.fm_loss(v, [x.copy() for x in v])
        assert total == 0.0 and per == [0.0, 0.0]

    def test_constant_offset(self):
        total, _ = ob.fm_loss([np.zeros(6)], [np.full(6, 0.5)])
        assert total == pytest.approx(0.25)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        vp = [rng.normal(size=10) for _ in range(5)]
        vt = [rng.normal(size=10) for _ in range(5)]
        total, per = ob.fm_loss(vp, vt)
        # independent re-summation
        expect_per = []
        for a, b in zip(vp, vt):
            acc = 0.0
            for x, y in zip(a, b):
                acc += (x - y) ** 2
            expect_per.append(acc / len(a))
        assert abs(total - sum(expect_per) / len(expect_per)) < 1e-12
        for got, want in zip(per, expect_per):
            assert abs(got - want) < 1e-12

    def test_batch_size_mismatch(self):
        with pytest.raises(ob.TrainError):
            ob.fm_loss([np.zeros(3)], [])


class TestUsoLoss:
    def test_lambda_zero(self):
        assert ob.uso_loss(1.7, 0.9, 0.0) == 1.7

    def test_hand_value(self):
        assert ob.uso_loss(1.0, 0.693147, 0.75) == pytest.approx(1.519860, abs=1e-6)

    def test_zero_reason(self):
        for lam in (0.0, 0.5, 2.0):
            assert ob.uso_loss(0.8, 0.0, lam) == 0.8

    def test_graph_mode(self):
        total = ob.uso_loss(nc.Tensor(1.0), nc.Tensor(0.693147), 0.75)
        assert total.item() == pytest.approx(1.519860, abs=1e-6)


class TestRwoLoss:
    def test_all_yes_collapses_exactly(self):
        rng = np.random.default_rng(1)
        sqerr = [float(x) for x in rng.uniform(0.1, 2.0, size=6)]
        lam_c = 0.2
        got = ob.rwo_loss(sqerr, [1.0] * 6, lam_c)
        assert got == lam_c * float(np.mean(sqerr))

    def test_all_no(self):
        sqerr = [0.5, 1.5]
        got = ob.rwo_loss(sqerr, [0.0, 0.0], 0.2)
        assert got == pytest.approx(1.2 * np.mean(sqerr), rel=1e-12)

    def test_single_sample_hand_value(self):
        assert ob.rwo_loss([2.0], [0.75], 0.2) == pytest.approx(0.9, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ob.TrainError):
            ob.rwo_loss([1.0], [0.5, 0.5], 0.1)

    def test_p_out_of_range(self):
        with pytest.raises(ob.TrainError):
            ob.rwo_loss([1.0], [1.5], 0.1)


class TestTrainStep:
    def test_sft_total_is_fm_and_needs_no_critic(self):
        state = make_state("sft")
        batch = tiny_world(4)
        b = ob.train_step(state, batch, ob.TrainConfig(objective="sft", epochs=1))
        assert b.l_total == b.l_fm
        assert b.l_reason is None and b.p_yes is None

    def test_missing_critic_rejected_before_update(self):
        state = make_state("uso")
        before = state.store.snapshot()
        with pytest.raises(ob.TrainError):
            ob.train_step(state, tiny_world(2), ob.TrainConfig(objective="uso"))
        for name, value in before.items():
            np.testing.assert_array_equal(state.store[name].data, value)

    def test_uso_lambda_zero_matches_sft_update(self):
        critic = tiny_critic()
        batch = tiny_world(4)
        cfg_sft = ob.TrainConfig(objective="sft", seed=9)
        cfg_uso = ob.TrainConfig(objective="uso", lam=0.0, seed=9)
        s1 = make_state("sft", seed=5)
        s2 = make_state("uso", seed=5, critic=critic)
        ob.train_step(s1, batch, cfg_sft)
        ob.train_step(s2, batch, cfg_uso)
        for name in s1.store.names():
            np.testing.assert_array_equal(s1.store[name].data, s2.store[name].data)

    def test_rwo_with_forced_yes_equals_scaled_sft_gradient(self):
        # Critic biased so hard toward yes that p_yes rounds to exactly 1.0:
        # every weight is 0 and the update is the lam_c-scaled flow update.
        critic = tiny_critic()
        critic[0]["crit.b3"].data[...] = [1000.0, 0.0]
        batch = tiny_world(4)
        lam_c = 0.2
        s_sft = make_state("sft", seed=5, optimizer="sgd", lr=0.1)
        s_rwo = make_state("rwo", seed=5, critic=critic, optimizer="sgd", lr=0.1)
        init = {n: t.data.copy() for n, t in s_sft.store.items()}

        ob.train_step(s_sft, batch, ob.TrainConfig(objective="sft", seed=9))
        b = ob.train_step(s_rwo, batch, ob.TrainConfig(objective="rwo", lam_c=lam_c, seed=9))
        assert all(p == 1.0 for p in b.p_yes)
        for name in init:
            delta_sft = s_sft.store[name].data - init[name]
            delta_rwo = s_rwo.store[name].data - init[name]
            np.testing.assert_allclose(delta_rwo, lam_c * delta_sft, rtol=1e-10, atol=1e-14)

    def test_critic_params_never_move(self):
        critic = tiny_critic()
        before = {n: t.data.copy() for n, t in critic[0].items()}
        state = make_state("uso", critic=critic)
        for _ in range(3):
            ob.train_step(state, tiny_world(4), ob.TrainConfig(objective="uso", lam=0.75))
        for name, value in before.items():
            np.testing.assert_array_equal(critic[0][name].data, value)


class TestGradients:
    def test_uso_gradient_matches_finite_differences(self):
        critic = tiny_critic()
        state = make_state("uso", seed=7, critic=critic)
        batch = tiny_world(2, seed=3)
        config = ob.TrainConfig(objective="uso", lam=0.75, cfg_drop=0.0, seed=11)

        def f():
            total, _ = ob.compute_batch_loss(state, batch, config)
            return total

        err = nc.grad_check(f, state.store, step=1e-5)
        assert err < 1e-4

    def test_rwo_gradient_is_weighted_sum_of_fm_gradients(self):
        critic = tiny_critic()
        state = make_state("rwo", seed=7, critic=critic)
        batch = tiny_world(3, seed=4)
        lam_c = 0.2
        config = ob.TrainConfig(objective="rwo", lam_c=lam_c, cfg_drop=0.0, seed=11)

        total, breakdown = ob.compute_batch_loss(state, batch, config)
        state.store.zero_grads()
        critic[0].zero_grads()
        nc.backward(total)
        rwo_grads = {n: state.store[n].grad.copy() for n in state.store.names()
                     if state.store[n].grad is not None}

        # per-sample flow gradients, one backward each
        weights = [w for w in breakdown.w]
        per_sample = []
        for i in range(len(batch)):
            cfg_one = ob.TrainConfig(objective="sft", cfg_drop=0.0, seed=11)
            state_one = ob.TrainState(store=state.store, flow_cfg=state.flow_cfg,
                                      opt=state.opt, epoch=state.epoch, step=state.step)
            # rebuild the sample's loss with the same counter stream index
            rng = ob.sample_rng(11, 0, 0, i)
            t = float(rng.uniform())
            eps = rng.standard_normal(state.flow_cfg.latent_dim)
            cond = fg.encode_condition(state.store, state.flow_cfg,
                                       batch[i].source, batch[i].instruction)
            x0 = batch[i].target.reshape(-1)
            z_t = fg.noise_path(x0, eps, t)
            v = fg.predict_velocity(state.store, state.flow_cfg, z_t, t, cond.fused)
            d = nc.sub(v, nc.Tensor(fg.target_velocity(x0, eps)))
            state.store.zero_grads()
            nc.backward(nc.mean(nc.mul(d, d)))
            per_sample.append({n: (state.store[n].grad.copy()
                                   if state.store[n].grad is not None
                                   else np.zeros_like(state.store[n].data))
                               for n in state.store.names()})

        n = len(batch)
        for name, got in rwo_grads.items():
            want = sum((weights[i] + lam_c) / n * per_sample[i][name] for i in range(n))
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_stop_gradient_policy_declarations(self):
        assert ob.stop_gradient_policy("sft")["critic_in_graph"] is False
        assert ob.stop_gradient_policy("uso")["critic_in_graph"] is True
        assert ob.stop_gradient_policy("uso")["w_backprop"] is False
        assert ob.stop_gradient_policy("rwo")["w_backprop"] is False
        with pytest.raises(ob.TrainError):
            ob.stop_gradient_policy("ppo")


class TestReductionEquivalence:
    def test_sft_and_uso_lambda_zero_bit_identical_trajectories(self):
        critic = tiny_critic()
        triplets = tiny_world(16, seed=6)
        cfg_sft = ob.TrainConfig(objective="sft", epochs=3, batch_size=4, seed=13,
                                 val_every=0)
        cfg_uso = ob.TrainConfig(objective="uso", lam=0.0, epochs=3, batch_size=4,
                                 seed=13, val_every=0)
        flow_cfg = tiny_flow_cfg()
        store_a, _ = ob.train(cfg_sft, flow_cfg, triplets)
        store_b, _ = ob.train(cfg_uso, flow_cfg, triplets, critic=critic)
        for name in store_a.names():
            np.testing.assert_array_equal(store_a[name].data, store_b[name].data)


class TestTrainLoop:
    def test_epochs_zero_leaves_parameters_at_init(self):
        flow_cfg = tiny_flow_cfg()
        cfg = ob.TrainConfig(objective="sft", epochs=0, seed=21)
        store, log = ob.train(cfg, flow_cfg, tiny_world(4))
        fresh = nc.ParamStore(seed=21)
        fg.init_params(fresh, flow_cfg)
        for name in fresh.names():
            np.testing.assert_array_equal(store[name].data, fresh[name].data)
        assert log.steps == []

    def test_determinism_same_seed(self):
        flow_cfg = tiny_flow_cfg()
        triplets = tiny_world(8, seed=2)
        cfg = ob.TrainConfig(objective="sft", epochs=2, batch_size=4, seed=3,
                             val_every=1, val_samples=4)
        s1, l1 = ob.train(cfg, flow_cfg, triplets, val_triplets=triplets[:4])
        s2, l2 = ob.train(cfg, flow_cfg, triplets, val_triplets=triplets[:4])
        assert l1.rows_without_timing() == l2.rows_without_timing()
        assert l1.validations == l2.validations
        for name in s1.names():
            np.testing.assert_array_equal(s1[name].data, s2[name].data)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ob.TrainError):
            ob.train(ob.TrainConfig(), tiny_flow_cfg(), [])

    def test_checkpoints_written_each_epoch(self, tmp_path):
        path = tmp_path / "gen.ckpt"
        cfg = ob.TrainConfig(objective="sft", epochs=2, batch_size=4, seed=3)
        store, _ = ob.train(cfg, tiny_flow_cfg(), tiny_world(8), checkpoint_path=path)
        loaded, extra = nc.load(path)
        assert extra["epoch"] == 1
        for name in store.names():
            np.testing.assert_array_equal(loaded[name].data, store[name].data)

    def test_log_csv_layout(self, tmp_path):
        cfg = ob.TrainConfig(objective="sft", epochs=1, batch_size=4, seed=3)
        _, log = ob.train(cfg, tiny_flow_cfg(), tiny_world(8))
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,l_fm,l_reason,p_yes_mean,l_total,seconds"
        assert len(lines) == 1 + len(log.steps)

    def test_monotone_step_indices_enforced(self):
        log = ob.TrainLog()
        log.append_step(step=1, l_fm=0.1, l_reason=None, p_yes_mean=None,
                        l_total=0.1, seconds=0.0)
        with pytest.raises(ob.TrainError):
            log.append_step(step=1, l_fm=0.1, l_reason=None, p_yes_mean=None,
                            l_total=0.1, seconds=0.0)


class TestRunMetadata:
    def test_contents(self, tmp_path):
        cfg = ob.TrainConfig(objective="uso", lam=0.75)
        meta = ob.run_metadata(cfg, tiny_flow_cfg(), critic_checkpoint="crit.ckpt")
        assert meta["train_config"]["lam"] == 0.75
        assert meta["stop_gradient_policy"]["objective"] == "uso"
        assert meta["prompt_template_version"] == "v1"
        path = tmp_path / "meta.json"
        ob.save_run_metadata(path, meta)
        assert path.exists()
