import math

import numpy as np
import pytest

from editflow import microworld as mw
from editflow import numcore as nc
from editflow import reflector as rf


def tiny_cfg():
    return rf.CriticConfig(frames=4, height=3, width=3, k_frames=2,
                           hidden1=12, hidden2=8)


def small_world_triplets(n=12, seed=0):
    triplets, _ = mw.gen_dataset(n, seed=seed, frames=4, height=3, width=3)
    return triplets


class TestSelectFrames:
    def test_two_of_eight(self):
        assert rf.select_frame_indices(8, 2) == [0, 7]

    def test_all_frames(self):
        assert rf.select_frame_indices(5, 5) == [0, 1, 2, 3, 4]

    def test_three_of_eight_half_up(self):
        assert rf.select_frame_indices(8, 3) == [0, 4, 7]

    def test_out_of_range(self):
        with pytest.raises(rf.ReflectorError):
            rf.select_frame_indices(4, 5)
        with pytest.raises(rf.ReflectorError):
            rf.select_frame_indices(4, 0)

    def test_selects_actual_frames(self):
        video = np.arange(4 * 2 * 2, dtype=float).reshape(4, 2, 2)
        out = rf.select_frames(video, 2)
        np.testing.assert_array_equal(out[0], video[0])
        np.testing.assert_array_equal(out[1], video[3])


class TestProbability:
    def test_equal_logits(self):
        assert rf.p_yes(1.3, 1.3) == 0.5

    def test_margin_two(self):
        assert rf.p_yes(2.0, 0.0) == pytest.approx(0.880797, abs=1e-6)

    def test_swap_symmetry(self):
        assert rf.p_yes(0.4, 1.9) == pytest.approx(1.0 - rf.p_yes(1.9, 0.4), abs=1e-15)

    def test_verdict_consistency(self):
        v = rf.Verdict.from_logits(2.0, 0.0)
        assert v.answer == "yes"
        assert v.p_yes == pytest.approx(rf.p_yes(2.0, 0.0))
        assert rf.Verdict.from_logits(-1.0, 1.0).answer == "no"


class TestReasonLoss:
    def test_equal_logits_ln2(self):
        loss = rf.reason_loss(nc.Tensor(0.7), nc.Tensor(0.7), "yes")
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_margin_two(self):
        loss = rf.reason_loss(nc.Tensor(2.0), nc.Tensor(0.0), "yes")
        assert loss.item() == pytest.approx(0.126928, abs=1e-6)

    def test_large_negative_margin_stable(self):
        loss = rf.reason_loss(nc.Tensor(0.0), nc.Tensor(50.0), "yes")
        assert np.isfinite(loss.item())
        # -ln sigmoid(-50) = 50 + ln(1 + e^-50)
        assert loss.item() == pytest.approx(50.0, abs=1e-6)

    def test_convexity_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ly, ln_ = rng.normal(scale=3), rng.normal(scale=3)
            total = (rf.reason_loss(nc.Tensor(ly), nc.Tensor(ln_), "yes").item()
                     + rf.reason_loss(nc.Tensor(ly), nc.Tensor(ln_), "no").item())
            assert total >= 2 * math.log(2.0) - 1e-12
        equal = (rf.reason_loss(nc.Tensor(1.0), nc.Tensor(1.0), "yes").item()
                 + rf.reason_loss(nc.Tensor(1.0), nc.Tensor(1.0), "no").item())
        assert equal == pytest.approx(2 * math.log(2.0), abs=1e-12)

    def test_monotone_in_margin(self):
        margins = np.linspace(-5, 5, 21)
        losses = [rf.reason_loss(nc.Tensor(m), nc.Tensor(0.0), "yes").item() for m in margins]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_correct_answer_no(self):
        loss = rf.reason_loss(nc.Tensor(0.0), nc.Tensor(2.0), "no")
        assert loss.item() == pytest.approx(0.126928, abs=1e-6)


class TestCriticForward:
    def test_zero_head_zero_logits(self):
        cfg = tiny_cfg()
        store = nc.ParamStore(seed=0)
        rf.init_params(store, cfg)
        store["crit.w3"].data[...] = 0.0
        triplet = small_world_triplets()[0]
        v = rf.verdict(store, cfg, triplet.source, triplet.target, triplet.instruction)
        assert v.logits == (0.0, 0.0)
        assert v.p_yes == 0.5

    def test_deterministic(self):
        cfg = tiny_cfg()
        store = nc.ParamStore(seed=1)
        rf.init_params(store, cfg)
        t = small_world_triplets()[1]
        a = rf.verdict(store, cfg, t.source, t.target, t.instruction)
        b = rf.verdict(store, cfg, t.source, t.target, t.instruction)
        assert a == b

    def test_shape_mismatch(self):
        cfg = tiny_cfg()
        store = nc.ParamStore(seed=0)
        rf.init_params(store, cfg)
        with pytest.raises(nc.ShapeError):
            rf.critic_forward(store, cfg, np.zeros((3, 3, 3)), np.zeros(18),
                              mw.EditInstruction("causal", "identity", {}))

    def test_gradient_wrt_edited_frames(self):
        # The channel the training loop exploits: d(l_yes - l_no)/d(edited pixels).
        cfg = tiny_cfg()
        store = nc.ParamStore(seed=2)
        rf.init_params(store, cfg)
        t = small_world_triplets()[2]
        src = rf.select_frames(t.source, cfg.k_frames)
        edited0 = rf.select_frames(t.target, cfg.k_frames).reshape(-1)

        def margin_of(x: np.ndarray) -> float:
            ly, ln_ = rf.critic_forward(store, cfg, src, x, t.instruction)
            return ly.item() - ln_.item()

        frames = nc.Tensor(edited0, requires_grad=True)
        ly, ln_ = rf.critic_forward(store, cfg, src, frames, t.instruction)
        nc.backward(nc.sub(ly, ln_))
        analytic = frames.grad.copy()

        step = 1e-5
        for i in range(0, edited0.size, 5):
            bumped = edited0.copy()
            bumped[i] += step
            up = margin_of(bumped)
            bumped[i] = edited0[i] - step
            down = margin_of(bumped)
            numeric = (up - down) / (2 * step)
            rel = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            assert rel < 1e-4


class TestOracleAnswer:
    def test_all_perfect(self):
        s = mw.OracleScores(10, 10, 10, 10)
        assert rf.oracle_answer(s) == "yes"

    def test_conjunction(self):
        s = mw.OracleScores(6.9, 10, 10, 10)
        assert rf.oracle_answer(s) == "no"

    def test_example_thresholds(self):
        s = mw.OracleScores(8, 9, 7, 9)
        assert rf.oracle_answer(s, {"ea": 7, "pc": 7, "gn": 7, "gr": 7}) == "yes"

    def test_monotone_raising_never_flips_yes_to_no(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            vals = rng.uniform(0, 10, size=4)
            s = mw.OracleScores(*vals)
            if rf.oracle_answer(s) == "yes":
                bumped = mw.OracleScores(*np.minimum(vals + rng.uniform(0, 2, size=4), 10.0))
                assert rf.oracle_answer(bumped) == "yes"


class TestPretrainCritic:
    def test_separable_dataset_high_accuracy(self):
        triplets, _ = mw.gen_dataset(80, seed=5)
        rng = np.random.default_rng(0)
        examples = []
        for t in triplets:
            examples.append(rf.LabeledEdit(t.source, t.target, t.instruction, "yes"))
            noise = rng.uniform(0, 1, size=t.target.shape)
            examples.append(rf.LabeledEdit(t.source, noise, t.instruction, "no"))
        store, report = rf.pretrain_critic(examples, rf.CriticConfig(), epochs=25, seed=1)
        assert report["holdout_accuracy"] >= 0.99

    def test_zero_epochs_chance_level(self):
        triplets = small_world_triplets(n=40, seed=6)
        examples = []
        for t in triplets:
            examples.append(rf.LabeledEdit(t.source, t.target, t.instruction, "yes"))
            examples.append(rf.LabeledEdit(t.source, np.clip(t.source + 0.5, 0, 1),
                                           t.instruction, "no"))
        store, report = rf.pretrain_critic(examples, tiny_cfg(), epochs=0, seed=2)
        assert 0.25 <= report["holdout_accuracy"] <= 0.75

    def test_determinism(self):
        triplets = small_world_triplets(n=8, seed=7)
        examples = rf.build_critic_dataset(triplets, seed=3)
        s1, r1 = rf.pretrain_critic(examples, tiny_cfg(), epochs=2, seed=4)
        s2, r2 = rf.pretrain_critic(examples, tiny_cfg(), epochs=2, seed=4)
        assert r1 == r2
        for name in s1.names():
            np.testing.assert_array_equal(s1[name].data, s2[name].data)

    def test_single_class_rejected(self):
        t = small_world_triplets(n=2, seed=8)[0]
        examples = [rf.LabeledEdit(t.source, t.target, t.instruction, "yes")] * 4
        with pytest.raises(rf.ReflectorError):
            rf.pretrain_critic(examples, tiny_cfg())

    def test_build_dataset_labels_from_oracle(self):
        triplets = small_world_triplets(n=8, seed=9)
        examples = rf.build_critic_dataset(triplets, seed=0)
        assert len(examples) == 5 * len(triplets)
        for ex in examples:
            expected = rf.oracle_answer(mw.oracle_judge(ex.source, ex.edited, ex.instruction))
            assert ex.label == expected
        labels = {ex.label for ex in examples}
        assert labels == {"yes", "no"}


class TestAgreement:
    def test_identical(self):
        assert rf.agreement(["yes", "no"], ["yes", "no"])["decision_agreement"] == 1.0

    def test_complementary(self):
        assert rf.agreement(["yes", "no"], ["no", "yes"])["decision_agreement"] == 0.0

    def test_fraction(self):
        a = ["yes"] * 66 + ["no"] * 34
        b = ["yes"] * 100
        assert rf.agreement(a, b)["decision_agreement"] == pytest.approx(0.66)

    def test_length_mismatch(self):
        with pytest.raises(rf.ReflectorError):
            rf.agreement(["yes"], ["yes", "no"])

    def test_rationale_similarity(self):
        a = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        b = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
        out = rf.agreement(["yes", "yes"], ["yes", "no"], a, b)
        assert out["rationale_similarity"] == pytest.approx(0.5)
        assert "rationale_similarity" not in rf.agreement(["yes"], ["yes"])


class TestPromptTemplate:
    def test_contains_instruction(self):
        instr = mw.EditInstruction("causal", "identity", {})
        text = rf.render_prompt(rf.DEFAULT_TEMPLATE, instr)
        assert instr.text in text

    def test_contains_all_rubrics(self):
        instr = mw.EditInstruction("temporal", "decay", {"rate": 0.5})
        text = rf.render_prompt(rf.DEFAULT_TEMPLATE, instr)
        for name in ("edit accuracy", "preservation consistency",
                     "generation naturalness", "generation realism"):
            assert name in text
        assert "ANSWER: yes" in text and "ANSWER: no" in text

    def test_deterministic_and_versioned(self, tmp_path):
        instr = mw.EditInstruction("spatial", "reflect", {"axis": "vertical"})
        assert rf.render_prompt(rf.DEFAULT_TEMPLATE, instr) == \
            rf.render_prompt(rf.DEFAULT_TEMPLATE, instr)
        path = tmp_path / "template.json"
        rf.save_template(path, rf.DEFAULT_TEMPLATE)
        loaded = rf.load_template(path)
        assert loaded == rf.DEFAULT_TEMPLATE
        assert loaded.version == "v1"
