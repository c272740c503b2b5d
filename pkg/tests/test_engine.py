import math

import numpy as np
import pytest

from profforce.engine import (
    BehaviorSequence,
    DiscriminatorParams,
    EngineSettings,
    GeneratorParams,
    Mode,
    SequenceBatch,
    accuracy_from_probs,
    disc_accuracy,
    discriminate,
    extract_behavior,
    gate,
    loss_discriminator,
    loss_fool_free_running,
    loss_match_teacher_forced,
    loss_nll,
    sample_rows,
    scheduled_sampling_unroll,
    train_step,
    unroll_free_running,
    unroll_teacher_forced,
)
from profforce.nets import mlp_forward
from profforce.optim import AdamState
from profforce.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    grad_check,
    scale,
    stop_recording,
    zero_grads,
)

from test_nets import gru_oracle


def tiny_generator(seed=200, vocab=4, embed=3, hidden=5, layers=1):
    return GeneratorParams.create(vocab, embed, hidden, layers,
                                  np.random.default_rng(seed))


def tiny_discriminator(width, seed=201, hidden=4):
    return DiscriminatorParams.create(width, hidden, np.random.default_rng(seed))


def zeroed(g: GeneratorParams) -> GeneratorParams:
    for t in g.tensors():
        t.data[:] = 0.0
    return g


# ---------------------------------------------------------------------------
# unrolls


class TestTeacherForcedUnroll:
    def test_three_step_manual_oracle(self):
        g = tiny_generator()
        y = np.array([2, 0, 3])
        res = unroll_teacher_forced(g, y)

        cell = g.cells[0]
        emb = g.embedding.data
        h = np.zeros(5)
        prev = g.start_id
        for t in range(3):
            h, pre = gru_oracle(cell, h, emb[prev])
            logits = h @ g.head.W_o.data.T + g.head.b_o.data
            np.testing.assert_allclose(res.logits[t].data[0], logits, atol=1e-12)
            np.testing.assert_allclose(res.hidden[t].data[0], h, atol=1e-12)
            np.testing.assert_allclose(res.behavior.steps[t].data[0], pre, atol=1e-12)
            prev = y[t]

    def test_zeroed_model_gives_uniform_logits(self):
        g = zeroed(tiny_generator())
        y = np.array([[0, 1, 2, 3, 0]])
        res = unroll_teacher_forced(g, y)
        for lg in res.logits:
            np.testing.assert_array_equal(lg.data, np.zeros((1, 4)))
        nll = loss_nll(res.logits, y)
        assert abs(nll.item() - 5 * math.log(4)) < 1e-12

    def test_two_layer_stack_chains_states(self):
        g = tiny_generator(seed=202, layers=2)
        y = np.array([1, 2])
        res = unroll_teacher_forced(g, y)

        emb = g.embedding.data
        h0, h1 = np.zeros(5), np.zeros(5)
        prev = g.start_id
        for t in range(2):
            h0, _ = gru_oracle(g.cells[0], h0, emb[prev])
            h1, pre = gru_oracle(g.cells[1], h1, h0)
            np.testing.assert_allclose(res.hidden[t].data[0], h1, atol=1e-12)
            np.testing.assert_allclose(res.behavior.steps[t].data[0], pre, atol=1e-12)
            prev = y[t]

    def test_rejects_out_of_range_ids(self):
        g = tiny_generator()
        with pytest.raises(ValueError):
            unroll_teacher_forced(g, np.array([0, 4]))
        with pytest.raises(ValueError):
            unroll_teacher_forced(g, np.array([-1, 0]))

    def test_behavior_mode_and_width(self):
        g = tiny_generator()
        y = np.array([[0, 1], [2, 3]])
        plain = unroll_teacher_forced(g, y)
        assert plain.behavior.mode is Mode.TEACHER_FORCED
        assert plain.behavior.width == 5
        rich = unroll_teacher_forced(g, y, include_outputs=True)
        assert rich.behavior.width == 5 + 4
        for step in rich.behavior.steps:
            np.testing.assert_allclose(step.data[:, 5:].sum(axis=-1),
                                       np.ones(2), atol=1e-12)

    def test_conditioning_input_path(self):
        g = GeneratorParams.create(4, 3, 5, 1, np.random.default_rng(203), x_dim=2)
        x_seq = [np.array([0.5, -0.5]) for _ in range(3)]
        res = unroll_teacher_forced(g, np.array([[0, 1, 2], [3, 2, 1]]), x_seq=x_seq)
        assert len(res.logits) == 3
        assert res.logits[0].shape == (2, 4)
        assert all(np.isfinite(lg.data).all() for lg in res.logits)


class TestFreeRunningUnroll:
    def test_same_seed_same_rollout(self):
        g = tiny_generator()
        a = unroll_free_running(g, 6, np.random.default_rng(30), batch=3)
        b = unroll_free_running(g, 6, np.random.default_rng(30), batch=3)
        np.testing.assert_array_equal(a.sampled, b.sampled)
        for x, y in zip(a.logits, b.logits):
            np.testing.assert_array_equal(x.data, y.data)

    def test_degenerate_head_pins_samples(self):
        g = tiny_generator()
        g.head.b_o.data[:] = 0.0
        g.head.b_o.data[2] = 50.0
        res = unroll_free_running(g, 5, np.random.default_rng(31), batch=4)
        np.testing.assert_array_equal(res.sampled, np.full((4, 5), 2))

    def test_near_zero_temperature_is_greedy_and_replayable(self):
        g = tiny_generator(seed=204)
        fr = unroll_free_running(g, 6, np.random.default_rng(32), temperature=1e-9)
        replay = unroll_teacher_forced(g, fr.sampled[0])
        for t in range(6):
            np.testing.assert_allclose(replay.logits[t].data[0],
                                       fr.logits[t].data[0], atol=1e-12)
            assert fr.sampled[0, t] == int(np.argmax(replay.logits[t].data[0]))

    def test_first_step_frequencies_near_uniform(self):
        g = zeroed(tiny_generator())
        n = 4000
        res = unroll_free_running(g, 1, np.random.default_rng(33), batch=n)
        counts = np.bincount(res.sampled[:, 0], minlength=4)
        p = 0.25
        sd = math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 4 * sd)

    def test_validation(self):
        g = tiny_generator()
        rng = np.random.default_rng(34)
        with pytest.raises(ValueError):
            unroll_free_running(g, 0, rng)
        with pytest.raises(ValueError):
            unroll_free_running(g, 3, rng, temperature=0.0)

    def test_behavior_mode_and_outputs(self):
        g = tiny_generator()
        res = unroll_free_running(g, 4, np.random.default_rng(35), batch=2,
                                  include_outputs=True)
        assert res.behavior.mode is Mode.FREE_RUNNING
        assert res.behavior.width == 9
        for step in res.behavior.steps:
            np.testing.assert_allclose(step.data[:, 5:].sum(axis=-1),
                                       np.ones(2), atol=1e-12)


class TestScheduledSampling:
    def test_p_zero_matches_teacher_forcing_and_spends_no_randomness(self):
        g = tiny_generator()
        y = np.array([[1, 3, 0, 2], [2, 2, 1, 0]])
        rng = np.random.default_rng(36)
        ss = scheduled_sampling_unroll(g, y, 0.0, rng)
        tf = unroll_teacher_forced(g, y)
        for a, b in zip(ss.logits, tf.logits):
            np.testing.assert_array_equal(a.data, b.data)
        assert not ss.used_sample.any()
        # untouched stream: the next draw equals a fresh generator's first
        assert rng.random() == np.random.default_rng(36).random()

    def test_p_zero_nll_matches_loss_nll(self):
        g = tiny_generator()
        y = np.array([[1, 3, 0, 2], [2, 2, 1, 0]])
        ss = scheduled_sampling_unroll(g, y, 0.0, np.random.default_rng(37))
        tf = unroll_teacher_forced(g, y)
        assert abs(ss.nll.item() - loss_nll(tf.logits, y).item()) < 1e-12

    def test_p_one_draws_like_free_running(self):
        g = tiny_generator()
        y = np.zeros((3, 5), dtype=np.int64)
        ss = scheduled_sampling_unroll(g, y, 1.0, np.random.default_rng(38))
        fr = unroll_free_running(g, 5, np.random.default_rng(38), batch=3)
        # fed symbols trail the free-running samples by one step
        np.testing.assert_array_equal(ss.sampled[:, 1:], fr.sampled[:, :-1])
        for a, b in zip(ss.logits, fr.logits):
            np.testing.assert_array_equal(a.data, b.data)
        assert ss.used_sample[:, 1:].all() and not ss.used_sample[:, 0].any()

    def test_targets_stay_ground_truth_at_p_one(self):
        g = zeroed(tiny_generator())
        y = np.array([[0, 1, 2, 3]])
        ss = scheduled_sampling_unroll(g, y, 1.0, np.random.default_rng(39))
        # uniform logits: nll is T ln V no matter what was fed
        assert abs(ss.nll.item() - 4 * math.log(4)) < 1e-12

    def test_coin_rate_matches_p(self):
        g = tiny_generator()
        b, t_len = 64, 9
        y = np.random.default_rng(40).integers(0, 4, (b, t_len))
        ss = scheduled_sampling_unroll(g, y, 0.5, np.random.default_rng(41))
        flips = ss.used_sample[:, 1:]
        n = flips.size
        sd = math.sqrt(n * 0.25)
        assert abs(flips.sum() - 0.5 * n) < 4 * sd

    def test_p_out_of_range(self):
        g = tiny_generator()
        with pytest.raises(ValueError):
            scheduled_sampling_unroll(g, np.array([0]), 1.5, np.random.default_rng(42))


# ---------------------------------------------------------------------------
# behaviors and the discriminator


class TestBehavior:
    def test_extract_requires_aligned_outputs(self):
        steps = [Tensor(np.zeros((2, 3)))]
        with pytest.raises(ValueError):
            extract_behavior(steps, None, True, Mode.TEACHER_FORCED)
        with pytest.raises(ValueError):
            extract_behavior([], None, False, Mode.TEACHER_FORCED)

    def test_detach_blocks_upstream_gradients(self):
        g = tiny_generator()
        d = tiny_discriminator(width=5)
        y = np.array([[0, 1, 2]])
        with Tape() as gen_tape:
            res = unroll_teacher_forced(g, y)
            with Tape() as d_tape:
                p = discriminate(d, res.behavior.detach())
                loss = loss_fool_free_running(p)
        d_params = d.tensors()
        zero_grads(g.tensors() + d_params)
        backward(d_tape, loss, params=d_params)
        assert g.embedding.grad is None
        assert all(p.grad is not None for p in d_params)

    def test_sequence_batch_validation(self):
        b1 = BehaviorSequence([Tensor(np.zeros((2, 3)))], Mode.TEACHER_FORCED, False)
        b2 = BehaviorSequence([Tensor(np.zeros((1, 3)))], Mode.FREE_RUNNING, False)
        with pytest.raises(ValueError):
            SequenceBatch(teacher_forced=[b1], free_running=[b2])
        b3 = BehaviorSequence([Tensor(np.zeros((2, 4)))], Mode.FREE_RUNNING, False)
        with pytest.raises(ValueError):
            SequenceBatch(teacher_forced=[b1], free_running=[b3])
        ok = SequenceBatch(teacher_forced=[b1],
                           free_running=[b2, BehaviorSequence(
                               [Tensor(np.zeros((1, 3)))], Mode.FREE_RUNNING, False)])
        assert ok.n == 2


class TestDiscriminate:
    def _behavior(self, rng, t_len=4, batch=3, width=5):
        steps = [Tensor(rng.uniform(-1, 1, (batch, width))) for _ in range(t_len)]
        return BehaviorSequence(steps, Mode.FREE_RUNNING, False)

    def test_zero_final_layer_means_exactly_half(self):
        d = tiny_discriminator(width=5)
        w, bias = d.classifier.layers[-1]
        w.data[:] = 0.0
        bias.data[:] = 0.0
        p = discriminate(d, self._behavior(np.random.default_rng(43)))
        np.testing.assert_array_equal(p.data, np.full(3, 0.5))

    def test_pooled_logit_is_clamped_before_sigmoid(self):
        d = tiny_discriminator(width=5)
        for w, bias in d.classifier.layers:
            w.data[:] = 0.0
            bias.data[:] = 0.0
        d.classifier.layers[-1][1].data[:] = 42.0
        p = discriminate(d, self._behavior(np.random.default_rng(44)))
        np.testing.assert_allclose(p.data, np.full(3, 1 / (1 + math.exp(-10.0))),
                                   atol=1e-15)

    def test_matches_per_step_scoring_route(self):
        from profforce.nets import bigru_encode
        d = tiny_discriminator(width=5)
        b = self._behavior(np.random.default_rng(45))
        got = discriminate(d, b).data

        states = bigru_encode(d.encoder, b.steps)
        scores = np.stack([mlp_forward(d.classifier, s).data[:, 0] for s in states])
        pooled = np.clip(scores.mean(axis=0), -10.0, 10.0)
        expected = 1.0 / (1.0 + np.exp(-pooled))
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_width_mismatch(self):
        d = tiny_discriminator(width=5)
        with pytest.raises(ValueError):
            discriminate(d, self._behavior(np.random.default_rng(46), width=6))

    def test_output_depends_on_time_order(self):
        d = tiny_discriminator(width=5)
        b = self._behavior(np.random.default_rng(47))
        fwd = discriminate(d, b).data
        rev = BehaviorSequence(list(reversed(b.steps)), b.mode, False)
        assert np.max(np.abs(discriminate(d, rev).data - fwd)) > 1e-9


# ---------------------------------------------------------------------------
# losses, accuracy, gates


class TestLosses:
    def test_chance_point_values(self):
        half = np.full(6, 0.5)
        assert abs(loss_discriminator(half, half) - 2 * math.log(2)) < 1e-12
        assert abs(loss_fool_free_running(half) - math.log(2)) < 1e-12
        assert abs(loss_match_teacher_forced(half) - math.log(2)) < 1e-12

    def test_confident_correct_discriminator(self):
        c_d = loss_discriminator(np.array([0.9]), np.array([0.1]))
        assert abs(c_d - (-math.log(0.9) - math.log(0.9))) < 1e-12
        assert abs(loss_fool_free_running(np.array([0.1])) + math.log(0.1)) < 1e-12
        assert abs(loss_match_teacher_forced(np.array([0.9]))
                   + math.log(0.1)) < 1e-12

    def test_discriminator_loss_is_sum_of_generator_terms_swapped(self):
        rng = np.random.default_rng(48)
        d_tf = rng.uniform(0.05, 0.95, 7)
        d_fr = rng.uniform(0.05, 0.95, 7)
        lhs = loss_discriminator(d_tf, d_fr)
        rhs = loss_fool_free_running(d_tf) + loss_match_teacher_forced(d_fr)
        assert lhs == rhs

    def test_tensor_route_matches_float_route(self):
        rng = np.random.default_rng(49)
        vals_tf = rng.uniform(0.1, 0.9, 5)
        vals_fr = rng.uniform(0.1, 0.9, 5)
        t = loss_discriminator(Tensor(vals_tf), Tensor(vals_fr))
        f = loss_discriminator(vals_tf, vals_fr)
        assert abs(t.item() - f) < 1e-12

    def test_rejects_saturated_probabilities(self):
        with pytest.raises(ValueError):
            loss_discriminator(np.array([1.0]), np.array([0.5]))
        with pytest.raises(ValueError):
            loss_discriminator(np.array([0.5]), np.array([0.0]))

    def test_loss_nll_batch_mean(self):
        g = tiny_generator()
        y = np.array([1, 0, 2])
        single = loss_nll(unroll_teacher_forced(g, y).logits, y).item()
        pair = np.stack([y, y])
        double = loss_nll(unroll_teacher_forced(g, pair).logits, pair).item()
        assert abs(single - double) < 1e-12

    def test_loss_nll_length_mismatch(self):
        g = tiny_generator()
        res = unroll_teacher_forced(g, np.array([1, 0]))
        with pytest.raises(ValueError):
            loss_nll(res.logits, np.array([1, 0, 2]))


class TestAccuracyAndGate:
    def test_perfect_and_inverted(self):
        assert accuracy_from_probs(np.array([0.9, 0.8]), np.array([0.1, 0.2])) == 1.0
        assert accuracy_from_probs(np.array([0.1, 0.2]), np.array([0.9, 0.8])) == 0.0

    def test_tie_counts_as_incorrect(self):
        assert accuracy_from_probs(np.array([0.5]), np.array([0.5])) == 0.0
        assert accuracy_from_probs(np.array([0.5, 0.9]), np.array([0.5, 0.1])) == 0.5

    def test_gate_thresholds(self):
        assert not gate(0.75).adversarial_to_generator
        assert gate(0.7500001).adversarial_to_generator
        assert gate(0.99).update_discriminator
        assert not gate(0.9900001).update_discriminator
        g = gate(1.0)
        assert g.adversarial_to_generator and not g.update_discriminator
        with pytest.raises(ValueError):
            gate(1.5)

    def test_disc_accuracy_on_behavior_batches(self):
        d = tiny_discriminator(width=5)
        w, bias = d.classifier.layers[-1]
        w.data[:] = 0.0
        bias.data[:] = 0.0
        rng = np.random.default_rng(50)
        mk = lambda n: BehaviorSequence(
            [Tensor(rng.uniform(-1, 1, (n, 5))) for _ in range(3)],
            Mode.TEACHER_FORCED, False)
        batch = SequenceBatch(teacher_forced=[mk(2)], free_running=[mk(1), mk(1)])
        # a constant-half discriminator gets every sequence wrong
        assert disc_accuracy(d, batch) == 0.0


class TestSampleRows:
    def test_certain_outcomes(self):
        rng = np.random.default_rng(51)
        np.testing.assert_array_equal(
            sample_rows(rng, np.array([[0.0, 1.0, 0.0]] * 4)), np.ones(4))
        np.testing.assert_array_equal(
            sample_rows(rng, np.array([[1.0, 0.0]] * 4)), np.zeros(4))

    def test_frequencies(self):
        rng = np.random.default_rng(52)
        probs = np.tile([0.2, 0.3, 0.5], (20000, 1))
        draws = sample_rows(rng, probs)
        counts = np.bincount(draws, minlength=3)
        for k, p in enumerate([0.2, 0.3, 0.5]):
            sd = math.sqrt(20000 * p * (1 - p))
            assert abs(counts[k] - 20000 * p) < 4 * sd


# ---------------------------------------------------------------------------
# the combined step


def build_step_fixture(seed=60, vocab=4, hidden=5, batch=4, t_len=6,
                       g_lr=1e-3, d_lr=1e-3):
    g = GeneratorParams.create(vocab, 3, hidden, 1, np.random.default_rng(seed))
    d = DiscriminatorParams.create(hidden, 4, np.random.default_rng(seed + 1))
    y = np.random.default_rng(seed + 2).integers(0, vocab, (batch, t_len))
    g_adam = AdamState.for_params(g.tensors(), lr=g_lr)
    d_adam = AdamState.for_params(d.tensors(), lr=d_lr)
    return g, d, y, g_adam, d_adam


class TestTrainStep:
    def test_metrics_shape_and_finiteness(self):
        g, d, y, ga, da = build_step_fixture()
        m = train_step(g, d, y, EngineSettings(), 0.0, np.random.default_rng(61), ga, da)
        for key in ("c_d", "c_f", "c_t", "disc_acc", "nll_per_step", "bpc"):
            assert math.isfinite(m[key])
        assert m["bpc"] * math.log(2) == pytest.approx(m["nll_per_step"], abs=1e-12)
        assert isinstance(m["gate_gen"], bool) and isinstance(m["gate_disc"], bool)
        assert ga.t == 1

    def test_deterministic_given_seeds(self):
        runs = []
        for _ in range(2):
            g, d, y, ga, da = build_step_fixture()
            rng = np.random.default_rng(62)
            ms = [train_step(g, d, y, EngineSettings(), 0.1, rng, ga, da)
                  for _ in range(3)]
            runs.append((ms, [t.data.copy() for t in g.tensors()],
                         [t.data.copy() for t in d.tensors()]))
        assert runs[0][0] == runs[1][0]
        for a, b in zip(runs[0][1], runs[1][1]):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(runs[0][2], runs[1][2]):
            np.testing.assert_array_equal(a, b)

    def test_skip_mode_reports_nan_and_matches_pure_nll(self):
        # adversarial weight 0 with a frozen discriminator must reduce to
        # plain likelihood training, bit for bit, against a run that still
        # evaluates the discriminator but gets a closed gate
        g1, d1, y, ga1, da1 = build_step_fixture(seed=63)
        skip = EngineSettings(adversarial_weight=0.0, freeze_discriminator=True)
        m1 = train_step(g1, d1, y, skip, 0.0, np.random.default_rng(64), ga1, da1)
        assert math.isnan(m1["c_d"]) and math.isnan(m1["disc_acc"])
        assert m1["gate_gen"] is False and m1["gate_disc"] is False

        g2, d2, _, ga2, da2 = build_step_fixture(seed=63)
        full = EngineSettings(adversarial_weight=1.0)
        m2 = train_step(g2, d2, y, full, 0.0, np.random.default_rng(64), ga2, da2)
        assert not m2["gate_gen"], "fresh discriminator should sit near chance"

        assert m1["nll_per_step"] == m2["nll_per_step"]
        for a, b in zip(g1.tensors(), g2.tensors()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_skip_mode_leaves_discriminator_untouched(self):
        g, d, y, ga, da = build_step_fixture(seed=65)
        before = [t.data.copy() for t in d.tensors()]
        skip = EngineSettings(adversarial_weight=0.0, freeze_discriminator=True)
        train_step(g, d, y, skip, 0.0, np.random.default_rng(66), ga, da)
        for a, b in zip(before, d.tensors()):
            np.testing.assert_array_equal(a, b.data)
        assert da.t == 0

    def test_explicit_freeze_flag_blocks_disc_updates(self):
        g, d, y, ga, da = build_step_fixture(seed=67)
        before = [t.data.copy() for t in d.tensors()]
        frozen = EngineSettings(adversarial_weight=1.0, freeze_discriminator=True)
        m = train_step(g, d, y, frozen, 0.0, np.random.default_rng(68), ga, da)
        assert math.isfinite(m["c_d"])  # still measured
        for a, b in zip(before, d.tensors()):
            np.testing.assert_array_equal(a, b.data)
        assert da.t == 0 and ga.t == 1

    def test_near_chance_discriminator_updates_but_generator_gate_closed(self):
        g, d, y, ga, da = build_step_fixture(seed=69)
        before = [t.data.copy() for t in d.tensors()]
        m = train_step(g, d, y, EngineSettings(), 0.0, np.random.default_rng(70), ga, da)
        assert not m["gate_gen"] and m["gate_disc"]
        assert da.t == 1
        assert any(not np.array_equal(a, b.data)
                   for a, b in zip(before, d.tensors()))

    def test_saturated_discriminator_freezes_itself(self):
        vocab, hidden, b, t_len = 4, 8, 16, 8
        g = GeneratorParams.create(vocab, 3, hidden, 1, np.random.default_rng(71))
        d = DiscriminatorParams.create(hidden, 8, np.random.default_rng(72))
        y = np.zeros((b, t_len), dtype=np.int64)

        d_params = d.tensors()
        adam = AdamState.for_params(d_params, lr=5e-3)
        rng = np.random.default_rng(73)
        acc = 0.0
        for _ in range(300):
            with stop_recording():
                tf_b = unroll_teacher_forced(g, y).behavior
                fr_b = unroll_free_running(g, t_len, rng, batch=b).behavior
            with Tape() as tape:
                p_tf = discriminate(d, tf_b)
                p_fr = discriminate(d, fr_b)
                c_d = loss_discriminator(p_tf, p_fr)
            zero_grads(d_params)
            backward(tape, c_d, params=d_params)
            from profforce.optim import adam_step
            adam_step(adam, d_params, [p.grad for p in d_params])
            acc = accuracy_from_probs(p_tf.data, p_fr.data)
        assert acc == 1.0, "pretraining should saturate on this separable setup"

        ga = AdamState.for_params(g.tensors(), lr=1e-6)
        da = AdamState.for_params(d_params, lr=5e-3)
        before = [t.data.copy() for t in d_params]
        m = train_step(g, d, y, EngineSettings(), 0.0, np.random.default_rng(74), ga, da)
        assert m["disc_acc"] > 0.99
        assert m["gate_gen"] and not m["gate_disc"]
        for a, b_t in zip(before, d_params):
            np.testing.assert_array_equal(a, b_t.data)
        assert da.t == 0

    def test_ct_term_changes_generator_update_when_gate_open(self):
        def run(use_ct):
            vocab, hidden, b, t_len = 4, 6, 8, 6
            g = GeneratorParams.create(vocab, 3, hidden, 1, np.random.default_rng(75))
            d = DiscriminatorParams.create(hidden, 6, np.random.default_rng(76))
            y = np.zeros((b, t_len), dtype=np.int64)
            dp = d.tensors()
            adam = AdamState.for_params(dp, lr=5e-3)
            rng = np.random.default_rng(77)
            for _ in range(200):
                with stop_recording():
                    tf_b = unroll_teacher_forced(g, y).behavior
                    fr_b = unroll_free_running(g, t_len, rng, batch=b).behavior
                with Tape() as tape:
                    c_d = loss_discriminator(discriminate(d, tf_b),
                                             discriminate(d, fr_b))
                zero_grads(dp)
                backward(tape, c_d, params=dp)
                from profforce.optim import adam_step
                adam_step(adam, dp, [p.grad for p in dp])
            ga = AdamState.for_params(g.tensors(), lr=1e-3)
            da = AdamState.for_params(dp, lr=1e-3)
            settings = EngineSettings(use_ct=use_ct)
            m = train_step(g, d, y, settings, 0.0, np.random.default_rng(78), ga, da)
            assert m["gate_gen"], "discriminator must be strong for this test"
            return [t.data.copy() for t in g.tensors()]

        base = run(False)
        with_ct = run(True)
        assert any(not np.array_equal(a, b) for a, b in zip(base, with_ct))

    def test_gradient_of_combined_objective(self):
        rng = np.random.default_rng(80)
        g = GeneratorParams.create(3, 2, 3, 1, rng)
        d = DiscriminatorParams.create(3, 3, rng, mlp_hidden=3)
        y = np.array([[0, 2, 1], [1, 1, 0]])
        fr = unroll_free_running(g, 3, np.random.default_rng(81), batch=2)
        fixed_sample = fr.sampled
        params = g.tensors() + d.tensors()

        def f(_):
            tf = unroll_teacher_forced(g, y)
            nll = scale(loss_nll(tf.logits, y), 1.0 / 3)
            replay = unroll_teacher_forced(g, fixed_sample)
            adv = loss_fool_free_running(discriminate(d, replay.behavior))
            return add(nll, adv)

        assert grad_check(f, params, 1e-5) < 1e-4
