import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgsi.corpus import SynthConfig, build_bags, generate_synthetic, random_embeddings, RelationInventory, NA
from fgsi.model import FGSIConfig, FGSIModel
from fgsi.pipeline import desk_config, tiny_model
from fgsi.trainer import (AdamState, CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                          CheckpointVersionError, LrSchedule, NonFiniteGradient, adam_step, checkpoint_bytes,
                          epoch_order, fit, lr_at, parse_checkpoint, save_checkpoint, load_checkpoint)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.01)
        assert p["w"].tolist() == [1.0, -2.0]

    def test_single_scalar_hand_value(self):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([0.5])}, AdamState.zeros_like(p), 0.01)
        assert abs(p["w"][0] - (-0.01 * 0.5 / (0.5 + 1e-8))) <= 1e-15
        assert abs(p["w"][0] + 0.00999999998) <= 1e-9

    def test_two_step_trace(self):
        p = {"w": np.array([0.0])}
        state = AdamState.zeros_like(p)
        for _ in range(2):
            adam_step(p, {"w": np.array([0.5])}, state, 0.01)
        # constant g: m_hat = g and v_hat = g^2 at every step
        expect = -2 * 0.01 * 0.5 / (0.5 + 1e-8)
        assert abs(p["w"][0] - expect) <= 1e-15
        assert state.t == 2
        assert state.m["w"][0] == pytest.approx(0.5 * (1 - 0.9 ** 2), abs=1e-15)
        assert state.v["w"][0] == pytest.approx(0.25 * (1 - 0.999 ** 2), abs=1e-15)

    def test_quadratic_converges(self):
        p = {"w": np.array([1.0])}
        state = AdamState.zeros_like(p)
        for _ in range(2000):
            adam_step(p, {"w": 2 * p["w"]}, state, 0.01)
        assert abs(p["w"][0]) < 1e-3

    def test_non_finite_rejected_before_any_update(self):
        p = {"a": np.array([1.0]), "b": np.array([2.0])}
        state = AdamState.zeros_like(p)
        with pytest.raises(NonFiniteGradient, match="'b'"):
            adam_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, state, 0.01)
        assert p["a"].tolist() == [1.0] and state.t == 0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
    def test_second_moment_non_negative(self, gs):
        p = {"w": np.array([0.0])}
        state = AdamState.zeros_like(p)
        for g in gs:
            adam_step(p, {"w": np.array([g])}, state, 0.01)
            assert state.v["w"][0] >= 0


class TestSchedule:
    def test_endpoints(self):
        s = LrSchedule(100)
        assert lr_at(0, s) == 1e-2
        assert lr_at(100, s) == 1e-6 and lr_at(1000, s) == 1e-6

    def test_midpoint(self):
        assert abs(lr_at(50, LrSchedule(100)) - (1e-2 + 1e-6) / 2) < 1e-15

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10_000), st.floats(0.5, 3.0), st.integers(0, 12_000))
    def test_monotone(self, total, power, step):
        s = LrSchedule(total, power=power)
        assert lr_at(step + 1, s) <= lr_at(step, s)
        assert 1e-6 <= lr_at(step, s) <= 1e-2


def small_run(seed=0, epochs=2, **kw):
    cfg = SynthConfig(seed=seed, train_bags=40, test_bags=10, vocab_size=120, num_relations=3)
    train, _, _ = generate_synthetic(cfg)
    words = [f"w{i:04d}" for i in range(cfg.vocab_size)]
    mc = desk_config(seed=seed, epochs=epochs, batch_size=8, filters_per_width=8, k_w=8, **kw)
    vocab, E = random_embeddings(words, mc.k_w, seed=seed)
    model = FGSIModel.initialize(mc, vocab, E, RelationInventory([NA] + cfg.relation_names()))
    return model, build_bags(train)


class TestTraining:
    def test_epoch_order_is_seeded(self):
        assert np.array_equal(epoch_order(1, 3, 50), epoch_order(1, 3, 50))
        assert not np.array_equal(epoch_order(1, 3, 50), epoch_order(1, 4, 50))

    def test_reports_repeat(self):
        a = fit(*small_run())[1]
        b = fit(*small_run())[1]
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]

    def test_loss_decreases(self):
        model, bags = small_run(epochs=5)
        _, reports = fit(model, bags)
        losses = [r.mean_loss for r in reports]
        assert losses[-1] < losses[0]

    def test_frozen_parameters_do_not_move(self):
        model, bags = small_run(frozen=("E", "r_query"))
        before = model.store["E"].data.copy()
        fit(model, bags)
        assert np.array_equal(before, model.store["E"].data)

    def test_resume_matches_uninterrupted(self):
        model, bags = small_run(epochs=3)
        state, _ = fit(model, bags)
        full = checkpoint_bytes(model, state, 5)

        model2, _ = small_run(epochs=3)
        state2, _ = fit(model2, bags, until_step=7)
        ck = parse_checkpoint(checkpoint_bytes(model2, state2, 5))
        state3, _ = fit(ck.model, bags, state=ck.state)
        assert checkpoint_bytes(ck.model, state3, 5) == full

    def test_near_certain_bag_gives_tiny_update(self):
        model, sents = tiny_model(seed=0)
        model.store["b_o"].data[:] = [0.0, 40.0, 0.0, 0.0]   # gold relation r1 already certain
        model.config.decoy_queries = 0
        before = {k: t.data.copy() for k, t in model.store.items()}
        state, reports = fit(model, build_bags(sents))
        assert reports[0].mean_loss < 1e-15
        assert max(np.abs(model.store[k].data - v).max() for k, v in before.items()) < 1e-6


class TestCheckpoint:
    def test_roundtrip_fresh_model(self, tmp_path):
        model, _ = tiny_model()
        state = AdamState.zeros_like({k: t.data for k, t in model.store.items()})
        save_checkpoint(tmp_path / "m.ckpt", model, state, 3)
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert ck.model.config == model.config
        assert ck.model.relations.names == model.relations.names
        for name, t in model.store.items():
            assert np.array_equal(ck.model.store[name].data, t.data)
        assert checkpoint_bytes(ck.model, ck.state, ck.batches_per_epoch) == (tmp_path / "m.ckpt").read_bytes()

    def test_layout_header(self):
        model, _ = tiny_model()
        data = checkpoint_bytes(model, AdamState())
        assert data[:4] == b"FGSI"
        assert struct.unpack("<I", data[4:8])[0] == 1

    def test_bad_magic(self):
        with pytest.raises(CheckpointFormatError):
            parse_checkpoint(b"NOPE" + bytes(20))

    def test_version(self):
        model, _ = tiny_model()
        data = bytearray(checkpoint_bytes(model, AdamState()))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(CheckpointVersionError, match="version 2"):
            parse_checkpoint(bytes(data))

    @pytest.mark.parametrize("cut", [6, 40, 500, -3])
    def test_truncated(self, cut):
        model, _ = tiny_model()
        data = checkpoint_bytes(model, AdamState())
        with pytest.raises(CheckpointTruncatedError):
            parse_checkpoint(data[:cut])

    def test_shape_mismatch(self):
        model, _ = tiny_model()
        model.store["W_o"].data = np.zeros((4, 5))
        with pytest.raises(CheckpointShapeError, match="W_o"):
            parse_checkpoint(checkpoint_bytes(model, AdamState()))

    def test_trailing_bytes(self):
        model, _ = tiny_model()
        with pytest.raises(CheckpointFormatError, match="trailing"):
            parse_checkpoint(checkpoint_bytes(model, AdamState()) + b"x")
