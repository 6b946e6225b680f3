import numpy as np
import pytest

from _stubs import ConstantBackbone
from liquidtail.embeddings import commit, random_table
from liquidtail.maturation import (
    MaturationConfig,
    TailState,
    alpha_profile,
    cfg_combine,
    generate,
    init_tail,
    intervene_ema,
    intervene_noise,
    maturation_step,
    new_session,
    restore_session,
    step_once,
)


class TestAlphaProfile:
    def test_single_slot(self):
        np.testing.assert_allclose(alpha_profile(1, 0.9), [0.9])

    def test_linear_fade(self):
        np.testing.assert_allclose(alpha_profile(4, 0.8), [0.8, 0.6, 0.4, 0.2])

    def test_monotone_for_all_k(self):
        for k in range(1, 65):
            prof = alpha_profile(k, 0.73)
            assert (np.diff(prof) <= 0).all()
            assert prof[0] == pytest.approx(0.73)
            assert prof[-1] > 0

    def test_k_below_one(self):
        with pytest.raises(ValueError):
            alpha_profile(0, 0.5)


class TestInitTail:
    def test_embryo_norms(self, rng):
        cfg = MaturationConfig(tail_len=6, embryo_scale=0.01)
        tail = init_tail(cfg, dim=16, radius=1.0, rng=rng)
        np.testing.assert_allclose(np.linalg.norm(tail.vectors, axis=1), 0.01, atol=1e-9)

    def test_seeds(self):
        cfg = MaturationConfig(tail_len=3)
        a = init_tail(cfg, 8, 1.0, np.random.default_rng(1))
        b = init_tail(cfg, 8, 1.0, np.random.default_rng(2))
        c = init_tail(cfg, 8, 1.0, np.random.default_rng(1))
        assert not np.array_equal(a.vectors, b.vectors)
        np.testing.assert_array_equal(a.vectors, c.vectors)


class TestMaturationStep:
    def test_alpha_one_jumps_to_prediction(self):
        tail = TailState(vectors=np.zeros((1, 2)), alphas=np.array([1.0]))
        stepped = maturation_step(tail, np.array([[3.0, 4.0]]))
        np.testing.assert_array_equal(stepped.vectors, [[3.0, 4.0]])

    def test_alpha_zero_freezes(self):
        tail = TailState(vectors=np.ones((1, 2)), alphas=np.array([0.0]))
        stepped = maturation_step(tail, np.array([[9.0, 9.0]]))
        np.testing.assert_array_equal(stepped.vectors, [[1.0, 1.0]])

    def test_midpoint(self):
        tail = TailState(vectors=np.array([[0.0, 0.0]]), alphas=np.array([0.5]))
        stepped = maturation_step(tail, np.array([[2.0, 0.0]]))
        np.testing.assert_array_equal(stepped.vectors, [[1.0, 0.0]])

    def test_alphas_unchanged(self, rng):
        tail = TailState(vectors=rng.standard_normal((3, 4)), alphas=np.array([0.9, 0.6, 0.3]))
        stepped = maturation_step(tail, rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(stepped.alphas, [0.9, 0.6, 0.3])

    def test_errors(self, rng):
        tail = TailState(vectors=np.zeros((2, 3)), alphas=np.array([0.5, 0.25]))
        with pytest.raises(ValueError, match="shape"):
            maturation_step(tail, np.zeros((3, 3)))
        with pytest.raises(ValueError, match="finite"):
            maturation_step(tail, np.full((2, 3), np.nan))

    def test_geometric_convergence_law(self, rng):
        target = rng.standard_normal(8)
        for alpha in (0.25, 0.5, 0.9):
            tail = TailState(vectors=rng.standard_normal((1, 8)), alphas=np.array([alpha]))
            d0 = np.linalg.norm(tail.vectors[0] - target)
            for n in range(1, 31):
                tail = maturation_step(tail, target[None, :])
                expected = (1 - alpha) ** n * d0
                got = np.linalg.norm(tail.vectors[0] - target)
                assert got == pytest.approx(expected, rel=1e-6)


class TestCfgCombine:
    def test_s1_is_bitwise_conditional(self, rng):
        cond = rng.standard_normal((4, 8))
        uncond = rng.standard_normal((4, 8))
        np.testing.assert_array_equal(cfg_combine(cond, uncond, 1.0), cond)

    def test_s0_is_unconditional(self, rng):
        cond = rng.standard_normal((4, 8))
        uncond = rng.standard_normal((4, 8))
        np.testing.assert_array_equal(cfg_combine(cond, uncond, 0.0), uncond)

    def test_extrapolation(self):
        out = cfg_combine(np.array([2.0, 0.0]), np.array([0.0, 0.0]), 2.0)
        np.testing.assert_array_equal(out, [4.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            cfg_combine(np.zeros((2, 2)), np.zeros((3, 2)), 1.5)


@pytest.fixture
def toy_world(rng):
    table = random_table(13, 8, 1.0, rng)
    cfg = MaturationConfig(tail_len=4, alpha_max=0.8, max_tokens=20)
    return table, cfg


class TestStepOnce:
    def test_prefix_immutable_and_tail_length_fixed(self, toy_world, small_model):
        table, cfg = toy_world
        model, _ = small_model
        session = new_session([1, 2, 3], table, cfg, seed=0)
        prompt_vectors = session.committed_vectors.copy()
        for _ in range(8):
            step_once(session, model, table)
            assert len(session.tail) == cfg.tail_len
            np.testing.assert_array_equal(session.committed_vectors[:3], prompt_vectors)
            np.testing.assert_array_equal(session.tail.alphas, alpha_profile(4, 0.8))

    def test_committed_vectors_track_table_rows(self, toy_world, small_model):
        table, cfg = toy_world
        model, _ = small_model
        session = new_session([5], table, cfg, seed=3)
        for _ in range(6):
            step_once(session, model, table)
        for i, tid in enumerate(session.committed_ids):
            np.testing.assert_array_equal(session.committed_vectors[i], table.row(tid))

    def test_stub_converges_to_predicted_token(self, toy_world):
        table, cfg = toy_world
        stub = ConstantBackbone(table.row(7))
        session = new_session([1], table, cfg, seed=0)

        # independent simulation of the front slot's convex updates
        front = session.tail.vectors.copy()
        alphas = session.tail.alphas.copy()
        expected_front = front[0] + alphas[0] * (table.row(7) - front[0])

        token = step_once(session, stub, table)
        assert token == commit(expected_front, table)
        assert token == 7
        for _ in range(5):
            assert step_once(session, stub, table) == 7

    def test_terminated_session_refuses(self, toy_world, small_model):
        table, _ = toy_world
        model, _ = small_model
        cfg = MaturationConfig(tail_len=4, alpha_max=0.8, max_tokens=5, stop_token=999)
        session = new_session([1], table, cfg, seed=0)
        session.terminated = True
        with pytest.raises(RuntimeError, match="terminated"):
            step_once(session, model, table)

    def test_matches_independent_tail_simulation(self, toy_world, small_model):
        """Whole-step oracle: replay the update rule outside step_once."""
        table, cfg = toy_world
        model, _ = small_model
        import torch

        from liquidtail.backbone import MaskKind

        session = new_session([2, 9], table, cfg, seed=11)
        tail_before = session.tail.vectors.copy()
        alphas = session.tail.alphas.copy()

        x = np.concatenate([session.committed_vectors, tail_before])
        a = np.concatenate([np.ones(2), alphas])
        with torch.no_grad():
            out = model(
                torch.from_numpy(x).float(), torch.from_numpy(a).float(), 4, MaskKind.FULL_CAUSAL
            ).numpy().astype(np.float64)
        preds = out[1 : 1 + 4]
        expected_tail = tail_before + alphas[:, None] * (preds - tail_before)
        expected_token = commit(expected_tail[0], table)

        token = step_once(session, model, table)
        assert token == expected_token
        np.testing.assert_allclose(session.tail.vectors[:-1], expected_tail[1:], atol=0)


class TestGenerate:
    def test_zero_budget(self, toy_world, small_model):
        table, cfg = toy_world
        model, _ = small_model
        session = new_session([1, 2], table, cfg, seed=0)
        assert generate(session, model, table, max_tokens=0) == []

    def test_seed_determinism(self, toy_world, small_model):
        table, cfg = toy_world
        model, _ = small_model
        a = generate(new_session([4, 5], table, cfg, 42), model, table)
        b = generate(new_session([4, 5], table, cfg, 42), model, table)
        c = generate(new_session([4, 5], table, cfg, 43), model, table)
        assert a == b
        assert len(a) == cfg.max_tokens
        assert a != c or True  # different seeds usually differ; no hard guarantee

    def test_stop_token_halts(self, toy_world):
        table, _ = toy_world
        stub = ConstantBackbone(table.row(7))
        cfg = MaturationConfig(tail_len=4, alpha_max=0.8, max_tokens=50, stop_token=7)
        session = new_session([1], table, cfg, seed=0)
        out = generate(session, stub, table)
        assert out[-1] == 7
        assert len(out) < 50
        assert session.terminated

    def test_empty_prompt_rejected(self, toy_world):
        table, cfg = toy_world
        with pytest.raises(ValueError, match="prompt"):
            new_session([], table, cfg, seed=0)


class TestInterventions:
    def test_noise_zero_magnitude_is_identity(self, toy_world, small_model):
        table, cfg = toy_world
        session = new_session([1], table, cfg, seed=0)
        before = session.tail.vectors.copy()
        intervene_noise(session, 0.0, [0, 1])
        np.testing.assert_array_equal(session.tail.vectors, before)

    def test_noise_displacement_norm(self, toy_world):
        table, cfg = toy_world
        session = new_session([1], table, cfg, seed=0)
        before = session.tail.vectors.copy()
        intervene_noise(session, 0.25, [1, 3])
        moved = session.tail.vectors - before
        np.testing.assert_allclose(np.linalg.norm(moved[[1, 3]], axis=1), 0.25, atol=1e-9)
        np.testing.assert_array_equal(moved[[0, 2]], 0.0)

    def test_noise_never_touches_committed(self, toy_world, small_model):
        table, cfg = toy_world
        model, _ = small_model
        session = new_session([1, 2, 3], table, cfg, seed=0)
        step_once(session, model, table)
        ids_before = list(session.committed_ids)
        vecs_before = session.committed_vectors.copy()
        intervene_noise(session, 5.0, range(len(session.tail)))
        assert session.committed_ids == ids_before
        np.testing.assert_array_equal(session.committed_vectors, vecs_before)

    def test_noise_position_out_of_range(self, toy_world):
        table, cfg = toy_world
        session = new_session([1], table, cfg, seed=0)
        with pytest.raises(ValueError, match="position"):
            intervene_noise(session, 0.1, [4])

    def test_ema_zero_coefficient_is_identity(self, toy_world):
        table, cfg = toy_world
        session = new_session([1], table, cfg, seed=0)
        before = session.tail.vectors.copy()
        intervene_ema(session, 0.0)
        np.testing.assert_array_equal(session.tail.vectors, before)

    def test_ema_full_smoothing_copies_front(self, toy_world):
        table, cfg = toy_world
        session = new_session([1], table, cfg, seed=0)
        front = session.tail.vectors[0].copy()
        intervene_ema(session, 1.0)
        for row in session.tail.vectors:
            np.testing.assert_array_equal(row, front)

    def test_ema_matches_hand_unrolled_recurrence(self):
        # K=3, c=0.4: m0 = z0; m1 = .4 m0 + .6 z1; m2 = .4 m1 + .6 z2
        z = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        table = random_table(4, 2, 1.0, np.random.default_rng(0))
        cfg = MaturationConfig(tail_len=3, alpha_max=0.9)
        session = new_session([1], table, cfg, seed=0)
        session.tail = TailState(vectors=z.copy(), alphas=session.tail.alphas)
        intervene_ema(session, 0.4)
        m0 = z[0]
        m1 = 0.4 * m0 + 0.6 * z[1]
        m2 = 0.4 * m1 + 0.6 * z[2]
        np.testing.assert_allclose(session.tail.vectors, np.stack([m0, m1, m2]), atol=1e-15)

    def test_ema_requires_two_positions(self):
        table = random_table(4, 2, 1.0, np.random.default_rng(0))
        cfg = MaturationConfig(tail_len=1)
        session = new_session([1], table, cfg, seed=0)
        with pytest.raises(ValueError, match="at least 2"):
            intervene_ema(session, 0.5)

    def test_ema_coefficient_range(self, toy_world):
        table, cfg = toy_world
        session = new_session([1], table, cfg, seed=0)
        with pytest.raises(ValueError, match="coefficient"):
            intervene_ema(session, 1.5)


class TestSnapshot:
    def test_snapshot_restore_resumes_identically(self, toy_world, small_model):
        table, cfg = toy_world
        model, _ = small_model
        session = new_session([3, 1], table, cfg, seed=9)
        for _ in range(3):
            step_once(session, model, table)
        snap = session.snapshot()

        import json

        snap = json.loads(json.dumps(snap))  # must survive JSON
        twin = restore_session(snap, table)
        rest_a = [step_once(session, model, table) for _ in range(5)]
        rest_b = [step_once(twin, model, table) for _ in range(5)]
        assert rest_a == rest_b
