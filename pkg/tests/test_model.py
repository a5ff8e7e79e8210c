import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpe.model import (ConfigError, ModelParams, clip_unit, composition, compose_projection, identity_pattern,
                       normalize_matrix, path_representation, project, score_final, score_goal, score_path,
                       score_relation)
from rpe.paths import PathEvidence


def random_params(rng, E=6, R2=4, n=3, m=3, mode="acom", lam=1.0, norm=1, scale=0.4):
    proj = np.eye(m, n) + rng.normal(size=(R2, m, n)) * 0.3
    return ModelParams(rng.normal(size=(E, n)) * scale, rng.normal(size=(R2, m)) * scale, proj, mode, lam, norm)


class TestModes:
    @pytest.mark.parametrize("mode,comp", [("initial", None), ("pc", None), ("acom", "acom"), ("mcom", "mcom"),
                                           ("pc+acom", "acom"), ("pc+mcom", "mcom")])
    def test_composition(self, mode, comp):
        assert composition(mode) == comp

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            composition("bogus")

    def test_mcom_needs_square(self):
        with pytest.raises(ConfigError):
            ModelParams.zeros(3, 2, 100, 50, mode="mcom")
        ModelParams.zeros(3, 2, 100, 50, mode="acom")

    def test_odd_relation_count(self):
        with pytest.raises(ConfigError):
            ModelParams.zeros(3, 3, 2, 2)


class TestProjection:
    def test_identity_two_dims(self):
        np.testing.assert_allclose(project(np.array([0.6, 0.8]), np.eye(2)), [0.6, 0.8])

    def test_clipped(self):
        np.testing.assert_allclose(project(np.array([3.0, 4.0]), np.eye(2)), [0.6, 0.8])

    def test_zero_vector(self):
        np.testing.assert_array_equal(project(np.zeros(3), np.eye(3)), np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project(np.ones(3), np.eye(2))

    @given(st.integers(0, 10_000))
    def test_norm_never_exceeds_one(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=4) * rng.uniform(0, 10)
        M = rng.normal(size=(3, 4)) * rng.uniform(0, 10)
        assert np.linalg.norm(project(v, M)) <= 1 + 1e-12

    def test_clip_rows(self):
        x = np.array([[3.0, 4.0], [0.3, 0.4]])
        np.testing.assert_allclose(clip_unit(x), [[0.6, 0.8], [0.3, 0.4]])


class TestComposition:
    def test_acom_identity_pair(self):
        p = ModelParams.zeros(2, 4, 2, 2)
        # I + I has Frobenius norm 2*sqrt(2), capped at sqrt(2)
        np.testing.assert_allclose(compose_projection((0, 1), p), np.eye(2))

    def test_mcom_identity_pair(self):
        p = ModelParams.zeros(2, 4, 2, 2, mode="mcom")
        np.testing.assert_allclose(compose_projection((0, 1), p), np.eye(2))

    def test_mcom_order(self):
        rng = np.random.default_rng(0)
        p = random_params(rng, mode="mcom")
        A, B = p.proj[0], p.proj[1]
        np.testing.assert_allclose(compose_projection((0, 1), p), normalize_matrix(A @ B))

    @given(st.integers(0, 10_000), st.sampled_from(["acom", "mcom"]))
    @settings(max_examples=50)
    def test_frobenius_cap(self, seed, mode):
        rng = np.random.default_rng(seed)
        p = random_params(rng, mode=mode)
        p.proj *= rng.uniform(0.1, 5)
        M = compose_projection(tuple(rng.integers(0, 4, size=2)), p)
        assert np.linalg.norm(M) <= np.sqrt(p.m) + 1e-9

    def test_single_relation_acom(self):
        rng = np.random.default_rng(1)
        p = random_params(rng)
        np.testing.assert_allclose(compose_projection((2,), p), normalize_matrix(p.proj[2]))

    def test_path_representation_is_sum(self):
        p = random_params(np.random.default_rng(2))
        np.testing.assert_allclose(path_representation((0, 3), p), p.relation[0] + p.relation[3])

    def test_identity_pattern_rectangular(self):
        np.testing.assert_array_equal(identity_pattern(2, 3), [[1, 0, 0], [0, 1, 0]])


class TestScores:
    def test_transe_reduction(self):
        p = ModelParams.zeros(2, 2, 2, 2, mode="initial")
        p.entity[:] = [[0.1, 0.2], [0.4, 0.1]]
        p.relation[0] = [0.3, -0.1]
        assert score_relation(0, 0, 1, p) == pytest.approx(0.0)
        p.relation[0] = [0.0, 0.0]
        assert score_relation(0, 0, 1, p) == pytest.approx(0.4)

    def test_identity_projection_equals_unprojected(self):
        rng = np.random.default_rng(3)
        p = random_params(rng, mode="acom")
        p.proj[:] = np.eye(3)
        q = p.copy()
        q.mode = "initial"
        assert score_relation(1, 2, 3, p) == pytest.approx(score_relation(1, 2, 3, q))

    def test_l2(self):
        p = ModelParams.zeros(2, 2, 2, 2, mode="initial", norm=2)
        p.entity[1] = [0.3, 0.4]
        assert score_relation(0, 0, 1, p) == pytest.approx(0.5)

    def test_score_path_manual(self):
        rng = np.random.default_rng(4)
        p = random_params(rng)
        M = normalize_matrix(p.proj[0] + p.proj[1])
        d = clip_unit(M @ p.entity[2]) + p.relation[0] + p.relation[1] - clip_unit(M @ p.entity[5])
        assert score_path(2, (0, 1), 5, p) == pytest.approx(np.abs(d).sum())

    def test_goal_without_evidence(self):
        p = random_params(np.random.default_rng(5))
        assert score_goal(0, 0, 1, PathEvidence(), p).combined == score_relation(0, 0, 1, p)
        assert score_goal(0, 0, 1, None, p).combined == score_relation(0, 0, 1, p)

    def test_goal_hand_arithmetic(self):
        # lam=1, one path with P=0.5, P_r=1, S_path=0.4, S_direct=0.2 -> G = 0.2 + (1/0.5)*0.5*1*0.4 = 0.6
        p = ModelParams.zeros(3, 4, 1, 1, mode="initial")
        p.entity[:] = [[0.0], [0.2], [0.0]]
        p.relation[:] = [[0.0], [0.6], [0.0], [0.0]]
        ev = PathEvidence(triples={(0, 0, 1): [((1, 2), 0.5)]}, cooc={((1, 2), 0): 4}, marginal={(1, 2): 4})
        g = score_goal(0, 0, 1, ev, p)
        assert g.direct == pytest.approx(0.2)
        assert g.combined == pytest.approx(0.6)
        assert g.path_terms == [((1, 2), 0.5, pytest.approx(0.4))]

    def test_goal_lambda_zero(self):
        p = ModelParams.zeros(3, 4, 1, 1, mode="initial", lam=0.0)
        p.entity[1] = [0.2]
        ev = PathEvidence(triples={(0, 0, 1): [((1, 2), 0.5)]}, cooc={((1, 2), 0): 1}, marginal={(1, 2): 1})
        assert score_goal(0, 0, 1, ev, p).combined == pytest.approx(0.2)

    def test_final_symmetric(self):
        rng = np.random.default_rng(6)
        p = random_params(rng)
        ev = PathEvidence(triples={(0, 0, 1): [((1, 3), 0.6)], (1, 2, 0): [((3,), 0.2)]},
                          cooc={((1, 3), 0): 1, ((3,), 2): 1}, marginal={(1, 3): 2, (3,): 1})
        assert score_final(0, 0, 1, ev, p) == pytest.approx(score_final(1, 2, 0, ev, p))
        want = score_goal(0, 0, 1, ev, p).combined + score_goal(1, 2, 0, ev, p).combined
        assert score_final(0, 0, 1, ev, p) == pytest.approx(want)

    @given(st.integers(0, 10_000), st.sampled_from([1, 2]))
    @settings(max_examples=50)
    def test_scores_nonnegative_and_bounded(self, seed, norm):
        p = random_params(np.random.default_rng(seed), norm=norm, scale=2.0)
        s = score_relation(0, 1, 2, p)
        # each projected entity has norm <= 1, so the L2 distance is at most 2 + |r|
        bound = 2 + np.linalg.norm(p.relation[1])
        assert 0 <= s
        if norm == 2:
            assert s <= bound + 1e-9


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = random_params(np.random.default_rng(7), mode="pc+mcom", lam=0.8, norm=2)
        p.save(tmp_path / "m.ckpt", {"epoch": 3})
        q = ModelParams.load(tmp_path / "m.ckpt")
        assert (q.mode, q.lam, q.norm, q.meta["epoch"]) == ("pc+mcom", 0.8, 2, 3)
        np.testing.assert_array_equal(q.entity, p.entity.astype(np.float32))
        np.testing.assert_array_equal(q.proj, p.proj.astype(np.float32))

    def test_float32_values_survive_exactly(self, tmp_path):
        p = random_params(np.random.default_rng(8))
        p.entity = p.entity.astype(np.float32).astype(float)
        p.relation = p.relation.astype(np.float32).astype(float)
        p.proj = p.proj.astype(np.float32).astype(float)
        p.save(tmp_path / "a.ckpt")
        ModelParams.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"garbage" * 10)
        with pytest.raises(ConfigError):
            ModelParams.load(tmp_path / "x")
