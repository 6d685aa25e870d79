"""Verification protocol, EER sweep vs brute-force oracle, DET, exports."""

import numpy as np
import pytest

from keyformer import evaluation as E
from keyformer.errors import ContractError, ProtocolError
from keyformer.tensor import RngState


def eer_oracle(genuine, impostor):
    """Exhaustive evaluation at every score value and midpoint."""
    genuine = [float(g) for g in genuine]
    impostor = [float(i) for i in impostor]
    vals = sorted(set(genuine + impostor))
    cands = list(vals)
    for a, b in zip(vals, vals[1:]):
        cands.append((a + b) / 2.0)
    cands.sort()
    best = None
    for t in cands:
        frr = sum(1 for g in genuine if g > t) / len(genuine)
        far = sum(1 for i in impostor if i <= t) / len(impostor)
        key = abs(far - frr)
        if best is None or key < best[0] - 1e-15:
            best = (key, t, (far + frr) / 2.0)
    return best[2], best[1]


def _random_scoreset(rng, n_gen=5, n_imp=999, shift=0.0):
    return (rng.uniform(0, 1, n_gen) + shift, rng.uniform(0, 1, n_imp))


class TestComputeEer:
    def test_perfect_separation(self):
        r = E.compute_eer([0.1] * 5, [0.9] * 9)
        assert r.eer == 0.0

    def test_interleaved_hand_case(self):
        # exhaustive sweep by hand: FAR and FRR cross at 0.5
        r = E.compute_eer([0.1, 0.4], [0.2, 0.3])
        assert r.eer == pytest.approx(0.5)
        assert r.threshold == pytest.approx(0.2)  # lowest threshold among ties

    def test_inverted_polarity_flagged(self, caplog):
        with caplog.at_level("WARNING"):
            r = E.compute_eer([0.9] * 5, [0.1] * 5)
        assert r.eer > 0.5
        assert "polarity" in caplog.text

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            E.compute_eer([], [0.1])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force_oracle(self, seed):
        rng = RngState(seed)
        g, i = _random_scoreset(rng)
        r = E.compute_eer(g, i)
        eer, thr = eer_oracle(g, i)
        assert abs(r.eer - eer) <= 1e-9
        assert abs(r.threshold - thr) <= 1e-9

    def test_invariant_under_increasing_transform(self):
        rng = RngState(5)
        g, i = _random_scoreset(rng)
        base = E.compute_eer(g, i).eer
        for f in (lambda x: 3 * x + 1, np.exp, lambda x: x ** 3):
            assert E.compute_eer(f(np.asarray(g)), f(np.asarray(i))).eer == pytest.approx(base, abs=1e-12)


class TestBuildScores:
    def _embeddings(self, n_subjects, n_sessions, S=8, noise=0.0, seed=0):
        rng = RngState(seed)
        out = {}
        for s in range(n_subjects):
            center = rng.uniform(0, 1, S)
            center /= center.sum()
            sess = []
            for _ in range(n_sessions):
                v = center + noise * rng.uniform(-1, 1, S)
                sess.append(v)
            out[f"u{s}"] = sess
        return out

    def test_score_counts(self):
        embs = self._embeddings(12, 15, noise=0.01)
        for enrol in (1, 5, 10):
            sets = E.build_scores(embs, enrol)
            assert len(sets) == 12
            for ss in sets:
                assert ss.genuine.shape == (5,)
                assert ss.impostor.shape == (11,)
                assert (ss.genuine >= 0).all() and (ss.impostor >= 0).all()

    def test_e1_genuine_equals_raw_distance(self):
        embs = self._embeddings(3, 7, noise=0.02, seed=3)
        sets = E.build_scores(embs, 1)
        from keyformer.model import distance
        for ss in sets:
            sess = embs[ss.subject_id]
            expect = [distance(t, sess[0]) for t in sess[-5:]]
            np.testing.assert_allclose(ss.genuine, expect, atol=1e-12)

    def test_identical_points_per_subject(self):
        # each subject's sessions identical, distinct across subjects
        embs = self._embeddings(5, 15, noise=0.0, seed=7)
        sets = E.build_scores(embs, 5)
        for ss in sets:
            np.testing.assert_allclose(ss.genuine, 0.0, atol=1e-12)
            assert (ss.impostor > 0).all()

    def test_insufficient_sessions_names_subject(self):
        embs = self._embeddings(3, 15, seed=1)
        embs["u1"] = embs["u1"][:9]
        with pytest.raises(ProtocolError, match="u1"):
            E.build_scores(embs, 5)

    def test_impostor_probe_is_first_test_session(self):
        embs = self._embeddings(2, 15, noise=0.05, seed=9)
        sets = E.build_scores(embs, 1)
        from keyformer.model import distance
        probe = embs["u1"][-5]                     # u1's first test session
        expect = distance(probe, embs["u0"][0])    # vs u0's single enrolment
        assert sets[0].impostor[0] == pytest.approx(expect, abs=1e-12)


class TestAggregateEer:
    def test_all_separated_is_zero(self):
        sets = [E.ScoreSet("a", np.full(5, 0.1), np.full(9, 0.9), 5),
                E.ScoreSet("b", np.full(5, 0.2), np.full(9, 0.8), 5)]
        assert E.average_eer(sets).eer == 0.0
        assert E.global_eer(sets).eer == 0.0

    def test_average_is_arithmetic_mean(self):
        sets = [E.ScoreSet("a", np.full(5, 0.1), np.full(9, 0.9), 5),       # EER 0
                E.ScoreSet("b", np.array([0.1, 0.4, 0.1, 0.4, 0.1]),
                           np.array([0.2, 0.3] * 5), 5)]
        per_b = E.compute_eer(sets[1].genuine, sets[1].impostor).eer
        got = E.average_eer(sets).eer
        assert got == pytest.approx(per_b / 2)

    def test_chance_level_embeddings(self):
        rng = RngState(11)
        sets = []
        for s in range(50):
            g, i = _random_scoreset(rng, 5, 999)
            sets.append(E.ScoreSet(f"u{s}", g, i, 1))
        assert E.average_eer(sets).eer == pytest.approx(0.5, abs=0.05)

    def test_pooling_invariance_identical_distributions(self):
        g = np.array([0.1, 0.15, 0.2, 0.85, 0.9])
        i = np.array([0.3, 0.5, 0.7, 0.8, 0.95, 1.0, 1.1, 1.2, 1.3])
        sets = [E.ScoreSet(f"u{k}", g.copy(), i.copy(), 5) for k in range(4)]
        assert E.global_eer(sets).eer == pytest.approx(E.average_eer(sets).eer, abs=1e-12)

    def test_intersubject_shift_hurts_global(self):
        # per-subject separable, but score ranges offset across subjects
        sets = [E.ScoreSet("a", np.array([0.1, 0.12, 0.14, 0.16, 0.18]),
                           np.linspace(0.3, 0.4, 9), 5),
                E.ScoreSet("b", np.array([0.31, 0.33, 0.35, 0.37, 0.39]),
                           np.linspace(0.5, 0.6, 9), 5)]
        assert E.average_eer(sets).eer == 0.0
        assert E.global_eer(sets).eer > 0.0

    def test_single_subject_global_equals_own_eer(self):
        rng = RngState(2)
        g, i = _random_scoreset(rng)
        sets = [E.ScoreSet("solo", g, i, 1)]
        assert E.global_eer(sets).eer == pytest.approx(E.compute_eer(g, i).eer, abs=1e-12)

    def test_more_enrolment_helps_on_separable_data(self):
        rng = RngState(13)
        embs = {}
        for s in range(20):
            center = rng.uniform(0, 1, 16)
            center /= center.sum()
            embs[f"u{s}"] = [center + 0.04 * rng.uniform(-1, 1, 16) for _ in range(15)]
        e1 = E.global_eer(E.build_scores(embs, 1)).eer
        e5 = E.global_eer(E.build_scores(embs, 5)).eer
        assert e5 <= e1 + 0.02


class TestDetCurve:
    def test_perfect_touches_origin(self):
        c = E.det_curve([0.1] * 5, [0.9] * 20)
        assert any(far == 0.0 and frr == 0.0 for _, far, frr in c.points)

    def test_chance_passes_near_half(self):
        rng = RngState(3)
        g = rng.uniform(0, 1, 2000)
        i = rng.uniform(0, 1, 2000)
        c = E.det_curve(g, i, num_points=400)
        best = min(abs(far - 0.5) + abs(frr - 0.5) for _, far, frr in c.points)
        assert best < 0.05

    def test_monotone_in_threshold_order(self):
        rng = RngState(4)
        c = E.det_curve(rng.uniform(0, 1, 50), rng.uniform(0.2, 1.2, 300), num_points=64)
        fars = [p[1] for p in c.points]
        frrs = [p[2] for p in c.points]
        assert all(a >= b for a, b in zip(fars, fars[1:]))
        assert all(a <= b for a, b in zip(frrs, frrs[1:]))
        assert len(c.points) <= 64


class TestFileOutputs:
    def test_scores_roundtrip(self, tmp_path):
        rng = RngState(6)
        g, i = _random_scoreset(rng, 5, 9)
        sets = [E.ScoreSet("u0", g, i, 5)]
        p = tmp_path / "scores.csv"
        E.write_scores(sets, p)
        back = E.read_scores(p)
        np.testing.assert_allclose(back["u0"]["genuine"], g, rtol=1e-8)
        np.testing.assert_allclose(back["u0"]["impostor"], i, rtol=1e-8)

    def test_det_file(self, tmp_path):
        c = E.det_curve([0.1, 0.2], [0.3, 0.4])
        p = tmp_path / "det.csv"
        E.write_det(c, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "threshold,far,frr"
        assert len(lines) == len(c.points) + 1

    def test_export_shape_and_determinism(self, tmp_path):
        rng = RngState(8)
        rows = []
        for s in range(10):
            for k in range(15):
                v = rng.uniform(0, 1, 64)
                rows.append((f"u{s}", f"s{k}", v / v.sum()))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        E.export_embeddings(rows, p1)
        E.export_embeddings(rows, p2)
        assert p1.read_bytes() == p2.read_bytes()
        lines = p1.read_text().splitlines()
        assert len(lines) == 150
        parts = lines[0].split(",")
        assert len(parts) == 66
        assert abs(sum(float(x) for x in parts[2:]) - 1.0) <= 1e-5
