import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irisstack.errors import DegenerateInputError, InputError, SampleLookupError
from irisstack.matching import (
    Protocol,
    ScoreSet,
    cosine_similarity,
    crr,
    decidability,
    det_curve,
    eer,
    enumerate_pairs,
    evaluate,
    rank1_correct,
    read_scores_csv,
    score_all,
    score_matrix,
    split_protocol,
    sweep,
    tmr_at_fmr,
    write_det_csv,
    write_scores_csv,
)

# Oracles work on an integer lattice: scores are k / 10**4 and the dense grid
# steps at 1e-5, so every distinct score is hit exactly by the grid.
SCALE = 10**4
GRID = np.arange(-10**5 - 10, 10**5 + 11)  # thresholds in units of 1e-5


def lattice_scores(rng, n, loc=0.0, spread=0.3):
    return np.clip(np.rint(rng.normal(loc, spread, n) * SCALE), -SCALE, SCALE).astype(np.int64)


def grid_rates(g_int, i_int):
    """FMR and FNMR at every grid threshold by direct counting."""
    fmr = np.empty(GRID.size)
    fnmr = np.empty(GRID.size)
    for lo in range(0, GRID.size, 4000):
        t = GRID[lo : lo + 4000, None]
        fmr[lo : lo + 4000] = (i_int[None, :] * 10 >= t).sum(axis=1) / i_int.size
        fnmr[lo : lo + 4000] = (g_int[None, :] * 10 < t).sum(axis=1) / g_int.size
    return fmr, fnmr


def grid_eer(g_int, i_int):
    fmr, fnmr = grid_rates(g_int, i_int)
    pts = [(1.0, 0.0)]
    for a, b in zip(fmr, fnmr):
        if (a, b) != pts[-1]:
            pts.append((a, b))
    if pts[-1] != (0.0, 1.0):
        pts.append((0.0, 1.0))
    for a, b in pts:
        if a == b:
            return a
    for (a0, b0), (a1, b1) in zip(pts, pts[1:]):
        if a0 > b0 and a1 < b1:
            # intersection of the two segments FMR(u), FNMR(u), u in [0, 1]
            u = (b0 - a0) / ((a1 - a0) - (b1 - b0))
            return a0 + u * (a1 - a0)
    raise AssertionError("no crossing")


def grid_tmr(g_int, i_int, target):
    fmr, fnmr = grid_rates(g_int, i_int)
    k = next(j for j in range(GRID.size) if fmr[j] <= target)
    return 1.0 - fnmr[k]


def to_set(g_int, i_int):
    return ScoreSet(g_int / SCALE, i_int / SCALE)


def protocol_from(vectors: dict, gallery: dict, probe: dict, kind="closed"):
    return Protocol(gallery, probe, vectors, kind)


class TestCosine:
    def test_examples(self):
        v = np.array([0.3, -1.2, 2.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
        assert cosine_similarity([1, 0], [0, 1]) == 0.0
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity([0, 0], [1, 0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_range(self, a, b):
        if np.linalg.norm(a) <= 1e-6 or np.linalg.norm(b) <= 1e-6:
            return
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


def random_protocol(rng, k, g, p, d=6):
    vectors, gallery, probe = {}, {}, {}
    for s in range(k):
        subj = f"s{s:02d}"
        gallery[subj] = [f"{subj}/g{j}" for j in range(g)]
        probe[subj] = [f"{subj}/p{j}" for j in range(p)]
        for sid in gallery[subj] + probe[subj]:
            vectors[sid] = rng.standard_normal(d)
    return protocol_from(vectors, gallery, probe)


class TestPairs:
    def test_table_scale(self):
        gallery = {f"s{i}": [f"s{i}/g{j}" for j in range(10)] for i in range(783)}
        probe = {f"s{i}": [f"s{i}/p{j}" for j in range(10)] for i in range(783)}
        assert enumerate_pairs(Protocol(gallery, probe)) == (78_300, 61_230_600)

    def test_single_subject(self):
        assert enumerate_pairs(Protocol({"a": ["a/1", "a/2"]}, {"a": ["a/3"]})) == (2, 0)

    def test_three_by_two_explicit_listing(self):
        proto = random_protocol(np.random.default_rng(0), 3, 2, 2)
        listing = [
            (pid, gid)
            for ps, pids in proto.probe.items()
            for gs, gids in proto.gallery.items()
            for pid in pids
            for gid in gids
        ]
        genuine = sum(pid.split("/")[0] == gid.split("/")[0] for pid, gid in listing)
        assert (genuine, len(listing) - genuine) == (12, 24)
        assert enumerate_pairs(proto) == (12, 24)

    def test_empty(self):
        with pytest.raises(InputError):
            enumerate_pairs(Protocol({}, {}))

    def test_disjoint_invariant(self):
        with pytest.raises(InputError, match="share"):
            Protocol({"a": ["a/1"]}, {"a": ["a/1"]})


class TestScoreAll:
    def test_identical_embeddings(self):
        proto = random_protocol(np.random.default_rng(1), 3, 2, 2)
        proto.embeddings = {k: np.ones(4) for k in proto.embeddings}
        ss = score_all(proto)
        assert np.all(ss.genuine == 1.0) and np.all(ss.impostor == 1.0)

    def test_orthogonal_subjects(self):
        proto = random_protocol(np.random.default_rng(2), 4, 2, 3)
        proto.embeddings = {k: np.eye(4)[int(k[1:3])] * 2.5 for k in proto.embeddings}
        ss = score_all(proto)
        assert np.all(ss.genuine == 1.0) and np.all(ss.impostor == 0.0)

    @pytest.mark.parametrize("seed", range(100))
    def test_brute_force_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        proto = random_protocol(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        gen, imp = [], []
        for ps, pids in proto.probe.items():
            for pid in pids:
                for gs, gids in proto.gallery.items():
                    for gid in gids:
                        s = cosine_similarity(proto.embeddings[pid], proto.embeddings[gid])
                        (gen if ps == gs else imp).append(s)
        ss = score_all(proto)
        np.testing.assert_allclose(np.sort(ss.genuine), np.sort(gen), atol=1e-12)
        np.testing.assert_allclose(np.sort(ss.impostor), np.sort(imp), atol=1e-12)
        assert (ss.genuine.size, ss.impostor.size) == enumerate_pairs(proto)

    def test_missing_embedding_names_sample(self):
        proto = random_protocol(np.random.default_rng(3), 2, 1, 1)
        del proto.embeddings["s01/p0"]
        with pytest.raises(SampleLookupError, match="s01/p0"):
            score_all(proto)


class TestEer:
    def test_perfect(self):
        assert eer(ScoreSet([1.0] * 4, [0.0] * 5))[0] == 0.0

    def test_chance(self):
        x = np.random.default_rng(0).uniform(-1, 1, 50)
        assert eer(ScoreSet(x, x))[0] == pytest.approx(0.5)

    def test_spec_example(self):
        g, i = np.array([9000, 8000, 4000]), np.array([6000, 3000, 2000])
        rate, thr = eer(to_set(g, i))
        assert rate == pytest.approx(grid_eer(g, i), abs=1e-12)
        assert rate == pytest.approx(1 / 3) and thr == 0.6

    def test_interpolated_crossing(self):
        # sweep goes 0.5 -> (1/3, 0), 0.6 -> (1/3, 1/2): crossing falls between them
        g, i = np.array([5000, 9000]), np.array([1000, 4000, 6000])
        rate, thr = eer(to_set(g, i))
        assert rate == pytest.approx(grid_eer(g, i), abs=1e-12)
        assert rate == pytest.approx(1 / 3)
        assert thr == pytest.approx(0.5 + (2 / 3) * 0.1)

    @pytest.mark.parametrize("seed", range(100))
    def test_dense_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = lattice_scores(rng, int(rng.integers(2, 30)), 0.4)
        i = lattice_scores(rng, int(rng.integers(2, 30)), 0.0)
        assert eer(to_set(g, i))[0] == pytest.approx(grid_eer(g, i), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_symmetry_under_swap_and_negation(self, seed):
        rng = np.random.default_rng(seed)
        g, i = rng.normal(0.3, 0.2, 40).clip(-1, 1), rng.normal(0, 0.2, 60).clip(-1, 1)
        assert eer(ScoreSet(g, i))[0] == pytest.approx(eer(ScoreSet(-i, -g))[0], abs=1e-12)

    def test_empty(self):
        with pytest.raises(InputError):
            eer(ScoreSet([], [0.1]))

    def test_sweep_monotone(self):
        rng = np.random.default_rng(5)
        _, fmr, fnmr = sweep(ScoreSet(rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30)))
        assert np.all(np.diff(fmr) <= 0) and np.all(np.diff(fnmr) >= 0)


class TestTmr:
    def test_perfect(self):
        res = tmr_at_fmr(ScoreSet([0.9] * 10, np.linspace(-1, 0.5, 20000)))
        assert [r.tmr for r in res] == [1.0, 1.0]
        assert not any(r.underpowered for r in res)

    def test_exchangeable(self):
        x = np.random.default_rng(0).uniform(-1, 1, 20000)
        for r in tmr_at_fmr(ScoreSet(x, x)):
            assert abs(r.tmr - r.target) <= 1 / x.size

    def test_gaussian_against_grid(self):
        rng = np.random.default_rng(42)
        g, i = lattice_scores(rng, 50, 0.6, 0.2), lattice_scores(rng, 5000, 0.0, 0.2)
        res = tmr_at_fmr(to_set(g, i))
        for r in res:
            assert r.tmr == pytest.approx(grid_tmr(g, i, r.target), abs=1e-12)
        assert [r.underpowered for r in res] == [False, True]

    @pytest.mark.parametrize("seed", range(100))
    def test_grid_oracle_small(self, seed):
        rng = np.random.default_rng(1000 + seed)
        g, i = lattice_scores(rng, 20, 0.4), lattice_scores(rng, 30, 0.0)
        for target in (0.001, 0.05, 0.2):
            assert tmr_at_fmr(to_set(g, i), [target])[0].tmr == pytest.approx(grid_tmr(g, i, target), abs=1e-12)


class TestCrr:
    def test_single_subject(self):
        proto = random_protocol(np.random.default_rng(0), 1, 2, 3)
        assert crr(proto) == 1.0

    def test_orthogonal(self):
        proto = random_protocol(np.random.default_rng(2), 4, 2, 3)
        proto.embeddings = {k: np.eye(4)[int(k[1:3])] for k in proto.embeddings}
        assert crr(proto) == 1.0

    def test_adversarial_toy(self):
        vec = {
            "a/g": [1.0, 0.0, 0.0],
            "b/g": [0.0, 1.0, 0.0],
            "c/g": [0.0, 0.0, 1.0],
            "a/p": [0.9, 0.1, 0.0],
            "b/p": [0.1, 0.9, 0.1],
            "c/p": [0.8, 0.0, 0.3],  # closer to a's gallery than to c's
        }
        proto = protocol_from(vec, {s: [f"{s}/g"] for s in "abc"}, {s: [f"{s}/p"] for s in "abc"})
        # hand enumeration of the argmax per probe
        hits = 0
        for s in "abc":
            best = max("abc", key=lambda t: cosine_similarity(vec[f"{s}/p"], vec[f"{t}/g"]))
            hits += best == s
        assert hits == 2
        assert crr(proto) == pytest.approx(2 / 3)

    def test_ties_go_to_smallest_id(self):
        vec = {"b/1": [1.0, 0.0], "a/9": [1.0, 0.0], "b/p": [1.0, 0.0], "a/p": [0.0, 1.0]}
        proto = protocol_from(vec, {"a": ["a/9"], "b": ["b/1"]}, {"a": ["a/p"], "b": ["b/p"]})
        # both probes tie across a/9 and b/1; "a/9" < "b/1" so a/p is right and b/p wrong
        assert crr(proto) == 0.5

    @pytest.mark.parametrize("seed", range(100))
    def test_exhaustive_argmax_oracle(self, seed):
        rng = np.random.default_rng(seed)
        proto = random_protocol(rng, int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 3)), d=3)
        correct = total = 0
        for ps, pids in proto.probe.items():
            for pid in pids:
                cands = [(gid, gs) for gs, gids in proto.gallery.items() for gid in gids]
                best = max(cands, key=lambda c: (cosine_similarity(proto.embeddings[pid], proto.embeddings[c[0]]), [-ord(ch) for ch in c[0]]))
                correct += best[1] == ps
                total += 1
        assert crr(proto) == pytest.approx(correct / total)

    def test_empty_gallery(self):
        with pytest.raises(InputError):
            crr(Protocol({"a": []}, {"a": ["a/1"]}, {"a/1": np.ones(2)}))


class TestDecidability:
    def test_equal_means(self):
        assert decidability(ScoreSet([0.1, 0.3], [0.0, 0.4])) == 0.0

    def test_closed_form(self):
        assert decidability(ScoreSet([0.1, 0.2, 0.3], [-0.1, 0.0, 0.1])) == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_two_pass_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g, i = rng.normal(0.5, 0.1, 37).tolist(), rng.normal(0.0, 0.2, 91).tolist()

        def mean_var(xs):
            m = sum(xs) / len(xs)
            return m, sum((x - m) ** 2 for x in xs) / (len(xs) - 1)

        (mg, vg), (mi, vi) = mean_var(g), mean_var(i)
        assert decidability(ScoreSet(g, i)) == pytest.approx(abs(mg - mi) / math.sqrt((vg + vi) / 2), rel=1e-12)

    def test_zero_variance(self):
        with pytest.raises(DegenerateInputError):
            decidability(ScoreSet([0.5, 0.5], [0.1, 0.1]))


class TestDet:
    def test_perfect_touches_origin(self):
        curve = det_curve(ScoreSet([0.9, 0.8], [0.1, 0.2]))
        assert (0.0, 0.0) in [(a, b) for _, a, b in curve.points]

    def test_identical_near_half(self):
        x = np.random.default_rng(0).uniform(-1, 1, 200)
        curve = det_curve(ScoreSet(x, x))
        assert np.min(np.abs(curve.fmr - 0.5) + np.abs(curve.fnmr - 0.5)) <= 2 / 200

    @pytest.mark.parametrize("seed", range(100))
    def test_per_threshold_counting(self, seed):
        rng = np.random.default_rng(seed)
        g = np.round(rng.uniform(-1, 1, 15), 2).tolist()
        i = np.round(rng.uniform(-1, 1, 25), 2).tolist()
        curve = det_curve(ScoreSet(g, i))
        assert list(curve.thresholds) == sorted(set(g) | set(i))
        for t, a, b in curve.points:
            assert a == sum(x >= t for x in i) / len(i)
            assert b == sum(x < t for x in g) / len(g)
        assert np.all(np.diff(curve.fmr) <= 0) and np.all(np.diff(curve.fnmr) >= 0)


class TestInvariance:
    TRANSFORMS = [lambda x: x**3, lambda x: np.tanh(2 * x), lambda x: (x + 1) ** 2 / 2 - 1]

    @pytest.mark.parametrize("seed", range(25))
    @pytest.mark.parametrize("f", range(3))
    def test_rank_metrics_invariant(self, seed, f):
        fn = self.TRANSFORMS[f]
        rng = np.random.default_rng(seed)
        g, i = np.round(rng.uniform(-0.5, 1, 30), 3), np.round(rng.uniform(-1, 0.6, 40), 3)
        a, b = ScoreSet(g, i), ScoreSet(fn(g), fn(i))
        assert eer(a)[0] == eer(b)[0]
        assert [r.tmr for r in tmr_at_fmr(a, [0.05, 0.2])] == [r.tmr for r in tmr_at_fmr(b, [0.05, 0.2])]
        ca, cb = det_curve(a), det_curve(b)
        np.testing.assert_array_equal(ca.fmr, cb.fmr)
        np.testing.assert_array_equal(ca.fnmr, cb.fnmr)
        proto = random_protocol(rng, 4, 2, 2, d=3)
        m = score_matrix(proto)
        args = (m.probe_subjects, m.gallery_ids, m.gallery_subjects)
        np.testing.assert_array_equal(rank1_correct(m.scores, *args), rank1_correct(fn(m.scores), *args))


class TestProtocolsAndFiles:
    def test_split_closed_and_open(self):
        samples = {f"s{i}": [f"s{i}/{j}" for j in range(6)] for i in range(4)}
        emb = {k: np.ones(3) for v in samples.values() for k in v}
        closed = split_protocol(samples, emb)
        assert closed.kind == "closed" and closed.gallery["s0"] == ["s0/0", "s0/1", "s0/2"]
        opened = split_protocol(samples, emb, exclude_subjects=["s0", "s1"])
        assert opened.kind == "open" and set(opened.gallery) == {"s2", "s3"}
        assert not set(opened.gallery) & {"s0", "s1"}

    def test_evaluate_keys_and_csv(self, tmp_path):
        proto = random_protocol(np.random.default_rng(9), 4, 3, 3)
        report, m, ss, _ = evaluate(proto)
        assert list(report) == [
            "eer", "eer_threshold", "tmr_at_fmr_0p1", "tmr_at_fmr_0p01", "crr", "di", "genuine_count", "impostor_count"
        ]
        assert (report["genuine_count"], report["impostor_count"]) == (36, 108)
        write_scores_csv(tmp_path / "s.csv", m)
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["probe_id", "gallery_id", "label", "score"]
        assert len(rows) == 1 + 144 and all(len(r[3].split(".")[1]) == 6 for r in rows[1:])
        back = read_scores_csv(tmp_path / "s.csv")
        assert back.genuine.size == 36
        assert eer(back)[0] == pytest.approx(report["eer"], abs=1e-5)
        write_det_csv(tmp_path / "d.csv", det_curve(ss))
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "threshold,fmr,fnmr"

    def test_out_of_range_scores(self):
        with pytest.raises(InputError):
            eer(ScoreSet([1.5], [0.0]))
