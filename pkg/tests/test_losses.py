import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irisstack import autodiff as ad
from irisstack.autodiff import Tensor
from irisstack.autodiff.gradcheck import check_gradients
from irisstack.errors import ConfigError, LabelError, MiningError
from irisstack.losses import (
    ArcFaceParams,
    CurriculumSchedule,
    Phase,
    TripletMarginState,
    TripletStats,
    arcface_loss,
    next_phase,
    triplet_loss,
    update_margin,
)

F64 = np.float64


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def exhaustive_triplet_oracle(x, labels, m):
    """Enumerate every (anchor, positive, negative) and apply the mining rule by hand."""
    n = len(labels)

    def d2(i, j):
        return sum((x[i][k] - x[j][k]) ** 2 for k in range(len(x[i])))

    losses, chosen, semi_count = [], [], 0
    for a, p in itertools.permutations(range(n), 2):
        if labels[a] != labels[p]:
            continue
        dap = d2(a, p)
        negs = [(d2(a, q), q) for q in range(n) if labels[q] != labels[a]]
        semi = [(dn, q) for dn, q in negs if dap < dn < dap + m]
        dn, q = min(semi) if semi else min(negs)
        semi_count += bool(semi)
        chosen.append((a, p, q))
        losses.append(max(0.0, dap - dn + m))
    return sum(losses) / len(losses), chosen, semi_count


class TestTriplet:
    def test_identical_embeddings_cost_margin(self):
        x = np.tile([[1.0, 0.0, 0.0]], (6, 1))
        loss, stats = triplet_loss(Tensor(x, dtype=F64), [0, 0, 1, 1, 2, 2], TripletMarginState(margin=0.5))
        assert loss.item() == pytest.approx(0.5, abs=1e-12)
        assert stats.anchor_positive_pairs == 6 and stats.semi_hard_count == 0

    def test_inactive_hinge(self):
        x = np.array([[0.0, 0.0], [0.2, 0.0], [-1.5, 0.0]])
        loss, _ = triplet_loss(Tensor(x, dtype=F64), [0, 0, 1], TripletMarginState(margin=0.5))
        assert loss.item() == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = unit_rows(rng, 8, 5)
        labels = rng.permutation([0, 0, 1, 1, 2, 2, 3, 3])
        m = 0.5 + 0.05 * (seed % 5)
        loss, stats = triplet_loss(Tensor(x, dtype=F64), labels, TripletMarginState(margin=m))
        ref, _, semi = exhaustive_triplet_oracle(x.tolist(), labels.tolist(), m)
        assert loss.item() == pytest.approx(ref, abs=1e-12)
        assert stats.semi_hard_count == semi
        assert stats.anchor_positive_pairs == 8

    def test_zero_when_all_negatives_far(self):
        x = np.array([[1.0, 0.0], [0.99, 0.141], [-1.0, 0.0], [-0.99, -0.141]])
        loss, _ = triplet_loss(Tensor(x, dtype=F64), [0, 0, 1, 1], TripletMarginState(margin=0.5))
        assert loss.item() == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.05, 1.5))
    def test_non_negative(self, seed, m):
        rng = np.random.default_rng(seed)
        loss, _ = triplet_loss(Tensor(unit_rows(rng, 6, 4), dtype=F64), [0, 0, 1, 1, 2, 2], TripletMarginState(margin=m))
        assert loss.item() >= 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(unit_rows(rng, 8, 4), requires_grad=True, dtype=F64)
        labels = [0, 0, 1, 1, 2, 2, 3, 3]
        state = TripletMarginState(margin=1.0)
        assert check_gradients(lambda: triplet_loss(x, labels, state)[0], [x]) <= 1e-3

    def test_single_class_rejected(self):
        with pytest.raises(MiningError):
            triplet_loss(Tensor(np.eye(3)), [1, 1, 1], TripletMarginState())


class TestMarginSchedule:
    LOW = TripletStats(semi_hard_count=0, anchor_positive_pairs=24)
    HIGH = TripletStats(semi_hard_count=3, anchor_positive_pairs=24)

    def test_three_low_batches_increment(self):
        s = TripletMarginState()
        for _ in range(3):
            s = update_margin(s, self.LOW)
        assert s.margin == 0.55 and s.low_semi_hard_streak == 0

    def test_cap(self):
        s = TripletMarginState(margin=1.5)
        for _ in range(3):
            s = update_margin(s, self.LOW)
        assert s.margin == 1.5

    def test_streak_reset(self):
        s = TripletMarginState()
        s = update_margin(update_margin(s, self.LOW), self.LOW)
        assert s.low_semi_hard_streak == 2
        s = update_margin(s, self.HIGH)
        assert s.low_semi_hard_streak == 0 and s.margin == 0.5

    def test_threshold_boundary(self):
        # 10% of 20 pairs is 2: exactly 2 semi-hard is not "below"
        s = update_margin(TripletMarginState(low_semi_hard_streak=2), TripletStats(2, 20))
        assert s.margin == 0.5 and s.low_semi_hard_streak == 0
        s = update_margin(TripletMarginState(low_semi_hard_streak=2), TripletStats(1, 20))
        assert s.margin == 0.55

    def test_scripted_trajectory_reaches_cap(self):
        stream = [self.LOW] * 70 + [self.HIGH, self.LOW, self.LOW, self.HIGH]
        expected = []
        m, streak = 0.5, 0
        for i, stats in enumerate(stream):
            # hand rule written out: every third consecutive low batch bumps 0.05 until 1.5
            if stats is self.LOW:
                streak += 1
                if streak == 3:
                    m, streak = min(1.5, 0.5 + 0.05 * (len([e for e in expected if e[2]]) + 1)), 0
                    expected.append((m, streak, True))
                    continue
            else:
                streak = 0
            expected.append((m, streak, False))
        s = TripletMarginState()
        traj = []
        for stats in stream:
            s = update_margin(s, stats)
            traj.append((s.margin, s.low_semi_hard_streak))
        assert traj == [(pytest.approx(m, abs=1e-12), k) for m, k, _ in expected]
        assert max(t[0] for t in traj) == 1.5
        assert traj[59][0] == 1.5  # 20 bumps after 60 low batches
        assert traj[56][0] == pytest.approx(1.45)
        assert all(b[0] >= a[0] for a, b in zip(traj, traj[1:]))

    def test_replay_is_pure(self):
        rng = np.random.default_rng(0)
        stream = [TripletStats(int(k), 10) for k in rng.integers(0, 3, size=50)]

        def fold():
            s = TripletMarginState()
            out = []
            for st_ in stream:
                s = update_margin(s, st_)
                out.append(s)
            return out

        assert fold() == fold()


def arcface_scalar(x, w, labels, s, m):
    """Direct evaluation of the margin softmax with acos / cos(theta + m)."""
    total = 0.0
    for xi, yi in zip(x, labels):
        xn = [v / math.sqrt(sum(u * u for u in xi)) for v in xi]
        logits = []
        for j, wj in enumerate(w):
            wn = [v / math.sqrt(sum(u * u for u in wj)) for v in wj]
            cos = sum(a * b for a, b in zip(xn, wn))
            logits.append(s * (math.cos(math.acos(cos) + m) if j == yi else cos))
        total += -logits[yi] + math.log(sum(math.exp(z) for z in logits))
    return total / len(labels)


class TestArcFace:
    def _params(self, w, s=30.0, m=0.2):
        return ArcFaceParams(Tensor(w, requires_grad=True, dtype=F64), scale=s, margin=m)

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_margin_is_scaled_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        x, w = unit_rows(rng, 6, 8), rng.standard_normal((4, 8))
        labels = rng.integers(0, 4, 6)
        for s in (1.0, 30.0):
            loss = arcface_loss(Tensor(x, dtype=F64), labels, self._params(w, s=s, m=0.0)).item()
            wn = w / np.linalg.norm(w, axis=1, keepdims=True)
            ce = ad.softmax_cross_entropy(Tensor(s * (x @ wn.T), dtype=F64), labels).item()
            assert abs(loss - ce) <= 1e-6

    def test_single_class_is_zero(self):
        rng = np.random.default_rng(0)
        loss = arcface_loss(Tensor(unit_rows(rng, 3, 4), dtype=F64), [0, 0, 0], self._params(rng.standard_normal((1, 4))))
        assert loss.item() == 0.0

    def test_hand_fixed_instance(self):
        x = np.array([[1.0, 0.0], [0.6, 0.8]])
        w = np.array([[0.8, 0.6], [0.0, 1.0]])
        labels = [0, 1]
        loss = arcface_loss(Tensor(x, dtype=F64), labels, self._params(w, s=30.0, m=0.2)).item()
        assert loss == pytest.approx(arcface_scalar(x.tolist(), w.tolist(), labels, 30.0, 0.2), abs=1e-9)
        # by hand: both true cosines are 0.8, sample 1 also sees 0.96 on class 0
        t = 30.0 * (0.8 * math.cos(0.2) - 0.6 * math.sin(0.2))
        gap = 30.0 * 0.96 - t
        hand = (math.log1p(math.exp(-t)) + gap + math.log1p(math.exp(-gap))) / 2
        assert loss == pytest.approx(hand, abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar_formula(self, seed):
        rng = np.random.default_rng(seed)
        x, w = unit_rows(rng, 5, 6), rng.standard_normal((3, 6))
        labels = rng.integers(0, 3, 5)
        loss = arcface_loss(Tensor(x, dtype=F64), labels, self._params(w, s=16.0, m=0.3)).item()
        assert loss == pytest.approx(arcface_scalar(x.tolist(), w.tolist(), labels.tolist(), 16.0, 0.3), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 0.6), st.floats(0.0, 0.6))
    def test_monotone_in_margin(self, seed, m1, m2):
        lo, hi = sorted((m1, m2))
        rng = np.random.default_rng(seed)
        x, w = unit_rows(rng, 4, 5), rng.standard_normal((3, 5))
        labels = rng.integers(0, 3, 4)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        theta = np.arccos(np.clip(np.sum(x * wn[labels], axis=1), -1, 1))
        if not np.all((theta > 0) & (theta < np.pi - hi)):
            return
        a = arcface_loss(Tensor(x, dtype=F64), labels, self._params(w, m=lo)).item()
        b = arcface_loss(Tensor(x, dtype=F64), labels, self._params(w, m=hi)).item()
        assert b >= a - 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(unit_rows(rng, 6, 5), requires_grad=True, dtype=F64)
        params = self._params(rng.standard_normal((4, 5)), s=10.0, m=0.2)
        labels = rng.integers(0, 4, 6)
        assert check_gradients(lambda: arcface_loss(x, labels, params), [x, params.class_weights]) <= 1e-3

    def test_label_out_of_range(self):
        rng = np.random.default_rng(0)
        with pytest.raises(LabelError):
            arcface_loss(Tensor(unit_rows(rng, 2, 4)), [0, 3], self._params(rng.standard_normal((3, 4))))

    def test_parameter_ranges(self):
        with pytest.raises(ConfigError):
            ArcFaceParams(Tensor(np.ones((2, 2))), scale=0.0)
        with pytest.raises(ConfigError):
            ArcFaceParams(Tensor(np.ones((2, 2))), margin=math.pi / 2)


class TestCurriculum:
    def test_sequence(self):
        seq = CurriculumSchedule(phase_lengths=2, cycles=3).sequence()
        assert "".join(p.short for p in seq) == "TATATA"

    @pytest.mark.parametrize("epoch,phase", [(0, Phase.TRIPLET), (4, Phase.TRIPLET), (5, Phase.ARCFACE), (10, Phase.TRIPLET), (29, Phase.ARCFACE), (30, Phase.DONE)])
    def test_boundaries(self, epoch, phase):
        assert next_phase(CurriculumSchedule(phase_lengths=5), epoch) is phase

    def test_per_phase_lengths(self):
        sched = CurriculumSchedule(phase_lengths=[1, 2, 1, 2], cycles=2)
        assert [next_phase(sched, e).short for e in range(7)] == list("TAATAA-")

    def test_invalid(self):
        with pytest.raises(ConfigError):
            CurriculumSchedule(phase_lengths=[1, 2], cycles=3)
        with pytest.raises(ConfigError):
            next_phase(CurriculumSchedule(), -1)
