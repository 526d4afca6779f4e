from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ovsw import fliptrack as F
from ovsw.network import build_model, toy_conv_net
from ovsw.optim import Optimizer, OvswConfig
from ovsw.tensor import ShapeError, make_rng


def scripted_stats() -> F.FlipStats:
    """Hand simulation: 4 weights, two epochs.

    signs        step1        step2        | step3
    [+,-,+,-] -> [+,+,+,-] -> [+,+,-,-]    | [+,-,-,-]
    epoch 1 flips {1, 2} -> rate 0.5, never flipped {0, 3}
    epoch 2 flips {1}    -> rate 0.25, never flipped still {0, 3}
    """
    st = F.FlipStats(np.array([[0.5, -0.25], [1.0, -1.0]], np.float32))
    seq = [[1, -1, 1, -1], [1, 1, 1, -1], [1, 1, -1, -1]]
    for prev, cur in zip(seq, seq[1:]):
        F.record_step(st, np.array(prev, float).reshape(2, 2), np.array(cur, float).reshape(2, 2))
    F.end_epoch(st)
    F.record_step(st, np.array(seq[-1], float).reshape(2, 2), np.array([1, -1, -1, -1], float).reshape(2, 2))
    F.end_epoch(st)
    return st


class TestRecord:
    def test_no_change(self):
        st = F.FlipStats(np.ones((3, 2)))
        s = np.ones((3, 2))
        F.record_step(st, s, s)
        assert_array_equal(st.cumulative_flips, 0)

    def test_all_flip(self):
        st = F.FlipStats(np.ones((3, 2)))
        F.record_step(st, np.ones((3, 2)), -np.ones((3, 2)))
        assert_array_equal(st.cumulative_flips, 1)

    def test_scripted(self):
        st = scripted_stats()
        assert_array_equal(st.cumulative_flips.ravel(), [0, 2, 1, 0])
        assert_array_equal(st.never_flipped.ravel(), [True, False, False, True])
        assert st.epoch_flip_rate == [0.5, 0.25]
        assert st.epoch_never_flipped == [0.5, 0.5]

    def test_shape_mismatch(self):
        st = F.FlipStats(np.ones(4))
        with pytest.raises(ShapeError):
            F.record_step(st, np.ones(3), np.ones(3))


class TestRatio:
    def test_fresh(self):
        assert F.never_flipped_ratio(F.FlipStats(np.ones(10))) == 1.0

    def test_all_flipped(self):
        st = F.FlipStats(np.ones(10))
        F.record_step(st, np.ones(10), -np.ones(10))
        assert F.never_flipped_ratio(st) == 0.0

    def test_three_of_ten(self):
        st = F.FlipStats(np.ones(10))
        cur = np.ones(10)
        cur[[1, 4, 7]] = -1
        F.record_step(st, np.ones(10), cur)
        assert F.never_flipped_ratio(st) == pytest.approx(0.7)


class TestExport:
    def test_golden(self, tmp_path):
        F.export_csv({"l": scripted_stats()}, tmp_path)
        assert (tmp_path / "layers.csv").read_text() == "layer,param_count,never_flipped_ratio\nl,4,0.5\n"
        assert (tmp_path / "l.epochs.csv").read_text() == \
            "epoch,flip_rate,never_flipped_ratio\n1,0.5,0.5\n2,0.25,0.5\n"
        # init weights span [-1, 1]; 64 bins of width 1/32, edges exact in binary
        counts_all = {0: 1, 24: 1, 48: 1, 63: 1}
        counts_never = {0: 1, 48: 1}
        lines = ["bin_left,bin_right,count_all,count_never_flipped"]
        for i in range(64):
            lines.append(f"{-1 + i / 32!r},{-1 + (i + 1) / 32!r},{counts_all.get(i, 0)},{counts_never.get(i, 0)}")
        assert (tmp_path / "l.hist.csv").read_text() == "\n".join(lines) + "\n"

    def test_empty(self, tmp_path):
        written = F.export_csv({}, tmp_path)
        assert written == [tmp_path / "layers.csv"]
        assert (tmp_path / "layers.csv").read_text() == "layer,param_count,never_flipped_ratio\n"

    def test_bins_partition_range(self):
        st = F.FlipStats(make_rng(0).standard_normal((8, 4, 3, 3)))
        edges, count_all, count_never = F.histogram(st)
        assert len(edges) == F.HIST_BINS + 1
        assert edges[0] == st.init_weights_snapshot.min() and edges[-1] == st.init_weights_snapshot.max()
        assert np.all(np.diff(edges) > 0)
        assert count_all.sum() == st.size
        assert count_never.sum() == st.size  # nothing has flipped yet


class TestTracker:
    def test_training_run(self):
        rng = make_rng(1)
        model = build_model(toy_conv_net(), rng)
        names = model.binarized_weight_names()
        tracker = F.FlipTracker(model, names)
        opt = Optimizer.for_model(model, OvswConfig(base_lr=0.5, total_steps=8))
        ratios = []
        for epoch in range(4):
            for _ in range(2):
                x = rng.standard_normal((8, 1, 28, 28)).astype(np.float32)
                _, _, grads = model.loss_and_grads(x, rng.integers(0, 10, 8))
                tracker.before_step()
                opt.step(grads)
                tracker.after_step()
            rates = tracker.end_epoch()
            assert all(0 <= r <= 1 for r in rates.values())
            ratios.append(F.never_flipped_ratio(tracker.stats[names[-1]]))
        assert all(a >= b for a, b in zip(ratios, ratios[1:]))
        # tracker counts agree with the optimizer's own sign snapshot
        st = tracker.stats[names[0]]
        init_sign = np.where(st.init_weights_snapshot >= 0, 1, -1)
        changed = init_sign != opt.slot(names[0]).prev_sign
        assert not np.any(changed & st.never_flipped)
        summary = tracker.summary()
        assert set(summary) == set(names) and len(summary[names[0]]["epoch_flip_rate"]) == 4
