import numpy as np
import pytest

from dynafield.metrics import (
    MetricReport,
    QueryMetrics,
    accuracy,
    frame_iou,
    miou,
    pixel_accuracy,
    viou,
)


def full(h, w):
    return np.ones((h, w), dtype=bool)


def empty(h, w):
    return np.zeros((h, w), dtype=bool)


class TestFrameIou:
    def test_identical_nonempty(self):
        m = full(4, 4)
        assert frame_iou(m, m) == 1.0

    def test_disjoint_nonempty(self):
        a = empty(2, 2)
        a[0, 0] = True
        b = empty(2, 2)
        b[1, 1] = True
        assert frame_iou(a, b) == 0.0

    def test_half_overlap(self):
        # pred = left column of a 2x2 grid, gt = full grid -> 2/4
        pred = empty(2, 2)
        pred[:, 0] = True
        gt = full(2, 2)
        assert frame_iou(pred, gt) == 0.5

    def test_both_empty_is_one(self):
        assert frame_iou(empty(3, 3), empty(3, 3)) == 1.0

    def test_shape_mismatch_faults(self):
        with pytest.raises(ValueError):
            frame_iou(empty(2, 2), empty(3, 3))


class TestViou:
    def test_perfect(self):
        masks = {0: full(2, 2), 1: full(2, 2)}
        assert viou(masks, {0, 1}, masks, {0, 1}) == 1.0

    def test_hand_case(self):
        # pred frames {1,2}, gt {2,3}, IoU at 2 = 0.5 -> 0.5/3
        pred_mask = empty(2, 2)
        pred_mask[:, 0] = True
        gt_mask = full(2, 2)
        pred = {1: full(2, 2), 2: pred_mask}
        gt = {2: gt_mask, 3: full(2, 2)}
        assert viou(pred, {1, 2}, gt, {2, 3}) == pytest.approx(0.5 / 3)

    def test_disjoint_frames_zero(self):
        pred = {0: full(2, 2)}
        gt = {1: full(2, 2)}
        assert viou(pred, {0}, gt, {1}) == 0.0

    def test_no_frames_faults(self):
        with pytest.raises(ValueError):
            viou({}, set(), {}, set())


class TestAccuracy:
    def test_perfect_eight_frames(self):
        assert accuracy({4, 5, 6, 7}, {4, 5, 6, 7}, 8) == 1.0

    def test_complement(self):
        assert accuracy({0, 1}, {2, 3}, 4) == 0.0

    def test_three_of_four(self):
        assert accuracy({0, 1}, {0, 2}, 4) == pytest.approx(0.5)
        assert accuracy({0, 1, 2}, {0, 1, 3}, 4) == pytest.approx(0.5)
        assert accuracy({0}, {0, 1}, 4) == pytest.approx(0.75)

    def test_relabeling_invariance(self):
        assert accuracy({0, 1}, {1}, 4) == accuracy({2, 3}, {3}, 4)

    def test_bad_n_all(self):
        with pytest.raises(ValueError):
            accuracy(set(), set(), 0)


class TestPixelMetrics:
    def test_pixel_accuracy(self):
        pred = empty(2, 2)
        pred[0, 0] = True
        gt = empty(2, 2)
        assert pixel_accuracy(pred, gt) == 0.75

    def test_miou_is_plain_mean(self):
        assert miou([1.0, 0.0, 0.5]) == pytest.approx(0.5)

    def test_miou_empty_faults(self):
        with pytest.raises(ValueError):
            miou([])


class TestReport:
    def test_mean_skips_none(self):
        report = MetricReport(
            per_query=[
                QueryMetrics(text="a", mode="timeSensitive", acc=1.0),
                QueryMetrics(text="b", mode="timeAgnostic", miou=0.5),
            ]
        )
        assert report.mean("acc") == 1.0
        assert report.mean("miou") == 0.5
        assert report.mean("viou") is None

    def test_rows_end_with_mean(self):
        report = MetricReport(per_query=[QueryMetrics(text="a", mode="timeSensitive", acc=0.5)])
        rows = report.rows()
        assert rows[-1]["query"] == "(mean)"
        assert rows[-1]["acc"] == 0.5
