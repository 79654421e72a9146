import math

import numpy as np
import pytest

from core.errors import UndecodableInstanceError
from core.geometry import Box, Detection, Pose, box_iou, box_iou_matrix, keypoint_nms, min_enclosing_rect, oks


def _pose(points):
    return Pose(np.array(points, dtype=np.float64))


def _random_detection(rng, k=5):
    center = rng.uniform(20, 200, size=2)
    xy = center + rng.normal(0, rng.uniform(5, 40), size=(k, 2))
    kps = np.column_stack([xy, np.full(k, 2.0)])
    return Detection.from_pose(float(rng.uniform()), Pose(kps))


def _reference_nms(dets, threshold):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(box_iou(dets[i].rect, dets[j].rect) < threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


class TestMinEnclosingRect:

    def test_coordinate_min_max(self):
        box = min_enclosing_rect(_pose([(1, 2, 2), (3, 1, 2), (2, 5, 2)]))
        assert box.as_tuple() == (1, 1, 3, 5)

    def test_single_point_is_degenerate(self):
        assert min_enclosing_rect(_pose([(4, 4, 2)])).as_tuple() == (4, 4, 4, 4)

    def test_unlabeled_points_ignored(self):
        assert min_enclosing_rect(_pose([(0, 0, 2), (10, 10, 0)])).as_tuple() == (0, 0, 0, 0)

    def test_invisible_but_labeled_counts(self):
        assert min_enclosing_rect(_pose([(0, 0, 2), (6, 8, 1)])).as_tuple() == (0, 0, 6, 8)

    def test_all_unlabeled_raises(self):
        with pytest.raises(UndecodableInstanceError):
            min_enclosing_rect(_pose([(1, 1, 0), (2, 2, 0)]))

    def test_tight(self, rng):
        for _ in range(20):
            pts = np.column_stack([rng.uniform(0, 100, size=(6, 2)), rng.integers(0, 3, size=6)])
            pts[0, 2] = 2
            pose = Pose(pts)
            box = min_enclosing_rect(pose)
            xy = pose.xy[pose.labeled]
            assert np.all(xy[:, 0] >= box.x_min) and np.all(xy[:, 0] <= box.x_max)
            assert np.all(xy[:, 1] >= box.y_min) and np.all(xy[:, 1] <= box.y_max)
            assert xy[:, 0].min() == box.x_min and xy[:, 1].max() == box.y_max


class TestBoxIou:

    def test_identity(self):
        assert box_iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_half_overlap(self):
        assert box_iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_disjoint(self):
        assert box_iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_degenerate_boxes(self):
        assert box_iou(Box(4, 4, 4, 4), Box(4, 4, 4, 4)) == 0.0

    def test_symmetric_and_matrix_agrees(self, rng):
        boxes = []
        for _ in range(12):
            x, y = rng.uniform(0, 50, size=2)
            w, h = rng.uniform(0, 30, size=2)
            boxes.append(Box(x, y, x + w, y + h))
        matrix = box_iou_matrix([b.as_tuple() for b in boxes], [b.as_tuple() for b in boxes])
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                assert box_iou(a, b) == pytest.approx(box_iou(b, a))
                assert matrix[i, j] == pytest.approx(box_iou(a, b))
                assert 0.0 <= matrix[i, j] <= 1.0

    def test_invalid_box_rejected(self):
        with pytest.raises(ValueError):
            Box(5, 0, 1, 1)


class TestOks:

    def test_identity(self):
        gt = _pose([(10, 10, 2), (20, 30, 1), (0, 0, 0)])
        assert oks(gt, gt, 100.0, [0.1, 0.1, 0.1]) == 1.0

    def test_analytic_single_joint(self):
        area, kappa = 400.0, 0.2
        d = math.sqrt(2 * area * kappa ** 2)
        gt = _pose([(50, 50, 2)])
        pred = _pose([(50 + d, 50, 2)])
        assert oks(pred, gt, area, [kappa]) == pytest.approx(math.exp(-1), abs=1e-12)

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            k = 17
            gt_pts = np.column_stack([rng.uniform(0, 200, size=(k, 2)), rng.integers(0, 3, size=k)])
            gt_pts[0, 2] = 2
            pred_pts = gt_pts.copy()
            pred_pts[:, :2] += rng.normal(0, 10, size=(k, 2))
            area = float(rng.uniform(100, 10000))
            kappas = rng.uniform(0.02, 0.2, size=k)

            num, den = 0.0, 0
            for j in range(k):
                if gt_pts[j, 2] > 0:
                    d2 = (pred_pts[j, 0] - gt_pts[j, 0]) ** 2 + (pred_pts[j, 1] - gt_pts[j, 1]) ** 2
                    num += math.exp(-d2 / (2 * area * kappas[j] ** 2))
                    den += 1
            assert oks(Pose(pred_pts), Pose(gt_pts), area, kappas) == pytest.approx(num / den, abs=1e-9)

    def test_invariant_to_unlabeled_joints(self):
        gt = _pose([(10, 10, 2), (30, 30, 2)])
        pred = _pose([(12, 10, 2), (30, 35, 2)])
        gt_extra = _pose([(10, 10, 2), (30, 30, 2), (99, 99, 0)])
        pred_extra = _pose([(12, 10, 2), (30, 35, 2), (0, 0, 2)])
        assert oks(pred, gt, 500, [0.1, 0.1]) == pytest.approx(oks(pred_extra, gt_extra, 500, [0.1, 0.1, 0.1]))

    def test_monotone_in_distance(self):
        gt = _pose([(0, 0, 2)])
        values = [oks(_pose([(d, 0, 2)]), gt, 100, [0.1]) for d in range(0, 20)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_unlabeled_ground_truth_raises(self):
        with pytest.raises(UndecodableInstanceError):
            oks(_pose([(0, 0, 2)]), _pose([(0, 0, 0)]), 100, [0.1])


class TestKeypointNms:

    def test_identical_poses(self):
        pose = _pose([(10, 10, 2), (40, 60, 2)])
        dets = [Detection.from_pose(0.8, pose), Detection.from_pose(0.9, pose)]
        out = keypoint_nms(dets, 0.6)
        assert len(out) == 1 and out[0].score == 0.9

    def test_disjoint_survive(self):
        a = Detection.from_pose(0.9, _pose([(0, 0, 2), (10, 10, 2)]))
        b = Detection.from_pose(0.8, _pose([(50, 50, 2), (60, 60, 2)]))
        assert keypoint_nms([b, a], 0.6) == [a, b]

    def test_equal_scores_keep_lower_index(self):
        pose = _pose([(0, 0, 2), (10, 10, 2)])
        first, second = Detection.from_pose(0.5, pose), Detection.from_pose(0.5, pose)
        assert keypoint_nms([first, second], 0.6)[0] is first

    def test_empty(self):
        assert keypoint_nms([], 0.6) == []

    def test_matches_reference_and_properties(self, rng):
        for _ in range(100):
            dets = [_random_detection(rng) for _ in range(int(rng.integers(0, 15)))]
            out = keypoint_nms(dets, 0.6)
            assert [id(d) for d in out] == [id(d) for d in _reference_nms(dets, 0.6)]
            scores = [d.score for d in out]
            assert scores == sorted(scores, reverse=True)
            for i in range(len(out)):
                for j in range(i + 1, len(out)):
                    assert box_iou(out[i].rect, out[j].rect) < 0.6
            assert [id(d) for d in keypoint_nms(out, 0.6)] == [id(d) for d in out]


class TestPoseValues:

    def test_flat_round_trip(self):
        flat = [1.0, 2.0, 2.0, 3.5, 4.0, 1.0, 0.0, 0.0, 0.0]
        pose = Pose.from_flat(flat)
        assert pose.to_flat() == flat
        assert pose.num_labeled == 2

    def test_immutable(self):
        pose = _pose([(1, 2, 2)])
        with pytest.raises(ValueError):
            pose.keypoints[0, 0] = 5

    def test_detection_score_range(self):
        with pytest.raises(ValueError):
            Detection.from_pose(1.5, _pose([(1, 2, 2)]))
