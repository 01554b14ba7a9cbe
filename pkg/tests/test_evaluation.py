import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crest import evaluation as ev
from crest.evaluation import SequenceLoadError, SynthSpec
from crest.tracker import BBox, TrackerConfig


def test_iou_fixtures():
    assert ev.iou((0, 0, 2, 2), (1, 0, 2, 2)) == 2.0 / 6.0
    assert ev.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert ev.iou((0, 0, 1, 1), (1, 0, 1, 1)) == 0.0
    assert ev.iou((0, 0, 4, 4), (1, 1, 2, 2)) == 0.25
    assert ev.iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == 1.0 / 7.0


def test_center_error():
    assert ev.center_error((0, 0, 2, 2), (3, 4, 2, 2)) == 5.0


def test_curve_fixtures():
    errs = np.array([0.0, 10.0, 20.0, 30.0])
    p = ev.precision_curve(errs)
    assert p[0] == 0.25 and p[20] == 0.75 and p[50] == 1.0
    s = ev.success_curve(np.array([0.0, 0.5, 1.0, 0.25]))
    assert s[0] == 1.0 and s[10] == 0.5 and s[20] == 0.25
    assert len(ev.SUCCESS_THRESHOLDS) == 21 and len(ev.PRECISION_THRESHOLDS) == 51


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_curves_are_monotone(errs, overlaps):
    p = ev.precision_curve(errs)
    s = ev.success_curve(overlaps)
    assert np.all(np.diff(p) >= 0) and np.all(np.diff(s) <= 0)
    assert 0 <= p.min() and p.max() <= 1 and 0 <= s.min() and s.max() <= 1


def test_evaluate_predictions_excludes_first_frame():
    gt = np.array([[0, 0, 10, 10]] * 3, dtype=float)
    pred = gt.copy()
    pred[0] = (200, 200, 10, 10)
    res = ev.evaluate_predictions("x", pred, gt)
    assert res.auc == 1.0 and res.precision_at_20 == 1.0 and res.mean_iou == 1.0
    pred[2, 0] = 5.0
    res = ev.evaluate_predictions("x", pred, gt)
    assert res.mean_iou == pytest.approx((1.0 + 50 / 150) / 2)
    assert res.precision_at(4.9) == 0.5
    with pytest.raises(ValueError):
        ev.evaluate_predictions("x", pred[:2], gt)


def test_parse_ground_truth():
    gt = ev.parse_ground_truth("1,2,3,4\n\n5\t6\t7\t8\n9 10 11 12\n")
    np.testing.assert_array_equal(gt, [[0, 1, 3, 4], [4, 5, 7, 8], [8, 9, 11, 12]])
    with pytest.raises(SequenceLoadError, match=":2:"):
        ev.parse_ground_truth("1,2,3,4\n1,2,x,4")
    with pytest.raises(SequenceLoadError, match="expected 4"):
        ev.parse_ground_truth("1,2,3")


def test_sequence_roundtrip_on_disk(tmp_path):
    seq = ev.synth_sequence(SynthSpec(length=4, motion=(1.3, 0.7), scale_drift=0.01, seed=2))
    root = ev.write_sequence(seq, tmp_path / "s")
    (root / "attributes.txt").write_text("IV SV\n")
    back = ev.load_sequence(root)
    assert len(back) == 4 and back.attributes == ["IV", "SV"]
    np.testing.assert_array_equal(back.ground_truth, seq.ground_truth)
    np.testing.assert_array_equal(back.frame(2), seq.frame(2))


def test_load_sequence_errors(tmp_path):
    with pytest.raises(SequenceLoadError, match="not found"):
        ev.load_sequence(tmp_path / "nope")
    seq = ev.synth_sequence(SynthSpec(length=3))
    root = ev.write_sequence(seq, tmp_path / "s")
    (root / "img" / "0002.png").unlink()
    with pytest.raises(SequenceLoadError, match="0002.png"):
        ev.load_sequence(root)
    (root / "groundtruth_rect.txt").unlink()
    with pytest.raises(SequenceLoadError, match="ground truth"):
        ev.load_sequence(root)


def test_sequence_validation():
    with pytest.raises(SequenceLoadError, match="frames but"):
        ev.Sequence("s", [np.zeros((4, 4))], np.zeros((2, 4)) + 1)
    with pytest.raises(SequenceLoadError, match="frame 1"):
        ev.Sequence("s", [np.zeros((4, 4))], [[0, 0, 0, 2]])


def test_synth_is_deterministic_and_exact():
    spec = SynthSpec(length=5, motion=(2.0, 1.0), scale_drift=0.02, clutter=2, noise=3, seed=9)
    a, b = ev.synth_sequence(spec), ev.synth_sequence(spec)
    for i in range(5):
        np.testing.assert_array_equal(a.frame(i), b.frame(i))
    np.testing.assert_allclose(a.ground_truth[4, 2], 15.0 * 1.02 ** 4)
    cx = a.ground_truth[:, 0] + a.ground_truth[:, 2] / 2
    np.testing.assert_allclose(np.diff(cx), 2.0)


def test_synth_spec_parse():
    spec = SynthSpec.parse("length=12; motion=2,1.5; scale_drift=0.01; seed=3; name=foo")
    assert (spec.length, spec.motion, spec.scale_drift, spec.seed, spec.name) == (12, (2.0, 1.5), 0.01, 3, "foo")
    with pytest.raises(ValueError):
        SynthSpec.parse("bogus=1")


class Oracle:
    """Tracker stand-in that returns ground truth."""

    def __init__(self, gt):
        self.gt = gt
        self.i = 0

    def init(self, frame, box):
        self.i = 0

    def track(self, frame):
        self.i += 1
        return BBox(*self.gt[self.i])


def test_run_ope_identity_tracker_scores_perfectly():
    seq = ev.synth_sequence(SynthSpec(length=6, motion=(2, 2)))
    res = ev.run_ope(None, seq, lambda: Oracle(seq.ground_truth))
    assert res.auc == 1.0 and res.precision_at_20 == 1.0


def test_run_ope_reports_frame_of_failure():
    seq = ev.synth_sequence(SynthSpec(length=4))

    class Broken(Oracle):
        def track(self, frame):
            self.i += 1
            if self.i == 2:
                raise ValueError("boom")
            return BBox(*self.gt[self.i])
    with pytest.raises(RuntimeError, match="frame 3: boom"):
        ev.run_ope(None, seq, lambda: Broken(seq.ground_truth))


def test_run_many_keeps_order():
    seqs = [ev.synth_sequence(SynthSpec(length=3, seed=s, name=f"s{s}")) for s in range(3)]
    cfg = TrackerConfig(init_max_iters=5, max_feature_side=31)
    res = ev.run_many(cfg, seqs, jobs=2)
    assert [r.name for r in res] == ["s0", "s1", "s2"]
    assert res[1].info["init_iterations"] == 5


def test_write_results(tmp_path):
    gt = np.array([[0, 0, 10, 10]] * 3, dtype=float)
    res = ev.evaluate_predictions("demo", gt, gt, {"events": []})
    paths = ev.write_results(res, tmp_path, {"seed": 1})
    data = json.loads(paths["json"].read_text())
    assert data["schema"] == 1 and data["auc"] == 1.0 and data["config"] == {"seed": 1}
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "curve,threshold,value" and len(lines) == 1 + 51 + 21
    assert paths["svg"].read_text().startswith("<svg")
