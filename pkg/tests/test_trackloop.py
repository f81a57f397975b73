from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emoe_tracker.config import RunConfig
from emoe_tracker.errors import DataError
from emoe_tracker.eventrep import FixtureDataset, Sequence
from emoe_tracker.model import EMoETracker
from emoe_tracker.trackloop import (IOU_THRESHOLDS, TrackResult, box_iou_px, clip_box_px, evaluate,
                                    sequence_metrics, success_rate, track_sequence, train)


def oracle_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def oracle_sr(pred, gt):
    ious = [oracle_iou(p, g) for p, g in zip(pred, gt)]
    rates = []
    for k in range(21):
        t = k / 20
        rates.append(sum(1 for v in ious if v > 0 and v >= t) / len(ious))
    return sum(rates) / len(rates)


def random_boxes(rng, n):
    c = rng.uniform(10, 110, size=(n, 2))
    s = rng.uniform(4, 40, size=(n, 2))
    return np.hstack([c, s])


def test_thresholds():
    assert len(IOU_THRESHOLDS) == 21 and IOU_THRESHOLDS[0] == 0 and IOU_THRESHOLDS[-1] == 1


def test_perfect_and_failure_cases():
    rng = np.random.default_rng(0)
    gt = random_boxes(rng, 12)
    rep = evaluate([gt.copy()], [gt])
    assert (rep.sr, rep.pr, rep.npr) == (1.0, 1.0, 1.0)
    far = gt.copy()
    far[:, :2] += 500
    rep = evaluate([far], [gt])
    assert (rep.sr, rep.pr, rep.npr) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_sr_matches_threshold_sweep_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = random_boxes(rng, 30)
    pred = gt + rng.normal(0, 6, size=gt.shape)
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1
    assert success_rate(box_iou_px(pred, gt)) == pytest.approx(oracle_sr(pred, gt), abs=1e-12)


def test_precision_thresholds_hand_case():
    gt = np.array([[50.0, 50, 10, 10]] * 4)
    pred = gt.copy()
    pred[:, 0] += [0.0, 1.5, 19.9, 25.0]
    _, pr, npr = sequence_metrics(pred, gt)
    assert pr == 0.75
    assert npr == 0.5  # offsets of 0 and 1.5 px are within 0.2 * 10 px


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_metrics_invariant_to_sequence_order(n, seed):
    rng = np.random.default_rng(seed)
    gts = [random_boxes(rng, 5) for _ in range(n)]
    preds = [g + rng.normal(0, 5, size=g.shape) for g in gts]
    for p in preds:
        p[:, 2:] = np.abs(p[:, 2:]) + 1
    perm = rng.permutation(n)
    a = evaluate(preds, gts)
    b = evaluate([preds[i] for i in perm], [gts[i] for i in perm])
    assert a.sr == pytest.approx(b.sr, abs=1e-12) and a.pr == pytest.approx(b.pr, abs=1e-12)


def test_growing_offset_never_improves():
    gt = np.array([[60.0, 60, 20, 20]] * 3)
    prev = None
    for off in np.linspace(0, 30, 13):
        pred = gt.copy()
        pred[:, 0] += off
        sr, pr, npr = sequence_metrics(pred, gt)
        if prev is not None:
            assert sr <= prev[0] and pr <= prev[1] and npr <= prev[2]
        prev = (sr, pr, npr)


def test_per_attribute_subsets():
    gt = np.array([[50.0, 50, 10, 10]] * 2)
    miss = gt + [100, 0, 0, 0]
    rep = evaluate([gt, miss], [gt, gt], [[1, 0, 0, 0], [1, 1, 0, 0]])
    d = rep.to_dict()
    assert d["attr/illumination_variation/SR"] == pytest.approx(0.5)
    assert d["attr/motion_blur/SR"] == 0.0 and d["attr/motion_blur/num_sequences"] == 1
    assert np.isnan(d["attr/occlusion/SR"]) and d["attr/occlusion/num_sequences"] == 0
    assert {"SR", "PR", "NPR"} <= set(d)


def test_evaluate_errors():
    with pytest.raises(DataError):
        evaluate([], [])
    with pytest.raises(DataError):
        evaluate([np.zeros((3, 4))], [np.ones((4, 4))])


def test_results_file_round_trip(tmp_path):
    boxes = np.array([[10.0, 20.0, 5.0, 6.0], [11.25, 21.5, 5.5, 6.25]])
    r = TrackResult("seq_x", boxes, np.array([1.0, 0.375]))
    path = r.write(tmp_path / "seq_x.txt")
    assert path.read_text().splitlines()[1] == "1,11.2500,21.5000,5.5000,6.2500,0.375000"
    back = TrackResult.read(path)
    np.testing.assert_allclose(back.boxes, boxes)
    np.testing.assert_allclose(back.scores, r.scores)


def test_clip_box_inside_image():
    b = clip_box_px(np.array([125.0, -3.0, 20.0, 10.0]), 128, 128)
    x0, y0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    assert x0 >= 0 and y0 >= 0 and x0 + b[2] <= 128 and y0 + b[3] <= 128
    assert b[2] >= 1 and b[3] >= 1


class StubTracker(torch.nn.Module):
    """Always answers with a fixed box in search-crop coordinates."""

    def __init__(self, cfg, box):
        super().__init__()
        self.cfg = cfg
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.box = torch.tensor([box], dtype=torch.float32)

    def forward(self, *args, **kw):
        head = SimpleNamespace(box=self.box, score_map=torch.full((1, 2, 2), 0.5))
        return SimpleNamespace(head=head)


def static_sequence(n=6, box=(64.0, 64.0, 16.0, 16.0)):
    seq = object.__new__(Sequence)
    seq.name, seq.height, seq.width = "static", 128, 128
    seq.rgb = np.zeros((n, 128, 128, 3), np.float32)
    seq.events = np.zeros((n, 128, 128, 2), np.float32)
    b = np.array(box) / 128.0
    seq.gt = np.tile(b, (n, 1))
    seq.attr = np.zeros(4)
    return seq


def test_frame_zero_is_ground_truth(small_fixture):
    cfg = RunConfig()
    seq = Sequence(small_fixture, "seq_000")
    r = track_sequence(StubTracker(cfg, [0.3, 0.3, 0.1, 0.1]), seq, cfg)
    np.testing.assert_allclose(r.boxes[0], seq.box_px(0))
    assert len(r.boxes) == len(seq)


def test_static_target_perfect_model_is_constant():
    cfg = RunConfig()
    side = 1.0 / cfg.data.search_factor
    r = track_sequence(StubTracker(cfg, [0.5, 0.5, side, side]), static_sequence(), cfg)
    np.testing.assert_allclose(r.boxes, np.tile([64.0, 64.0, 16.0, 16.0], (6, 1)), atol=1e-4)


def test_predictions_stay_inside_image():
    cfg = RunConfig()
    seq = static_sequence(box=(8.0, 120.0, 12.0, 12.0))
    r = track_sequence(StubTracker(cfg, [0.0, 1.0, 0.9, 0.9]), seq, cfg)
    x0 = r.boxes[:, 0] - r.boxes[:, 2] / 2
    y1 = r.boxes[:, 1] + r.boxes[:, 3] / 2
    assert (x0 >= 0).all() and (y1 <= 128).all()


def test_short_sequence_rejected():
    with pytest.raises(DataError):
        track_sequence(StubTracker(RunConfig(), [0.5] * 4), static_sequence(n=1), RunConfig())


def small_train_config(**over):
    base = {"data.template_size": 16, "data.search_size": 32, "model.dim": 16, "model.depth": 2,
            "model.heads": 2, "model.patch": 8, "model.head_channels": 8, "train.batch_size": 2,
            "train.steps": 3, "train.steps_per_epoch": 3, "train.validate": False, "optim.lr": 1e-3}
    base.update(over)
    return RunConfig().override(base)


def test_one_step_freeze_contract(small_fixture):
    cfg = small_train_config(**{"train.steps": 1})
    before = EMoETracker(cfg).checksums()
    after = train(cfg, FixtureDataset(small_fixture)).model.checksums()
    for name in ("patch_embed", "encoder", "head"):
        assert after[name] == before[name]
    for name in ("emoe", "crm"):
        assert after[name] != before[name]


def test_training_is_deterministic(small_fixture):
    cfg = small_train_config(**{"train.seed": 3})
    ds = FixtureDataset(small_fixture)
    a = [h["loss/total"] for h in train(cfg, ds).history]
    b = [h["loss/total"] for h in train(cfg, ds).history]
    assert a == b


def test_training_writes_outputs(small_fixture, tmp_path):
    cfg = small_train_config(**{"train.validate": True})
    res = train(cfg, FixtureDataset(small_fixture), out_dir=tmp_path)
    assert (tmp_path / "model.npz").is_file()
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0].startswith("step,") and len(lines) == 1 + cfg.train.steps
    assert 0.0 <= res.best_sr <= 1.0
