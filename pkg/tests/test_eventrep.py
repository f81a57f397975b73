import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emoe_tracker.config import DataConfig
from emoe_tracker.errors import DataError
from emoe_tracker.eventrep import (BoundingBox, FixtureDataset, FixtureExistsError, RawEvent,
                                   Sequence, _render_sequence, box_to_crop, crop, event_counts,
                                   generate_fixture, load_sample, read_attributes, stack_events)

RES = (8, 10)
WIN = (0, 100)


class TestStackEvents:
    def test_empty_stream_is_zero(self):
        f = stack_events([], (0, 1000), RES)
        assert f.grid.shape == (2, *RES)
        assert not f.grid.any()

    def test_single_event(self):
        f = stack_events([RawEvent(3, 5, 10, 1)], WIN, RES)
        assert f.grid[0, 5, 3] == 1.0
        assert f.grid.sum() == 1.0

    def test_two_at_one_pixel_one_elsewhere(self):
        ev = [RawEvent(1, 1, 1, 1), RawEvent(1, 1, 2, 1), RawEvent(4, 2, 3, 1)]
        g = stack_events(ev, WIN, RES).grid
        # hand count: pixel (1,1) has 2, pixel (2,4) has 1; max is 2
        assert g[0, 1, 1] == 1.0
        assert g[0, 2, 4] == 0.5
        assert set(np.unique(g)) == {0.0, 0.5, 1.0}

    def test_negative_polarity_channel(self):
        g = stack_events([RawEvent(0, 0, 0, -1)], WIN, RES).grid
        assert g[1, 0, 0] == 1.0 and g[0].sum() == 0

    def test_window_is_half_open(self):
        ev = [RawEvent(0, 0, 99, 1), RawEvent(1, 0, 100, 1), RawEvent(2, 0, 5, -1)]
        ev.sort(key=lambda e: e.t)
        c = event_counts(ev, WIN, RES)
        assert c[0, 0, 0] == 1 and c[0, 0, 1] == 0 and c[1, 0, 2] == 1

    def test_rejects_unsorted(self):
        with pytest.raises(DataError, match="sorted"):
            stack_events([RawEvent(0, 0, 5, 1), RawEvent(0, 0, 4, 1)], WIN, RES)

    def test_rejects_out_of_bounds(self):
        with pytest.raises(DataError, match="outside"):
            stack_events([RawEvent(10, 0, 5, 1)], WIN, RES)
        with pytest.raises(DataError, match="outside"):
            stack_events([RawEvent(0, 8, 5, 1)], WIN, RES)

    def test_rejects_bad_polarity(self):
        with pytest.raises(DataError, match="polarity"):
            stack_events([RawEvent(0, 0, 5, 0)], WIN, RES)

    def test_rejects_nonpositive_resolution(self):
        with pytest.raises(DataError):
            stack_events([], WIN, (0, 4))


events_strategy = st.lists(
    st.tuples(st.integers(0, RES[1] - 1), st.integers(0, RES[0] - 1),
              st.integers(0, 120), st.sampled_from([-1, 1])),
    max_size=60)


@settings(max_examples=60, deadline=None)
@given(events_strategy, st.data())
def test_counts_additive_over_disjoint_sets(events, data):
    events = sorted(events, key=lambda e: e[2])
    mask = data.draw(st.lists(st.booleans(), min_size=len(events), max_size=len(events)))
    a = [e for e, m in zip(events, mask) if m]
    b = [e for e, m in zip(events, mask) if not m]
    np.testing.assert_array_equal(event_counts(events, WIN, RES),
                                  event_counts(a, WIN, RES) + event_counts(b, WIN, RES))


@settings(max_examples=60, deadline=None)
@given(events_strategy)
def test_stacked_values_in_unit_interval(events):
    g = stack_events(sorted(events, key=lambda e: e[2]), WIN, RES).grid
    assert g.min() >= 0.0 and g.max() <= 1.0
    assert g.max() in (0.0, 1.0)


class TestBoundingBox:
    def test_rejects_degenerate(self):
        with pytest.raises(DataError):
            BoundingBox(0.5, 0.5, 0.0, 0.1)

    def test_clamped_inside_unit_square(self):
        b = BoundingBox(0.95, 0.05, 0.2, 0.2).clamped()
        x0, y0, x1, y1 = b.xyxy()
        assert x0 >= 0 and y0 >= 0 and x1 <= 1 + 1e-12 and y1 <= 1 + 1e-12
        assert b.w == pytest.approx(0.15) and b.h == pytest.approx(0.15)


class TestFixture:
    def test_deterministic_manifest(self, tmp_path):
        m1 = generate_fixture(7, 2, 6, tmp_path / "a")
        m2 = generate_fixture(7, 2, 6, tmp_path / "b")
        assert m1 == m2
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b
        for rel in ("seq_001/rgb/000004.png", "seq_000/events/000003.csv", "seq_001/groundtruth.txt"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_cardinality(self, toy_fixture):
        m = json.loads((toy_fixture / "manifest.json").read_text())
        assert len(m["sequences"]) == 8
        for entry in m["sequences"]:
            d = toy_fixture / entry["name"]
            assert len(list((d / "rgb").glob("*.png"))) == 32
            assert len(list((d / "events").glob("*.csv"))) == 32
            assert len((d / "groundtruth.txt").read_text().strip().splitlines()) == 32
            assert (d / "attributes.txt").read_text().strip().count(",") == 3

    def test_refuses_overwrite(self, tmp_path):
        generate_fixture(1, 1, 3, tmp_path)
        before = (tmp_path / "manifest.json").read_bytes()
        with pytest.raises(FixtureExistsError):
            generate_fixture(2, 1, 3, tmp_path)
        assert (tmp_path / "manifest.json").read_bytes() == before
        generate_fixture(2, 1, 3, tmp_path, force=True)
        assert (tmp_path / "manifest.json").read_bytes() != before

    def test_records_match_labels(self, toy_fixture):
        m = json.loads((toy_fixture / "manifest.json").read_text())
        names = m["attribute_names"]
        for entry in m["sequences"]:
            active = {n for n, bit in zip(names, entry["attributes"]) if bit}
            assert set(entry["degradations"]) == active

    def test_motion_blur_label_blurs(self):
        label_blur = np.array([0, 1, 0, 0])
        frames_b, boxes_b, rec_b = _render_sequence(np.random.default_rng(5), 6, label_blur)
        frames_s, _, rec_s = _render_sequence(np.random.default_rng(5), 6, np.zeros(4, int))
        assert "motion_blur" in rec_b and "motion_blur" not in rec_s
        assert min(rec_b["motion_blur"]["length_per_frame"]) >= 5
        # blur lowers the horizontal+vertical gradient energy of the frame
        def energy(f):
            return np.abs(np.diff(f, axis=0)).sum() + np.abs(np.diff(f, axis=1)).sum()
        assert energy(frames_b[3]) < energy(frames_s[3])

    def test_scale_occlusion_illumination_degradations(self):
        rng = np.random.default_rng(11)
        frames, boxes, rec = _render_sequence(rng, 20, np.array([1, 0, 1, 1]))
        sides = np.sqrt(boxes[:, 2] * boxes[:, 3])
        assert max(sides[-1] / sides[0], sides[0] / sides[-1]) >= 1.5 - 1e-9
        assert np.all(np.diff(sides) > 0) or np.all(np.diff(sides) < 0)
        occ = rec["occlusion"]
        assert len(occ["frames"]) >= 0.25 * 20
        assert min(occ["coverage"]) >= 0.4
        g = rec["illumination_variation"]
        assert abs(g["gain_end"] - g["gain_start"]) >= 0.5 - 1e-9

    def test_attributes_file_rules(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("1,0,1,1\n")
        np.testing.assert_array_equal(read_attributes(p, 4), [1, 0, 1, 1])
        np.testing.assert_array_equal(read_attributes(p, 2), [1, 0])
        p.write_text("1,0\n")
        with pytest.raises(DataError):
            read_attributes(p, 4)
        p.write_text("1,2,0,0\n")
        with pytest.raises(DataError):
            read_attributes(p, 4)

    def test_missing_modality_files(self, tmp_path):
        generate_fixture(0, 1, 3, tmp_path)
        (tmp_path / "seq_000" / "events" / "000001.csv").unlink()
        with pytest.raises(DataError, match="missing event file"):
            FixtureDataset(tmp_path)


class TestLoadSample:
    def test_self_centering(self, small_fixture):
        seq = Sequence(small_fixture, "seq_000")
        s = load_sample(seq, 3, 3)
        assert s.gt_box.cx == pytest.approx(0.5, abs=1e-9)
        assert s.gt_box.cy == pytest.approx(0.5, abs=1e-9)
        # search side is 4x the box side
        assert np.sqrt(s.gt_box.w * s.gt_box.h) == pytest.approx(0.25, abs=1e-9)
        assert s.rgb_template.shape == (64, 64, 3)
        assert s.rgb_search.shape == (128, 128, 3)
        assert s.event_template.shape == (64, 64, 2)
        assert s.event_search.shape == (128, 128, 2)
        assert s.rgb_search.min() >= 0 and s.rgb_search.max() <= 1

    def test_out_of_range(self, small_fixture):
        seq = Sequence(small_fixture, "seq_000")
        with pytest.raises(DataError):
            load_sample(seq, 8, 0)
        with pytest.raises(DataError):
            load_sample(seq, 0, -1)

    def test_border_crop_is_padded_and_box_inside(self):
        img = np.ones((20, 20, 3), dtype=np.float32)
        out = crop(img, (1.0, 1.0), 16.0, 16)
        assert out[0, 0, 0] == 0.0 and out[-1, -1, 0] == 1.0
        b = box_to_crop(np.array([1.0, 1.0, 6.0, 6.0]), (1.0, 1.0), 16.0)
        x0, y0, x1, y1 = b.xyxy()
        assert 0 <= x0 and x1 <= 1 and 0 <= y0 and y1 <= 1

    def test_jitter_reproducible_and_matches_geometry(self, small_fixture):
        seq = Sequence(small_fixture, "seq_001")
        cfg = DataConfig()
        a = load_sample(seq, 5, 0, cfg, np.random.default_rng(42))
        b = load_sample(seq, 5, 0, cfg, np.random.default_rng(42))
        assert a.gt_box == b.gt_box
        # recompute the crop geometry by hand from the same draws
        rng = np.random.default_rng(42)
        cx, cy, w, h = seq.gt[5] * [seq.width, seq.height, seq.width, seq.height]
        side0 = np.sqrt(w * h)
        jx, jy = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
        scale = np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
        ccx, ccy = cx + jx * side0, cy + jy * side0
        side = side0 * cfg.search_factor * scale
        expect = [(cx - ccx) / side + 0.5, (cy - ccy) / side + 0.5, w / side, h / side]
        np.testing.assert_allclose(a.gt_box.as_array(), expect, atol=1e-12)

    def test_every_sample_box_inside_search(self, small_fixture):
        ds = FixtureDataset(small_fixture)
        rng = np.random.default_rng(0)
        for seq in ds:
            for k in range(len(seq)):
                s = load_sample(seq, k, 0, DataConfig(), rng)
                x0, y0, x1, y1 = s.gt_box.xyxy()
                assert 0 <= x0 < x1 <= 1 + 1e-12 and 0 <= y0 < y1 <= 1 + 1e-12

    def test_loader_attribute_length(self, small_fixture):
        ds = FixtureDataset(small_fixture, num_attributes=2)
        assert all(len(s.attr) == 2 for s in ds)
