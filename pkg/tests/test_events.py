"""Event log, temporal split, look-back window, and interaction matrix tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marketrec.events import (
    EVENT_HEADER,
    Event,
    EventKind,
    EventLog,
    build_interaction_matrix,
    load_events,
    lookback_filter,
    save_events,
    temporal_split,
)


def make_log(rows):
    return EventLog([Event(u, i, t, EventKind(k)) for (u, i, t, k) in rows])


class TestEvent:
    def test_rejects_negative_timestamp(self):
        with pytest.raises(ValueError, match="timestamp"):
            Event("u1", "i1", -5, EventKind.CLICK)

    def test_rejects_empty_ids(self):
        with pytest.raises(ValueError):
            Event("", "i1", 0, EventKind.CLICK)
        with pytest.raises(ValueError):
            Event("u1", "", 0, EventKind.CLICK)

    def test_coerces_kind_string(self):
        e = Event("u1", "i1", 0, "conversion")
        assert e.kind is EventKind.CONVERSION


class TestEventLogIO:
    def test_round_trip_preserves_events(self, tmp_path):
        log = make_log(
            [
                ("u1", "i1", 100, "click"),
                ("u2", "i2", 50, "conversion"),
                ("u1", "i2", 75, "click"),
            ]
        )
        path = str(tmp_path / "events.tsv")
        save_events(path, log)
        loaded = load_events(path)
        assert loaded == log

    def test_out_of_order_rows_are_sorted(self, tmp_path):
        path = tmp_path / "events.tsv"
        path.write_text(
            EVENT_HEADER + "\n"
            "u1\ti1\t300\tclick\n"
            "u2\ti2\t100\tclick\n"
            "u3\ti3\t200\tconversion\n",
            encoding="utf-8",
        )
        log = load_events(str(path))
        assert [e.timestamp for e in log] == [100, 200, 300]

    def test_unknown_kind_names_line(self, tmp_path):
        path = tmp_path / "events.tsv"
        path.write_text(EVENT_HEADER + "\nu1\ti1\t10\tview\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2.*view"):
            load_events(str(path))

    def test_bad_field_count_names_line(self, tmp_path):
        path = tmp_path / "events.tsv"
        path.write_text(EVENT_HEADER + "\nu1\ti1\t10\tclick\nu2\ti2\t20\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 3"):
            load_events(str(path))

    def test_non_integer_timestamp_names_line(self, tmp_path):
        path = tmp_path / "events.tsv"
        path.write_text(EVENT_HEADER + "\nu1\ti1\tnoon\tclick\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2.*noon"):
            load_events(str(path))

    def test_header_only_yields_empty_log(self, tmp_path):
        path = tmp_path / "events.tsv"
        path.write_text(EVENT_HEADER + "\n", encoding="utf-8")
        log = load_events(str(path))
        assert len(log) == 0

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "events.tsv"
        path.write_text("u1\ti1\t10\tclick\n", encoding="utf-8")
        with pytest.raises(ValueError, match="header"):
            load_events(str(path))

    def test_lf_line_endings(self, tmp_path):
        path = str(tmp_path / "events.tsv")
        save_events(path, make_log([("u1", "i1", 1, "click")]))
        raw = open(path, "rb").read()
        assert b"\r" not in raw
        assert raw.endswith(b"\n")


class TestTemporalSplit:
    def test_partition_is_exact(self):
        log = make_log([("u1", "i1", t, "click") for t in range(10)])
        split = temporal_split(log, 6)
        assert len(split.train) + len(split.test) == len(log)
        assert all(e.timestamp < 6 for e in split.train)
        assert all(e.timestamp >= 6 for e in split.test)

    @given(st.lists(st.integers(min_value=0, max_value=1000), min_size=0, max_size=50), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_union_recovers_source(self, stamps, t_th):
        log = make_log([("u", f"i{k}", t, "click") for k, t in enumerate(stamps)])
        split = temporal_split(log, t_th)
        merged = EventLog(list(split.train) + list(split.test))
        assert merged == log


class TestLookback:
    def test_window_bounds_inclusive(self):
        day = 86_400
        log = make_log(
            [
                ("u", "i1", 0, "click"),
                ("u", "i2", 10 * day - 1, "click"),
                ("u", "i3", 10 * day, "click"),
                ("u", "i4", 30 * day, "click"),
            ]
        )
        kept = lookback_filter(log, now=30 * day, days=20)
        assert [e.item_id for e in kept] == ["i3", "i4"]

    def test_rejects_nonpositive_days(self):
        with pytest.raises(ValueError):
            lookback_filter(make_log([]), now=100, days=0)


class TestInteractionMatrix:
    def test_worked_example(self):
        # 2 clicks and 1 conversion on the same cell with default weights 1/5
        log = make_log(
            [
                ("u1", "i1", 1, "click"),
                ("u1", "i1", 2, "click"),
                ("u1", "i1", 3, "conversion"),
            ]
        )
        m = build_interaction_matrix(log)
        assert m.shape == (1, 1)
        assert m.matrix[0, 0] == pytest.approx(1 * 1.0 + 1 * 1.0 + 5.0)

    def test_weights_must_be_ordered(self):
        log = make_log([("u1", "i1", 1, "click")])
        with pytest.raises(ValueError):
            build_interaction_matrix(log, w_click=2.0, w_conv=1.0)
        with pytest.raises(ValueError):
            build_interaction_matrix(log, w_click=0.0, w_conv=5.0)

    def test_all_stored_weights_positive(self):
        log = make_log([("u%d" % k, "i%d" % (k % 3), k, "click") for k in range(20)])
        m = build_interaction_matrix(log)
        assert np.all(m.matrix.data > 0)

    @given(
        st.lists(
            st.tuples(
                st.integers(0, 4),
                st.integers(0, 4),
                st.integers(0, 100),
                st.sampled_from(["click", "conversion"]),
            ),
            min_size=1,
            max_size=40,
        )
    )
    @settings(max_examples=40, deadline=None)
    def test_cellwise_additive_over_log_concatenation(self, rows):
        """Matrix of a concatenated log equals the cellwise sum of the parts."""
        events = [(f"u{u}", f"i{i}", t, k) for (u, i, t, k) in rows]
        half = len(events) // 2
        log_all = make_log(events)
        m_all = build_interaction_matrix(log_all)
        total = {}
        for part in (events[:half], events[half:]):
            if not part:
                continue
            m = build_interaction_matrix(make_log(part))
            coo = m.matrix.tocoo()
            for r, c, v in zip(coo.row, coo.col, coo.data):
                key = (m.user_ids[r], m.item_ids[c])
                total[key] = total.get(key, 0.0) + v
        coo = m_all.matrix.tocoo()
        got = {
            (m_all.user_ids[r], m_all.item_ids[c]): v
            for r, c, v in zip(coo.row, coo.col, coo.data)
        }
        assert got == pytest.approx(total)


class TestByUser:
    def test_groups_in_time_order(self):
        log = make_log(
            [
                ("u1", "a", 5, "click"),
                ("u1", "b", 1, "click"),
                ("u2", "c", 3, "conversion"),
            ]
        )
        grouped = log.by_user()
        assert [e.item_id for e in grouped["u1"]] == ["b", "a"]
        clicks = log.by_user(EventKind.CLICK)
        assert "u2" not in clicks
