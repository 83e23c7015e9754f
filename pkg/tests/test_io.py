import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixedsim.device_models import MeasurementTable
from mixedsim.io import IngestError, atomic_write_text, csv_text, export_measurements, ingest_measurements


def test_three_row_file(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("state,stimulus,response\n10,0.1,0.01\n20,0.2,0.02\n30,0.3,0.03\n")
    t = ingest_measurements(p)
    assert len(t) == 3
    np.testing.assert_array_equal(t.state, [10, 20, 30])
    assert t.temperature is None
    np.testing.assert_array_equal(t.line_numbers, [2, 3, 4])


def test_non_numeric_cites_line(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("state,stimulus,response\n1,1,1\n2,2,2\n3,3,3\n4,x4,4\n")
    with pytest.raises(IngestError) as info:
        ingest_measurements(p)
    assert info.value.line == 5
    assert "line 5" in str(info.value) and "x4" in str(info.value)


def test_blank_lines_keep_numbering(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("state,stimulus,response\n1,1,1\n\n2,2,nan\n")
    with pytest.raises(IngestError) as info:
        ingest_measurements(p)
    assert info.value.line == 4


@pytest.mark.parametrize("text,match", [
    ("", "empty"),
    ("state,stimulus,response\n", "no data rows"),
    ("a,b,c\n1,2,3\n", "header"),
    ("state,stimulus,response\n1,2\n", "expected 3 fields"),
])
def test_malformed_files(tmp_path, text, match):
    p = tmp_path / "m.csv"
    p.write_text(text)
    with pytest.raises(IngestError, match=match):
        ingest_measurements(p)


def test_temperature_column_required_when_asked(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("state,stimulus,response\n1,2,3\n")
    with pytest.raises(IngestError, match="temperature"):
        ingest_measurements(p, require_temperature=True)


@given(st.lists(st.tuples(*[st.floats(-1e6, 1e6, allow_nan=False)] * 4), min_size=1, max_size=30),
       st.booleans())
@settings(max_examples=30, deadline=None)
def test_export_ingest_round_trip(tmp_path_factory, rows, with_temp):
    arr = np.array(rows)
    table = MeasurementTable(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3] if with_temp else None)
    p = tmp_path_factory.mktemp("rt") / "m.csv"
    export_measurements(table, p)
    back = ingest_measurements(p)
    np.testing.assert_array_equal(back.state, table.state)
    np.testing.assert_array_equal(back.response, table.response)
    if with_temp:
        np.testing.assert_array_equal(back.temperature, table.temperature)
    else:
        assert back.temperature is None


def test_atomic_write_returns_digest_and_leaves_no_temp(tmp_path):
    import hashlib

    digest = atomic_write_text(tmp_path / "sub" / "f.txt", "hello\n")
    assert digest == hashlib.sha256(b"hello\n").hexdigest()
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]


def test_csv_text_float_repr():
    text = csv_text(("a", "b"), [(0.1, 3), (np.float64(1 / 3), "x")])
    assert text == "a,b\n0.1,3\n0.3333333333333333,x\n"
