import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from expertgrowth.textio import fmt, matrix_to_text, parse_kv, parse_matrices, read_csv, write_csv


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_matrix_roundtrip_exact(a):
    back = parse_matrices(matrix_to_text("m", a))["m"]
    assert np.array_equal(back, a)


def test_fmt_types():
    assert fmt(True) == "True" and fmt(np.int64(3)) == "3" and fmt(0.1) == "0.1"


def test_csv_and_kv(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y"], [[1 / 3, "s"], [np.float64(2.5), 4]])
    rows = read_csv(tmp_path / "a.csv")
    assert float(rows[0]["x"]) == 1 / 3 and rows[1]["y"] == "4"
    assert parse_kv("# c\na = 1\n b= two \n") == {"a": "1", "b": "two"}
