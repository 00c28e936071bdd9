import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcroll.curve_data import (
    CurveDataset,
    DatasetError,
    SplitSpec,
    denormalize,
    load_dataset,
    make_curve,
    normalize,
    save_dataset,
    split,
)

from conftest import make_dataset


def write(path, text):
    path.write_text(text)
    return path


def test_csv_single_curve(tmp_path):
    p = write(tmp_path / "one.csv", "id,epoch,value,h_0\na,1,0.1,5\na,2,0.2,5\na,3,0.3,5\n")
    ds = load_dataset(p)
    assert len(ds) == 1
    assert ds.curves[0].values.tolist() == [0.1, 0.2, 0.3]
    assert ds.config_dim == 1


def test_csv_rows_merged_in_epoch_order(tmp_path):
    p = write(tmp_path / "shuf.csv", "id,epoch,value,h_0\na,2,0.2,5\nb,1,0.9,1\na,1,0.1,5\n")
    ds = load_dataset(p)
    assert ds.get("a").values.tolist() == [0.1, 0.2]
    assert ds.ids == ["a", "b"]


def test_non_contiguous_epochs(tmp_path):
    p = write(tmp_path / "gap.csv", "id,epoch,value,h_0\na,1,0.1,5\na,3,0.3,5\n")
    with pytest.raises(DatasetError, match="non-contiguous epochs"):
        load_dataset(p)


@pytest.mark.parametrize("body, message", [
    ("a,1,0.1\n", "malformed row"),
    ("a,x,0.1,1\n", "malformed epoch"),
    ("a,1,nan,1\n", "non-finite"),
    ("a,1,0.1,1\na,2,0.2,2\n", "differ"),
])
def test_csv_errors_carry_line_context(tmp_path, body, message):
    p = write(tmp_path / "bad.csv", "id,epoch,value,h_0\n" + body)
    with pytest.raises(DatasetError, match=message) as info:
        load_dataset(p)
    assert "bad.csv" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "nope.csv")


def test_json_inconsistent_dimension(tmp_path):
    doc = {"name": "x", "config_names": ["a", "b"],
           "curves": [{"id": "1", "config": [1.0], "values": [0.5]}]}
    p = write(tmp_path / "x.json", json.dumps(doc))
    with pytest.raises(DatasetError, match="dimension"):
        load_dataset(p)


def test_json_round_trip_two_curves(tmp_path):
    ds = make_dataset(n_curves=2)
    save_dataset(ds, tmp_path / "d.json", "json")
    back = load_dataset(tmp_path / "d.json")
    assert back == ds
    for a, b in zip(ds.curves, back.curves):
        assert a.id == b.id
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.config.values, b.config.values)


def test_json_structure(tmp_path):
    save_dataset(make_dataset(n_curves=1), tmp_path / "d.json", "json")
    doc = json.loads((tmp_path / "d.json").read_text())
    assert set(doc) == {"name", "config_names", "curves"}
    assert len(doc["curves"]) == 1


def test_empty_dataset_csv_is_header_only(tmp_path):
    ds = CurveDataset((), "empty", 3)
    save_dataset(ds, tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text() == "id,epoch,value,h_0,h_1,h_2\n"
    assert load_dataset(tmp_path / "empty.csv") == ds


def test_duplicate_ids_rejected():
    c = make_curve("a", [1.0], [0.1])
    with pytest.raises(DatasetError, match="duplicate"):
        CurveDataset((c, c), "d", 1)


def test_curves_are_read_only(toy):
    with pytest.raises(ValueError):
        toy.curves[0].values[0] = 1.0


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)


@st.composite
def datasets(draw):
    dim = draw(st.integers(1, 3))
    n = draw(st.integers(0, 4))
    curves = []
    for i in range(n):
        length = draw(st.integers(1, 5))
        curves.append(make_curve(
            f"id{i}",
            draw(st.lists(finite, min_size=dim, max_size=dim)),
            draw(st.lists(finite, min_size=length, max_size=length)),
        ))
    return CurveDataset(tuple(curves), "rt", dim)


@settings(max_examples=60, deadline=None)
@given(ds=datasets(), fmt=st.sampled_from(["csv", "json"]))
def test_load_save_identity(tmp_path_factory, ds, fmt):
    path = tmp_path_factory.mktemp("rt") / f"rt.{fmt}"
    save_dataset(ds, path, fmt)
    assert load_dataset(path, fmt) == ds


def test_split_quarter():
    train, test = split(make_dataset(n_curves=4), SplitSpec(0.25, 3))
    assert (len(train), len(test)) == (3, 1)


def test_split_deterministic():
    ds = make_dataset(n_curves=12)
    a = split(ds, SplitSpec(0.25, 42))
    b = split(ds, SplitSpec(0.25, 42))
    assert a[1].ids == b[1].ids and a[0].ids == b[0].ids


def test_split_half_partition():
    ds = make_dataset(n_curves=10)
    train, test = split(ds, SplitSpec(0.5, 1))
    assert set(train.ids) | set(test.ids) == set(ds.ids)
    assert set(train.ids) & set(test.ids) == set()
    assert len(test) == 5


@settings(max_examples=80, deadline=None)
@given(n=st.integers(2, 30), frac=st.floats(0.01, 0.99), seed=st.integers(0, 2**64 - 1))
def test_split_is_partition(n, frac, seed):
    ds = make_dataset(n_curves=n, length=2)
    k = int(np.floor(frac * n + 0.5))
    if k < 1 or k > n - 1:
        with pytest.raises(DatasetError):
            split(ds, SplitSpec(frac, seed))
        return
    train, test = split(ds, SplitSpec(frac, seed))
    assert len(test) == k
    assert sorted(train.ids + test.ids) == sorted(ds.ids)
    assert not set(train.ids) & set(test.ids)


def test_split_too_small():
    with pytest.raises(DatasetError):
        split(make_dataset(n_curves=1), SplitSpec(0.5, 0))


def test_minmax_span():
    ds = CurveDataset((make_curve("a", [1.0], [0.2, 0.5]), make_curve("b", [2.0], [0.8])), "d", 1)
    norm, rec = normalize(ds, "minmax_per_dataset")
    vals = np.concatenate([c.values for c in norm])
    assert vals.min() == 0.0 and vals.max() == 1.0
    assert (rec.min, rec.max) == (0.2, 0.8)


def test_normalize_none_is_identity(toy):
    out, rec = normalize(toy, "none")
    for a, b in zip(toy.curves, out.curves):
        assert a.values.tobytes() == b.values.tobytes()
    assert rec.scheme == "none"


def test_normalize_degenerate():
    ds = CurveDataset((make_curve("a", [1.0], [0.3, 0.3]),), "d", 1)
    with pytest.raises(DatasetError, match="degenerate"):
        normalize(ds, "minmax_per_dataset")


@settings(max_examples=60, deadline=None)
@given(ds=datasets())
def test_minmax_round_trip(ds):
    vals = np.concatenate([c.values for c in ds]) if len(ds) else np.zeros(0)
    if len(ds) == 0 or vals.max() == vals.min():
        return
    norm, rec = normalize(ds, "minmax_per_dataset")
    normed = np.concatenate([c.values for c in norm])
    assert normed.min() >= 0.0 and normed.max() <= 1.0
    back = denormalize(norm, rec)
    scale = max(1.0, float(np.abs(vals).max()))
    for a, b in zip(ds.curves, back.curves):
        np.testing.assert_allclose(b.values, a.values, rtol=0, atol=1e-12 * scale)


def test_minmax_round_trip_unit_scale():
    ds = make_dataset(n_curves=20, length=30, seed=5)
    norm, rec = normalize(ds, "minmax_per_dataset")
    for a, b in zip(ds.curves, denormalize(norm, rec).curves):
        assert np.max(np.abs(a.values - b.values)) <= 1e-12
