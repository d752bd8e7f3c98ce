import json

import numpy as np
import pytest

from conftest import make_dataset
from emfleet.errors import DataShapeError
from emfleet.telemetry import (
    FleetDataset,
    SampleRecord,
    dumps_dataset,
    load_dataset,
    partition_by,
    partition_by_class,
    save_dataset,
)


def _rec(sid="s0", steps=(1, 2, 3, 4), cls="c", cp=0):
    return SampleRecord(sid, "SSD-A", cls, "w", cp, 3, steps)


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def _row(sid, steps, cls="c"):
    return {"sample_id": sid, "generation": "SSD-A", "workload_class": cls, "workload_id": "w",
            "checkpoint": 0, "component_count": 2, "steps": steps}


def test_three_row_jsonl(tmp_path):
    p = tmp_path / "f.jsonl"
    _write_jsonl(p, [_row(f"s{i}", [i, 0, 1, 2]) for i in range(3)])
    ds = load_dataset(p)
    assert (ds.n, ds.d) == (3, 4)
    assert ds.counts.dtype == np.int64


def test_negative_count_names_row(tmp_path):
    p = tmp_path / "f.jsonl"
    _write_jsonl(p, [_row("s0", [1, 2]), _row("s1", [1, -1])])
    with pytest.raises(DataShapeError, match=r"f\.jsonl:2.*negative"):
        load_dataset(p)


@pytest.mark.parametrize("bad", [1.5, "3", True, None])
def test_non_integer_count_rejected(bad):
    with pytest.raises(DataShapeError):
        _rec(steps=(1, bad))


def test_dimension_mismatch_names_row(tmp_path):
    p = tmp_path / "f.jsonl"
    _write_jsonl(p, [_row("s0", [1, 2]), _row("odd", [1, 2, 3])])
    with pytest.raises(DataShapeError, match=r":2: row 'odd' has 3 steps, expected 2"):
        load_dataset(p)


def test_parse_error_has_line_number(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text(json.dumps(_row("s0", [1])) + "\n{not json\n")
    with pytest.raises(DataShapeError, match=r"f\.jsonl:2: JSON parse error"):
        load_dataset(p)


def test_csv_bad_cell_line_number(tmp_path, small_fleet):
    ds, _ = small_fleet
    p = tmp_path / "f.csv"
    text = dumps_dataset(ds.subset(ds.records[:3]), "csv").splitlines()
    text[2] = text[2].rsplit(",", 1)[0] + ",x"
    p.write_text("\n".join(text) + "\n")
    with pytest.raises(DataShapeError, match=r"f\.csv:3 step_7"):
        load_dataset(p)


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_empty_file_error(tmp_path, fmt):
    p = tmp_path / f"e.{fmt}"
    p.write_text("")
    with pytest.raises(DataShapeError, match="empty"):
        load_dataset(p)


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_round_trip(tmp_path, small_fleet, fmt):
    ds, _ = small_fleet
    p = tmp_path / f"f.{fmt}"
    save_dataset(ds, p, fmt)
    back = load_dataset(p)
    assert back == ds
    assert all(a.to_dict() == b.to_dict() for a, b in zip(back.records, ds.records))


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_save_is_byte_deterministic(tmp_path, small_fleet, fmt):
    ds, _ = small_fleet
    save_dataset(ds, tmp_path / "a", fmt)
    save_dataset(ds, tmp_path / "b", fmt)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert b"\r\n" not in (tmp_path / "a").read_bytes()


def test_empty_dataset_outputs():
    empty = FleetDataset(records=(), d=3)
    assert dumps_dataset(empty, "jsonl") == ""
    assert dumps_dataset(empty, "csv") == (
        "sample_id,generation,workload_class,workload_id,checkpoint,component_count,step_0,step_1,step_2\n"
    )


def test_table1_size_file_reloads(tmp_path, table1_injected):
    ds, _ = table1_injected
    cp0 = ds.filter(checkpoint=0)
    p = tmp_path / "t1.jsonl"
    save_dataset(cp0, p)
    assert load_dataset(p).n == 8311


def test_duplicate_sample_checkpoint_rejected():
    with pytest.raises(DataShapeError, match="duplicate"):
        FleetDataset.from_records([_rec("a"), _rec("a")])


def test_partition_four_classes(table1_injected):
    ds, _ = table1_injected
    parts = partition_by_class(ds.filter(checkpoint=0))
    assert sorted(parts) == ["jedec", "proprietary", "synthetic", "ycsb"]


def test_partition_single_class_identity():
    ds = make_dataset([[1, 2], [3, 4], [5, 6]])
    parts = partition_by_class(ds)
    assert list(parts) == ["c0"]
    assert parts["c0"] == ds


def test_partition_sizes_and_order(small_fleet):
    ds, _ = small_fleet
    parts = partition_by_class(ds)
    assert sum(p.n for p in parts.values()) == ds.n
    for cls, part in parts.items():
        expected = [r for r in ds.records if r.workload_class == cls]
        assert list(part.records) == expected


def test_partition_by_multiple_keys(small_fleet):
    ds, _ = small_fleet
    parts = partition_by(ds, "checkpoint", "workload_class")
    assert len(parts) == 6
    assert sum(p.n for p in parts.values()) == ds.n


@pytest.mark.parametrize("name", ["example.jsonl", "example.csv"])
def test_documented_example_files_load(name):
    from pathlib import Path

    ds = load_dataset(Path(__file__).resolve().parents[1] / "docs" / "formats" / name)
    assert ds.n == 3
