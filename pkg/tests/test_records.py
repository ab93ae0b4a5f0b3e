import pytest

from pkm.errors import InvalidArgumentError
from pkm.records import append_records, format_block, format_record, parse_record, read_records, to_columns


def test_format_record_keeps_key_order():
    line = format_record({"kind": "bench", "n_keys": 16384, "exact": True, "qps": 0.5, "exact_flat": None})
    assert line == "kind=bench\tn_keys=16384\texact=true\tqps=0.5\texact_flat=none"


def test_parse_record_types():
    record = parse_record("kind=eval\tstep=40\tperplexity=12.25\tok=false\tnote=none\tlabel=a b")
    assert record == {"kind": "eval", "step": 40, "perplexity": 12.25, "ok": False, "note": None, "label": "a b"}


def test_lists_and_whitespace_in_values():
    line = format_record({"threads": [1, 4], "path": "runs/a\tb"})
    assert line == "threads=1,4\tpath=runs/a b"


@pytest.mark.parametrize("key", ["", "a b", "a=b", "tab\tkey"])
def test_invalid_keys(key):
    with pytest.raises(InvalidArgumentError):
        format_record({key: 1})


def test_malformed_field():
    with pytest.raises(InvalidArgumentError):
        parse_record("kind=eval\tbroken")


def test_format_block():
    assert format_block({"split": "valid", "perplexity": 3.5}) == "split=valid\nperplexity=3.5"


def test_append_and_read(tmp_path):
    path = tmp_path / "out" / "records.tsv"
    assert append_records(path, [{"kind": "bench", "n_keys": 4}, {"kind": "eval", "step": 1}]) == 2
    append_records(path, [{"kind": "bench", "n_keys": 16}])
    with open(path, "a", encoding="utf-8") as f:
        f.write("\n# comment\n")
    assert len(read_records(path)) == 3
    assert [r["n_keys"] for r in read_records(path, kind="bench")] == [4, 16]


def test_read_reports_line_number(tmp_path):
    path = tmp_path / "records.tsv"
    path.write_text("kind=bench\nnot a record\n", encoding="utf-8")
    with pytest.raises(InvalidArgumentError, match="records.tsv:2"):
        read_records(path)


def test_to_columns_sorts_and_filters():
    records = [
        {"n_keys": 256, "qps": 10.0, "mode": "flat"},
        {"n_keys": 16, "qps": 40.0, "mode": "flat"},
        {"n_keys": 64, "qps": 30.0, "mode": "product"},
        {"n_keys": 32},
    ]
    xs, ys = to_columns(records, "n_keys", "qps", where=lambda r: r["mode"] == "flat")
    assert xs == [16, 256] and ys == [40.0, 10.0]
    assert to_columns(records, "n_keys", "qps")[0] == [16, 64, 256]
