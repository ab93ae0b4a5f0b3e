"""
Result records: one line per result, tab-separated `key=value` fields.

Bench, eval and ablation runs append records to a file; `read_records`
and `to_columns` turn them back into typed rows and x/y series for plots.
"""

import logging
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

Record = Dict[str, Any]


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    text = str(value)
    return text.replace("\t", " ").replace("\n", " ").replace("\r", " ")


def _parse_value(text: str) -> Any:
    if text == "none":
        return None
    if text in ("true", "false"):
        return text == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_record(record: Mapping[str, Any]) -> str:
    """Single-line rendering of `record`, keys in insertion order."""
    fields = []
    for key, value in record.items():
        if not key or any(c in key for c in "=\t\n "):
            raise InvalidArgumentError(f"invalid record key {key!r}")
        fields.append(f"{key}={_format_value(value)}")
    return "\t".join(fields)


def parse_record(line: str) -> Record:
    record: Record = {}
    for field in line.rstrip("\n").split("\t"):
        if not field:
            continue
        key, sep, value = field.partition("=")
        if not sep:
            raise InvalidArgumentError(f"malformed record field {field!r}")
        record[key] = _parse_value(value)
    return record


def format_block(record: Mapping[str, Any]) -> str:
    """Human-facing `key=value` lines for stdout."""
    return "\n".join(f"{key}={_format_value(value)}" for key, value in record.items())


def append_records(path: Union[str, Path], records: Iterable[Mapping[str, Any]]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [format_record(r) for r in records]
    with open(path, "a", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    logger.debug(f"Appended {len(lines)} records to {path}")
    return len(lines)


def read_records(path: Union[str, Path], kind: Optional[str] = None) -> List[Record]:
    """All records in `path`, optionally only those with `kind=<kind>`."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                record = parse_record(line)
            except InvalidArgumentError as e:
                raise InvalidArgumentError(f"{path}:{lineno}: {e}") from e
            if kind is None or record.get("kind") == kind:
                records.append(record)
    return records


def to_columns(
    records: Iterable[Mapping[str, Any]],
    x: str,
    y: str,
    where: Optional[Callable[[Mapping[str, Any]], bool]] = None,
) -> Tuple[List[Any], List[Any]]:
    """x/y series sorted by x, skipping records that lack either key."""
    points = [
        (r[x], r[y]) for r in records
        if x in r and y in r and (where is None or where(r))
    ]
    points.sort(key=lambda p: p[0])
    return [p[0] for p in points], [p[1] for p in points]
