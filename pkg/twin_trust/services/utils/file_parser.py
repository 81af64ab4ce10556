"""Canonical JSON encoding plus the JSON / JSON Lines loaders used by every engine."""
import json
import logging
from pathlib import Path
from typing import Any, List, Union

from pydantic import BaseModel, ValidationError

from twin_trust.app.errors import ParseError

logger = logging.getLogger(__name__)

FLOAT_DECIMALS = 6

PathLike = Union[str, Path]


def _normalize(value: Any) -> Any:
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        rounded = round(value, FLOAT_DECIMALS)
        return 0.0 if rounded == 0 else rounded
    if isinstance(value, dict):
        return {str(k): _normalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    return value


def canonical_json(data: Any, compact: bool = False) -> str:
    """Encode ``data`` with sorted keys and floats fixed to six decimals.

    ``compact`` produces a single line (JSON Lines); otherwise the document is
    indented and newline-terminated.
    """
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json", by_alias=True)
    normalized = _normalize(data)
    if compact:
        return json.dumps(normalized, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return json.dumps(normalized, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def quantize(value: float) -> float:
    rounded = round(value, FLOAT_DECIMALS)
    return 0.0 if rounded == 0 else rounded


def parse_json_text(text: str, source: str = "<document>") -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{source}:{e.lineno}:{e.colno}", e.msg) from e


def read_text(path: PathLike) -> str:
    """Read a UTF-8 file. ``FileNotFoundError`` is left to the caller."""
    return Path(path).read_text(encoding="utf-8")


def load_json(path: PathLike) -> Any:
    return parse_json_text(read_text(path), str(path))


def load_jsonl(path: PathLike) -> List[Any]:
    rows: List[Any] = []
    for lineno, line in enumerate(read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}:{lineno}:{e.colno}", e.msg) from e
    return rows


def validation_location(error: ValidationError, prefix: str = "") -> str:
    """Dotted path of the first failing field, e.g. ``fsm.initial``."""
    first = error.errors()[0]
    loc = ".".join(str(part) for part in first.get("loc", ()))
    if prefix and loc:
        return f"{prefix}:{loc}"
    return loc or prefix or "<root>"


def model_from_data(model_cls: Any, data: Any, source: str = "") -> Any:
    """Validate ``data`` into ``model_cls``; schema errors become ``ParseError``."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ParseError(validation_location(e, source), first.get("msg", "invalid value")) from e


def write_text(path: PathLike, text: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8", newline="\n")


def write_json(path: PathLike, data: Any) -> None:
    write_text(path, canonical_json(data))
