"""Shared lightweight parsing utilities."""

from pathlib import Path
from typing import Dict, List, Optional

from .errors import FileIoError, InvalidConfig, MalformedLine


def parse_float_csv(values_csv: str) -> Optional[List[float]]:
    """Parse a comma-separated list of reals; return None if empty.

    Normalizes whitespace and ignores empty tokens.
    """
    tokens = [t.strip() for t in values_csv.split(",") if t.strip()]
    if not tokens:
        return None
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise InvalidConfig(f"expected comma-separated numbers, got {values_csv!r}") from e


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def parse_config_file(path: str) -> Dict[str, str]:
    """
    Read a layered-config file: one `key=value` per line.

    Blank lines and `#` comments are skipped; keys may be written as flag
    names (`--out-traj`, `out-traj`) or dests (`out_traj`). Values are kept
    as strings so the CLI parser converts them exactly like flags.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FileIoError(path, e.strerror or str(e)) from e

    values: Dict[str, str] = {}
    for line_index, raw in enumerate(text.splitlines()):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedLine(path, line_index, "expected key=value")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise MalformedLine(path, line_index, "empty key")
        values[key] = value.strip()
    return values
