"""Plain-text ``key = value`` config files, shared by fusion and GRPO."""

from __future__ import annotations

from .errors import DataError


def parse_kv_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    fields: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError("expected 'key = value'", line=lineno, path=path)
            key, value = (part.strip() for part in line.split("=", 1))
            if key in fields:
                raise DataError(f"duplicate key {key!r}", line=lineno, path=path)
            fields[key] = value
    return fields
