"""``key = value`` text used for reports and small configuration records."""

from __future__ import annotations

from vbtactile.errors import IoFailure, ParseError

__all__ = ["format_keyvalue", "parse_keyvalue", "write_keyvalue", "read_keyvalue"]


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def format_keyvalue(items) -> str:
    """One ``key = value`` line per item; sequences are space separated."""
    lines = []
    for k, v in dict(items).items():
        if not k or any(c.isspace() for c in k) or "=" in k:
            raise ValueError(f"invalid key {k!r}")
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def parse_keyvalue(text: str) -> dict:
    """Inverse of :func:`format_keyvalue`; values stay strings."""
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if " = " not in s:
            raise ParseError("expected 'key = value'", line=no)
        k, v = s.split(" = ", 1)
        out[k.strip()] = v.strip()
    return out


def write_keyvalue(path, items):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(format_keyvalue(items))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_keyvalue(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_keyvalue(fh.read())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
