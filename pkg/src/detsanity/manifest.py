"""Line-oriented ``key = value`` files used for run manifests and configs.

One entry per line, keys sorted on write, ``#`` starts a comment. Values
are stored as plain strings; readers coerce as needed. This is the format
of run manifests (which capture every seed and resolved option of a run)
and of optional CLI config files.
"""

from __future__ import annotations

from pathlib import Path


def format_manifest(entries: dict) -> str:
    lines = []
    for key in sorted(entries):
        value = entries[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_manifest(path, entries: dict) -> str:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(format_manifest(entries))
    return str(p)


def read_manifest(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
