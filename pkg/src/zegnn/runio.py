"""Run manifests and atomic, byte-stable file outputs.

Every CLI command writes a manifest holding the fully resolved
configuration and its hash so a run can be replayed to byte-identical
outputs. Files are written to a temp path and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform

import numpy as np


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_text_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json_atomic(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_manifest(out_dir, command: str, config: dict,
                   thread_cap: int = 1) -> dict:
    from . import __version__
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "thread_cap": thread_cap,
        "versions": {
            "zegnn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def write_csv_atomic(path, header: list[str], rows: list[list]) -> None:
    def fmt(value):
        if isinstance(value, float):
            return repr(value)
        if value is None:
            return ""
        return str(value)

    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    write_text_atomic(path, "\n".join(lines) + "\n")
