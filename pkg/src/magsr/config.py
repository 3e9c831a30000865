"""Flat ``key=value`` config files and run manifests."""
from __future__ import annotations

import platform
from pathlib import Path


def parse_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_kv(path):
    return parse_kv(Path(path).read_text())


def dump_kv(mapping):
    return "".join(f"{k}={v}\n" for k, v in mapping.items())


def write_manifest(out_dir, command, settings):
    """Write ``manifest.txt`` holding everything needed to re-run ``command``."""
    import numpy
    import torch

    from . import __version__, kernels

    entries = {
        "command": command,
        "magsr_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "torch": torch.__version__,
    }
    entries.update({k: v for k, v in settings.items() if v is not None})
    path = Path(out_dir) / "manifest.txt"
    path.write_text(dump_kv(entries))
    return path
