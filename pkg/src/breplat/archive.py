"""Named-array zip container used for datasets and checkpoints.

Layout: one ``manifest.json`` member plus one ``<name>.npy`` member per array.
Arrays are stored little-endian with ``np.save`` so the container is
language-neutral and bit-exact on round trip. Member timestamps are pinned to
a constant so rewriting identical content yields byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

# fixed zip timestamp -> byte-identical archives for identical content
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArchiveError(Exception):
    """Corrupt or inconsistent container."""


def write_archive(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            with zf.open("manifest.json") as fh:
                return json.load(fh)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise ArchiveError(f"unreadable container {path}: {exc}") from exc


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest = read_manifest(path)
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        for member in zf.namelist():
            if not member.endswith(".npy"):
                continue
            name = member[: -len(".npy")]
            try:
                with zf.open(member) as fh:
                    arrays[name] = np.load(io.BytesIO(fh.read()))
            except Exception as exc:
                raise ArchiveError(f"corrupt array member '{member}': {exc}") from exc
    return manifest, arrays


def read_arrays(path, names: list[str]) -> dict[str, np.ndarray]:
    """Load only the named members (streaming readers stay cheap)."""
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in names:
            member = f"{name}.npy"
            try:
                with zf.open(member) as fh:
                    arrays[name] = np.load(io.BytesIO(fh.read()))
            except KeyError as exc:
                raise ArchiveError(f"missing array member '{member}'") from exc
            except Exception as exc:
                raise ArchiveError(f"corrupt array member '{member}': {exc}") from exc
    return arrays
