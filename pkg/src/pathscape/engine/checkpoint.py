"""Checkpoints as a JSON manifest plus one little-endian float64 blob.

The blob holds every tensor listed in the manifest, concatenated in manifest order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from pathscape.archspec import spec_from_dict, spec_to_dict
from pathscape.engine.network import Network

FORMAT = "pathscape-checkpoint/1"


def _paths(prefix) -> tuple:
    prefix = Path(prefix)
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save(prefix, net: Network, seed: int | None = None, extra: dict | None = None, meta: dict | None = None) -> tuple:
    """Write ``<prefix>.json`` and ``<prefix>.bin``; returns both paths.

    ``extra`` holds additional named arrays (optimizer state, for instance).
    """
    manifest_path, blob_path = _paths(prefix)
    arrays = dict(net.state_arrays())
    for name, value in (extra or {}).items():
        arrays[f"extra/{name}"] = np.asarray(value, dtype=np.float64)
    entries, chunks = [], []
    for name, value in arrays.items():
        entries.append({"name": name, "shape": list(np.shape(value))})
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    manifest = {
        "format": FORMAT,
        "spec": spec_to_dict(net.spec),
        "seed": seed,
        "eps": net.eps,
        "momentum": net.momentum,
        "blob": blob_path.name,
        "tensors": entries,
        "meta": meta or {},
    }
    _atomic_write(blob_path, b"".join(chunks))
    _atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest_path, blob_path


def load(prefix) -> tuple:
    """Return ``(network, extra_arrays, manifest)``."""
    manifest_path, _ = _paths(prefix)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: not a {FORMAT} manifest")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    expected = 8 * sum(int(np.prod(e["shape"])) for e in manifest["tensors"])
    if len(blob) != expected:
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, manifest expects {expected}")
    net = Network(spec_from_dict(manifest["spec"]), eps=manifest["eps"], momentum=manifest["momentum"])
    values = np.frombuffer(blob, dtype="<f8")
    arrays, extra, offset = {}, {}, 0
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"]))
        value = values[offset:offset + n].reshape(entry["shape"]).astype(np.float64)
        offset += n
        if entry["name"].startswith("extra/"):
            extra[entry["name"][6:]] = value
        else:
            arrays[entry["name"]] = value
    net.load_arrays(arrays)
    return net, extra, manifest
