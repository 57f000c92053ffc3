"""Model checkpoints: one JSON header line plus raw little-endian float32.

Layout: the first line is a JSON object describing the architecture, input
dims, seed and epoch; everything after the newline is the concatenation of
all parameter arrays in declaration order as little-endian 32-bit floats.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import NeurofuseError
from .network import Conv3D, Flatten, FullyConnected, MaxPool3D, Network, NetworkSpec

__all__ = ["save_checkpoint", "load_checkpoint", "CorruptCheckpoint"]

_FORMAT = "neurofuse-checkpoint-v1"


class CorruptCheckpoint(NeurofuseError):
    """Checkpoint header or payload does not match the declared layout."""


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Conv3D):
        return {"kind": "conv3d", "out_channels": layer.out_channels}
    if isinstance(layer, MaxPool3D):
        return {"kind": "maxpool3d"}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    if isinstance(layer, FullyConnected):
        return {"kind": "fc", "out_nodes": layer.out_nodes, "activation": layer.activation}
    raise TypeError(f"unknown layer {layer!r}")


def _layer_from_dict(entry: dict):
    kind = entry["kind"]
    if kind == "conv3d":
        return Conv3D(entry["out_channels"])
    if kind == "maxpool3d":
        return MaxPool3D()
    if kind == "flatten":
        return Flatten()
    if kind == "fc":
        return FullyConnected(entry["out_nodes"], entry["activation"])
    raise CorruptCheckpoint(f"unknown layer kind {kind!r}")


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "branches": [[_layer_to_dict(l) for l in branch] for branch in spec.branches],
        "merge": None if spec.merge is None else _layer_to_dict(spec.merge),
        "head": _layer_to_dict(spec.head),
    }


def spec_from_dict(payload: dict) -> NetworkSpec:
    return NetworkSpec(
        branches=tuple(
            tuple(_layer_from_dict(l) for l in branch) for branch in payload["branches"]
        ),
        merge=None if payload["merge"] is None else _layer_from_dict(payload["merge"]),
        head=_layer_from_dict(payload["head"]),
    )


def save_checkpoint(path, net: Network, seed: int | None = None, epoch: int | None = None) -> None:
    header = {
        "format": _FORMAT,
        "architecture": spec_to_dict(net.spec),
        "input_dims": list(net.input_dims),
        "seed": seed,
        "epoch": epoch,
        "param_shapes": [list(p.shape) for p in net.params],
    }
    blob = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild the network (float32) and return it with the header dict."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CorruptCheckpoint("missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    if header.get("format") != _FORMAT:
        raise CorruptCheckpoint(f"unknown format {header.get('format')!r}")
    spec = spec_from_dict(header["architecture"])
    net = Network(spec, tuple(header["input_dims"]))
    blob = raw[newline + 1 :]
    offset = 0
    for param, shape in zip(net.params, header["param_shapes"]):
        if list(param.shape) != list(shape):
            raise CorruptCheckpoint(
                f"shape {shape} in header does not match layout {list(param.shape)}"
            )
        n = param.size * 4
        if offset + n > len(blob):
            raise CorruptCheckpoint("payload shorter than the declared parameters")
        param[...] = np.frombuffer(blob[offset : offset + n], dtype="<f4").reshape(
            param.shape
        )
        offset += n
    if offset != len(blob):
        raise CorruptCheckpoint("trailing bytes after the declared parameters")
    return net, header
