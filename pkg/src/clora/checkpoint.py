"""Checkpoint container: named little-endian float64 arrays plus a JSON manifest.

Layout: 8-byte magic, u64 manifest length, manifest JSON (UTF-8), then the
concatenated row-major array payloads in manifest order. Arrays are stored
sorted by name so identical contents yield identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, AdapterStack, Variant
from .model import AdaptedModel, Backbone
from .numerics import RealMatrix, RngAlgorithm

MAGIC = b"CLRACK01"
SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        if arr.ndim != 2:
            raise ValueError(f"array {name!r} must be 2-D, got ndim={arr.ndim}")
        entries.append(
            {"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "offset": len(payload)}
        )
        payload.extend(arr.tobytes(order="C"))
    manifest = json.dumps(
        {"schema_version": SCHEMA_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        f.write(bytes(payload))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    mlen = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    data = raw[16 + mlen :]
    arrays = {}
    for entry in manifest["arrays"]:
        count = entry["rows"] * entry["cols"]
        start = entry["offset"]
        buf = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = buf.reshape(entry["rows"], entry["cols"]).copy()
    return arrays, manifest["meta"]


def adapter_config_to_dict(config: AdapterConfig) -> dict:
    return {
        "d": config.d,
        "r": config.r,
        "alpha": config.alpha,
        "hidden_c": config.hidden_c,
        "variant": config.variant.value,
        "dropout": config.dropout,
        "omega_init": config.omega_init,
    }


def adapter_config_from_dict(d: dict) -> AdapterConfig:
    return AdapterConfig(
        d=d["d"],
        r=d["r"],
        alpha=d["alpha"],
        hidden_c=d["hidden_c"],
        variant=Variant.parse(d["variant"]),
        dropout=d["dropout"],
        omega_init=d["omega_init"],
    )


def save_model(path, model: AdaptedModel, extra_meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {"backbone.emb": model.backbone.emb.a}
    for i, w in enumerate(model.backbone.layers):
        arrays[f"backbone.w{i}"] = w.a
    for name, value in model.named_params().items():
        arrays[name] = value.a
    meta = {
        "kind": "adapted-model",
        "adapter_config": adapter_config_to_dict(model.config),
        "k": model.n_classes,
        "n_layers": model.n_layers,
        "source_accuracy": model.backbone.source_accuracy,
        "rng_algorithm": RngAlgorithm.NAME,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, arrays, meta)


def load_model(path) -> tuple[AdaptedModel, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "adapted-model":
        raise CheckpointError(f"{path}: not an adapted-model checkpoint")
    config = adapter_config_from_dict(meta["adapter_config"])
    n_layers = meta["n_layers"]
    backbone = Backbone(
        emb=RealMatrix(arrays["backbone.emb"]),
        layers=[RealMatrix(arrays[f"backbone.w{i}"]) for i in range(n_layers)],
        source_accuracy=meta["source_accuracy"],
    )
    model = AdaptedModel.init(backbone, config, meta["k"], _throwaway_rng())
    for name in model.named_params():
        model.set_param(name, RealMatrix(arrays[name]))
    return model, meta


def save_backbone(path, backbone: Backbone, extra_meta: dict | None = None) -> None:
    arrays = {"backbone.emb": backbone.emb.a}
    for i, w in enumerate(backbone.layers):
        arrays[f"backbone.w{i}"] = w.a
    meta = {
        "kind": "backbone",
        "n_layers": backbone.n_layers,
        "source_accuracy": backbone.source_accuracy,
        "rng_algorithm": RngAlgorithm.NAME,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, arrays, meta)


def load_backbone(path) -> tuple[Backbone, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path}: not a backbone checkpoint")
    backbone = Backbone(
        emb=RealMatrix(arrays["backbone.emb"]),
        layers=[RealMatrix(arrays[f"backbone.w{i}"]) for i in range(meta["n_layers"])],
        source_accuracy=meta["source_accuracy"],
    )
    return backbone, meta


def _throwaway_rng():
    from .numerics import SeededRng

    return SeededRng(0).split("checkpoint-load")
