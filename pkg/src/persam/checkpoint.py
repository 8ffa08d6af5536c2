"""Checkpoints: ``manifest.json`` (kind, config, per-parameter shape/group/offset,
training metadata) next to ``params.bin`` holding little-endian f64 arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    state: dict[str, np.ndarray]
    groups: dict[str, str | None] = field(default_factory=dict)
    epoch: int | None = None
    val_loss: float | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)  # fold, seeds, data path, ...

    def build(self):
        """Instantiate the model and load the stored parameters."""
        from .baselines import build

        model = build(self.kind, self.config, seed=int(self.meta.get("model_seed", 0)))
        model.load_state_dict(self.state)
        if self.rng_state is not None and hasattr(model, "dropout_rng"):
            model.dropout_rng.state = self.rng_state
        return model


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": obj.dtype.str}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _restore(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=np.dtype(obj["dtype"]))
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    return obj


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name in sorted(ckpt.state):
            raw = np.ascontiguousarray(ckpt.state[name], dtype="<f8").tobytes()
            fh.write(raw)
            params.append({"name": name, "shape": list(np.shape(ckpt.state[name])),
                           "group": ckpt.groups.get(name), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "rng_state": _jsonable(ckpt.rng_state),
        "meta": _jsonable(ckpt.meta),
        "dtype": "f64",
        "blob": BLOB,
        "blob_bytes": offset,
        "params": params,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path / MANIFEST}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest is not valid JSON at byte {e.pos}: {e.msg}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = (path / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"params blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    state, groups = {}, {}
    for p in manifest["params"]:
        end = p["offset"] + p["nbytes"]
        arr = np.frombuffer(blob[p["offset"]:end], dtype="<f8").reshape(p["shape"])
        state[p["name"]] = arr.astype(np.float64)
        groups[p["name"]] = p["group"]
    return Checkpoint(
        kind=manifest["kind"],
        config=ModelConfig.from_dict(manifest["config"]),
        state=state,
        groups=groups,
        epoch=manifest["epoch"],
        val_loss=manifest["val_loss"],
        rng_state=_restore(manifest["rng_state"]),
        meta=_restore(manifest["meta"]),
    )


def from_model(model, epoch=None, val_loss=None, rng_state=None, **meta) -> Checkpoint:
    return Checkpoint(model.kind, model.cfg, model.state_dict(), model.groups(),
                      epoch, val_loss, rng_state, meta)
