"""Dataset files: ``manifest.json`` (version, spec, seeds, case index with
offsets) next to ``data.bin`` holding little-endian arrays back to back."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .synth import SynthSpec, SyntheticCase, SyntheticDataset

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "data.bin"

_DTYPES = {"f32": "<f4", "u8": "u1"}
_FIELDS = (("patches", "f32"), ("t1", "f32"), ("t2", "f32"), ("mask", "u8"), ("kinds", "u8"))


class DatasetFormatError(ValueError):
    """The manifest or blob cannot be parsed; the message names a byte offset."""


class UnsupportedVersionError(DatasetFormatError):
    pass


def save_dataset(ds: SyntheticDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for case in ds.cases:
            arrays = {}
            for name, code in _FIELDS:
                arr = np.ascontiguousarray(getattr(case, name), dtype=_DTYPES[code])
                raw = arr.tobytes()
                fh.write(raw)
                arrays[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
                offset += len(raw)
            index.append({
                "case_id": case.case_id,
                "label": case.label,
                "typicality": case.typicality,
                "confuser": case.confuser,
                "seed": case.seed,
                "arrays": arrays,
            })
    manifest = {
        "version": FORMAT_VERSION,
        "spec": ds.spec.to_dict(),
        "seed": ds.spec.seed,
        "blob": BLOB,
        "blob_bytes": offset,
        "cases": index,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _read_manifest(path: Path) -> dict:
    try:
        text = (path / MANIFEST).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path / MANIFEST}: missing manifest") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path / MANIFEST}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise DatasetFormatError(f"{path / MANIFEST}: undecodable byte at offset {exc.start}") from exc
    if not isinstance(manifest, dict):
        raise DatasetFormatError(f"{path / MANIFEST}: top level is not an object (byte offset 0)")
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"dataset format version {version!r} is not supported "
                                      f"(this reader handles version {FORMAT_VERSION})")
    return manifest


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    manifest = _read_manifest(path)
    try:
        blob = (path / manifest.get("blob", BLOB)).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: missing data blob") from exc
    expected = manifest.get("blob_bytes")
    if expected is not None and len(blob) != expected:
        raise DatasetFormatError(f"{path / BLOB}: truncated or padded, data ends at byte offset "
                                 f"{len(blob)} but manifest expects {expected}")
    spec = SynthSpec.from_dict(manifest["spec"])
    cases = []
    for entry in manifest["cases"]:
        arrays = {}
        for name, code in _FIELDS:
            meta = entry["arrays"][name]
            start, nbytes = meta["offset"], meta["nbytes"]
            if start + nbytes > len(blob):
                raise DatasetFormatError(f"{path / BLOB}: case {entry['case_id']} field {name} needs bytes "
                                         f"[{start}, {start + nbytes}) but data ends at byte offset {len(blob)}")
            arr = np.frombuffer(blob, dtype=_DTYPES[code], count=nbytes // np.dtype(_DTYPES[code]).itemsize,
                                offset=start)
            arrays[name] = arr.reshape(meta["shape"]).copy()
        cases.append(SyntheticCase(
            case_id=entry["case_id"], label=entry["label"], typicality=entry["typicality"],
            patches=arrays["patches"].astype(np.float32), t1=arrays["t1"].astype(np.float32),
            t2=arrays["t2"].astype(np.float32), mask=arrays["mask"].astype(bool),
            kinds=arrays["kinds"].astype(np.uint8), confuser=entry["confuser"], seed=entry["seed"],
        ))
    return SyntheticDataset(spec, cases)
