"""Checkpoint directories: manifest.json + params.bin + optimizer.bin.

Arrays are stored back to back as little-endian float64 in manifest order,
so a save/load round trip is bit-exact.
"""

import json
import logging
import os
from collections import OrderedDict

import numpy as np

logger = logging.getLogger("dpgdiff_logger")

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS_FILE = "params.bin"
OPTIMIZER_FILE = "optimizer.bin"
DTYPE = "<f8"


def _write_arrays(path, arrays):
    with open(path, "wb") as f:
        for array in arrays:
            f.write(np.ascontiguousarray(array, dtype=DTYPE).tobytes())


def _read_arrays(path, shapes):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint file not found at {path}")
    raw = np.fromfile(path, dtype=DTYPE)
    expected = sum(int(np.prod(shape)) for shape in shapes)
    if raw.size != expected:
        raise ValueError(f"{path} holds {raw.size} values, manifest expects {expected}")
    arrays, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(raw[offset:offset + size].astype(np.float64).reshape(shape))
        offset += size
    return arrays


def save_checkpoint(out_dir, params, optimizer_state, meta):
    """Write a checkpoint directory.

    ``params`` maps name -> array; ``optimizer_state`` holds ``step`` and the
    ``m``/``v`` dicts; ``meta`` is any JSON-able run information (configs,
    schedule spec, seed, epoch counters, history).
    """
    os.makedirs(out_dir, exist_ok=True)
    names = list(params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE,
        "parameters": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
        "optimizer_step": int(optimizer_state["step"]),
        **meta,
    }
    _write_arrays(os.path.join(out_dir, PARAMS_FILE), [params[n] for n in names])
    _write_arrays(os.path.join(out_dir, OPTIMIZER_FILE),
                  [optimizer_state["m"][n] for n in names] + [optimizer_state["v"][n] for n in names])
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Checkpoint written to {out_dir}")


def load_checkpoint(ckpt_dir):
    """Returns ``(params, optimizer_state, manifest)`` with params as arrays."""
    path = os.path.join(ckpt_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"No checkpoint manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format {manifest.get('format_version')} in {ckpt_dir}")

    names = [p["name"] for p in manifest["parameters"]]
    shapes = [tuple(p["shape"]) for p in manifest["parameters"]]
    params = OrderedDict(zip(names, _read_arrays(os.path.join(ckpt_dir, PARAMS_FILE), shapes)))
    moments = _read_arrays(os.path.join(ckpt_dir, OPTIMIZER_FILE), shapes + shapes)
    optimizer_state = {
        "step": manifest["optimizer_step"],
        "m": OrderedDict(zip(names, moments[:len(names)])),
        "v": OrderedDict(zip(names, moments[len(names):])),
    }
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"Checkpoint parameter {name} holds non-finite values")
    return params, optimizer_state, manifest
