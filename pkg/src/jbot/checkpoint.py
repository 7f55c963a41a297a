"""Checkpoint directories: one ``<name>.npy`` per parameter plus ``manifest.json``."""
import json
import os

import numpy as np

from .network import NetworkConfig
from .tensor import save_npy


class CheckpointError(ValueError):
    pass


def save_params(directory, arrays, net_cfg, tag="student", step=0, extra=None):
    os.makedirs(directory, exist_ok=True)
    names = list(arrays)
    for name in names:
        save_npy(os.path.join(directory, name + ".npy"), arrays[name])
    manifest = {
        "tag": tag,
        "step": int(step),
        "names": names,
        "shapes": {k: list(arrays[k].shape) for k in names},
        "dtype": str(arrays[names[0]].dtype) if names else "float32",
        "config": net_cfg.to_dict(),
        "final_norm": bool(net_cfg.final_norm),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_params(directory):
    """Returns ``(arrays, net_cfg, manifest)``."""
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise CheckpointError(f"no manifest.json in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    cfg = NetworkConfig.from_dict(manifest["config"])
    arrays = {}
    for name in manifest["names"]:
        arr = np.load(os.path.join(directory, name + ".npy"), allow_pickle=False)
        if list(arr.shape) != manifest["shapes"][name]:
            raise CheckpointError(
                f"{name}: file shape {list(arr.shape)} does not match manifest {manifest['shapes'][name]}"
            )
        arrays[name] = arr
    return arrays, cfg, manifest


def check_compatible(arrays, expected):
    """Raise unless two parameter mappings agree on names and shapes."""
    got = {k: tuple(v.shape) for k, v in arrays.items()}
    want = {k: tuple(v.shape) for k, v in expected.items()}
    common = set(got) & set(want)
    if set(want) - set(got) or any(got[k] != want[k] for k in common):
        raise CheckpointError(f"checkpoint/config mismatch:\n  checkpoint: {got}\n  config:     {want}")
