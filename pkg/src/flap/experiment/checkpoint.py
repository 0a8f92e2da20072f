"""Binary checkpoints: one JSON manifest line, then raw little-endian float32 tensors.

Each tensor entry in the manifest records its name, shape, byte offset and a
CRC32 of its bytes, so corruption is located to a single tensor on load.
"""

from __future__ import annotations

import json
import warnings
import zlib
from pathlib import Path

import numpy as np
import torch

from flap.affordance import AffordanceConfig, AffordanceModel
from flap.errors import DatasetFormatError
from flap.gcrl import GoalConditionedIQL, IQLConfig
from flap.experiment.pipeline import Calibration, Models

MAGIC = b"FLAPCKPT"
VERSION = 1


def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        data = t.detach().cpu().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data),
                        "crc32": zlib.crc32(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {"version": VERSION, **meta, "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep or not head.startswith(MAGIC + b" "):
        raise DatasetFormatError(f"{path}: not a checkpoint file")
    try:
        manifest = json.loads(head[len(MAGIC) + 1:])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: unreadable manifest") from exc
    if manifest.get("version") != VERSION:
        raise DatasetFormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    tensors = {}
    for e in manifest["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise DatasetFormatError(f"{path}: tensor {e['name']} truncated")
        if zlib.crc32(chunk) != e["crc32"]:
            raise DatasetFormatError(f"{path}: tensor {e['name']} checksum mismatch")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    expected_end = sum(e["nbytes"] for e in manifest["tensors"])
    if len(body) != expected_end:
        raise DatasetFormatError(f"{path}: {len(body) - expected_end} unexpected trailing bytes")
    return tensors, manifest


def _module_tensors(models: Models) -> dict[str, torch.Tensor]:
    out = {}
    named = {**{f"agent.{k}": m for k, m in models.agent.modules().items()},
             "affordance": models.affordance, "raw_affordance": models.raw_affordance}
    for prefix, module in named.items():
        for key, value in module.state_dict().items():
            out[f"{prefix}.{key}"] = value
    return out


def save_models(models: Models, path, config_hash: str = "") -> None:
    meta = {
        "config_hash": config_hash,
        "obs_dim": models.agent.obs_dim,
        "action_dim": models.agent.action_dim,
        "iql": vars(models.agent.cfg),
        "affordance": vars(models.affordance.cfg),
        "calibration": vars(models.calibration),
    }
    save_tensors(path, _module_tensors(models), meta)


def load_models(path, config_hash: str | None = None) -> Models:
    """Rebuild models from a checkpoint; warns when the stored config hash differs."""
    tensors, manifest = load_tensors(path)
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        warnings.warn(
            f"checkpoint {path} was written with config {manifest.get('config_hash')}, "
            f"current config is {config_hash}",
            stacklevel=2,
        )
    agent = GoalConditionedIQL(manifest["obs_dim"], manifest["action_dim"], IQLConfig(**manifest["iql"]))
    aff_cfg = AffordanceConfig(**manifest["affordance"])
    affordance = AffordanceModel(agent.cfg.latent_dim, aff_cfg)
    raw = AffordanceModel(manifest["obs_dim"], aff_cfg)
    named = {**{f"agent.{k}": m for k, m in agent.modules().items()},
             "affordance": affordance, "raw_affordance": raw}
    for prefix, module in named.items():
        state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        module.load_state_dict(state)
    agent.encoder.freeze()
    affordance.freeze()
    raw.freeze()
    return Models(agent, affordance, raw, Calibration(**manifest["calibration"]))
