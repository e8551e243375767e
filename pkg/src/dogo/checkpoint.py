"""Checkpoint archive: one zip file per peer per saved epoch.

Layout inside the archive::

    metadata.json            plain-text record (config hash, epoch, step, seed,
                             objective, peer tag, model configs)
    params/<name>.npy        model parameters and buffers
    optim/<index>/<key>.npy  optimizer state tensors (optional)
    optim/meta.json          optimizer scalar state (optional)
"""

from __future__ import annotations

import errno
import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .errors import CheckpointMismatch, CheckpointMissing, CorruptArchive, DiskFull
from .models import EncoderConfig, PeerModel, PredictorConfig, ProjectorConfig, build_peer

SUFFIX = ".ckpt.zip"


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _jsonable_tuple(x):
    return json.loads(json.dumps(x))


def model_spec(model: PeerModel) -> Dict[str, Any]:
    return {
        "encoder": _jsonable_tuple(asdict(model.enc_cfg)),
        "projector": asdict(model.proj_cfg),
        "predictor": asdict(model.pred_cfg) if model.pred_cfg else None,
        "objective": model.objective,
    }


def _to_tuple(x):
    return tuple(_to_tuple(v) for v in x) if isinstance(x, list) else x


def model_from_spec(spec: Dict[str, Any], seed: int = 0) -> PeerModel:
    enc = dict(spec["encoder"])
    enc["depth_spec"] = _to_tuple(enc["depth_spec"])
    pred = PredictorConfig(**spec["predictor"]) if spec.get("predictor") else None
    return build_peer(EncoderConfig(**enc), ProjectorConfig(**spec["projector"]), pred, spec["objective"], seed)


def save_checkpoint(path, model: PeerModel, *, config_hash: str, epoch: int, step: int, seed: int,
                    peer_tag: str, optimizer: Optional[torch.optim.Optimizer] = None,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    meta = {
        "config_hash": config_hash,
        "epoch": epoch,
        "step": step,
        "seed": seed,
        "objective": model.objective,
        "peer_tag": peer_tag,
        "model": model_spec(model),
        **(extra or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("metadata.json", json.dumps(meta, indent=2, sort_keys=True))
            for name, t in model.state_dict().items():
                zf.writestr(f"params/{name}.npy", _npy_bytes(t))
            if optimizer is not None:
                sd = optimizer.state_dict()
                scalars = {"param_groups": sd["param_groups"], "state": {}}
                for idx, st in sd["state"].items():
                    scalars["state"][str(idx)] = {}
                    for k, v in st.items():
                        if torch.is_tensor(v):
                            zf.writestr(f"optim/{idx}/{k}.npy", _npy_bytes(v))
                        else:
                            scalars["state"][str(idx)][k] = v
                zf.writestr("optim/meta.json", json.dumps(scalars))
        tmp.replace(path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        if e.errno == errno.ENOSPC:
            raise DiskFull(f"no space left writing {path}") from e
        raise
    return path


def read_metadata(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointMissing(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("metadata.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CorruptArchive(f"{path}: {e}") from e


def load_checkpoint(path, expected_config_hash: Optional[str] = None,
                    optimizer_factory=None):
    """Load ``(model, metadata, optimizer)`` from an archive.

    Raises:
        CheckpointMismatch: the stored config hash differs from ``expected_config_hash``.
    """
    meta = read_metadata(path)
    if expected_config_hash is not None and meta["config_hash"] != expected_config_hash:
        raise CheckpointMismatch(
            f"{path}: config hash {meta['config_hash'][:12]} != expected {expected_config_hash[:12]}")
    model = model_from_spec(meta["model"], seed=meta.get("seed", 0))
    optimizer = None
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            state = {}
            for key in model.state_dict():
                state[key] = torch.from_numpy(np.load(io.BytesIO(zf.read(f"params/{key}.npy"))))
            model.load_state_dict(state)
            if optimizer_factory is not None:
                optimizer = optimizer_factory(model)
                if "optim/meta.json" in names:
                    scalars = json.loads(zf.read("optim/meta.json"))
                    sd = {"param_groups": scalars["param_groups"], "state": {}}
                    for idx, st in scalars["state"].items():
                        entry = dict(st)
                        prefix = f"optim/{idx}/"
                        for n in names:
                            if n.startswith(prefix):
                                entry[n[len(prefix):-4]] = torch.from_numpy(np.load(io.BytesIO(zf.read(n))))
                        sd["state"][int(idx)] = entry
                    optimizer.load_state_dict(sd)
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise CorruptArchive(f"{path}: {e}") from e
    return model, meta, optimizer
