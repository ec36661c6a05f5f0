"""Checkpoint container (numpy ``.npz``).

Keys:
    format          "aimkp-checkpoint"
    version         int, currently 1
    config_json     ModelConfig as JSON
    params          float64 flat parameter vector
    layout_digest   sha256 of the (name, offset, shape) layout table
    meta_json       free-form JSON (epoch, score, schedule, ...)
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .params import ModelConfig, ModelParams

FORMAT = "aimkp-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format=np.array(FORMAT),
            version=np.array(VERSION),
            config_json=np.array(json.dumps(params.config.to_dict(), sort_keys=True)),
            params=params.flat,
            layout_digest=np.array(params.layout.digest()),
            meta_json=np.array(json.dumps(meta or {}, sort_keys=True)),
        )


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            if "format" not in z or str(z["format"]) != FORMAT:
                raise CheckpointError(f"{path}: not an {FORMAT} file")
            version = int(z["version"])
            if version > VERSION:
                raise CheckpointError(f"{path}: version {version} is newer than {VERSION}")
            config = ModelConfig.from_dict(json.loads(str(z["config_json"])))
            params = ModelParams(config, np.array(z["params"]))
            digest = str(z["layout_digest"])
            meta = json.loads(str(z["meta_json"]))
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if digest != params.layout.digest():
        raise CheckpointError(f"{path}: layout digest mismatch")
    return params, meta
