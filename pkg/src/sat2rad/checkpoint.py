"""Versioned checkpoint container shared by both training stages.

An HDF5 file holding one little-endian float32 dataset per named parameter
under ``/params``, plus file attributes: container version, a section tag
("stage1" or "stage2"), the training step count and a JSON snapshot of the
effective run configuration. Object creation times are disabled so identical
runs produce identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import h5py
import numpy as np
import torch

from . import h5io
from .errors import ArchiveError, ConfigurationError

CHECKPOINT_VERSION = 1
SECTIONS = ("stage1", "stage2")


def save_checkpoint(path, section: str, module: torch.nn.Module, config: dict, step: int) -> None:
    if section not in SECTIONS:
        raise ConfigurationError(f"unknown checkpoint section {section!r}")
    path = Path(path)
    state = module.state_dict()
    try:
        with h5io.create_file(path) as f:
            f.attrs["version"] = CHECKPOINT_VERSION
            f.attrs["section"] = section
            f.attrs["step"] = int(step)
            f.attrs["config"] = json.dumps(config, sort_keys=True)
            params = h5io.create_group(f, "params")
            for name, tensor in state.items():
                params.create_dataset(
                    name,
                    data=tensor.detach().cpu().numpy().astype("<f4"),
                    track_times=False,
                )
    except OSError as e:
        raise ArchiveError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path, section: str | None = None):
    """Returns (state_dict of float32 tensors, config dict, step)."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(
            f"checkpoint not found: {path} (run the corresponding train stage first)"
        )
    try:
        with h5py.File(path, "r") as f:
            found = str(f.attrs.get("section", ""))
            if section is not None and found != section:
                raise ConfigurationError(
                    f"checkpoint {path.name} holds section {found!r}, expected {section!r}"
                )
            config = json.loads(str(f.attrs.get("config", "{}")))
            step = int(f.attrs.get("step", 0))
            state = {
                name: torch.from_numpy(np.asarray(ds, dtype=np.float32))
                for name, ds in f["params"].items()
            }
    except OSError as e:
        raise ArchiveError(f"cannot read checkpoint {path}: {e}") from e
    return state, config, step
