"""Deterministic HDF5 creation.

HDF5 object headers record creation times by default (including on the root
group), which breaks bitwise reproducibility of otherwise identical files.
Every file and group this package writes goes through these helpers, which
disable time tracking at creation while keeping link order tracked.
"""

from __future__ import annotations

from pathlib import Path

import h5py


def create_file(path) -> h5py.File:
    """Like h5py.File(path, "w") but with object times disabled everywhere."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fcpl = h5py.h5p.create(h5py.h5p.FILE_CREATE)
    fcpl.set_obj_track_times(False)
    fcpl.set_link_creation_order(h5py.h5p.CRT_ORDER_TRACKED | h5py.h5p.CRT_ORDER_INDEXED)
    fid = h5py.h5f.create(str(path).encode(), h5py.h5f.ACC_TRUNC, fcpl=fcpl)
    return h5py.File(fid)


def create_group(parent, name: str) -> h5py.Group:
    """Create a subgroup with creation-time tracking disabled."""
    gcpl = h5py.h5p.create(h5py.h5p.GROUP_CREATE)
    gcpl.set_obj_track_times(False)
    gcpl.set_link_creation_order(h5py.h5p.CRT_ORDER_TRACKED | h5py.h5p.CRT_ORDER_INDEXED)
    gid = h5py.h5g.create(parent.id, name.encode(), gcpl=gcpl)
    return h5py.Group(gid)
