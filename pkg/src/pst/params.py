"""Parameter containers, initialization, and tree utilities.

Parameter bundles are plain mutable dataclasses holding numpy arrays.
Fields whose name starts with ``running_`` are buffers: they are saved in
checkpoints but never receive gradients. Every utility here walks bundles
in deterministic field order, so the dotted names it produces are stable
across runs and are used both for checkpoints and gradient reports.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError


@dataclass
class BatchNormState:
    """Learned affine plus running statistics for one normalization site."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @staticmethod
    def create(channels: int, dtype=np.float32) -> "BatchNormState":
        return BatchNormState(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def kaiming(rng: np.random.Generator, out_dim: int, in_dim: int, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled normal init for a [out, in] weight."""
    std = np.sqrt(2.0 / in_dim)
    return rng.normal(0.0, std, size=(out_dim, in_dim)).astype(dtype)


def kaiming_depthwise(rng: np.random.Generator, channels: int, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled init for a [C, 7, 7] depthwise kernel (fan-in 49)."""
    std = np.sqrt(2.0 / 49.0)
    return rng.normal(0.0, std, size=(channels, 7, 7)).astype(dtype)


def _is_buffer(field_name: str) -> bool:
    return field_name.startswith("running_")


def map_arrays(obj, fn: Callable[[str, np.ndarray, bool], np.ndarray], prefix: str = ""):
    """Rebuild a parameter tree, replacing each array by ``fn(name, arr, is_buffer)``.

    Handles dataclasses, lists, tuples, dicts, and arrays; anything else is
    returned untouched. The replacement need not be an ndarray, which lets
    the autodiff module lift arrays into tape leaves.
    """
    if isinstance(obj, np.ndarray):
        return fn(prefix, obj, False)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {}
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(val, np.ndarray):
                changes[f.name] = fn(name, val, _is_buffer(f.name))
            else:
                changes[f.name] = map_arrays(val, fn, name)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, (list, tuple)):
        items = [map_arrays(v, fn, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj)]
        return type(obj)(items) if isinstance(obj, list) else tuple(items)
    if isinstance(obj, dict):
        return {k: map_arrays(v, fn, f"{prefix}.{k}" if prefix else str(k)) for k, v in obj.items()}
    return obj


def named_arrays(obj, include_buffers: bool = True) -> dict[str, np.ndarray]:
    """Flatten a parameter tree into ``dotted name -> array``."""
    out: dict[str, np.ndarray] = {}

    def visit(name, arr, is_buffer):
        if include_buffers or not is_buffer:
            out[name] = arr
        return arr

    map_arrays(obj, visit)
    return out


def learnable_arrays(obj) -> dict[str, np.ndarray]:
    """Like :func:`named_arrays` but without running-statistic buffers."""
    return named_arrays(obj, include_buffers=False)


def assign_arrays(obj, values: dict[str, np.ndarray]) -> None:
    """Copy ``values`` into an existing tree in place, matching by name."""
    current = named_arrays(obj)
    for name, arr in values.items():
        if name not in current:
            raise KeyError(f"no parameter named {name!r} in target tree")
        dst = current[name]
        if dst.shape != arr.shape:
            raise DimensionError(
                f"parameter {name!r} has shape {dst.shape}, checkpoint holds {arr.shape}")
        dst[...] = arr.astype(dst.dtype, copy=False)
