"""Named parameter tensors with a frozen/trainable partition, plus checkpoint I/O."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class FrozenParamError(Exception):
    """An update targeted a frozen tensor."""


class ParamStore:
    """name -> (float64 array, frozen flag). Arrays are owned by the store."""

    def __init__(self):
        self._tensors: dict[str, np.ndarray] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, values, frozen: bool = False) -> None:
        if name in self._tensors:
            raise ValueError(f"parameter {name!r} already registered")
        self._tensors[name] = np.array(values, dtype=np.float64)
        self._frozen[name] = bool(frozen)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def get(self, name: str) -> np.ndarray:
        if name not in self._tensors:
            raise KeyError(f"unknown parameter {name!r}")
        return self._tensors[name]

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, flag: bool) -> None:
        if name not in self._tensors:
            raise KeyError(f"unknown parameter {name!r}")
        self._frozen[name] = bool(flag)

    def freeze_matching(self, *prefixes: str) -> None:
        for name in self._tensors:
            if any(name.startswith(p) for p in prefixes):
                self._frozen[name] = True

    def trainable_names(self) -> list[str]:
        return sorted(n for n, f in self._frozen.items() if not f)

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        picked = self.names() if names is None else list(names)
        return {n: self.get(n).copy() for n in picked}

    def apply_updates(self, updates: dict[str, np.ndarray], lr: float) -> None:
        """In-place gradient-descent step; rejects writes to frozen tensors."""
        for name, g in updates.items():
            if self._frozen.get(name, False):
                raise FrozenParamError(f"refusing to update frozen tensor {name!r}")
            arr = self.get(name)
            if arr.shape != np.shape(g):
                raise ValueError(f"update shape {np.shape(g)} does not match {name!r} {arr.shape}")
            arr -= lr * np.asarray(g, dtype=np.float64)


class ParamView:
    """A per-tape view of the store, optionally overlaying fast weights.

    Leaves are memoized so repeated lookups of one parameter share a single
    tape node (gradients accumulate correctly). Build a fresh view for every
    forward/backward pass.
    """

    def __init__(
        self,
        store: ParamStore,
        overrides: dict[str, np.ndarray] | None = None,
        leaves: dict[str, ad.Tensor] | None = None,
        detached: bool = False,
    ):
        self.store = store
        self.overrides = overrides or {}
        self._leaves: dict[str, ad.Tensor] = dict(leaves) if leaves else {}
        self.detached = detached  # forward-only view: no gradients anywhere

    def value(self, name: str) -> np.ndarray:
        if name in self.overrides:
            return self.overrides[name]
        return self.store.get(name)

    def leaf(self, name: str) -> ad.Tensor:
        t = self._leaves.get(name)
        if t is None:
            t = ad.Tensor(
                self.value(name),
                name=name,
                requires_grad=not self.detached and not self.store.is_frozen(name),
            )
            self._leaves[name] = t
        return t

    def grads(self, names) -> dict[str, np.ndarray]:
        """Collect gradients after backward; zeros for untouched parameters."""
        out = {}
        for n in names:
            t = self._leaves.get(n)
            if t is None or t.grad is None:
                out[n] = np.zeros_like(self.value(n))
            else:
                out[n] = t.grad
        return out


def save_checkpoint(store: ParamStore, path, config: dict) -> None:
    """Write all tensors, frozen flags and the config as versioned JSON."""
    tensors = {}
    for name in store.names():
        arr = store.get(name)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} contains non-finite values")
        tensors[name] = {
            "shape": list(arr.shape),
            "frozen": store.is_frozen(name),
            "data": arr.reshape(-1).tolist(),
        }
    payload = {"format_version": CHECKPOINT_VERSION, "config": config, "tensors": tensors}
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint file not found: {p}")
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint {p}: {e}") from e
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    store = ParamStore()
    for name, entry in payload["tensors"].items():
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r} data does not match shape {shape}")
        store.add(name, data.reshape(shape), frozen=bool(entry["frozen"]))
    return store, payload.get("config", {})


def check_shapes(store: ParamStore, expected: dict[str, tuple[int, ...]]) -> None:
    """Raise naming the first tensor whose shape disagrees with expectations."""
    for name, shape in sorted(expected.items()):
        if name not in store:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        actual = store.get(name).shape
        if tuple(actual) != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(actual)}, expected {tuple(shape)}"
            )
