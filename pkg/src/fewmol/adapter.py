"""Bottleneck residual adapters inserted after each message-passing layer.

Each adapter downscales the layer output (optionally concatenated with the
episode's molecule and property context vectors) to width d2, applies ReLU,
upscales back to d, adds the skip connection, and layer-normalizes. The
up-projection starts at exactly zero so a fresh adapter is a no-op up to the
final layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ParamStore, ParamView

INIT_SIGMA = 1e-4


@dataclass(frozen=True)
class AdapterConfig:
    d: int
    d2: int = 50
    context_enabled: bool = True

    def __post_init__(self):
        if not 0 < self.d2 < self.d:
            raise ValueError(f"bottleneck width d2={self.d2} must satisfy 0 < d2 < d={self.d}")

    @property
    def down_in(self) -> int:
        return self.d + 2 * self.d2 if self.context_enabled else self.d


def layer_param_names(layer: int) -> list[str]:
    base = f"adapter.layer{layer}"
    return [f"{base}.down.w", f"{base}.down.b", f"{base}.up.w", f"{base}.up.b",
            f"{base}.ln.gamma", f"{base}.ln.beta"]


def init_adapter_params(store: ParamStore, config: AdapterConfig, n_layers: int, rng: np.random.Generator) -> None:
    """Near-zero initialization: small-noise down path, exactly-zero up path."""
    for l in range(n_layers):
        base = f"adapter.layer{l}"
        store.add(f"{base}.down.w", rng.normal(0.0, INIT_SIGMA, size=(config.down_in, config.d2)))
        store.add(f"{base}.down.b", rng.normal(0.0, INIT_SIGMA, size=(config.d2,)))
        store.add(f"{base}.up.w", np.zeros((config.d2, config.d)))
        store.add(f"{base}.up.b", np.zeros(config.d))
        store.add(f"{base}.ln.gamma", np.ones(config.d))
        store.add(f"{base}.ln.beta", np.zeros(config.d))


class AdapterStack:
    """Handle routing encoder layer outputs through per-layer adapters."""

    def __init__(self, config: AdapterConfig, n_layers: int):
        self.config = config
        self.n_layers = n_layers


def attach(store: ParamStore, n_layers: int, config: AdapterConfig) -> AdapterStack:
    """Validate that exactly one parameter set per encoder layer is registered."""
    for l in range(n_layers):
        for name in layer_param_names(l):
            if name not in store:
                raise ValueError(f"missing adapter tensor {name!r}; expected {n_layers} adapter layers")
    if f"adapter.layer{n_layers}.down.w" in store:
        raise ValueError(f"store has more than {n_layers} adapter layers")
    expect = (config.down_in, config.d2)
    got = store.get("adapter.layer0.down.w").shape
    if tuple(got) != expect:
        raise ValueError(f"adapter down-projection shape {got} does not match config {expect}")
    return AdapterStack(config, n_layers)


def adapter_forward(
    view: ParamView,
    layer: int,
    h: ad.Tensor,
    context_rows: tuple[ad.Tensor, ad.Tensor] | None,
    config: AdapterConfig,
) -> ad.Tensor:
    """h-tilde = LayerNorm(h + up(relu(down(h || c_m || c_p))))."""
    base = f"adapter.layer{layer}"
    n = h.shape[0]
    if config.context_enabled:
        if context_rows is None:
            raise ValueError("adapter is context-conditioned but no context was supplied")
        cm, cp = context_rows
        if cm.shape != (n, config.d2) or cp.shape != (n, config.d2):
            raise ValueError(
                f"context rows must be ({n}, {config.d2}), got {cm.shape} and {cp.shape}"
            )
        z_in = ad.concat([h, cm, cp])
    else:
        z_in = h
    z = ad.add(ad.matmul(z_in, view.leaf(f"{base}.down.w")), ad.broadcast_rows(view.leaf(f"{base}.down.b"), n))
    delta = ad.add(
        ad.matmul(ad.relu(z), view.leaf(f"{base}.up.w")),
        ad.broadcast_rows(view.leaf(f"{base}.up.b"), n),
    )
    return ad.layer_norm(ad.add(h, delta), view.leaf(f"{base}.ln.gamma"), view.leaf(f"{base}.ln.beta"))


def adapter_delta(view: ParamView, layer: int, h: ad.Tensor, context_rows, config: AdapterConfig) -> ad.Tensor:
    """The residual increment alone (before skip and normalization); test hook."""
    base = f"adapter.layer{layer}"
    n = h.shape[0]
    z_in = ad.concat([h, *context_rows]) if config.context_enabled else h
    z = ad.add(ad.matmul(z_in, view.leaf(f"{base}.down.w")), ad.broadcast_rows(view.leaf(f"{base}.down.b"), n))
    return ad.add(
        ad.matmul(ad.relu(z), view.leaf(f"{base}.up.w")),
        ad.broadcast_rows(view.leaf(f"{base}.up.b"), n),
    )
