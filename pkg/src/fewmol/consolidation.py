"""Embedding-table consolidation: Fisher importance estimates and quadratic penalties.

Three interchangeable penalties limit how far the embedding tables drift from
their pre-trained anchor during tuning: an unweighted quadratic (IM), an
elementwise Fisher-weighted quadratic (FIM), and a row-wise variant (EFIM)
that charges each row's summed displacement against one importance scalar.
Fisher estimates are per-sample expected squared gradients of the
pre-training loss, accumulated at batch size 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .params import ParamStore, ParamView

FISHER_VERSION = 1
PENALTY_MODES = ("none", "IM", "FIM", "EFIM")


class FisherError(Exception):
    pass


@dataclass
class FisherDiag:
    """Per-parameter (f_hat) and per-row (f_tilde) importance over stacked tables."""

    f_hat: np.ndarray  # (E, d)
    f_tilde: np.ndarray  # (E,)
    samples: int

    def __post_init__(self):
        if self.f_hat.ndim != 2 or self.f_tilde.shape != (self.f_hat.shape[0],):
            raise FisherError(f"inconsistent fisher shapes {self.f_hat.shape} / {self.f_tilde.shape}")
        if np.any(self.f_hat < 0.0):
            raise FisherError("fisher entries must be nonnegative")
        if np.max(np.abs(self.f_tilde - self.f_hat.sum(axis=1)), initial=0.0) > 1e-12:
            raise FisherError("f_tilde must equal the row sums of f_hat")


def stack_rows(store_like, table_names: Sequence[str]) -> np.ndarray:
    """Stack embedding tables into one (E, d) matrix in canonical order."""
    return np.concatenate([np.asarray(store_like[n] if isinstance(store_like, dict) else store_like.get(n)) for n in table_names], axis=0)


def table_offsets(store: ParamStore, table_names: Sequence[str]) -> list[tuple[str, int, int]]:
    out, off = [], 0
    for n in table_names:
        rows = store.get(n).shape[0]
        out.append((n, off, off + rows))
        off += rows
    return out


def estimate_fisher(
    store: ParamStore,
    table_names: Sequence[str],
    data: Iterable,
    per_sample_loss: Callable[[ParamView, object], ad.Tensor],
) -> FisherDiag:
    """Mean of squared per-sample gradients of the loss w.r.t. each table entry."""
    data = list(data)
    if not data:
        raise FisherError("fisher estimation needs a nonempty dataset")
    rows = table_offsets(store, table_names)
    e_total = rows[-1][2]
    d = store.get(table_names[0]).shape[1]
    acc = np.zeros((e_total, d))
    for sample in data:
        view = ParamView(store)
        root = per_sample_loss(view, sample)
        ad.backward(root)
        grads = view.grads(table_names)
        for name, lo, hi in rows:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise FisherError(f"non-finite gradient for {name!r} during fisher estimation")
            acc[lo:hi] += g * g
    f_hat = acc / len(data)
    return FisherDiag(f_hat=f_hat, f_tilde=f_hat.sum(axis=1), samples=len(data))


def penalty(
    mode: str,
    view: ParamView,
    anchor: dict[str, np.ndarray],
    table_names: Sequence[str],
    fisher: FisherDiag | None = None,
) -> ad.Tensor:
    """Differentiable consolidation penalty on the current embedding tables.

    The anchor holds the pre-trained values, snapshotted at tuning start and
    never updated. Returns a scalar tape node.
    """
    if mode not in PENALTY_MODES:
        raise ValueError(f"unknown penalty mode {mode!r}; expected one of {PENALTY_MODES}")
    if mode == "none":
        return ad.constant(np.zeros(()))
    if mode in ("FIM", "EFIM") and fisher is None:
        raise ValueError(f"penalty mode {mode} requires a fisher estimate")

    offsets = []
    off = 0
    for n in table_names:
        r = view.value(n).shape[0]
        offsets.append((n, off, off + r))
        off += r
    if fisher is not None and fisher.f_hat.shape[0] != off:
        raise ValueError(f"fisher has {fisher.f_hat.shape[0]} rows, tables stack to {off}")

    total: ad.Tensor | None = None
    for name, lo, hi in offsets:
        cur = view.leaf(name)
        anc = anchor[name]
        if cur.shape != anc.shape:
            raise ValueError(f"anchor shape mismatch for {name!r}: {anc.shape} vs {cur.shape}")
        disp = ad.add(cur, ad.scale(ad.constant(anc), -1.0))
        if mode == "IM":
            term = ad.sum_all(ad.mul(disp, disp))
        elif mode == "FIM":
            term = ad.sum_all(ad.mul(ad.constant(fisher.f_hat[lo:hi]), ad.mul(disp, disp)))
        else:  # EFIM
            rowdisp = ad.row_sum(disp)
            term = ad.sum_all(ad.mul(ad.constant(fisher.f_tilde[lo:hi]), ad.mul(rowdisp, rowdisp)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 0.5)


def penalty_value(
    mode: str,
    store: ParamStore,
    anchor: dict[str, np.ndarray],
    table_names: Sequence[str],
    fisher: FisherDiag | None = None,
) -> float:
    """Penalty as a plain number (for logs), no tape kept."""
    return float(penalty(mode, ParamView(store), anchor, table_names, fisher).data)


def save_fisher(fisher: FisherDiag, path) -> None:
    payload = {
        "format_version": FISHER_VERSION,
        "samples": fisher.samples,
        "rows": [
            {"f_hat": row.tolist(), "f_tilde": float(t)}
            for row, t in zip(fisher.f_hat, fisher.f_tilde)
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_fisher(path, expect_rows: int | None = None, expect_d: int | None = None) -> FisherDiag:
    p = Path(path)
    if not p.exists():
        raise FisherError(f"fisher file not found: {p}")
    payload = json.loads(p.read_text(encoding="utf-8"))
    if payload.get("format_version") != FISHER_VERSION:
        raise FisherError(f"unsupported fisher format_version {payload.get('format_version')!r}")
    rows = payload["rows"]
    if not rows:
        raise FisherError("fisher file has no rows")
    f_hat = np.array([r["f_hat"] for r in rows], dtype=np.float64)
    f_tilde = np.array([r["f_tilde"] for r in rows], dtype=np.float64)
    if expect_rows is not None and f_hat.shape[0] != expect_rows:
        raise FisherError(f"fisher has {f_hat.shape[0]} rows, expected {expect_rows}")
    if expect_d is not None and f_hat.shape[1] != expect_d:
        raise FisherError(f"fisher width {f_hat.shape[1]} does not match embedding width {expect_d}")
    return FisherDiag(f_hat=f_hat, f_tilde=f_tilde, samples=int(payload["samples"]))
