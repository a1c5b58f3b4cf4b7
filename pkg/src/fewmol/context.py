"""Per-episode molecule-property context graph and its message-passing encoder.

The graph is bipartite: molecule nodes (support + query) on one side,
property nodes (target first, then the seen training properties) on the
other. Edge types carry what is known: positive-label, negative-label, and a
target-query marker connecting each query molecule to the target property.
Query molecules' labels on the target property are never read, so nothing
about the prediction targets can leak through the context.

The encoder runs two rounds of typed linear message passing over the two
node blocks and returns the context matrix C; rows are molecule contexts
(c_m) and property contexts (c_p).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset, Episode, LABEL_MISSING, LABEL_POS
from .params import ParamStore, ParamView

EDGE_POSITIVE = 0
EDGE_NEGATIVE = 1
EDGE_TARGET_QUERY = 2
N_EDGE_TYPES = 3
N_CONTEXT_LAYERS = 2


@dataclass(frozen=True)
class ContextGraph:
    """Immutable episode context; mol/prop node order is the extraction map."""

    target: int
    mol_indices: tuple[int, ...]  # dataset molecule indices, support then query
    prop_indices: tuple[int, ...]  # dataset property indices, target first
    blocks: np.ndarray  # (3, n_mols, n_props) 0/1 incidence per edge type

    @property
    def n_mols(self) -> int:
        return len(self.mol_indices)

    @property
    def n_props(self) -> int:
        return len(self.prop_indices)

    @property
    def n_nodes(self) -> int:
        return self.n_mols + self.n_props

    @property
    def n_edges(self) -> int:
        return int(self.blocks.sum())

    def mol_position(self, dataset_index: int) -> int:
        try:
            return self.mol_indices.index(dataset_index)
        except ValueError:
            raise KeyError(f"molecule {dataset_index} is not part of this episode") from None

    def prop_position(self, prop_index: int) -> int:
        try:
            return self.prop_indices.index(prop_index)
        except ValueError:
            raise KeyError(f"property {prop_index} is not part of this episode") from None


def build_context_graph(episode: Episode, dataset: Dataset, seen_properties: list[int]) -> ContextGraph:
    """Assemble typed molecule-property edges from the episode's known labels."""
    if episode.target in seen_properties:
        raise ValueError(f"target property {episode.target} must not be in the seen set")
    for p in seen_properties:
        if p not in dataset.train_properties:
            raise ValueError(f"seen property {p} is not a training property")

    mol_indices = tuple(int(i) for i in np.concatenate([episode.support_indices, episode.query_indices]))
    prop_indices = (int(episode.target),) + tuple(int(p) for p in seen_properties)
    n_mols, n_props = len(mol_indices), len(prop_indices)
    blocks = np.zeros((N_EDGE_TYPES, n_mols, n_props))

    n_support = len(episode.support_indices)
    for pos, label in enumerate(episode.support_labels):
        etype = EDGE_POSITIVE if label == LABEL_POS else EDGE_NEGATIVE
        blocks[etype, pos, 0] = 1.0
    for q in range(n_support, n_mols):
        blocks[EDGE_TARGET_QUERY, q, 0] = 1.0

    for col, p in enumerate(prop_indices[1:], start=1):
        col_labels = dataset.labels[list(mol_indices), p]
        for row, lab in enumerate(col_labels):
            if lab == LABEL_MISSING:
                continue
            etype = EDGE_POSITIVE if lab == LABEL_POS else EDGE_NEGATIVE
            blocks[etype, row, col] = 1.0

    return ContextGraph(target=int(episode.target), mol_indices=mol_indices,
                        prop_indices=prop_indices, blocks=blocks)


@dataclass
class ContextBundle:
    """Encoded context rows plus the node-to-row extraction map."""

    graph: ContextGraph
    c_mol: ad.Tensor  # (n_mols, d2)
    c_prop: ad.Tensor  # (n_props, d2)

    @property
    def matrix(self) -> np.ndarray:
        """The full (n_mols + n_props) x d2 context matrix as plain values."""
        return np.concatenate([self.c_mol.data, self.c_prop.data], axis=0)

    def extract(self, molecule_index: int, prop_index: int) -> tuple[np.ndarray, np.ndarray]:
        """(c_m, c_p) value rows for one molecule and one property."""
        return (
            self.c_mol.data[self.graph.mol_position(molecule_index)].copy(),
            self.c_prop.data[self.graph.prop_position(prop_index)].copy(),
        )


def init_context_params(store: ParamStore, d: int, d2: int, n_properties: int, rng: np.random.Generator) -> None:
    """Molecule feature projector, property embedding table, and 2 typed layers."""
    store.add("context.mol_proj.w", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d2)))
    store.add("context.mol_proj.b", np.zeros(d2))
    store.add("context.prop_emb", rng.normal(0.0, 0.1, size=(n_properties, d2)))
    for k in range(N_CONTEXT_LAYERS):
        store.add(f"context.layer{k}.self.w", rng.normal(0.0, 1.0 / np.sqrt(d2), size=(d2, d2)))
        store.add(f"context.layer{k}.self.b", np.zeros(d2))
        for t in range(N_EDGE_TYPES):
            store.add(f"context.layer{k}.type{t}.w", rng.normal(0.0, 1.0 / np.sqrt(d2), size=(d2, d2)))


def context_param_names(n_properties_unused: int = 0) -> list[str]:
    names = ["context.mol_proj.w", "context.mol_proj.b", "context.prop_emb"]
    for k in range(N_CONTEXT_LAYERS):
        names.append(f"context.layer{k}.self.w")
        names.append(f"context.layer{k}.self.b")
        names += [f"context.layer{k}.type{t}.w" for t in range(N_EDGE_TYPES)]
    return names


def _row_normalized(block: np.ndarray) -> np.ndarray:
    deg = block.sum(axis=1, keepdims=True)
    return block / np.maximum(deg, 1.0)


def encode_context(view: ParamView, graph: ContextGraph, mol_features: np.ndarray) -> ContextBundle:
    """Two typed message-passing rounds over the bipartite context graph.

    ``mol_features`` are the plain-encoder molecule representations (treated
    as constants here; gradient flows into the projector and the layers, not
    back into the molecular encoder).
    """
    if mol_features.shape[0] != graph.n_mols:
        raise ValueError(f"got {mol_features.shape[0]} molecule features for {graph.n_mols} nodes")
    d2 = view.value("context.mol_proj.w").shape[1]

    xm = ad.add(
        ad.matmul(ad.constant(mol_features), view.leaf("context.mol_proj.w")),
        ad.broadcast_rows(view.leaf("context.mol_proj.b"), graph.n_mols),
    )
    xp = ad.gather(view.leaf("context.prop_emb"), np.array(graph.prop_indices, dtype=np.int64))

    for k in range(N_CONTEXT_LAYERS):
        w_self = view.leaf(f"context.layer{k}.self.w")
        b_self = view.leaf(f"context.layer{k}.self.b")
        to_mol = ad.add(ad.matmul(xm, w_self), ad.broadcast_rows(b_self, graph.n_mols))
        to_prop = ad.add(ad.matmul(xp, w_self), ad.broadcast_rows(b_self, graph.n_props))
        for t in range(N_EDGE_TYPES):
            w_t = view.leaf(f"context.layer{k}.type{t}.w")
            block = graph.blocks[t]
            if not block.any():
                continue
            # mean over same-type neighbors keeps feature scale independent of
            # episode size (the eval query side can be two orders larger)
            to_mol = ad.add(to_mol, ad.matmul(ad.constant(_row_normalized(block)), ad.matmul(xp, w_t)))
            to_prop = ad.add(to_prop, ad.matmul(ad.constant(_row_normalized(block.T)), ad.matmul(xm, w_t)))
        xm = ad.relu(to_mol)
        xp = ad.relu(to_prop)

    if xm.shape[1] != d2:
        raise ValueError(f"context width mismatch: {xm.shape[1]} vs {d2}")
    return ContextBundle(graph=graph, c_mol=xm, c_prop=xp)
