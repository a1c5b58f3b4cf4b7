"""Frozen-backbone molecular encoder: embedding layers, message passing, readout.

Atom features are embedded once; bond features are embedded per layer. Each
message-passing layer aggregates self + neighbor atom states plus incident
bond embeddings, applies a 2-layer MLP, batch norm, and ReLU. The molecule
representation is the mean of final-layer atom states. Aggregation is done
with constant 0/1 matrices so the whole episode batches into a few matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import smiles as sm
from .params import ParamStore, ParamView


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 300
    d1: int = 600
    n_layers: int = 5
    n_atomic: int = sm.N_ATOMIC
    n_chirality: int = sm.N_CHIRALITY
    n_bond_type: int = sm.N_BOND_TYPE
    n_bond_dir: int = sm.N_BOND_DIR

    def __post_init__(self):
        if self.d <= 0 or self.d1 <= 0 or self.n_layers <= 0:
            raise ValueError("d, d1 and n_layers must be positive")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "d1": self.d1,
            "n_layers": self.n_layers,
            "n_atomic": self.n_atomic,
            "n_chirality": self.n_chirality,
            "n_bond_type": self.n_bond_type,
            "n_bond_dir": self.n_bond_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})


MASK_NAME = "emb.mask"


def atom_table_names(config: EncoderConfig) -> list[str]:
    return ["emb.atom.0", "emb.atom.1"]


def bond_table_names(config: EncoderConfig) -> list[str]:
    names = []
    for l in range(config.n_layers):
        names += [f"emb.bond.l{l}.0", f"emb.bond.l{l}.1"]
    return names


def embedding_table_names(config: EncoderConfig) -> list[str]:
    """Stacked-embedding order: atom tables first, then bond tables by layer."""
    return atom_table_names(config) + bond_table_names(config)


def init_encoder_params(store: ParamStore, config: EncoderConfig, rng: np.random.Generator) -> None:
    """Register embedding, message-passing and mask tensors with fresh values."""
    d, d1 = config.d, config.d1
    store.add("emb.atom.0", rng.normal(0.0, 0.1, size=(config.n_atomic, d)))
    store.add("emb.atom.1", rng.normal(0.0, 0.1, size=(config.n_chirality, d)))
    for l in range(config.n_layers):
        store.add(f"emb.bond.l{l}.0", rng.normal(0.0, 0.1, size=(config.n_bond_type, d)))
        store.add(f"emb.bond.l{l}.1", rng.normal(0.0, 0.1, size=(config.n_bond_dir, d)))
        store.add(f"mp.layer{l}.w1", rng.normal(0.0, np.sqrt(2.0 / d), size=(d, d1)))
        store.add(f"mp.layer{l}.b1", np.zeros(d1))
        store.add(f"mp.layer{l}.w2", rng.normal(0.0, np.sqrt(2.0 / d1), size=(d1, d)))
        store.add(f"mp.layer{l}.b2", np.zeros(d))
        store.add(f"mp.layer{l}.bn.gamma", np.ones(d))
        store.add(f"mp.layer{l}.bn.beta", np.zeros(d))
        store.add(f"mp.layer{l}.bn.running_mean", np.zeros(d))
        store.add(f"mp.layer{l}.bn.running_var", np.ones(d))
    store.add(MASK_NAME, rng.normal(0.0, 0.1, size=(d,)))


def expected_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, d1 = config.d, config.d1
    shapes: dict[str, tuple[int, ...]] = {
        "emb.atom.0": (config.n_atomic, d),
        "emb.atom.1": (config.n_chirality, d),
        MASK_NAME: (d,),
    }
    for l in range(config.n_layers):
        shapes[f"emb.bond.l{l}.0"] = (config.n_bond_type, d)
        shapes[f"emb.bond.l{l}.1"] = (config.n_bond_dir, d)
        shapes[f"mp.layer{l}.w1"] = (d, d1)
        shapes[f"mp.layer{l}.b1"] = (d1,)
        shapes[f"mp.layer{l}.w2"] = (d1, d)
        shapes[f"mp.layer{l}.b2"] = (d,)
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"mp.layer{l}.bn.{suffix}"] = (d,)
    return shapes


class BatchGraph:
    """Constant matrices for one batch of molecules laid out atom-contiguously."""

    def __init__(self, feats: list[sm.Featurized]):
        if not feats:
            raise ValueError("empty batch")
        offsets = np.cumsum([0] + [f.atom_idx.shape[0] for f in feats])
        n = int(offsets[-1])
        self.n_atoms = n
        self.n_mols = len(feats)
        self.atom_idx = np.concatenate([f.atom_idx for f in feats], axis=0)
        self.bond_idx = np.concatenate([f.bond_idx for f in feats], axis=0)
        src = np.concatenate([f.bond_src + off for f, off in zip(feats, offsets)])
        dst = np.concatenate([f.bond_dst + off for f, off in zip(feats, offsets)])
        self.n_bonds = int(src.shape[0])

        a_self = np.eye(n)
        a_self[dst, src] += 1.0
        self.a_self = a_self  # rows: receiving atom; includes the self term

        minc = np.zeros((n, self.n_bonds))
        if self.n_bonds:
            minc[dst, np.arange(self.n_bonds)] = 1.0
        self.minc = minc

        readout = np.zeros((self.n_mols, n))
        for m, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
            readout[m, lo:hi] = 1.0 / (hi - lo)
        self.readout = readout  # mean over each molecule's atoms

        self.mol_of_atom = np.concatenate(
            [np.full(f.atom_idx.shape[0], m, dtype=np.int64) for m, f in enumerate(feats)]
        )


@dataclass
class EncodeOutput:
    h_m: ad.Tensor  # (n_mols, d) molecule representations
    atom_final: ad.Tensor  # (n_atoms, d) final-layer atom states
    atom_layers: list[ad.Tensor] = field(default_factory=list)  # all layers when requested


def embed_atoms(view: ParamView, batch: BatchGraph, masked: np.ndarray | None = None) -> ad.Tensor:
    """Initial atom states: the sum of per-family embedding rows (layer 0 only).

    ``masked`` optionally replaces the embeddings of flagged atoms with the
    learned mask vector (used by masked-atom pre-training).
    """
    h = ad.add(
        ad.gather(view.leaf("emb.atom.0"), batch.atom_idx[:, 0]),
        ad.gather(view.leaf("emb.atom.1"), batch.atom_idx[:, 1]),
    )
    if masked is not None and masked.any():
        keep = ad.constant(np.where(masked, 0.0, 1.0)[:, None] * np.ones((1, h.shape[1])))
        put = ad.constant(np.where(masked, 1.0, 0.0)[:, None] * np.ones((1, h.shape[1])))
        mask_rows = ad.broadcast_rows(view.leaf(MASK_NAME), batch.n_atoms)
        h = ad.add(ad.mul(h, keep), ad.mul(mask_rows, put))
    return h


def embed_bonds(view: ParamView, batch: BatchGraph, layer: int) -> ad.Tensor | None:
    """Per-layer bond states; None when the batch has no bonds."""
    if batch.n_bonds == 0:
        return None
    return ad.add(
        ad.gather(view.leaf(f"emb.bond.l{layer}.0"), batch.bond_idx[:, 0]),
        ad.gather(view.leaf(f"emb.bond.l{layer}.1"), batch.bond_idx[:, 1]),
    )


def message_passing_layer(
    view: ParamView,
    layer: int,
    h: ad.Tensor,
    h_bonds: ad.Tensor | None,
    batch: BatchGraph,
    mode: str,
    adapter=None,
    context_rows=None,
) -> ad.Tensor:
    """One layer: aggregate, MLP, batch norm, ReLU, then an optional adapter."""
    agg = ad.matmul(ad.constant(batch.a_self), h)
    if h_bonds is not None:
        agg = ad.add(agg, ad.matmul(ad.constant(batch.minc), h_bonds))
    n = agg.shape[0]
    u = ad.add(ad.matmul(agg, view.leaf(f"mp.layer{layer}.w1")), ad.broadcast_rows(view.leaf(f"mp.layer{layer}.b1"), n))
    u = ad.relu(u)
    u = ad.add(ad.matmul(u, view.leaf(f"mp.layer{layer}.w2")), ad.broadcast_rows(view.leaf(f"mp.layer{layer}.b2"), n))
    state = ad.BatchNormState(
        view.store.get(f"mp.layer{layer}.bn.running_mean"),
        view.store.get(f"mp.layer{layer}.bn.running_var"),
    )
    u = ad.batch_norm(u, view.leaf(f"mp.layer{layer}.bn.gamma"), view.leaf(f"mp.layer{layer}.bn.beta"), state, mode)
    out = ad.relu(u)
    if adapter is not None:
        from .adapter import adapter_forward  # local import to avoid a cycle

        out = adapter_forward(view, layer, out, context_rows, adapter.config)
    return out


def encode_batch(
    view: ParamView,
    batch: BatchGraph,
    mode: str = "eval",
    adapters=None,
    context_rows=None,
    masked: np.ndarray | None = None,
    keep_layers: bool = False,
) -> EncodeOutput:
    """Full stack over a batch; h_m is the per-molecule mean of final atom states."""
    n_layers = _n_layers_of(view.store)
    if adapters is not None and adapters.n_layers != n_layers:
        raise ValueError(f"adapter stack has {adapters.n_layers} layers, encoder has {n_layers}")
    h = embed_atoms(view, batch, masked=masked)
    layers = [h]
    for l in range(n_layers):
        hb = embed_bonds(view, batch, l)
        h = message_passing_layer(view, l, h, hb, batch, mode, adapter=adapters, context_rows=context_rows)
        if keep_layers:
            layers.append(h)
    h_m = ad.matmul(ad.constant(batch.readout), h)
    return EncodeOutput(h_m=h_m, atom_final=h, atom_layers=layers if keep_layers else [])


def _n_layers_of(store: ParamStore) -> int:
    n = 0
    while f"mp.layer{n}.w1" in store:
        n += 1
    if n == 0:
        raise ValueError("store contains no message-passing layers")
    return n


def encode_molecule(view: ParamView, feat: sm.Featurized, mode: str = "eval", adapters=None, context_rows=None) -> EncodeOutput:
    return encode_batch(view, BatchGraph([feat]), mode=mode, adapters=adapters, context_rows=context_rows)


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterReport:
    """Trainable-parameter accounting for full fine-tuning vs adapter tuning."""

    tuning_mode: str
    context_enabled: bool
    d: int
    d1: int
    d2: int
    n_layers: int
    message_passing_full: int  # L(2*d*d1 + d1 + 3d), trainable only under full FT
    message_passing_trainable: int
    adapter_trainable: int
    adapter_formula_no_context: int  # L(2*d*d2 + d2 + 3d)
    adapter_context_extra: int  # widening of the down-projection input by 2*d2
    embedding_trainable_exact: int  # true vocabulary sizes times d
    embedding_formula_families: int  # per-family placeholder: |E_n|d + L|E_e|d
    delta_n: int  # (d1 - d2) * L * (2d + 1)

    def lines(self) -> list[str]:
        ctx = "context-conditioned" if self.context_enabled else "no context"
        return [
            f"tuning mode: {self.tuning_mode} ({ctx}), d={self.d} d1={self.d1} d2={self.d2} L={self.n_layers}",
            f"message-passing trainable: {self.message_passing_trainable:,} (full fine-tuning: {self.message_passing_full:,})",
            f"adapter trainable: {self.adapter_trainable:,} (closed form, no context: {self.adapter_formula_no_context:,}; context widening adds {self.adapter_context_extra:,})",
            f"embedding trainable, exact vocabularies: {self.embedding_trainable_exact:,}",
            f"embedding, per-family formula value: {self.embedding_formula_families:,}",
            f"saved vs full fine-tuning (delta N): {self.delta_n:,}",
        ]


def count_parameters(config: EncoderConfig, d2: int, tuning_mode: str, context_enabled: bool) -> ParameterReport:
    if tuning_mode not in ("full", "pin"):
        raise ValueError(f"tuning_mode must be 'full' or 'pin', got {tuning_mode!r}")
    d, d1, L = config.d, config.d1, config.n_layers
    mp_full = L * (2 * d * d1 + d1 + 3 * d)
    adapter_plain = L * (2 * d * d2 + d2 + 3 * d)
    down_in = d + 2 * d2 if context_enabled else d
    adapter_actual = L * (down_in * d2 + d2 + d2 * d + d + 2 * d)
    emb_exact = (config.n_atomic + config.n_chirality) * d + L * (config.n_bond_type + config.n_bond_dir) * d
    emb_formula = 2 * d + L * 2 * d
    if tuning_mode == "full":
        mp_trainable, adapter_trainable = mp_full, 0
    else:
        mp_trainable, adapter_trainable = 0, adapter_actual
    return ParameterReport(
        tuning_mode=tuning_mode,
        context_enabled=context_enabled,
        d=d,
        d1=d1,
        d2=d2,
        n_layers=L,
        message_passing_full=mp_full,
        message_passing_trainable=mp_trainable,
        adapter_trainable=adapter_trainable,
        adapter_formula_no_context=adapter_plain,
        adapter_context_extra=adapter_actual - adapter_plain if tuning_mode == "pin" else 0,
        embedding_trainable_exact=emb_exact,
        embedding_formula_families=emb_formula,
        delta_n=(d1 - d2) * L * (2 * d + 1),
    )


def freeze_for_tuning(store: ParamStore) -> None:
    """Mark the pre-trained backbone untouchable: message passing, BN statistics,
    the mask vector and the pre-training head. Embedding tables stay trainable."""
    store.freeze_matching("mp.", MASK_NAME, "pretrain_head.")
