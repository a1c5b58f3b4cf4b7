"""Synthetic molecule generator for end-to-end runs without external data.

Molecules are random strings from the supported SMILES subset (grammatical by
construction; no valence checking, which the parser doesn't do either).
Properties are presence tests for hand-chosen structural motifs, so every
label is computable from the graph and the task is genuinely learnable by a
message-passing encoder.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import smiles as sm
from .data import DataError

_Z = {name: sm.SYMBOL_TO_Z[name] - 1 for name in ("N", "O", "S", "F", "Cl", "Br", "I", "C", "P")}


def has_nitrogen(m: sm.MolGraph) -> bool:
    return any(a.atomic_number_index == _Z["N"] for a in m.atoms)


def has_oxygen(m: sm.MolGraph) -> bool:
    return any(a.atomic_number_index == _Z["O"] for a in m.atoms)


def has_carbonyl(m: sm.MolGraph) -> bool:
    """A C=O double bond."""
    for i, j, f in m.bonds:
        if f.bond_type_index == sm.BOND_DOUBLE:
            zs = {m.atoms[i].atomic_number_index, m.atoms[j].atomic_number_index}
            if zs == {_Z["C"], _Z["O"]}:
                return True
    return False


def has_triangle(m: sm.MolGraph) -> bool:
    """A ring of size 3."""
    nbrs = [set(ns) for ns in m.neighbors()]
    return any(nbrs[i] & nbrs[j] for i, j, _ in m.bonds)


def has_aromatic(m: sm.MolGraph) -> bool:
    return any(f.bond_type_index == sm.BOND_AROMATIC for _, _, f in m.bonds)


def has_halogen(m: sm.MolGraph) -> bool:
    halos = {_Z["F"], _Z["Cl"], _Z["Br"], _Z["I"]}
    return any(a.atomic_number_index in halos for a in m.atoms)


def has_triple_bond(m: sm.MolGraph) -> bool:
    return any(f.bond_type_index == sm.BOND_TRIPLE for _, _, f in m.bonds)


def has_sulfur(m: sm.MolGraph) -> bool:
    return any(a.atomic_number_index == _Z["S"] for a in m.atoms)


def has_branch(m: sm.MolGraph) -> bool:
    """An atom of degree three or more."""
    return any(len(ns) >= 3 for ns in m.neighbors())


def has_ring(m: sm.MolGraph) -> bool:
    """Any cycle: more bonds than a spanning forest can hold."""
    parent = list(range(m.n_atoms))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j, _ in m.bonds:
        ri, rj = find(i), find(j)
        if ri == rj:
            return True
        parent[ri] = rj
    return False


MOTIF_PROPERTIES = [
    ("has_nitrogen", has_nitrogen),
    ("has_oxygen", has_oxygen),
    ("has_carbonyl", has_carbonyl),
    ("has_triangle", has_triangle),
    ("has_aromatic", has_aromatic),
    ("has_halogen", has_halogen),
    ("has_triple_bond", has_triple_bond),
    ("has_sulfur", has_sulfur),
    ("has_branch", has_branch),
    ("has_ring", has_ring),
]
TRAIN_PROPERTY_INDICES = list(range(8))
TEST_PROPERTY_INDICES = [8, 9]

_CHAIN_ATOMS = ["C", "N", "O", "S", "P", "F", "Cl", "Br"]
_CHAIN_WEIGHTS = np.array([0.55, 0.11, 0.12, 0.05, 0.03, 0.05, 0.05, 0.04])
_BRANCHES = ["C", "O", "N", "=O", "=O", "CC", "C#N", "Cl", "F", "c9ccccc9", "C(=O)O"]
_BRANCH_WEIGHTS = np.array([0.16, 0.08, 0.08, 0.14, 0.14, 0.08, 0.08, 0.06, 0.06, 0.06, 0.06])
_AROMATIC_TAILS = ["c9ccccc9", "c9ccncc9", "c9ccsc9"]


def random_smiles(rng: np.random.Generator) -> str:
    """One grammatical SMILES-subset string: a chain with optional ring,
    branches, multiple bonds, and an optional aromatic tail."""
    n_main = int(rng.integers(3, 10))
    out: list[str] = []
    ring: list[int] | None = None  # [digit, remaining main atoms until close]
    for i in range(n_main):
        if i > 0:
            r = rng.random()
            out.append("=" if r < 0.10 else "#" if r < 0.16 else "")
        out.append(str(rng.choice(_CHAIN_ATOMS, p=_CHAIN_WEIGHTS)))
        if ring is None and n_main - i >= 3 and rng.random() < 0.28:
            size = int(rng.choice([3, 4, 5, 6], p=[0.34, 0.22, 0.24, 0.20]))
            size = min(size, n_main - i)
            ring = [1, size - 1]
            out.append("1")
        elif ring is not None:
            ring[1] -= 1
            if ring[1] == 0:
                out.append(str(ring[0]))
                ring = None
        if i > 0 and rng.random() < 0.30:
            out.append("(" + str(rng.choice(_BRANCHES, p=_BRANCH_WEIGHTS)) + ")")
    if rng.random() < 0.18:
        out.append(str(rng.choice(_AROMATIC_TAILS)))
    return "".join(out)


def generate_synthetic_dataset(n_molecules: int, seed: int, min_per_class: int | None = None):
    """Distinct random molecules with per-property class balance guarantees.

    Returns (smiles list, label matrix). Drawing is greedy: once the pool is
    half full, a candidate must improve some under-represented class.
    """
    if min_per_class is None:
        min_per_class = max(10, n_molecules // 10)
    rng = np.random.default_rng(seed)
    preds = [p for _, p in MOTIF_PROPERTIES]
    n_props = len(preds)
    accepted: list[str] = []
    label_rows: list[np.ndarray] = []
    seen: set[str] = set()
    counts = np.zeros((n_props, 2), dtype=np.int64)  # per property: [neg, pos]

    max_attempts = 400 * n_molecules
    for _ in range(max_attempts):
        if len(accepted) >= n_molecules:
            break
        text = random_smiles(rng)
        if text in seen:
            continue
        mol = sm.parse_smiles(text)
        row = np.array([1 if f(mol) else 0 for f in preds], dtype=np.int8)
        if len(accepted) >= n_molecules // 2 and (counts < min_per_class).any():
            helps_deficit = counts[np.arange(n_props), row] < min_per_class
            if not helps_deficit.any():
                continue
        seen.add(text)
        accepted.append(text)
        label_rows.append(row)
        counts[np.arange(n_props), row] += 1

    if len(accepted) < n_molecules:
        raise DataError(
            f"could not generate {n_molecules} balanced molecules "
            f"(got {len(accepted)}; class counts {counts.tolist()})"
        )
    if (counts < min_per_class).any():
        short = [MOTIF_PROPERTIES[i][0] for i in range(n_props) if counts[i].min() < min_per_class]
        raise DataError(f"class balance target missed for {short}; counts {counts.tolist()}")
    return accepted, np.stack(label_rows)


def write_synthetic_files(n_molecules: int, seed: int, data_path, tasks_path) -> dict:
    """Emit the JSONL data file and tasks file; returns summary counts."""
    texts, labels = generate_synthetic_dataset(n_molecules, seed)
    lines = [
        json.dumps({"smiles": t, "labels": [int(v) for v in row]}, sort_keys=True)
        for t, row in zip(texts, labels)
    ]
    Path(data_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    tasks = {
        "properties": [name for name, _ in MOTIF_PROPERTIES],
        "train_properties": TRAIN_PROPERTY_INDICES,
        "test_properties": TEST_PROPERTY_INDICES,
    }
    Path(tasks_path).write_text(json.dumps(tasks, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    pos = labels.sum(axis=0)
    return {
        "molecules": len(texts),
        "per_property_positives": {name: int(p) for (name, _), p in zip(MOTIF_PROPERTIES, pos)},
    }
