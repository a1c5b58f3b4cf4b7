"""SMILES-subset parsing and categorical featurization.

Supported grammar: organic-subset atoms (B, C, N, O, P, S, F, Cl, Br, I),
bracket atoms with an explicit element symbol and optional @/@@ chirality,
bond symbols - = # / \\, parenthesized branches, ring closures 1-9 and %nn,
and aromatic lowercase c/n/o/s. Anything else is a hard error naming the
byte offset; no isotopes, charges, or explicit hydrogen counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
SYMBOL_TO_Z = {s: z for z, s in enumerate(ELEMENTS, start=1)}

# vocabulary sizes (fixed)
N_ATOMIC = 119  # atomic numbers 1..118 plus a trailing "misc" slot
N_CHIRALITY = 4  # unspecified, clockwise, counter-clockwise, other
N_BOND_TYPE = 4  # single, double, triple, aromatic
N_BOND_DIR = 3  # none, end-up, end-down

CHIRALITY_UNSPECIFIED, CHIRALITY_CW, CHIRALITY_CCW, CHIRALITY_OTHER = range(4)
BOND_SINGLE, BOND_DOUBLE, BOND_TRIPLE, BOND_AROMATIC = range(4)
DIR_NONE, DIR_ENDUP, DIR_ENDDOWN = range(3)

_ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
_AROMATIC = {"c": "C", "n": "N", "o": "O", "s": "S"}
_BOND_CHARS = {"-": (BOND_SINGLE, DIR_NONE), "=": (BOND_DOUBLE, DIR_NONE), "#": (BOND_TRIPLE, DIR_NONE),
               "/": (BOND_SINGLE, DIR_ENDUP), "\\": (BOND_SINGLE, DIR_ENDDOWN)}


class SmilesError(ValueError):
    """Malformed or out-of-subset input; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class AtomFeat:
    atomic_number_index: int  # z - 1, or 118 for "misc"
    chirality_index: int

    def __post_init__(self):
        if not 0 <= self.atomic_number_index < N_ATOMIC:
            raise ValueError(f"atomic number index {self.atomic_number_index} out of range")
        if not 0 <= self.chirality_index < N_CHIRALITY:
            raise ValueError(f"chirality index {self.chirality_index} out of range")


@dataclass(frozen=True)
class BondFeat:
    bond_type_index: int
    bond_direction_index: int

    def __post_init__(self):
        if not 0 <= self.bond_type_index < N_BOND_TYPE:
            raise ValueError(f"bond type index {self.bond_type_index} out of range")
        if not 0 <= self.bond_direction_index < N_BOND_DIR:
            raise ValueError(f"bond direction index {self.bond_direction_index} out of range")


class MolGraph:
    """Atoms plus undirected bonds, each bond stored once with i < j."""

    def __init__(self, atoms: list[AtomFeat], bonds: list[tuple[int, int, BondFeat]]):
        n = len(atoms)
        seen: set[tuple[int, int]] = set()
        for i, j, _ in bonds:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond ({i}, {j}) references a missing atom")
            if i == j:
                raise ValueError(f"self-bond on atom {i}")
            if i > j:
                raise ValueError(f"bond ({i}, {j}) not stored with i < j")
            if (i, j) in seen:
                raise ValueError(f"duplicate bond ({i}, {j})")
            seen.add((i, j))
        self.atoms = list(atoms)
        self.bonds = sorted(bonds, key=lambda b: (b[0], b[1]))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for i, j, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def permuted(self, perm: list[int]) -> "MolGraph":
        """Relabel atom i as perm[i]; same molecule under a different ordering."""
        if sorted(perm) != list(range(self.n_atoms)):
            raise ValueError("perm must be a permutation of atom indices")
        atoms = [None] * self.n_atoms
        for i, a in enumerate(self.atoms):
            atoms[perm[i]] = a
        bonds = []
        for i, j, f in self.bonds:
            a, b = perm[i], perm[j]
            bonds.append((min(a, b), max(a, b), f))
        return MolGraph(atoms, bonds)

    def to_dict(self) -> dict:
        return {
            "atoms": [[a.atomic_number_index, a.chirality_index] for a in self.atoms],
            "bonds": [[i, j, f.bond_type_index, f.bond_direction_index] for i, j, f in self.bonds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MolGraph":
        atoms = [AtomFeat(int(z), int(c)) for z, c in d["atoms"]]
        bonds = [(int(i), int(j), BondFeat(int(t), int(r))) for i, j, t, r in d["bonds"]]
        return cls(atoms, bonds)

    def __eq__(self, other) -> bool:
        return isinstance(other, MolGraph) and self.atoms == other.atoms and self.bonds == other.bonds


def parse_smiles(text: str) -> MolGraph:
    """Parse a SMILES-subset string into a MolGraph, atoms in first-appearance order."""
    if not isinstance(text, str) or not text.isascii():
        raise SmilesError("input must be an ASCII string", 0)
    if text == "":
        raise SmilesError("empty SMILES string", 0)

    atoms: list[AtomFeat] = []
    aromatic_flags: list[bool] = []
    bonds: dict[tuple[int, int], BondFeat] = {}
    anchor: int | None = None
    pending: tuple[int, int] | None = None  # (bond type, direction) from an explicit symbol
    pending_off = 0
    branch_stack: list[tuple[int | None, int]] = []
    rings: dict[int, tuple[int, tuple[int, int] | None, int]] = {}

    def add_bond(i: int, j: int, feat: BondFeat, offset: int) -> None:
        if i == j:
            raise SmilesError("ring closure forms a self-bond", offset)
        key = (min(i, j), max(i, j))
        if key in bonds:
            raise SmilesError(f"duplicate bond between atoms {key[0]} and {key[1]}", offset)
        bonds[key] = feat

    def new_atom(feat: AtomFeat, aromatic: bool, offset: int) -> None:
        nonlocal anchor, pending
        atoms.append(feat)
        aromatic_flags.append(aromatic)
        idx = len(atoms) - 1
        if anchor is not None:
            if pending is not None:
                btype, bdir = pending
            elif aromatic_flags[anchor] and aromatic:
                btype, bdir = BOND_AROMATIC, DIR_NONE
            else:
                btype, bdir = BOND_SINGLE, DIR_NONE
            add_bond(anchor, idx, BondFeat(btype, bdir), offset)
        pending = None
        anchor = idx

    def close_ring(num: int, offset: int) -> None:
        nonlocal pending
        if anchor is None:
            raise SmilesError("ring closure before any atom", offset)
        if num in rings:
            opener, opener_pending, _ = rings.pop(num)
            spec = pending if pending is not None else opener_pending
            if spec is not None:
                btype, bdir = spec
            elif aromatic_flags[opener] and aromatic_flags[anchor]:
                btype, bdir = BOND_AROMATIC, DIR_NONE
            else:
                btype, bdir = BOND_SINGLE, DIR_NONE
            add_bond(opener, anchor, BondFeat(btype, bdir), offset)
            pending = None
        else:
            rings[num] = (anchor, pending, offset)
            pending = None

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "(":
            if anchor is None:
                raise SmilesError("branch before any atom", i)
            branch_stack.append((anchor, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unbalanced parenthesis", i)
            anchor, _ = branch_stack.pop()
            i += 1
        elif ch in _BOND_CHARS:
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", i)
            pending = _BOND_CHARS[ch]
            pending_off = i
            i += 1
        elif ch.isdigit():
            close_ring(int(ch), i)
            i += 1
        elif ch == "%":
            if len(text) < i + 3 or not text[i + 1 : i + 3].isdigit():
                raise SmilesError("% must be followed by two digits", i)
            close_ring(int(text[i + 1 : i + 3]), i)
            i += 3
        elif ch == "[":
            end = text.find("]", i)
            if end < 0:
                raise SmilesError("unclosed bracket atom", i)
            body = text[i + 1 : end]
            chir = CHIRALITY_UNSPECIFIED
            if body.endswith("@@"):
                chir = CHIRALITY_CW
                body = body[:-2]
            elif body.endswith("@"):
                chir = CHIRALITY_CCW
                body = body[:-1]
            if body not in SYMBOL_TO_Z:
                raise SmilesError(f"unsupported bracket atom {text[i:end + 1]!r}", i)
            new_atom(AtomFeat(SYMBOL_TO_Z[body] - 1, chir), aromatic=False, offset=i)
            i = end + 1
        elif ch in _AROMATIC:
            new_atom(AtomFeat(SYMBOL_TO_Z[_AROMATIC[ch]] - 1, CHIRALITY_UNSPECIFIED), aromatic=True, offset=i)
            i += 1
        elif ch.isupper():
            sym = text[i : i + 2] if text[i : i + 2] in ("Cl", "Br") else ch
            if sym not in _ORGANIC:
                raise SmilesError(f"unsupported token {ch!r}", i)
            new_atom(AtomFeat(SYMBOL_TO_Z[sym] - 1, CHIRALITY_UNSPECIFIED), aromatic=False, offset=i)
            i += len(sym)
        else:
            raise SmilesError(f"unsupported token {ch!r}", i)

    if branch_stack:
        raise SmilesError("unbalanced parenthesis", branch_stack[-1][1])
    if rings:
        num, (_, _, off) = next(iter(sorted(rings.items())))
        raise SmilesError(f"unmatched ring closure {num}", off)
    if pending is not None:
        raise SmilesError("dangling bond symbol", pending_off)

    return MolGraph(atoms, [(i_, j_, f) for (i_, j_), f in bonds.items()])


@dataclass(frozen=True)
class Featurized:
    """Index arrays for one molecule, bonds expanded to both directions."""

    atom_idx: np.ndarray  # (n, 2): atomic number index, chirality index
    bond_src: np.ndarray  # (2m,) source atom of each directed bond
    bond_dst: np.ndarray  # (2m,) destination atom
    bond_idx: np.ndarray  # (2m, 2): bond type index, direction index


def featurize(m: MolGraph) -> Featurized:
    """Vocabulary index arrays for embedding lookups and message passing."""
    atom_idx = np.array(
        [[a.atomic_number_index, a.chirality_index] for a in m.atoms], dtype=np.int64
    ).reshape(m.n_atoms, 2)
    src, dst, feats = [], [], []
    for i, j, f in m.bonds:
        src += [i, j]
        dst += [j, i]
        feats += [[f.bond_type_index, f.bond_direction_index]] * 2
    return Featurized(
        atom_idx=atom_idx,
        bond_src=np.array(src, dtype=np.int64),
        bond_dst=np.array(dst, dtype=np.int64),
        bond_idx=np.array(feats, dtype=np.int64).reshape(len(src), 2),
    )
