import numpy as np
import pytest

from fewmol import smiles as sm


def bond_set(m):
    return {(i, j, f.bond_type_index, f.bond_direction_index) for i, j, f in m.bonds}


def test_ethanol():
    m = sm.parse_smiles("CCO")
    assert [a.atomic_number_index for a in m.atoms] == [5, 5, 7]  # C=6, O=8, zero-based
    assert bond_set(m) == {(0, 1, sm.BOND_SINGLE, sm.DIR_NONE), (1, 2, sm.BOND_SINGLE, sm.DIR_NONE)}


def test_cyclopropane_ring_closure():
    m = sm.parse_smiles("C1CC1")
    assert m.n_atoms == 3
    assert {(i, j) for i, j, _ in m.bonds} == {(0, 1), (1, 2), (0, 2)}
    assert all(f.bond_type_index == sm.BOND_SINGLE for _, _, f in m.bonds)


def test_unbalanced_parenthesis_offset():
    with pytest.raises(sm.SmilesError) as e:
        sm.parse_smiles("C(")
    assert e.value.offset == 1


def test_branching():
    m = sm.parse_smiles("CC(C)C")
    assert {(i, j) for i, j, _ in m.bonds} == {(0, 1), (1, 2), (1, 3)}


def test_double_bond_and_two_char_elements():
    m = sm.parse_smiles("ClC=O")
    assert [a.atomic_number_index for a in m.atoms] == [16, 5, 7]
    assert bond_set(m) == {(0, 1, sm.BOND_SINGLE, sm.DIR_NONE), (1, 2, sm.BOND_DOUBLE, sm.DIR_NONE)}


def test_triple_bond():
    m = sm.parse_smiles("C#N")
    assert bond_set(m) == {(0, 1, sm.BOND_TRIPLE, sm.DIR_NONE)}


def test_directional_bonds():
    m = sm.parse_smiles("F/C=C\\F")
    assert bond_set(m) == {
        (0, 1, sm.BOND_SINGLE, sm.DIR_ENDUP),
        (1, 2, sm.BOND_DOUBLE, sm.DIR_NONE),
        (2, 3, sm.BOND_SINGLE, sm.DIR_ENDDOWN),
    }


def test_aromatic_ring():
    m = sm.parse_smiles("c1ccccc1")
    assert m.n_atoms == 6
    assert all(f.bond_type_index == sm.BOND_AROMATIC for _, _, f in m.bonds)
    assert len(m.bonds) == 6


def test_bracket_atoms_and_chirality():
    m = sm.parse_smiles("[Fe]")
    assert m.atoms[0].atomic_number_index == 25  # Fe = 26
    m = sm.parse_smiles("[C@](F)(Cl)Br")
    assert m.atoms[0].chirality_index == sm.CHIRALITY_CCW
    m = sm.parse_smiles("[C@@]")
    assert m.atoms[0].chirality_index == sm.CHIRALITY_CW


def test_percent_ring_closure():
    m = sm.parse_smiles("C%12CC%12")
    assert {(i, j) for i, j, _ in m.bonds} == {(0, 1), (1, 2), (0, 2)}


def test_ring_bond_type_from_opening_symbol():
    m = sm.parse_smiles("C=1CC1")
    assert (0, 2, sm.BOND_DOUBLE, sm.DIR_NONE) in bond_set(m)


@pytest.mark.parametrize(
    "bad,offset",
    [
        ("", 0),
        ("C)", 1),
        ("C1CC", 1),
        ("CX", 1),
        ("C[Zz]", 1),
        ("C%1", 1),
        ("C..C", 1),
        ("C=", 1),
        ("C=#C", 2),
        ("1CC1", 0),
    ],
)
def test_malformed_inputs(bad, offset):
    with pytest.raises(sm.SmilesError) as e:
        sm.parse_smiles(bad)
    assert e.value.offset == offset


def test_duplicate_ring_bond_rejected():
    with pytest.raises(sm.SmilesError):
        sm.parse_smiles("C12C12")  # second closure duplicates the first bond
    with pytest.raises(sm.SmilesError):
        sm.parse_smiles("C11")  # self-bond


def test_featurize_ethanol_oxygen():
    m = sm.parse_smiles("CCO")
    f = sm.featurize(m)
    assert f.atom_idx[2, 0] == 7  # oxygen, atomic number 8
    assert f.atom_idx[2, 1] == sm.CHIRALITY_UNSPECIFIED


def test_featurize_carbonyl_bond():
    f = sm.featurize(sm.parse_smiles("C=O"))
    assert f.bond_idx.shape == (2, 2)
    assert list(f.bond_idx[0]) == [sm.BOND_DOUBLE, sm.DIR_NONE]
    assert set(zip(f.bond_src.tolist(), f.bond_dst.tolist())) == {(0, 1), (1, 0)}


def test_featurize_single_atom():
    f = sm.featurize(sm.parse_smiles("C"))
    assert f.atom_idx.shape == (1, 2)
    assert f.bond_src.shape == (0,)
    assert f.bond_idx.shape == (0, 2)


def test_graph_serialization_roundtrip():
    rng = np.random.default_rng(11)
    for text in ["CCO", "C1CC1", "F/C=C\\F", "c1ccncc1", "CC(C)(C)[C@]C#N", "OC%10CCC%10"]:
        m = sm.parse_smiles(text)
        m2 = sm.MolGraph.from_dict(m.to_dict())
        assert m == m2
        f1, f2 = sm.featurize(m), sm.featurize(m2)
        assert np.array_equal(f1.atom_idx, f2.atom_idx)
        assert np.array_equal(f1.bond_idx, f2.bond_idx)


def test_permutation_is_same_molecule():
    m = sm.parse_smiles("CC(C)O")
    perm = [3, 1, 0, 2]
    p = m.permuted(perm)
    assert sorted(a.atomic_number_index for a in p.atoms) == sorted(a.atomic_number_index for a in m.atoms)
    assert {(min(perm[i], perm[j]), max(perm[i], perm[j])) for i, j, _ in m.bonds} == {
        (i, j) for i, j, _ in p.bonds
    }
