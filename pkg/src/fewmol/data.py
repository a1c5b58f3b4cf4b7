"""Multi-label molecule datasets with missing labels, and episode sampling.

Dataset files are JSON Lines ({"smiles": ..., "labels": [0|1|null, ...]});
the companion tasks file names the properties and fixes the disjoint
train/test property split. Episodes are 2-way K-shot: K positives and K
negatives for one target property, plus a disjoint query set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import smiles as sm

LABEL_NEG = 0
LABEL_POS = 1
LABEL_MISSING = -1


class DataError(Exception):
    pass


@dataclass
class Dataset:
    molecules: list[sm.MolGraph]
    smiles: list[str]
    features: list[sm.Featurized]
    property_names: list[str]
    labels: np.ndarray  # (n_molecules, n_properties) in {1, 0, -1=missing}
    train_properties: list[int]
    test_properties: list[int]
    skipped: int = 0  # unparseable SMILES lines dropped at load

    @property
    def n_molecules(self) -> int:
        return len(self.molecules)

    @property
    def n_properties(self) -> int:
        return len(self.property_names)

    def labeled_indices(self, prop: int) -> tuple[np.ndarray, np.ndarray]:
        """(positives, negatives) molecule indices with a known label for prop."""
        col = self.labels[:, prop]
        return np.flatnonzero(col == LABEL_POS), np.flatnonzero(col == LABEL_NEG)


@dataclass(frozen=True)
class Episode:
    """One 2-way K-shot task. Query labels ride along for scoring only; the
    context construction never reads them."""

    target: int
    support_indices: np.ndarray
    support_labels: np.ndarray
    query_indices: np.ndarray
    query_labels: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        k2 = self.support_labels.size
        if int(np.sum(self.support_labels == 1)) != k2 // 2 or k2 % 2 != 0:
            raise DataError("support must hold exactly K positives and K negatives")
        overlap = set(self.support_indices.tolist()) & set(self.query_indices.tolist())
        if overlap:
            raise DataError(f"support and query overlap: {sorted(overlap)}")

    @property
    def k(self) -> int:
        return self.support_labels.size // 2


def load_dataset(data_path, tasks_path) -> Dataset:
    tasks = _load_tasks(tasks_path)
    names = tasks["properties"]
    p_total = len(names)

    data_file = Path(data_path)
    if not data_file.exists():
        raise DataError(f"data file not found: {data_file}")

    molecules, smiles_list, features, label_rows = [], [], [], []
    skipped = 0
    for lineno, raw in enumerate(data_file.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise DataError(f"{data_file}:{lineno}: malformed JSON: {e}") from e
        if not isinstance(rec, dict) or "smiles" not in rec or "labels" not in rec:
            raise DataError(f"{data_file}:{lineno}: record needs 'smiles' and 'labels'")
        labels = rec["labels"]
        if not isinstance(labels, list) or len(labels) != p_total:
            raise DataError(f"{data_file}:{lineno}: labels must be a list of length {p_total}")
        row = np.empty(p_total, dtype=np.int8)
        for j, v in enumerate(labels):
            if v is None:
                row[j] = LABEL_MISSING
            elif v in (0, 1):
                row[j] = int(v)
            else:
                raise DataError(f"{data_file}:{lineno}: label {v!r} is not 0, 1 or null")
        try:
            mol = sm.parse_smiles(rec["smiles"])
        except sm.SmilesError:
            skipped += 1
            continue
        molecules.append(mol)
        smiles_list.append(rec["smiles"])
        features.append(sm.featurize(mol))
        label_rows.append(row)

    if not molecules:
        raise DataError(f"{data_file}: no parseable molecules")
    return Dataset(
        molecules=molecules,
        smiles=smiles_list,
        features=features,
        property_names=names,
        labels=np.stack(label_rows),
        train_properties=tasks["train_properties"],
        test_properties=tasks["test_properties"],
        skipped=skipped,
    )


def _load_tasks(tasks_path) -> dict:
    p = Path(tasks_path)
    if not p.exists():
        raise DataError(f"tasks file not found: {p}")
    try:
        tasks = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{p}: malformed JSON: {e}") from e
    for key in ("properties", "train_properties", "test_properties"):
        if key not in tasks:
            raise DataError(f"{p}: missing key {key!r}")
    names = [str(n) for n in tasks["properties"]]
    train = [int(i) for i in tasks["train_properties"]]
    test = [int(i) for i in tasks["test_properties"]]
    if set(train) & set(test):
        raise DataError(f"{p}: split overlap between train and test properties: {sorted(set(train) & set(test))}")
    for idx in train + test:
        if not 0 <= idx < len(names):
            raise DataError(f"{p}: property index {idx} out of range")
    return {"properties": names, "train_properties": train, "test_properties": test}


def episode_rng(global_seed: int, episode_index: int) -> np.random.Generator:
    """Independent per-episode stream derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), int(episode_index)]))


def sample_episode(dataset: Dataset, target: int, k: int, m: int, rng: np.random.Generator, seed: int | None = None) -> Episode:
    """Draw K/K support and a balanced M-molecule query, all without replacement."""
    if k < 1 or m < 1:
        raise DataError("K and M must be positive")
    pos, neg = dataset.labeled_indices(target)
    need = k + math.ceil(m / 2)
    if len(pos) < need or len(neg) < need:
        raise DataError(
            f"property {target} needs at least {need} labeled molecules per class, "
            f"has {len(pos)} positives / {len(neg)} negatives"
        )
    sup_pos = rng.choice(pos, size=k, replace=False)
    sup_neg = rng.choice(neg, size=k, replace=False)
    rest_pos = np.setdiff1d(pos, sup_pos)
    rest_neg = np.setdiff1d(neg, sup_neg)
    q_pos = rng.choice(rest_pos, size=math.ceil(m / 2), replace=False)
    q_neg = rng.choice(rest_neg, size=m // 2, replace=False)
    return Episode(
        target=target,
        support_indices=np.concatenate([sup_pos, sup_neg]),
        support_labels=np.array([1] * k + [0] * k, dtype=np.int8),
        query_indices=np.concatenate([q_pos, q_neg]),
        query_labels=np.array([1] * len(q_pos) + [0] * len(q_neg), dtype=np.int8),
        seed=seed,
    )


def eval_episode(dataset: Dataset, target: int, k: int, rng: np.random.Generator, seed: int | None = None) -> Episode:
    """Evaluation draw: K/K support, query = every remaining labeled molecule."""
    pos, neg = dataset.labeled_indices(target)
    if len(pos) < k + 1 or len(neg) < k + 1:
        raise DataError(
            f"property {target} needs at least {k + 1} labeled molecules per class for evaluation, "
            f"has {len(pos)} positives / {len(neg)} negatives"
        )
    sup_pos = rng.choice(pos, size=k, replace=False)
    sup_neg = rng.choice(neg, size=k, replace=False)
    rest_pos = np.setdiff1d(pos, sup_pos)
    rest_neg = np.setdiff1d(neg, sup_neg)
    return Episode(
        target=target,
        support_indices=np.concatenate([sup_pos, sup_neg]),
        support_labels=np.array([1] * k + [0] * k, dtype=np.int8),
        query_indices=np.concatenate([rest_pos, rest_neg]),
        query_labels=np.array([1] * len(rest_pos) + [0] * len(rest_neg), dtype=np.int8),
        seed=seed,
    )


def sample_seen_properties(dataset: Dataset, target: int, max_seen: int, rng: np.random.Generator) -> list[int]:
    """Training properties other than the target, subsampled to the cap."""
    pool = [p for p in dataset.train_properties if p != target]
    if len(pool) <= max_seen:
        return pool
    picked = rng.choice(np.array(pool), size=max_seen, replace=False)
    return sorted(int(p) for p in picked)
