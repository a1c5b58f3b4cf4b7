"""Episodic bi-level optimization, masked-atom pre-training, and evaluation.

Training follows first-order MAML: each episode adapts every trainable
parameter on its support loss (one gradient step by default), then the query
losses of the adapted parameters plus the embedding-consolidation penalty
drive a plain gradient-descent meta-update. Second-order terms through the
inner step are deliberately dropped.

Context note: molecule node features for the context graph come from the
plain (adapter-free) encoder snapshotted at run start, treated as constants.
They are inputs to the context encoder, not part of the differentiated path.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import adapter as adp
from . import consolidation as con
from . import context as ctx
from . import data as dt
from . import encoder as enc
from .metrics import roc_auc
from .params import ParamStore, ParamView


@dataclass(frozen=True)
class MetaConfig:
    k: int = 5
    m_query: int = 10
    batch_episodes: int = 4
    inner_steps: int = 1
    alpha_inner: float = 0.5
    alpha_outer: float = 1e-3
    lam: float = 0.1
    penalty_mode: str = "IM"
    seed: int = 0
    outer_steps: int = 500
    max_seen_properties: int = 8
    tuning_mode: str = "pin"  # "pin" (adapters + embeddings) or "frozen" baseline
    adapter_context: bool = True
    d2: int = 50
    outer_optimizer: str = "sgd"  # "adam" available behind this flag
    encode_chunk: int = 64
    threads: int = 1

    def __post_init__(self):
        if self.alpha_inner <= 0 or self.alpha_outer <= 0:
            raise ValueError("learning rates must be positive")
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")
        if self.penalty_mode not in con.PENALTY_MODES:
            raise ValueError(f"unknown penalty mode {self.penalty_mode!r}")
        if self.tuning_mode not in ("pin", "frozen"):
            raise ValueError(f"tuning_mode must be 'pin' or 'frozen', got {self.tuning_mode!r}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError("outer_optimizer must be 'sgd' or 'adam'")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    mask_rate: float = 0.15
    seed: int = 0


class AdamState:
    """Minimal Adam; used for pre-training and the optional outer optimizer."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        updates = {}
        for name in sorted(grads):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            updates[name] = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        store.apply_updates(updates, lr=1.0)


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

def init_head_params(store: ParamStore, d: int, d2: int, rng: np.random.Generator) -> None:
    store.add("head.w1", rng.normal(0.0, 1.0 / np.sqrt(d + 2 * d2), size=(d + 2 * d2, d2)))
    store.add("head.b1", np.zeros(d2))
    store.add("head.w2", rng.normal(0.0, 1.0 / np.sqrt(d2), size=(d2, 1)))
    store.add("head.b2", np.zeros(1))


def classifier_logits(view: ParamView, h_m: ad.Tensor, cm: ad.Tensor, cp: ad.Tensor) -> ad.Tensor:
    n = h_m.shape[0]
    x = ad.concat([h_m, cm, cp])
    h = ad.relu(ad.add(ad.matmul(x, view.leaf("head.w1")), ad.broadcast_rows(view.leaf("head.b1"), n)))
    return ad.add(ad.matmul(h, view.leaf("head.w2")), ad.broadcast_rows(view.leaf("head.b2"), n))


def classify(view: ParamView, h_m: ad.Tensor, cm: ad.Tensor, cp: ad.Tensor) -> ad.Tensor:
    """Probability of the positive class for each row."""
    return ad.sigmoid(classifier_logits(view, h_m, cm, cp))


# ---------------------------------------------------------------------------
# context-feature cache (run-start plain encoder, detached)
# ---------------------------------------------------------------------------

class MolFeatureCache:
    """Plain-encoder h_m per molecule, computed lazily in chunks and frozen
    for the lifetime of a run."""

    def __init__(self, store: ParamStore, dataset: dt.Dataset, chunk: int = 64):
        self.store = store
        self.dataset = dataset
        self.chunk = chunk
        self._rows: dict[int, np.ndarray] = {}

    def get(self, indices) -> np.ndarray:
        missing = [int(i) for i in indices if int(i) not in self._rows]
        for lo in range(0, len(missing), self.chunk):
            part = missing[lo : lo + self.chunk]
            batch = enc.BatchGraph([self.dataset.features[i] for i in part])
            out = enc.encode_batch(ParamView(self.store, detached=True), batch, mode="eval")
            for i, row in zip(part, out.h_m.data):
                self._rows[i] = row.copy()
        return np.stack([self._rows[int(i)] for i in indices])


# ---------------------------------------------------------------------------
# episode forward passes
# ---------------------------------------------------------------------------

@dataclass
class EpisodeSetup:
    episode: dt.Episode
    graph: ctx.ContextGraph
    mol_features: np.ndarray  # (n_mols, d) run-start plain features, constants


def prepare_episode(
    dataset: dt.Dataset,
    episode: dt.Episode,
    cache: MolFeatureCache,
    max_seen: int,
    rng: np.random.Generator,
) -> EpisodeSetup:
    seen = dt.sample_seen_properties(dataset, episode.target, max_seen, rng)
    graph = ctx.build_context_graph(episode, dataset, seen)
    feats = cache.get(graph.mol_indices)
    return EpisodeSetup(episode=episode, graph=graph, mol_features=feats)


def _context_rows_for(bundle: ctx.ContextBundle, mol_positions: np.ndarray, n_rows: int):
    cm = ad.gather(bundle.c_mol, mol_positions)
    cp_row = ad.gather(bundle.c_prop, np.zeros(1, dtype=np.int64))  # target property row
    cp = ad.matmul(ad.constant(np.ones((n_rows, 1))), cp_row)
    return cm, cp


def episode_pass(
    view: ParamView,
    setup: EpisodeSetup,
    dataset: dt.Dataset,
    which: str,
    adapters: adp.AdapterStack | None,
) -> tuple[ad.Tensor, np.ndarray]:
    """Support or query pass under the given parameters.

    Returns the summed BCE loss (a tape node) and the probability scores.
    The context is encoded inside the pass so adapted context parameters are
    in effect for adapted passes.
    """
    ep = setup.episode
    if which == "support":
        indices, labels = ep.support_indices, ep.support_labels
    elif which == "query":
        indices, labels = ep.query_indices, ep.query_labels
    else:
        raise ValueError(f"which must be 'support' or 'query', got {which!r}")

    bundle = ctx.encode_context(view, setup.graph, setup.mol_features)
    positions = np.array([setup.graph.mol_position(int(i)) for i in indices], dtype=np.int64)

    batch = enc.BatchGraph([dataset.features[int(i)] for i in indices])
    atom_positions = positions[batch.mol_of_atom]
    atom_ctx = _context_rows_for(bundle, atom_positions, batch.n_atoms) if (
        adapters is not None and adapters.config.context_enabled
    ) else None
    out = enc.encode_batch(view, batch, mode="eval", adapters=adapters, context_rows=atom_ctx)

    cm, cp = _context_rows_for(bundle, positions, len(indices))
    logits = classifier_logits(view, out.h_m, cm, cp)
    y = ad.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    loss = ad.sum_all(ad.bce_logits(logits, y))
    scores = ad._sigmoid_stable(logits.data[:, 0])
    return loss, scores


def inner_adapt(
    store: ParamStore,
    dataset: dt.Dataset,
    setup: EpisodeSetup,
    config: MetaConfig,
    adapters: adp.AdapterStack | None,
) -> tuple[dict[str, np.ndarray], float]:
    """Gradient steps on the support loss over every trainable parameter.

    Returns the adapted fast weights (theta-prime) and the last support loss.
    Frozen tensors are never touched.
    """
    trainables = store.trainable_names()
    overrides: dict[str, np.ndarray] = {}
    loss_value = math.nan
    for _ in range(config.inner_steps):
        view = ParamView(store, overrides)
        loss, _ = episode_pass(view, setup, dataset, "support", adapters)
        if not np.isfinite(loss.data):
            raise ad.NumericsError("non-finite support loss")
        loss_value = float(loss.data)
        ad.backward(loss)
        grads = view.grads(trainables)
        overrides = {
            n: view.value(n) - config.alpha_inner * grads[n] for n in trainables
        }
    return overrides, loss_value


def outer_step(
    store: ParamStore,
    dataset: dt.Dataset,
    setups: list[EpisodeSetup],
    config: MetaConfig,
    anchor: dict[str, np.ndarray],
    table_names: list[str],
    fisher: con.FisherDiag | None,
    adam: AdamState | None = None,
) -> dict:
    """One meta-update over a batch of episodes plus the consolidation penalty."""
    if not setups:
        raise ValueError("outer step needs at least one episode")
    adapters = adapters_of(store, config)
    trainables = store.trainable_names()
    total = {n: np.zeros_like(store.get(n)) for n in trainables}
    query_losses = []
    for setup in setups:
        overrides, _ = inner_adapt(store, dataset, setup, config, adapters)
        view = ParamView(store, overrides)
        loss, _ = episode_pass(view, setup, dataset, "query", adapters)
        if not np.isfinite(loss.data):
            raise ad.NumericsError("non-finite query loss")
        query_losses.append(float(loss.data))
        ad.backward(loss)
        grads = view.grads(trainables)
        for n in trainables:
            total[n] += grads[n]
    scale = 1.0 / len(setups)
    for n in trainables:
        total[n] *= scale

    penalty_val = 0.0
    if config.lam > 0.0 and config.penalty_mode != "none" and not store.is_frozen(table_names[0]):
        pen_view = ParamView(store)
        pen = con.penalty(config.penalty_mode, pen_view, anchor, table_names, fisher)
        penalty_val = float(pen.data)
        ad.backward(pen)
        pen_grads = pen_view.grads(table_names)
        for n in table_names:
            total[n] += config.lam * pen_grads[n]

    if adam is not None:
        adam.step(store, total)
    else:
        store.apply_updates(total, lr=config.alpha_outer)

    disp = displacement_norm(store, anchor, table_names)
    return {
        "query_loss": float(np.mean(query_losses)),
        "penalty": penalty_val,
        "emb_displacement_norm": disp,
    }


def displacement_norm(store: ParamStore, anchor: dict[str, np.ndarray], table_names) -> float:
    total = 0.0
    for n in table_names:
        diff = store.get(n) - anchor[n]
        total += float(np.sum(diff * diff))
    return math.sqrt(total)


def displacement_max_abs(store: ParamStore, anchor: dict[str, np.ndarray], table_names) -> float:
    return max(float(np.max(np.abs(store.get(n) - anchor[n]))) for n in table_names)


def adapters_of(store: ParamStore, config: MetaConfig) -> adp.AdapterStack | None:
    if "adapter.layer0.down.w" not in store:
        return None
    d = store.get("emb.atom.0").shape[1]
    acfg = adp.AdapterConfig(d=d, d2=config.d2, context_enabled=config.adapter_context)
    return adp.attach(store, enc._n_layers_of(store), acfg)


# ---------------------------------------------------------------------------
# meta-training driver
# ---------------------------------------------------------------------------

def eligible_train_properties(dataset: dt.Dataset, k: int, m: int) -> list[int]:
    need = k + math.ceil(m / 2)
    out = []
    for p in dataset.train_properties:
        pos, neg = dataset.labeled_indices(p)
        if len(pos) >= need and len(neg) >= need:
            out.append(p)
    return out


def meta_train(
    dataset: dt.Dataset,
    store: ParamStore,
    config: MetaConfig,
    fisher: con.FisherDiag | None = None,
) -> list[dict]:
    """Tune a pre-trained store in place; returns one log record per outer step."""
    if config.penalty_mode in ("FIM", "EFIM") and fisher is None:
        raise ValueError(f"penalty mode {config.penalty_mode} requires a fisher estimate")

    encoder_cfg = _encoder_config_of(store)
    enc.freeze_for_tuning(store)
    if config.tuning_mode == "frozen":
        store.freeze_matching("emb.")

    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7, 0]))
    if config.tuning_mode == "pin":
        if "adapter.layer0.down.w" in store:
            raise ValueError("store already contains adapter parameters; expected a fresh pre-trained checkpoint")
        acfg = adp.AdapterConfig(d=encoder_cfg.d, d2=config.d2, context_enabled=config.adapter_context)
        adp.init_adapter_params(store, acfg, encoder_cfg.n_layers, init_rng)
    if "context.mol_proj.w" in store or "head.w1" in store:
        raise ValueError("store already contains tuning parameters; expected a fresh pre-trained checkpoint")
    ctx.init_context_params(store, encoder_cfg.d, config.d2, dataset.n_properties, init_rng)
    init_head_params(store, encoder_cfg.d, config.d2, init_rng)

    table_names = enc.embedding_table_names(encoder_cfg)
    anchor = store.snapshot(table_names)
    cache = MolFeatureCache(store, dataset, chunk=config.encode_chunk)
    eligible = eligible_train_properties(dataset, config.k, config.m_query)
    if not eligible:
        raise dt.DataError("no training property has enough labeled molecules for the episode shape")

    adam = AdamState(config.alpha_outer) if config.outer_optimizer == "adam" else None
    log: list[dict] = []
    episode_counter = 0
    for step in range(config.outer_steps):
        setups = []
        for _ in range(config.batch_episodes):
            rng = dt.episode_rng(config.seed, episode_counter)
            target = int(eligible[rng.integers(len(eligible))])
            episode = dt.sample_episode(dataset, target, config.k, config.m_query, rng, seed=episode_counter)
            setups.append(prepare_episode(dataset, episode, cache, config.max_seen_properties, rng))
            episode_counter += 1
        stats = outer_step(store, dataset, setups, config, anchor, table_names, fisher, adam=adam)
        log.append({"step": step, **stats})
    return log


def _encoder_config_of(store: ParamStore) -> enc.EncoderConfig:
    d = store.get("emb.atom.0").shape[1]
    d1 = store.get("mp.layer0.w1").shape[1]
    return enc.EncoderConfig(
        d=d,
        d1=d1,
        n_layers=enc._n_layers_of(store),
        n_atomic=store.get("emb.atom.0").shape[0],
        n_chirality=store.get("emb.atom.1").shape[0],
        n_bond_type=store.get("emb.bond.l0.0").shape[0],
        n_bond_dir=store.get("emb.bond.l0.1").shape[0],
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def score_query(
    store: ParamStore,
    overrides: dict[str, np.ndarray],
    dataset: dt.Dataset,
    setup: EpisodeSetup,
    config: MetaConfig,
    adapters: adp.AdapterStack | None,
    collect_h_m: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Forward-only scores for the episode's query molecules, in chunks."""
    ep = setup.episode
    view = ParamView(store, overrides, detached=True)
    bundle = ctx.encode_context(view, setup.graph, setup.mol_features)
    scores, reps = [], []
    q = ep.query_indices
    for lo in range(0, len(q), config.encode_chunk):
        part = q[lo : lo + config.encode_chunk]
        positions = np.array([setup.graph.mol_position(int(i)) for i in part], dtype=np.int64)
        batch = enc.BatchGraph([dataset.features[int(i)] for i in part])
        atom_ctx = _context_rows_for(bundle, positions[batch.mol_of_atom], batch.n_atoms) if (
            adapters is not None and adapters.config.context_enabled
        ) else None
        out = enc.encode_batch(view, batch, mode="eval", adapters=adapters, context_rows=atom_ctx)
        cm, cp = _context_rows_for(bundle, positions, len(part))
        logits = classifier_logits(view, out.h_m, cm, cp)
        scores.append(ad._sigmoid_stable(logits.data[:, 0]))
        if collect_h_m:
            reps.append(out.h_m.data.copy())
    return np.concatenate(scores), (np.concatenate(reps) if collect_h_m else None)


def evaluate(
    dataset: dt.Dataset,
    store: ParamStore,
    config: MetaConfig,
    k: int,
    n_seeds: int,
    dump_path=None,
) -> dict:
    """Per test property: adapt on a fresh support set per seed, score every
    remaining labeled molecule, and report mean/std ROC-AUC across seeds."""
    adapters = adapters_of(store, config)
    cache = MolFeatureCache(store, dataset, chunk=config.encode_chunk)
    report: dict[str, dict] = {}
    dump_lines: list[str] = []
    for prop in dataset.test_properties:
        name = dataset.property_names[prop]
        per_seed = []
        for s in range(n_seeds):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11, prop, s]))
            episode = dt.eval_episode(dataset, prop, k, rng, seed=s)
            setup = prepare_episode(dataset, episode, cache, config.max_seen_properties, rng)
            overrides, _ = inner_adapt(store, dataset, setup, config, adapters)
            scores, reps = score_query(
                store, overrides, dataset, setup, config, adapters, collect_h_m=dump_path is not None
            )
            auc = roc_auc(episode.query_labels, scores)
            per_seed.append(auc)
            if dump_path is not None:
                for idx, label, score, rep in zip(episode.query_indices, episode.query_labels, scores, reps):
                    dump_lines.append(json.dumps({
                        "property": name,
                        "seed": s,
                        "molecule_index": int(idx),
                        "label": int(label),
                        "score": float(score),
                        "h_m": [float(v) for v in rep],
                    }, sort_keys=True))
        report[name] = {
            "mean_auc": float(np.mean(per_seed)),
            "std_auc": float(np.std(per_seed)),
            "per_seed": [float(a) for a in per_seed],
        }
    if dump_path is not None:
        Path(dump_path).write_text("\n".join(dump_lines) + "\n", encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# masked-atom pre-training
# ---------------------------------------------------------------------------

def _mask_for(feat, rate: float, rng: np.random.Generator) -> np.ndarray:
    n = feat.atom_idx.shape[0]
    n_mask = max(1, int(round(rate * n)))
    picked = rng.choice(n, size=min(n_mask, n), replace=False)
    mask = np.zeros(n, dtype=bool)
    mask[picked] = True
    return mask


def pretrain_masked_atoms(
    dataset: dt.Dataset,
    encoder_cfg: enc.EncoderConfig,
    config: PretrainConfig,
) -> tuple[ParamStore, list[dict]]:
    """Train the encoder to recover masked atomic numbers; freeze nothing yet.

    Returns the store (message passing marked frozen-for-tuning by the caller
    when saving) and per-step loss records.
    """
    if config.mask_rate <= 0.0:
        raise ValueError("mask rate 0: nothing to predict")
    if dataset.n_molecules == 0:
        raise dt.DataError("pre-training needs a nonempty dataset")
    for i, m in enumerate(dataset.molecules):
        if m.n_atoms < 1:
            raise dt.DataError(f"molecule {i} has no atoms")

    store = ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, 0]))
    enc.init_encoder_params(store, encoder_cfg, rng)
    store.add("pretrain_head.w", rng.normal(0.0, 1.0 / np.sqrt(encoder_cfg.d), size=(encoder_cfg.d, encoder_cfg.n_atomic)))
    store.add("pretrain_head.b", np.zeros(encoder_cfg.n_atomic))

    adam = AdamState(config.lr)
    step_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, 1]))
    log = []
    for step in range(config.steps):
        idx = step_rng.choice(dataset.n_molecules, size=min(config.batch_size, dataset.n_molecules), replace=False)
        view = ParamView(store)
        loss = masked_loss(view, dataset, idx, encoder_cfg, config.mask_rate, step_rng)
        ad.backward(loss)
        adam.step(store, view.grads(store.trainable_names()))
        log.append({"step": step, "loss": float(loss.data)})
    return store, log


def masked_loss(
    view: ParamView,
    dataset: dt.Dataset,
    indices,
    encoder_cfg: enc.EncoderConfig,
    mask_rate: float,
    rng: np.random.Generator,
) -> ad.Tensor:
    """Mean cross-entropy of predicting masked atoms' atomic numbers."""
    feats = [dataset.features[int(i)] for i in indices]
    batch = enc.BatchGraph(feats)
    mask = np.concatenate([_mask_for(f, mask_rate, rng) for f in feats])
    out = enc.encode_batch(view, batch, mode="train", masked=mask)
    masked_rows = np.flatnonzero(mask)
    picked = ad.gather(out.atom_final, masked_rows)
    n = masked_rows.size
    logits = ad.add(
        ad.matmul(picked, view.leaf("pretrain_head.w")),
        ad.broadcast_rows(view.leaf("pretrain_head.b"), n),
    )
    targets = batch.atom_idx[masked_rows, 0]
    per_atom = ad.softmax_cross_entropy(logits, targets)
    return ad.scale(ad.sum_all(per_atom), 1.0 / n)


def content_rng(feat) -> np.random.Generator:
    """Deterministic per-molecule stream derived from the molecule itself, so
    duplicated dataset entries produce identical Fisher contributions."""
    h = zlib.crc32(feat.atom_idx.tobytes())
    h = zlib.crc32(feat.bond_idx.tobytes(), h)
    h = zlib.crc32(feat.bond_src.tobytes(), h)
    return np.random.default_rng(np.random.SeedSequence([h]))


def fisher_loss_fn(dataset: dt.Dataset, encoder_cfg: enc.EncoderConfig, mask_rate: float):
    """Per-sample pre-training loss for Fisher estimation (batch size 1)."""

    def loss(view: ParamView, sample_index: int) -> ad.Tensor:
        rng = content_rng(dataset.features[int(sample_index)])
        return masked_loss(view, dataset, [sample_index], encoder_cfg, mask_rate, rng)

    return loss


def estimate_encoder_fisher(
    store: ParamStore,
    dataset: dt.Dataset,
    encoder_cfg: enc.EncoderConfig,
    mask_rate: float = 0.15,
) -> con.FisherDiag:
    names = enc.embedding_table_names(encoder_cfg)
    return con.estimate_fisher(
        store, names, range(dataset.n_molecules), fisher_loss_fn(dataset, encoder_cfg, mask_rate)
    )
