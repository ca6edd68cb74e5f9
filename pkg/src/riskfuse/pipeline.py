"""Training and evaluation pipeline.

Joint training feeds all sources through their projectors as one short
sequence into the frozen backbone and minimizes the batch mean of

    sum_s ||e_s - e_hat_s||^2  +  beta * masked classification loss

with a single classification term on the fused confidences. Isolated
training optimizes each source's projector independently on length-1
sequences (same frozen backbone, same designated vocabulary), which is the
regime single-source and best-single-source evaluation build on.

Splits are patient-grouped: a seeded shuffle of patient ids fills the
training side with whole patients until it reaches the requested fraction
of records. Only projector parameters ever receive gradients; the backbone
hash is stable across training by construction and asserted in tests.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import seeding, tensorfile
from .encoders import (FeatureStats, Screening, SourceSpec, apply_feature_stats,
                       aggregate_images, fit_feature_stats, image_stub_matrix,
                       latest_image, encode_text_with_table, text_stub_table,
                       timeseries_feature_matrix)
from .frozenlm import (DesignatedVocab, FrozenWeights, LMConfig, draw_designated,
                       fuse_logits, init_frozen, lm_forward, selection_matrix)
from .losses import (ASLConfig, ClassWeights, class_weights,
                     classification_loss_graph, reconstruction_loss_graph)
from .metrics import TaskMetrics, f1_score, metrics_for_run, precision_recall
from .optim import adamw_step, init_adamw
from .projector import PARAM_NAMES, ProjectorConfig, ProjectorParams, init_projector, project, reconstruct
from .storage import Dataset, dump_json, read_json

__all__ = [
    "SEQUENCE_ORDER",
    "TrainConfig",
    "Checkpoint",
    "split_by_patient",
    "prepare_embeddings",
    "build_joint_loss",
    "build_isolated_loss",
    "train",
    "predict",
    "bss_select",
    "BssSelection",
    "evaluate_protocol",
    "save_checkpoint",
    "load_checkpoint",
    "gradcheck_suite",
]

# fixed feed order of the canonical sources
SEQUENCE_ORDER = ("xr", "axr", "proc", "lab", "chart", "txt")

LOSS_KINDS = ("avg", "asl")
TRAIN_MODES = ("joint", "isolated")
PREDICT_CHUNK = 512


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    loss_kind: str = "asl"
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 5e-4
    weight_decay: float = 3e-4
    beta: float = 10.0
    asl: ASLConfig = ASLConfig()
    lm: LMConfig = LMConfig()
    threshold: float = 0.5
    split_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.beta < 0:
            raise ValueError("invalid optimization hyperparameters")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")


def split_by_patient(patients, ratio: float = 0.75, seed: int = 0
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Greedy whole-patient split: shuffled patients fill the train side
    until it holds at least ratio * n records; the rest is the test side."""
    arr = np.asarray(patients)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("patients must be a nonempty 1-D array")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    unique, counts = np.unique(arr, return_counts=True)
    if unique.size < 2:
        raise ValueError("patient-grouped split needs at least two patients")
    count_of = dict(zip(unique.tolist(), counts.tolist()))
    order = seeding.rng(seed, "split").permutation(unique)
    target = ratio * arr.size
    train_patients = set()
    taken = 0
    for p in order:
        if taken >= target:
            break
        train_patients.add(p)
        taken += count_of[p]
    mask = np.isin(arr, np.asarray(sorted(train_patients)))
    return np.nonzero(mask)[0], np.nonzero(~mask)[0]


# ---------------------------------------------------------------------------
# embedding preparation (frozen encoders + train-fitted normalization)


def _source_order(specs) -> tuple[str, ...]:
    names = [s.name for s in specs]
    if set(names) <= set(SEQUENCE_ORDER):
        return tuple(n for n in SEQUENCE_ORDER if n in names)
    return tuple(names)


def _base_embeddings(dataset: Dataset) -> dict:
    base = {}
    for s in dataset.source_specs:
        if dataset.mode == "latent":
            base[s.name] = dataset.embeddings[s.name]
        elif s.modality == "time-series":
            base[s.name] = timeseries_feature_matrix(dataset.raw_timeseries[s.name])
        elif s.modality == "image":
            stub = image_stub_matrix(s, dataset.seed)
            rows = []
            for screenings in dataset.raw_screenings:
                embedded = [Screening(sc.time, stub @ sc.vector) for sc in screenings]
                if s.image_rule == "latest":
                    rows.append(latest_image(embedded))
                else:
                    rows.append(aggregate_images(embedded))
            base[s.name] = np.stack(rows)
        else:
            table = text_stub_table(s, dataset.seed)
            base[s.name] = np.stack([encode_text_with_table(table, ids)
                                     for ids in dataset.raw_tokens[s.name]])
    return base


def prepare_embeddings(dataset: Dataset, train_idx=None, stats: dict | None = None
                       ) -> tuple[dict, dict]:
    """Per-source (n, d_e) embeddings, z-scored with training-split stats.

    Pass `stats` (from a checkpoint) to normalize evaluation data exactly as
    the training run did; otherwise `train_idx` selects the rows the stats
    are fitted on.
    """
    base = _base_embeddings(dataset)
    if stats is None:
        if train_idx is None:
            raise ValueError("need train_idx to fit normalization stats")
        idx = np.asarray(train_idx)
        if idx.size == 0:
            raise ValueError("empty training split")
        stats = {name: fit_feature_stats(mat[idx]) for name, mat in base.items()}
    emb = {}
    for name, mat in base.items():
        if name not in stats:
            raise ValueError(f"missing normalization stats for source {name!r}")
        emb[name] = apply_feature_stats(mat, stats[name])
    return emb, stats


# ---------------------------------------------------------------------------
# loss graphs


def _confidence_graph(tokens: list[ad.Tensor], frozen: FrozenWeights,
                      sel: np.ndarray) -> ad.Tensor:
    """(B, K) confidences from per-source (B, d_t) token batches."""
    stacked = [t.reshape(t.shape[0], 1, t.shape[1]) for t in tokens]
    seq = stacked[0] if len(stacked) == 1 else ad.concat(stacked, axis=1)
    logits = lm_forward(frozen, seq)
    fused = fuse_logits(logits)
    return ad.sigmoid(fused @ ad.constant(sel))


def build_joint_loss(projectors: dict, frozen: FrozenWeights, sel: np.ndarray,
                     emb_batch: dict, labels_batch, loss_kind: str,
                     beta: float, weights: ClassWeights | None = None,
                     asl: ASLConfig | None = None):
    """Batch-mean joint objective closure for eval_with_grads."""
    order = list(projectors)

    def computation(_params=None):
        recon = None
        tokens = []
        for name in order:
            pp = projectors[name]
            e = ad.constant(emb_batch[name])
            t = project(pp, e)
            rec = reconstruction_loss_graph(e, reconstruct(pp, t))
            recon = rec if recon is None else recon + rec
            tokens.append(t)
        phi = _confidence_graph(tokens, frozen, sel)
        cls = classification_loss_graph(phi, labels_batch, loss_kind,
                                        weights=weights, asl=asl)
        return (recon + beta * cls).mean()

    return computation


def build_isolated_loss(pp: ProjectorParams, frozen: FrozenWeights, sel: np.ndarray,
                        emb_batch, labels_batch, loss_kind: str, beta: float,
                        weights: ClassWeights | None = None,
                        asl: ASLConfig | None = None):
    """Single-source objective: reconstruction plus beta times the masked
    classification loss on the length-1 sequence's confidences."""

    def computation(_params=None):
        e = ad.constant(emb_batch)
        t = project(pp, e)
        rec = reconstruction_loss_graph(e, reconstruct(pp, t))
        phi = _confidence_graph([t], frozen, sel)
        cls = classification_loss_graph(phi, labels_batch, loss_kind,
                                        weights=weights, asl=asl)
        return (rec + beta * cls).mean()

    return computation


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    config: TrainConfig
    source_specs: tuple[SourceSpec, ...]
    task_names: tuple[str, ...]
    dataset_mode: str
    dataset_seed: int
    designated: DesignatedVocab
    projectors: dict
    stats: dict
    history: dict = field(default_factory=dict)
    _frozen: FrozenWeights | None = field(default=None, repr=False, compare=False)

    def frozen(self) -> FrozenWeights:
        if self._frozen is None:
            self._frozen = init_frozen(self.config.lm)
        return self._frozen

    def source_order(self) -> tuple[str, ...]:
        return _source_order(self.source_specs)


def _projector_configs(specs, lm: LMConfig) -> dict:
    configs = {}
    for s in specs:
        configs[s.name] = ProjectorConfig(embed_dim=s.dim, token_dim=lm.d_model)
    return configs


def _epoch_batches(rng: np.random.Generator, idx: np.ndarray, batch_size: int):
    perm = rng.permutation(idx)
    for start in range(0, perm.size, batch_size):
        yield perm[start:start + batch_size]


def _run_epochs(params: ad.ParamSet, make_batch_loss, rng, train_idx, cfg: TrainConfig,
                label: str) -> list[float]:
    state = init_adamw(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        batch_losses = []
        for b, batch in enumerate(_epoch_batches(rng, train_idx, cfg.batch_size)):
            computation = make_batch_loss(batch)
            try:
                loss = ad.eval_with_grads(computation, params)
            except ad.NonFiniteError as err:
                raise ad.NonFiniteError(
                    err.op, f"{label}: aborted at epoch {epoch}, batch {b}") from err
            adamw_step(params, state)
            batch_losses.append(loss)
        history.append(float(np.mean(batch_losses)))
    return history


def train(dataset: Dataset, cfg: TrainConfig) -> Checkpoint:
    dataset.validate()
    names = _source_order(dataset.source_specs)
    specs = {s.name: s for s in dataset.source_specs}
    proj_cfgs = _projector_configs(dataset.source_specs, cfg.lm)

    train_idx, _ = split_by_patient(dataset.patients, cfg.split_ratio, cfg.seed)
    emb, stats = prepare_embeddings(dataset, train_idx=train_idx)
    labels = dataset.labels

    weights = class_weights(labels[train_idx]) if cfg.loss_kind == "avg" else None
    designated = draw_designated(cfg.lm.vocab, dataset.n_tasks, cfg.seed)
    sel = selection_matrix(designated, cfg.lm.vocab)
    frozen = init_frozen(cfg.lm)
    projectors = {name: init_projector(proj_cfgs[name], cfg.seed, name) for name in names}

    history: dict = {}
    if cfg.mode == "joint":
        combined = ad.ParamSet()
        for name in names:
            for pname in PARAM_NAMES:
                combined.adopt(f"{name}.{pname}", projectors[name].tensor(pname))

        def make_batch_loss(batch):
            emb_b = {name: emb[name][batch] for name in names}
            return build_joint_loss(projectors, frozen, sel, emb_b, labels[batch],
                                    cfg.loss_kind, cfg.beta, weights, cfg.asl)

        rng = seeding.rng(cfg.seed, "batches")
        history["joint"] = _run_epochs(combined, make_batch_loss, rng, train_idx,
                                       cfg, "joint training")
    else:
        for name in names:
            pp = projectors[name]

            def make_batch_loss(batch, pp=pp, name=name):
                return build_isolated_loss(pp, frozen, sel, emb[name][batch],
                                           labels[batch], cfg.loss_kind, cfg.beta,
                                           weights, cfg.asl)

            rng = seeding.rng(cfg.seed, "batches", name)
            history[name] = _run_epochs(pp.params, make_batch_loss, rng, train_idx,
                                        cfg, f"isolated training ({name})")

    return Checkpoint(
        config=cfg,
        source_specs=dataset.source_specs,
        task_names=tuple(dataset.task_names),
        dataset_mode=dataset.mode,
        dataset_seed=dataset.seed,
        designated=designated,
        projectors=projectors,
        stats=stats,
        history=history,
        _frozen=frozen,
    )


# ---------------------------------------------------------------------------
# prediction protocols


def _check_compatible(ckpt: Checkpoint, dataset: Dataset) -> None:
    ck = {(s.name, s.modality, s.dim) for s in ckpt.source_specs}
    ds = {(s.name, s.modality, s.dim) for s in dataset.source_specs}
    if ck != ds:
        raise ValueError("dataset sources do not match the checkpoint's sources")
    if tuple(dataset.task_names) != ckpt.task_names:
        raise ValueError("dataset task list does not match the checkpoint's tasks")


def _parse_mode(mode: str, ckpt_mode: str) -> tuple[str, str | None]:
    if mode == "joint":
        if ckpt_mode != "joint":
            raise ValueError(
                "joint prediction needs a joint-trained checkpoint "
                "(use iso-joint for isolation-trained projectors)")
        return "joint", None
    if mode == "iso-joint":
        if ckpt_mode != "isolated":
            raise ValueError("iso-joint prediction needs an isolation-trained checkpoint")
        return "iso-joint", None
    if mode.startswith("single:"):
        return "single", mode.split(":", 1)[1]
    raise ValueError(f"unknown prediction mode {mode!r}")


def predict(ckpt: Checkpoint, dataset: Dataset, indices, mode: str,
            threshold: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Confidences and thresholded predictions for the given record rows.

    mode is "joint", "iso-joint", or "single:<source>"; the decision rule is
    boundary-inclusive, yhat = 1 wherever phi >= threshold.
    """
    _check_compatible(ckpt, dataset)
    kind, single_source = _parse_mode(mode, ckpt.config.mode)
    if threshold is None:
        threshold = ckpt.config.threshold
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    names = ckpt.source_order()
    if kind == "single":
        if single_source not in names:
            raise ValueError(f"unknown source {single_source!r}")
        names = (single_source,)
    emb, _ = prepare_embeddings(dataset, stats=ckpt.stats)
    sel = selection_matrix(ckpt.designated, ckpt.config.lm.vocab)
    frozen = ckpt.frozen()
    idx = np.asarray(indices)
    if idx.size == 0:
        raise ValueError("no records to predict")
    out = np.empty((idx.size, len(ckpt.task_names)))
    for start in range(0, idx.size, PREDICT_CHUNK):
        rows = idx[start:start + PREDICT_CHUNK]
        tokens = [project(ckpt.projectors[name], emb[name][rows]) for name in names]
        phi = _confidence_graph(tokens, frozen, sel)
        out[start:start + rows.size] = phi.value
    return out, (out >= threshold).astype(np.int64)


@dataclass
class BssSelection:
    assignment: dict        # task name -> source name or None
    validation_f1: dict     # task name -> {source name -> f1}


def bss_select(ckpt: Checkpoint, dataset: Dataset, val_idx) -> BssSelection:
    """Per-task best single source by F1 on a labeled validation slice.

    Ties prefer higher recall, then the earlier source in the feed order.
    Tasks without any labeled validation record stay unselected.
    """
    if ckpt.config.mode != "isolated":
        raise ValueError("best-single-source selection needs an isolation-trained checkpoint")
    val_idx = np.asarray(val_idx)
    names = ckpt.source_order()
    labels = dataset.labels[val_idx]
    per_source = {}
    for name in names:
        _, yhat = predict(ckpt, dataset, val_idx, f"single:{name}")
        per_source[name] = yhat
    assignment: dict = {}
    scores: dict = {}
    for k, task in enumerate(ckpt.task_names):
        if not np.any(labels[:, k] != -1):
            assignment[task] = None
            scores[task] = {}
            continue
        best = None
        best_key = None
        f1s = {}
        for pos, name in enumerate(names):
            m = precision_recall(per_source[name][:, k], labels[:, k], task=task)
            f1 = f1_score(m)
            f1s[name] = f1
            key = (f1, m.recall, -pos)
            if best_key is None or key > best_key:
                best, best_key = name, key
        assignment[task] = best
        scores[task] = f1s
    return BssSelection(assignment=assignment, validation_f1=scores)


BSS_VALIDATION_RATIO = 0.8


def evaluate_protocol(ckpt: Checkpoint, dataset: Dataset, protocol: str,
                      threshold: float | None = None
                      ) -> tuple[list[TaskMetrics], BssSelection | None]:
    """Test-split metrics for one protocol: joint, iso-joint, single:<src>,
    or bss (which carves a patient-grouped validation slice out of the
    training split to pick sources, then scores them on the test split)."""
    _check_compatible(ckpt, dataset)
    train_idx, test_idx = split_by_patient(dataset.patients, ckpt.config.split_ratio,
                                           ckpt.config.seed)
    if test_idx.size == 0:
        raise ValueError("empty test split")
    if protocol != "bss":
        _, yhat = predict(ckpt, dataset, test_idx, protocol, threshold)
        return metrics_for_run(yhat, dataset.labels[test_idx], ckpt.task_names), None

    core, val = split_by_patient(dataset.patients[train_idx], BSS_VALIDATION_RATIO,
                                 ckpt.config.seed)
    selection = bss_select(ckpt, dataset, train_idx[val])
    per_source = {}
    for name in set(selection.assignment.values()):
        if name is None:
            continue
        _, yhat = predict(ckpt, dataset, test_idx, f"single:{name}", threshold)
        per_source[name] = yhat
    results = []
    for k, task in enumerate(ckpt.task_names):
        source = selection.assignment[task]
        if source is None:
            results.append(TaskMetrics(task=task, tp=0, fp=0, fn=0, tn=0,
                                       precision=0.0, recall=0.0, n_labeled=0,
                                       degenerate=True))
            continue
        results.append(precision_recall(per_source[source][:, k],
                                        dataset.labels[test_idx][:, k], task=task))
    return results, selection


# ---------------------------------------------------------------------------
# checkpoint persistence


CKPT_MANIFEST = "manifest"


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    param_files = {}
    for name, pp in ckpt.projectors.items():
        for pname in PARAM_NAMES:
            fname = f"param_{name}_{pname}.bin"
            tensorfile.write_matrix(out / fname, pp.value(pname))
            param_files[f"{name}.{pname}"] = fname
    stats_files = {}
    for name, st in ckpt.stats.items():
        fname = f"stats_{name}.bin"
        tensorfile.write_matrix(out / fname, np.stack([st.mean, st.std]))
        stats_files[name] = fname
    from .storage import _spec_to_dict  # shared spec serialization
    manifest = {
        "format": "riskfuse-checkpoint",
        "version": 1,
        "train_config": dataclasses.asdict(ckpt.config),
        "sources": [_spec_to_dict(s) for s in ckpt.source_specs],
        "task_names": list(ckpt.task_names),
        "dataset_mode": ckpt.dataset_mode,
        "dataset_seed": ckpt.dataset_seed,
        "designated": {"indices": list(ckpt.designated.indices),
                       "seed": ckpt.designated.seed},
        "history": ckpt.history,
        "params": param_files,
        "stats": stats_files,
    }
    dump_json(out / CKPT_MANIFEST, manifest)
    return out


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    manifest_path = root / CKPT_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: not a checkpoint directory (missing manifest)")
    manifest = read_json(manifest_path)
    if manifest.get("format") != "riskfuse-checkpoint":
        raise ValueError(f"{manifest_path}: unrecognized checkpoint manifest")
    tc = dict(manifest["train_config"])
    tc["asl"] = ASLConfig(**tc["asl"])
    tc["lm"] = LMConfig(**tc["lm"])
    cfg = TrainConfig(**tc)
    from .storage import _spec_from_dict
    specs = tuple(_spec_from_dict(d) for d in manifest["sources"])
    proj_cfgs = _projector_configs(specs, cfg.lm)
    projectors = {}
    for s in specs:
        loaded = {}
        for pname in PARAM_NAMES:
            mat = tensorfile.read_matrix(root / manifest["params"][f"{s.name}.{pname}"])
            loaded[pname] = mat.reshape(-1) if pname.endswith("_b") else mat
        projectors[s.name] = ProjectorParams(proj_cfgs[s.name], **loaded)
    stats = {}
    for s in specs:
        mat = tensorfile.read_matrix(root / manifest["stats"][s.name])
        stats[s.name] = FeatureStats(mean=mat[0], std=mat[1])
    designated = DesignatedVocab(indices=tuple(manifest["designated"]["indices"]),
                                 seed=int(manifest["designated"]["seed"]))
    return Checkpoint(
        config=cfg,
        source_specs=specs,
        task_names=tuple(manifest["task_names"]),
        dataset_mode=manifest["dataset_mode"],
        dataset_seed=int(manifest["dataset_seed"]),
        designated=designated,
        projectors=projectors,
        stats=stats,
        history=manifest.get("history", {}),
    )


# ---------------------------------------------------------------------------
# end-to-end gradient fidelity suite


def gradcheck_suite(seed: int = 0, tol: float = 1e-4, h: float = 1e-5
                    ) -> ad.GradCheckReport:
    """Finite-difference check of the full joint objective (three sources of
    width 8 into a 16-wide backbone, vocabulary 32, 4 tasks) with respect to
    every projector parameter."""
    lm = LMConfig(d_model=16, n_layers=2, n_heads=2, vocab=32, max_seq=4, seed=seed)
    gen = seeding.rng(seed, "gradcheck")
    names = ("alpha", "bravo", "charlie")
    emb = {name: gen.standard_normal((4, 8)) for name in names}
    labels = gen.integers(-1, 2, size=(4, 4))
    labels[0, 0] = 1
    labels[0, 1] = 0
    projectors = {name: init_projector(ProjectorConfig(8, lm.d_model), seed, name)
                  for name in names}
    frozen = init_frozen(lm)
    designated = draw_designated(lm.vocab, 4, seed)
    sel = selection_matrix(designated, lm.vocab)
    combined = ad.ParamSet()
    for name in names:
        for pname in PARAM_NAMES:
            combined.adopt(f"{name}.{pname}", projectors[name].tensor(pname))
    computation = build_joint_loss(projectors, frozen, sel, emb, labels,
                                   "asl", beta=10.0, asl=ASLConfig())
    return ad.finite_diff_check(computation, combined, h=h, tol=tol)
