"""Synthetic cohort generator with planted, recoverable label structure.

Each stay draws a latent state z ~ N(0, I). Task k is positive when
a_k . z exceeds tau_k = ||a_k|| * Phi^-1(1 - p_k), which pins the marginal
positive rate at p_k exactly. Sources observe (noisy linear views of)
disjoint subsets of the latent coordinates, and task directions span
coordinates seen by two or more sources, so recovering a task fully
requires combining sources. Patients contribute a geometric number of
stays with correlated latents.

Two output modes share the label machinery: `latent` stores per-source
embeddings directly; `raw` synthesizes time series (drift and level tied
to observed coordinates), timed imaging screenings, and token sequences
whose distribution encodes the observed coordinates.

Exact-count mode replaces threshold sampling by rank assignment on a_k . z:
the top pos_count records become positive, the bottom neg_count negative,
and the middle band unknown, reproducing a requested label profile exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import seeding
from .encoders import Screening, SourceSpec
from .losses import UNKNOWN
from .storage import Dataset, write_dataset

__all__ = [
    "TaskSpec",
    "GenConfig",
    "GenSummary",
    "threshold_for",
    "planted_labels",
    "task_source_names",
    "build",
    "generate",
    "table1_profile",
    "planted_profile",
    "TABLE1_COUNTS",
    "TABLE1_TOTAL",
    "PROFILES",
]

_NORMAL = NormalDist()


@dataclass(frozen=True)
class TaskSpec:
    name: str
    direction: tuple[float, ...]
    pos_rate: float
    missing_rate: float = 0.0
    exact_counts: tuple[int, int] | None = None  # (positives, negatives)

    def __post_init__(self):
        if not 0.0 < self.pos_rate < 1.0:
            raise ValueError(f"task {self.name!r}: pos_rate must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"task {self.name!r}: missing_rate must lie in [0, 1)")
        if all(w == 0.0 for w in self.direction):
            raise ValueError(f"task {self.name!r}: direction must be nonzero")
        if self.exact_counts is not None:
            pos, neg = self.exact_counts
            if pos < 0 or neg < 0:
                raise ValueError(f"task {self.name!r}: exact counts must be nonnegative")


@dataclass(frozen=True)
class GenConfig:
    latent_dim: int
    sources: tuple[SourceSpec, ...]
    observed: dict = field(default_factory=dict)  # source name -> latent coords
    tasks: tuple[TaskSpec, ...] = ()
    mode: str = "latent"
    seed: int = 0
    n_patients: int = 0
    n_records: int | None = None   # set to force the total record count
    stay_p: float = 0.5            # geometric(stay_p) stays per patient
    patient_corr: float = 0.3      # correlation of latents across one patient's stays
    noise_std: float = 0.05
    enforce_cross_modal: bool = True

    def validate(self) -> None:
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if not self.sources:
            raise ValueError("need at least one source")
        names = [s.name for s in self.sources]
        if len(set(names)) != len(names):
            raise ValueError("duplicate source names")
        if set(self.observed) != set(names):
            raise ValueError("observed coordinate map must cover exactly the sources")
        for name, coords in self.observed.items():
            if not coords:
                raise ValueError(f"source {name!r} observes no coordinates")
            if any(c < 0 or c >= self.latent_dim for c in coords):
                raise ValueError(f"source {name!r}: observed coordinate out of range")
        if not self.tasks:
            raise ValueError("need at least one task")
        tnames = [t.name for t in self.tasks]
        if len(set(tnames)) != len(tnames):
            raise ValueError("duplicate task names")
        if self.mode not in ("latent", "raw"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.stay_p <= 1.0:
            raise ValueError("stay_p must lie in (0, 1]")
        if not 0.0 <= self.patient_corr <= 1.0:
            raise ValueError("patient_corr must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        exact = [t for t in self.tasks if t.exact_counts is not None]
        if exact and self.n_records is None:
            raise ValueError("exact-count tasks require n_records")
        if self.n_records is not None:
            if self.n_records <= 0:
                raise ValueError("n_records must be positive")
            for t in exact:
                pos, neg = t.exact_counts
                if pos + neg > self.n_records:
                    raise ValueError(
                        f"task {t.name!r}: exact counts {pos}+{neg} exceed "
                        f"record count {self.n_records}")
        elif self.n_patients <= 0:
            raise ValueError("need n_patients (or n_records) to size the cohort")
        for t in self.tasks:
            if len(t.direction) != self.latent_dim:
                raise ValueError(f"task {t.name!r}: direction length must be {self.latent_dim}")
            if self.enforce_cross_modal and len(task_source_names(self, t)) < 2:
                raise ValueError(
                    f"task {t.name!r}: signal direction must touch coordinates observed "
                    f"by at least two sources")
        image_specs = [s for s in self.sources if s.modality == "image"]
        if self.mode == "raw" and len({s.raw_dim for s in image_specs}) > 1:
            raise ValueError("image sources must share raw_dim (screenings are shared)")


def task_source_names(cfg: GenConfig, task: TaskSpec) -> tuple[str, ...]:
    """Sources whose observed coordinates carry nonzero weight in the task."""
    support = {i for i, w in enumerate(task.direction) if w != 0.0}
    touched = []
    for s in cfg.sources:
        if support & set(cfg.observed[s.name]):
            touched.append(s.name)
    return tuple(touched)


def threshold_for(direction, pos_rate: float) -> float:
    """tau = ||a|| * Phi^-1(1 - p), so P(a . z > tau) = p for z ~ N(0, I)."""
    norm = float(np.linalg.norm(np.asarray(direction, dtype=np.float64)))
    if norm == 0.0:
        raise ValueError("direction must be nonzero")
    return norm * _NORMAL.inv_cdf(1.0 - pos_rate)


def planted_labels(z, directions, thresholds) -> np.ndarray:
    """Binary labels for one latent vector: 1 where a_k . z > tau_k."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(directions, dtype=np.float64)
    tau = np.asarray(thresholds, dtype=np.float64)
    return (a @ z > tau).astype(np.int64)


@dataclass
class GenSummary:
    n_records: int
    n_patients: int
    counts: dict  # task name -> {"pos": int, "neg": int, "unknown": int}

    def pair(self, task: str) -> tuple[int, int]:
        c = self.counts[task]
        return c["pos"], c["neg"]


def _draw_cohort(cfg: GenConfig, gen: np.random.Generator) -> np.ndarray:
    """Patient id per record; geometric stays, optionally truncated to n_records."""
    if cfg.n_records is not None:
        ids = []
        patient = 0
        remaining = cfg.n_records
        while remaining > 0:
            stays = min(int(gen.geometric(cfg.stay_p)), remaining)
            ids.extend([patient] * stays)
            patient += 1
            remaining -= stays
        return np.asarray(ids, dtype=np.int64)
    stays = gen.geometric(cfg.stay_p, size=cfg.n_patients)
    return np.repeat(np.arange(cfg.n_patients, dtype=np.int64), stays)


def _draw_latents(cfg: GenConfig, patients: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    n = patients.size
    n_patients = int(patients.max()) + 1
    base = gen.standard_normal((n_patients, cfg.latent_dim))
    fresh = gen.standard_normal((n, cfg.latent_dim))
    rho = cfg.patient_corr
    return math.sqrt(rho) * base[patients] + math.sqrt(1.0 - rho) * fresh


def _assign_labels(cfg: GenConfig, scores: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    n = scores.shape[0]
    labels = np.full((n, len(cfg.tasks)), UNKNOWN, dtype=np.int64)
    for k, task in enumerate(cfg.tasks):
        col = scores[:, k]
        if task.exact_counts is not None:
            pos, neg = task.exact_counts
            order = np.argsort(-col, kind="stable")
            labels[order[:pos], k] = 1
            if neg > 0:
                labels[order[n - neg:], k] = 0
        else:
            tau = threshold_for(task.direction, task.pos_rate)
            labels[:, k] = (col > tau).astype(np.int64)
            if task.missing_rate > 0.0:
                mask = gen.random(n) < task.missing_rate
                labels[mask, k] = UNKNOWN
    return labels


def _latent_payloads(cfg: GenConfig, z: np.ndarray, gen: np.random.Generator) -> dict:
    out = {}
    for s in cfg.sources:
        coords = list(cfg.observed[s.name])
        mix = seeding.rng(cfg.seed, "mixmap", s.source_id).normal(
            0.0, 1.0 / math.sqrt(len(coords)), size=(s.dim, len(coords)))
        noise = gen.standard_normal((z.shape[0], s.dim))
        out[s.name] = z[:, coords] @ mix.T + cfg.noise_std * noise
    return out


def _raw_payloads(cfg: GenConfig, z: np.ndarray, gen: np.random.Generator) -> dict:
    n = z.shape[0]
    timeseries: dict = {}
    tokens: dict = {}
    screenings: list | None = None
    image_specs = [s for s in cfg.sources if s.modality == "image"]
    if image_specs:
        union = sorted({c for s in image_specs for c in cfg.observed[s.name]})
        raw_dim = image_specs[0].raw_dim
        proj = seeding.rng(cfg.seed, "screen-proj").normal(
            0.0, 1.0 / math.sqrt(len(union)), size=(raw_dim, len(union)))
        screenings = []
        for i in range(n):
            count = int(gen.integers(1, 5))
            times = np.sort(gen.uniform(0.0, 72.0, size=count))
            events = []
            for t in times:
                vec = proj @ z[i, union] + cfg.noise_std * gen.standard_normal(raw_dim)
                events.append(Screening(time=float(t), vector=vec))
            screenings.append(events)
    for s in cfg.sources:
        coords = list(cfg.observed[s.name])
        if s.modality == "time-series":
            records = []
            for i in range(n):
                rec = []
                for j in range(s.n_series):
                    level = z[i, coords[j % len(coords)]]
                    drift = z[i, coords[(j + 1) % len(coords)]]
                    length = int(gen.integers(6, 17))
                    ts = np.linspace(0.0, 1.0, length)
                    rec.append(level + drift * ts + cfg.noise_std * gen.standard_normal(length))
                records.append(rec)
            timeseries[s.name] = records
        elif s.modality == "text":
            mix = seeding.rng(cfg.seed, "token-map", s.source_id).normal(
                0.0, 1.0, size=(s.token_vocab, len(coords)))
            records = []
            for i in range(n):
                logits = mix @ z[i, coords]
                probs = np.exp(logits - logits.max())
                probs /= probs.sum()
                count = int(gen.integers(60, 200))
                records.append(gen.choice(s.token_vocab, size=count, p=probs).astype(np.int64))
            tokens[s.name] = records
    return {"timeseries": timeseries, "tokens": tokens, "screenings": screenings}


def build(cfg: GenConfig) -> Dataset:
    """Generate the dataset in memory (deterministic in cfg.seed)."""
    cfg.validate()
    gen = seeding.rng(cfg.seed, "generate")
    patients = _draw_cohort(cfg, gen)
    z = _draw_latents(cfg, patients, gen)
    directions = np.asarray([t.direction for t in cfg.tasks], dtype=np.float64)
    scores = z @ directions.T
    labels = _assign_labels(cfg, scores, gen)
    ds = Dataset(
        source_specs=cfg.sources,
        task_names=tuple(t.name for t in cfg.tasks),
        labels=labels,
        patients=patients,
        mode=cfg.mode,
        seed=cfg.seed,
        generator={
            "latent_dim": cfg.latent_dim,
            "observed": {k: list(v) for k, v in cfg.observed.items()},
            "tasks": [{"name": t.name, "pos_rate": t.pos_rate,
                       "missing_rate": t.missing_rate} for t in cfg.tasks],
            "stay_p": cfg.stay_p,
            "patient_corr": cfg.patient_corr,
            "noise_std": cfg.noise_std,
        },
    )
    if cfg.mode == "latent":
        ds.embeddings = _latent_payloads(cfg, z, gen)
    else:
        raw = _raw_payloads(cfg, z, gen)
        ds.raw_timeseries = raw["timeseries"]
        ds.raw_tokens = raw["tokens"]
        ds.raw_screenings = raw["screenings"]
    ds.validate()
    return ds


def summarize(ds: Dataset) -> GenSummary:
    counts = {}
    for k, name in enumerate(ds.task_names):
        col = ds.labels[:, k]
        counts[name] = {
            "pos": int(np.sum(col == 1)),
            "neg": int(np.sum(col == 0)),
            "unknown": int(np.sum(col == UNKNOWN)),
        }
    return GenSummary(n_records=ds.n_records,
                      n_patients=int(np.unique(ds.patients).size),
                      counts=counts)


def generate(cfg: GenConfig, out_dir) -> GenSummary:
    ds = build(cfg)
    write_dataset(ds, out_dir)
    return summarize(ds)


# ---------------------------------------------------------------------------
# built-in profiles


# (name, positives, negatives) of the reference cohort; totals 90811 records.
TABLE1_COUNTS = (
    ("Fracture", 1527, 85),
    ("Lung Lesion", 1511, 100),
    ("Enlarged CM", 4783, 1831),
    ("Consolidation", 8046, 1701),
    ("Pneumonia", 8145, 6539),
    ("Atelectasis", 29466, 808),
    ("Lung Opacity", 28433, 1107),
    ("Pneumothorax", 6365, 27806),
    ("Edema", 19217, 11496),
    ("Cardiomegaly", 27760, 7072),
    ("Length of stay", 8488, 82323),
    ("48h Mortality", 2230, 88581),
)
TABLE1_TOTAL = 90811


def _desk_sources() -> tuple[SourceSpec, ...]:
    return (
        SourceSpec(0, "xr", "image", 8, raw_dim=16, image_rule="latest"),
        SourceSpec(1, "axr", "image", 8, raw_dim=16, image_rule="aggregate"),
        SourceSpec(2, "proc", "time-series", 33, n_series=3),
        SourceSpec(3, "lab", "time-series", 44, n_series=4),
        SourceSpec(4, "chart", "time-series", 22, n_series=2),
        SourceSpec(5, "txt", "text", 8, token_vocab=64),
    )


_DESK_OBSERVED = {
    "xr": (0, 1), "axr": (2, 3), "proc": (4, 5),
    "lab": (6, 7), "chart": (8, 9), "txt": (10, 11),
}

_SOURCE_RING = ("xr", "axr", "proc", "lab", "chart", "txt")

_WEIGHTS = (1.0, -0.7, 0.8, 1.2, -0.9, 0.6)


def _ring_direction(latent_dim: int, start: int, span: int) -> tuple[float, ...]:
    """Direction touching `span` consecutive sources of the observation ring."""
    direction = [0.0] * latent_dim
    w = 0
    for step in range(span):
        name = _SOURCE_RING[(start + step) % len(_SOURCE_RING)]
        for coord in _DESK_OBSERVED[name]:
            direction[coord] = _WEIGHTS[w % len(_WEIGHTS)]
            w += 1
    return tuple(direction)


def table1_profile(scale: float = 1.0, seed: int = 0, mode: str = "latent") -> GenConfig:
    """Exact-count profile matching the reference cohort's label table.

    `scale` shrinks every count proportionally (rounded, floor 1), including
    the total record count.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    total = max(1, round(TABLE1_TOTAL * scale))
    tasks = []
    for k, (name, pos, neg) in enumerate(TABLE1_COUNTS):
        pos_s = max(1, round(pos * scale))
        neg_s = max(1, round(neg * scale))
        tasks.append(TaskSpec(
            name=name,
            direction=_ring_direction(12, start=k % 6, span=2),
            pos_rate=min(max(pos / TABLE1_TOTAL, 1e-6), 1.0 - 1e-6),
            missing_rate=max(0.0, 1.0 - (pos + neg) / TABLE1_TOTAL),
            exact_counts=(pos_s, neg_s),
        ))
    return GenConfig(
        latent_dim=12,
        sources=_desk_sources(),
        observed=dict(_DESK_OBSERVED),
        tasks=tuple(tasks),
        mode=mode,
        seed=seed,
        n_records=total,
        stay_p=0.1636,  # about 6.1 stays per patient
        patient_corr=0.3,
        noise_std=0.05,
    )


def planted_profile(n_records: int = 2000, seed: int = 0, mode: str = "latent") -> GenConfig:
    """Cross-modal benchmark: eight tasks spanning two or three sources each."""
    if n_records <= 0:
        raise ValueError("n_records must be positive")
    rates = (0.30, 0.25, 0.35, 0.28, 0.32, 0.22, 0.30, 0.26)
    tasks = []
    for k in range(8):
        span = 2 if k < 6 else 3
        tasks.append(TaskSpec(
            name=f"task{k}",
            direction=_ring_direction(12, start=k % 6, span=span),
            pos_rate=rates[k],
            missing_rate=0.10,
        ))
    return GenConfig(
        latent_dim=12,
        sources=_desk_sources(),
        observed=dict(_DESK_OBSERVED),
        tasks=tuple(tasks),
        mode=mode,
        seed=seed,
        n_records=n_records,
        stay_p=0.5,
        patient_corr=0.3,
        noise_std=0.05,
    )


PROFILES = {"table1": table1_profile, "planted": planted_profile}
