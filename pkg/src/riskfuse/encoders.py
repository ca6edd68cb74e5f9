"""Frozen per-source featurizers and embedding helpers.

Three modalities are supported. Clinical time series are summarized with a
fixed 11-statistic vector per series; imaging screenings arrive as (time,
vector) pairs reduced to one embedding by recency rules; free text arrives
as token-id sequences averaged through a fixed embedding table. Nothing in
this module trains: the stand-in image/text encoders are seeded random
linear maps, deterministic given (source, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding

__all__ = [
    "N_TS_FEATURES",
    "TEXT_CHUNK_TOKENS",
    "SourceSpec",
    "default_source_specs",
    "FeatureStats",
    "fit_feature_stats",
    "apply_feature_stats",
    "ts_features",
    "timeseries_feature_matrix",
    "embed_timeseries_source",
    "Screening",
    "latest_image",
    "aggregate_images",
    "aggregate_text",
    "image_stub_matrix",
    "encode_image_stub",
    "text_stub_table",
    "encode_text_with_table",
    "encode_text_stub",
]

N_TS_FEATURES = 11
TEXT_CHUNK_TOKENS = 512

MODALITIES = ("time-series", "image", "text")


@dataclass(frozen=True)
class SourceSpec:
    """Identity and geometry of one input source."""

    source_id: int
    name: str
    modality: str
    dim: int
    n_series: int = 0     # time-series only
    raw_dim: int = 0      # image only: length of a screening's raw vector
    token_vocab: int = 0  # text only
    image_rule: str = "latest"  # image only: "latest" or "aggregate"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "image" and self.image_rule not in ("latest", "aggregate"):
            raise ValueError(f"unknown image rule {self.image_rule!r}")
        if self.dim <= 0:
            raise ValueError("embedding dim must be positive")
        if self.modality == "time-series":
            if self.n_series <= 0:
                raise ValueError("time-series source needs n_series")
            if self.dim != N_TS_FEATURES * self.n_series:
                raise ValueError(
                    f"time-series dim must be {N_TS_FEATURES} * n_series = "
                    f"{N_TS_FEATURES * self.n_series}, got {self.dim}")
        if self.modality == "image" and self.raw_dim <= 0:
            raise ValueError("image source needs raw_dim")
        if self.modality == "text" and self.token_vocab <= 0:
            raise ValueError("text source needs token_vocab")


def default_source_specs() -> tuple[SourceSpec, ...]:
    """The six clinical sources at their reference dimensions."""
    return (
        SourceSpec(0, "xr", "image", 1024, raw_dim=256, image_rule="latest"),
        SourceSpec(1, "axr", "image", 1024, raw_dim=256, image_rule="aggregate"),
        SourceSpec(2, "proc", "time-series", 110, n_series=10),
        SourceSpec(3, "lab", "time-series", 242, n_series=22),
        SourceSpec(4, "chart", "time-series", 99, n_series=9),
        SourceSpec(5, "txt", "text", 768, token_vocab=512),
    )


# ---------------------------------------------------------------------------
# time-series features


def ts_features(values) -> np.ndarray:
    """Fixed 11-feature summary of one series, in this order:

    mean, population variance, min, max, mean consecutive difference
    (signed), mean absolute consecutive difference, max consecutive
    difference (signed), sum of absolute consecutive differences, last minus
    first, peak count, least-squares slope against indices 0..L-1.

    A peak is an interior sample strictly greater than both neighbors and
    strictly greater than the series median. Length-1 series get zeros for
    every difference-based feature, the variance, the peak count, and the
    slope.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"series must be a nonempty 1-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    out = np.zeros(N_TS_FEATURES)
    out[0] = x.mean()
    out[2] = x.min()
    out[3] = x.max()
    if x.size == 1:
        return out
    out[1] = x.var()  # population variance
    d = np.diff(x)
    out[4] = d.mean()
    out[5] = np.abs(d).mean()
    out[6] = d.max()
    out[7] = np.abs(d).sum()
    out[8] = x[-1] - x[0]
    if x.size >= 3:
        med = np.median(x)
        interior = x[1:-1]
        peaks = (interior > x[:-2]) & (interior > x[2:]) & (interior > med)
        out[9] = np.count_nonzero(peaks)
    idx = np.arange(x.size, dtype=np.float64)
    ic = idx - idx.mean()
    out[10] = float(ic @ (x - x.mean()) / (ic @ ic))
    return out


@dataclass
class FeatureStats:
    """Per-dimension mean and population std fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("stats must be matching 1-D vectors")
        if np.any(self.std < 0) or not np.all(np.isfinite(self.mean)):
            raise ValueError("invalid feature stats")


STD_FLOOR = 1e-12


def fit_feature_stats(matrix) -> FeatureStats:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError(f"need a nonempty (records, features) matrix, got {m.shape}")
    return FeatureStats(mean=m.mean(axis=0), std=m.std(axis=0))


def apply_feature_stats(matrix, stats: FeatureStats) -> np.ndarray:
    """Z-score; dimensions whose fitted std is below 1e-12 map to zero."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape[-1] != stats.mean.size:
        raise ValueError(f"feature count {m.shape[-1]} does not match stats ({stats.mean.size})")
    safe = np.where(stats.std < STD_FLOOR, 1.0, stats.std)
    z = (m - stats.mean) / safe
    return np.where(stats.std < STD_FLOOR, 0.0, z)


def timeseries_feature_matrix(records) -> np.ndarray:
    """(records, 11 * n_series) raw feature matrix for one source.

    `records` is a list of records, each a list of per-series 1-D arrays in
    a fixed series order shared by every record.
    """
    if not records:
        raise ValueError("no records to featurize")
    n_series = len(records[0])
    feats = np.empty((len(records), N_TS_FEATURES * n_series))
    for i, rec in enumerate(records):
        if len(rec) != n_series:
            raise ValueError(f"record {i} has {len(rec)} series, expected {n_series}")
        for j, series in enumerate(rec):
            feats[i, j * N_TS_FEATURES:(j + 1) * N_TS_FEATURES] = ts_features(series)
    return feats


def embed_timeseries_source(records, stats: FeatureStats | None = None
                            ) -> tuple[np.ndarray, FeatureStats]:
    """Featurize and normalize one time-series source.

    Stats are fitted here when not supplied, so pass the training-split
    stats when embedding evaluation data.
    """
    feats = timeseries_feature_matrix(records)
    if stats is None:
        stats = fit_feature_stats(feats)
    return apply_feature_stats(feats, stats), stats


# ---------------------------------------------------------------------------
# imaging screenings


@dataclass(frozen=True)
class Screening:
    """One imaging event: hours since admission plus its vector payload."""

    time: float
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))
        if self.time < 0:
            raise ValueError(f"screening time must be nonnegative, got {self.time}")


def _check_screenings(screenings) -> list[Screening]:
    if not screenings:
        raise ValueError("record has no screenings")
    dim = screenings[0].vector.size
    for s in screenings:
        if s.vector.size != dim:
            raise ValueError("screening vectors must share one dimension")
    return list(screenings)


def latest_image(screenings) -> np.ndarray:
    """Vector of the screening with the greatest timestamp (last wins ties)."""
    items = _check_screenings(screenings)
    best = items[0]
    for s in items[1:]:
        if s.time >= best.time:
            best = s
    return best.vector.copy()


def aggregate_images(screenings, normalize: bool = True) -> np.ndarray:
    """Recency-weighted average: w_j = (t_j - min t) / max t.

    With normalize=True (default) the weights are divided by their sum; when
    they sum to zero (single screening, equal times, or all times zero) the
    latest screening is returned instead. normalize=False applies the raw
    weights literally, except that all-zero times still fall back to the
    latest screening (the weight formula is undefined there).
    """
    items = _check_screenings(screenings)
    times = np.array([s.time for s in items], dtype=np.float64)
    t_max = times.max()
    if t_max == 0.0:
        return latest_image(items)
    w = (times - times.min()) / t_max
    stack = np.stack([s.vector for s in items])
    if not normalize:
        return w @ stack
    total = w.sum()
    if total == 0.0:
        return latest_image(items)
    return (w / total) @ stack


def aggregate_text(chunk_embeddings) -> np.ndarray:
    """Mean of per-chunk embeddings."""
    chunks = np.asarray(chunk_embeddings, dtype=np.float64)
    if chunks.ndim != 2 or chunks.shape[0] == 0:
        raise ValueError(f"need a nonempty (chunks, dim) matrix, got {chunks.shape}")
    return chunks.mean(axis=0)


# ---------------------------------------------------------------------------
# stand-in encoders (fixed random linear maps)


def image_stub_matrix(spec: SourceSpec, seed: int) -> np.ndarray:
    if spec.modality != "image":
        raise ValueError(f"source {spec.name!r} is not an image source")
    gen = seeding.rng(seed, "image-stub", spec.source_id)
    return gen.normal(0.0, 1.0 / np.sqrt(spec.raw_dim), size=(spec.dim, spec.raw_dim))


def encode_image_stub(spec: SourceSpec, raw, seed: int) -> np.ndarray:
    """Linear stub embedding of one raw screening vector (zero bias, so a
    zero payload embeds to zero)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (spec.raw_dim,):
        raise ValueError(f"raw vector shape {raw.shape} does not match raw_dim {spec.raw_dim}")
    return image_stub_matrix(spec, seed) @ raw


def text_stub_table(spec: SourceSpec, seed: int) -> np.ndarray:
    if spec.modality != "text":
        raise ValueError(f"source {spec.name!r} is not a text source")
    gen = seeding.rng(seed, "text-stub", spec.source_id)
    return gen.normal(0.0, 1.0, size=(spec.token_vocab, spec.dim))


def encode_text_with_table(table: np.ndarray, token_ids,
                           chunk_tokens: int = TEXT_CHUNK_TOKENS) -> np.ndarray:
    """Chunk a token sequence, average token embeddings per chunk, then
    average the chunks. 600 tokens become chunks of 512 and 88."""
    ids = np.asarray(token_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be a nonempty 1-D array")
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ValueError(f"token ids out of range [0, {table.shape[0]})")
    chunks = [table[ids[i:i + chunk_tokens]].mean(axis=0)
              for i in range(0, ids.size, chunk_tokens)]
    return aggregate_text(np.stack(chunks))


def encode_text_stub(spec: SourceSpec, token_ids, seed: int,
                     chunk_tokens: int = TEXT_CHUNK_TOKENS) -> np.ndarray:
    return encode_text_with_table(text_stub_table(spec, seed), token_ids, chunk_tokens)
