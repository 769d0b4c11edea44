"""
Dataset ingestion, window construction, chronological splitting, the synthetic
regime-switching scenario and the cloud case base.

Slots are positions in a node's series. Inputs are expected to be pre-aligned to a
single cadence with a common start across nodes, so slot `t` refers to the same
instant for every node.

Window at slot `t`:
    features  = W_lag normalized power values at slots t-W_lag .. t-1,
                the covariates recorded at slot t-1,
                sin/cos of the time of day at slot t
    target    = normalized power at slots t .. t+H-1
    reveal    = t + H (first slot at which the whole target is known)
"""

from __future__ import annotations

import logging
from enum import IntEnum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.distance import cdist

from edgecast.core import HorizonVector
from edgecast.exceptions import ConfigError, DataError, SchemaError

log = logging.getLogger(__name__)

DEFAULT_W_LAG: int = 24
DEFAULT_HORIZON: int = 12
DEFAULT_W_MU: int = 6
SECONDS_PER_DAY: int = 86_400
CALENDAR_FEATURES: int = 2


class RawSeries(BaseModel):
    """
    One node's raw measurements.

    Attributes:
        node_id: node identifier
        timestamps: strictly increasing epoch seconds
        power: raw power per timestamp, nonnegative
        covariates: named weather columns aligned with `timestamps`
        capacity: site capacity in the units of `power`
        regime: optional ground-truth weather regime per timestamp (synthetic data
            only, never used as a model input)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    node_id: str
    timestamps: np.ndarray
    power: np.ndarray
    covariates: dict[str, np.ndarray] = Field(default_factory=dict)
    capacity: float = Field(gt=0)
    regime: Optional[np.ndarray] = None

    @field_validator("timestamps", mode="before")
    @classmethod
    def to_int_array(cls, v: object) -> np.ndarray:
        return np.asarray(v, dtype=np.int64)

    @field_validator("power", mode="before")
    @classmethod
    def to_float_array(cls, v: object) -> np.ndarray:
        return np.asarray(v, dtype=float)

    @field_validator("covariates", mode="before")
    @classmethod
    def to_float_columns(cls, v: dict[str, object]) -> dict[str, np.ndarray]:
        return {k: np.asarray(c, dtype=float) for k, c in v.items()}

    @model_validator(mode="after")
    def check_series(self) -> RawSeries:
        n = len(self.timestamps)
        if len(self.power) != n or any(len(c) != n for c in self.covariates.values()):
            raise ValueError(f"node {self.node_id}: column lengths disagree")
        if self.regime is not None and len(self.regime) != n:
            raise ValueError(f"node {self.node_id}: regime length disagrees")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError(f"node {self.node_id}: timestamps not strictly increasing")
        if np.any(self.power < 0):
            raise DataError(f"node {self.node_id}: negative power")
        return self

    @property
    def covariate_names(self) -> list[str]:
        return sorted(self.covariates)

    def __len__(self) -> int:
        return len(self.timestamps)


class ColumnSchema(BaseModel):
    """
    Column names of the input CSV files.

    Attributes:
        timestamp: RFC 3339 strings or epoch seconds
        node: node identifier column
        power: raw power column
        regime: optional side-channel column excluded from covariates
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    timestamp: str = "timestamp"
    node: str = "node_id"
    power: str = "power"
    regime: Optional[str] = "regime"


class LoadedDataset(BaseModel):
    """
    Result of reading one or more CSV files.

    Attributes:
        series: one series per node, in first-seen order
        dropped_rows: rows discarded for missing or unparseable fields
    """

    series: list[RawSeries]
    dropped_rows: int = 0


def _parse_timestamps(col: pd.Series) -> pd.Series:
    if pd.api.types.is_numeric_dtype(col):
        return pd.to_numeric(col, errors="coerce")
    numeric = pd.to_numeric(col, errors="coerce")
    if numeric.notna().all():
        return numeric
    parsed = pd.to_datetime(col, utc=True, errors="coerce")
    seconds = (parsed - pd.Timestamp(0, tz="UTC")) // pd.Timedelta(seconds=1)
    return seconds.where(parsed.notna())


def load_capacity_csv(path: Union[str, Path]) -> dict[str, float]:
    """Reads a `node_id,capacity` file."""
    df = pd.read_csv(path, dtype={"node_id": str})
    missing = {"node_id", "capacity"} - set(df.columns)
    if missing:
        raise SchemaError(f"{path}: missing capacity columns {sorted(missing)}")
    return {str(n): float(c) for n, c in zip(df["node_id"], df["capacity"])}


def load_csv_dataset(
    paths: Union[str, Path, Sequence[Union[str, Path]]],
    capacity: dict[str, float],
    schema: ColumnSchema = ColumnSchema(),
) -> LoadedDataset:
    """
    Reads one file or one file per node into per-node series. Rows with a missing or
    unparseable timestamp, node, power or covariate value are dropped and counted.

    Args:
        paths: CSV file(s)
        capacity: site capacity per node id
        schema: column names

    Raises:
        SchemaError: a required column is missing
        DataError: timestamps are not strictly increasing within a node, or a node
            has no capacity entry
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    frames = []
    for p in paths:
        df = pd.read_csv(p, dtype={schema.node: str})
        missing = {schema.timestamp, schema.node, schema.power} - set(df.columns)
        if missing:
            raise SchemaError(f"{p}: missing required columns {sorted(missing)}")
        frames.append(df)
    if not frames:
        return LoadedDataset(series=[])
    df = pd.concat(frames, ignore_index=True, sort=False)

    required = [schema.timestamp, schema.node, schema.power]
    covariates = [
        c for c in df.columns if c not in required and c != schema.regime
    ]
    df[schema.timestamp] = _parse_timestamps(df[schema.timestamp])
    df[schema.power] = pd.to_numeric(df[schema.power], errors="coerce")
    for c in covariates:
        df[c] = pd.to_numeric(df[c], errors="coerce")

    before = len(df)
    df = df.dropna(subset=required + covariates)
    dropped = before - len(df)
    if dropped:
        log.warning("dropped %d incomplete rows", dropped)

    series = []
    for node_id, group in df.groupby(schema.node, sort=False):
        node_id = str(node_id)
        if node_id not in capacity:
            raise DataError(f"no capacity given for node {node_id}")
        regime = None
        if schema.regime and schema.regime in group.columns:
            regime = group[schema.regime].to_numpy()
        series.append(
            RawSeries(
                node_id=node_id,
                timestamps=group[schema.timestamp].to_numpy(dtype=np.int64),
                power=group[schema.power].to_numpy(dtype=float),
                covariates={c: group[c].to_numpy(dtype=float) for c in covariates},
                capacity=capacity[node_id],
                regime=regime,
            )
        )
    log.info("loaded %d series from %d file(s)", len(series), len(frames))
    return LoadedDataset(series=series, dropped_rows=dropped)


def write_dataset(series: Sequence[RawSeries], out_dir: Union[str, Path]) -> list[Path]:
    """
    Writes one CSV per node, a capacity file and the regime side channel. Returns the
    per-node file paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    regimes = []
    for s in series:
        frame = pd.DataFrame(
            {"timestamp": s.timestamps, "node_id": s.node_id, "power": s.power}
        )
        for name in s.covariate_names:
            frame[name] = s.covariates[name]
        path = out / f"{s.node_id}.csv"
        frame.to_csv(path, index=False)
        written.append(path)
        if s.regime is not None:
            regimes.append(
                pd.DataFrame(
                    {"timestamp": s.timestamps, "node_id": s.node_id, "regime": s.regime}
                )
            )
    pd.DataFrame(
        {
            "node_id": [s.node_id for s in series],
            "capacity": [s.capacity for s in series],
        }
    ).to_csv(out / "capacity.csv", index=False)
    if regimes:
        pd.concat(regimes).to_csv(out / "regimes.csv", index=False)
    return written


class FeatureLayout(BaseModel):
    """
    Positions of the feature blocks inside a window's feature vector.

    Attributes:
        w_lag: number of lagged power values
        covariates: covariate names, in feature order
    """

    model_config = ConfigDict(frozen=True)

    w_lag: int = Field(DEFAULT_W_LAG, ge=1)
    covariates: tuple[str, ...] = ()

    @property
    def lags(self) -> slice:
        return slice(0, self.w_lag)

    @property
    def weather(self) -> slice:
        return slice(self.w_lag, self.w_lag + len(self.covariates))

    @property
    def calendar(self) -> slice:
        start = self.w_lag + len(self.covariates)
        return slice(start, start + CALENDAR_FEATURES)

    @property
    def dim(self) -> int:
        return self.w_lag + len(self.covariates) + CALENDAR_FEATURES

    @property
    def last_lag(self) -> int:
        return self.w_lag - 1


class ObservationWindow(BaseModel):
    """
    Local model input at one slot. Built only from records before the slot, plus the
    slot's calendar position.

    Attributes:
        node_id: node identifier
        slot: slot index t
        timestamp: epoch seconds of slot t
        features: lags, latest past covariates, calendar encodings
        weather_history: covariate records of the last W_mu slots before t, oldest
            first (shape W_mu x n_covariates, fewer rows near the series start)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    node_id: str
    slot: int
    timestamp: int
    features: np.ndarray
    weather_history: np.ndarray


class Sample(BaseModel):
    """
    A window and its delayed target.

    Attributes:
        window: the observation window
        target: normalized power over the next H slots
        reveal_slot: slot at which the target becomes known
        capacity: site capacity, for reporting errors in raw units
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    window: ObservationWindow
    target: HorizonVector
    reveal_slot: int
    capacity: float = 1.0

    @model_validator(mode="after")
    def reveal_after_slot(self) -> Sample:
        if self.reveal_slot <= self.window.slot:
            raise ValueError("reveal_slot must be after the window slot")
        return self

    @property
    def slot(self) -> int:
        return self.window.slot

    @property
    def node_id(self) -> str:
        return self.window.node_id


def normalized_power(series: RawSeries) -> tuple[np.ndarray, int]:
    """Capacity-normalized power clamped to [0, 1], plus the number of clamped values."""
    norm = series.power / series.capacity
    clamped = int(np.count_nonzero(norm > 1.0))
    if clamped:
        log.warning(
            "node %s: %d power values above capacity clamped", series.node_id, clamped
        )
    return np.clip(norm, 0.0, 1.0), clamped


def calendar_encoding(timestamps: np.ndarray) -> np.ndarray:
    phase = 2 * np.pi * (np.asarray(timestamps) % SECONDS_PER_DAY) / SECONDS_PER_DAY
    return np.column_stack([np.sin(phase), np.cos(phase)])


def build_samples(
    series: RawSeries,
    w_lag: int = DEFAULT_W_LAG,
    horizon: int = DEFAULT_HORIZON,
    w_mu: int = DEFAULT_W_MU,
) -> list[Sample]:
    """
    One sample per slot t with W_lag past slots and H future slots available. Series
    shorter than W_lag + H yield no samples.
    """
    n = len(series)
    if n < w_lag + horizon:
        return []
    power, _ = normalized_power(series)
    names = series.covariate_names
    weather = (
        np.column_stack([series.covariates[c] for c in names])
        if names
        else np.zeros((n, 0))
    )
    calendar = calendar_encoding(series.timestamps)

    samples = []
    for t in range(w_lag, n - horizon + 1):
        features = np.concatenate([power[t - w_lag : t], weather[t - 1], calendar[t]])
        window = ObservationWindow(
            node_id=series.node_id,
            slot=t,
            timestamp=int(series.timestamps[t]),
            features=features,
            weather_history=weather[max(0, t - w_mu) : t],
        )
        samples.append(
            Sample(
                window=window,
                target=HorizonVector.from_numpy(power[t : t + horizon]),
                reveal_slot=t + horizon,
                capacity=series.capacity,
            )
        )
    return samples


def layout_for(series: RawSeries, w_lag: int = DEFAULT_W_LAG) -> FeatureLayout:
    return FeatureLayout(w_lag=w_lag, covariates=tuple(series.covariate_names))


class SplitSpec(BaseModel):
    """
    Chronological split fractions.

    Attributes:
        train_frac: leading block
        val_frac: middle block
        test_frac: trailing block
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    train_frac: float = Field(0.6, ge=0)
    val_frac: float = Field(0.2, ge=0)
    test_frac: float = Field(0.2, ge=0)

    @model_validator(mode="after")
    def check_sum(self) -> SplitSpec:
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {total}, not 1")
        return self


def chronological_split(
    samples: Sequence[Sample], spec: SplitSpec = SplitSpec()
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """
    Contiguous train / validation / test blocks over the distinct slots of
    `samples`. A sample whose target reaches into the next block (reveal_slot past
    the next block's first slot) is dropped from its own block.
    """
    if not samples:
        return [], [], []
    slots = np.unique([s.slot for s in samples])
    n = len(slots)
    n_train = int(round(spec.train_frac * n))
    n_val = int(round((spec.train_frac + spec.val_frac) * n)) - n_train
    val_start = slots[n_train] if n_train < n else None
    test_start = slots[n_train + n_val] if n_train + n_val < n else None

    train, val, test = [], [], []
    for s in samples:
        if val_start is None or s.slot < val_start:
            boundary = val_start if val_start is not None else test_start
            if boundary is None or s.reveal_slot <= boundary:
                train.append(s)
        elif test_start is None or s.slot < test_start:
            if test_start is None or s.reveal_slot <= test_start:
                val.append(s)
        else:
            test.append(s)
    dropped = len(samples) - len(train) - len(val) - len(test)
    log.debug("split %d samples: %d/%d/%d, %d straddling", len(samples),
              len(train), len(val), len(test), dropped)
    return train, val, test


class Regime(IntEnum):
    """Hidden weather regime of the synthetic scenario."""

    calm = 0
    broken = 1
    overcast = 2


# off-diagonal switching probabilities, used once a switch happens
REGIME_SWITCH: np.ndarray = np.array(
    [
        [0.0, 0.6, 0.4],
        [0.5, 0.0, 0.5],
        [0.3, 0.7, 0.0],
    ]
)
REGIME_ATTENUATION: np.ndarray = np.array([0.92, 0.55, 0.22])
REGIME_CLOUD_COVER: np.ndarray = np.array([0.1, 0.55, 0.9])


def regime_transition_matrix(hazard: float) -> np.ndarray:
    """Row-stochastic regime transition matrix for a per-slot switch hazard."""
    return (1.0 - hazard) * np.eye(len(Regime)) + hazard * REGIME_SWITCH


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Left Perron eigenvector of `transition`, normalized to sum to one."""
    values, vectors = np.linalg.eig(transition.T)
    v = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
    return v / v.sum()


class ScenarioConfig(BaseModel):
    """
    Parameters of the synthetic regime-switching PV scenario.

    Attributes:
        n_nodes: number of sites
        n_slots: slots per site
        slot_minutes: slot cadence
        start: epoch seconds of the first slot
        hazard: per-slot probability of leaving the current regime
        ramp_probability: per-slot probability of a cloud-edge ramp while the sky is
            broken
        ramp_magnitude: normalized power drop during a ramp
        noise: per-node measurement noise, relative to the clear-sky level
        capacity: capacity of every site
        initial_regime: regime at slot 0
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_nodes: int = Field(8, ge=1)
    n_slots: int = Field(5000, ge=1)
    slot_minutes: int = Field(15, gt=0)
    start: int = 1_704_067_200
    hazard: float = Field(0.02, ge=0, le=1)
    ramp_probability: float = Field(0.08, ge=0, le=1)
    ramp_magnitude: float = Field(0.5, ge=0, le=1)
    noise: float = Field(0.03, ge=0)
    capacity: float = Field(100.0, gt=0)
    initial_regime: Regime = Regime.calm


def clear_sky(timestamps: np.ndarray) -> np.ndarray:
    hour = (np.asarray(timestamps) % SECONDS_PER_DAY) / 3600.0
    return np.clip(np.sin(np.pi * (hour - 6.0) / 12.0), 0.0, None) ** 1.2


def _regime_path(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    transition = regime_transition_matrix(config.hazard)
    cumulative = np.cumsum(transition, axis=1)
    draws = rng.random(config.n_slots)
    path = np.empty(config.n_slots, dtype=np.int64)
    state = int(config.initial_regime)
    for t in range(config.n_slots):
        path[t] = state
        nxt = int(np.searchsorted(cumulative[state], draws[t], side="right"))
        state = min(nxt, len(Regime) - 1)
    return path


def _ramp_path(
    config: ScenarioConfig, regime: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    starts = rng.random(config.n_slots) < config.ramp_probability
    lengths = rng.integers(2, 7, size=config.n_slots)
    ramp = np.zeros(config.n_slots)
    for t in np.flatnonzero(starts & (regime == Regime.broken)):
        ramp[t : t + lengths[t]] = config.ramp_magnitude
    return ramp


def synthesize_scenario(config: ScenarioConfig, seed: int) -> list[RawSeries]:
    """
    Deterministic multi-site scenario: a clear-sky diurnal curve attenuated by a
    shared hidden Markov cloud regime, cloud-edge ramps while the sky is broken, and
    weather covariates correlated with the regime. The regime path is attached to
    every series as side-channel ground truth.
    """
    rng = np.random.default_rng(seed)
    step = 60 * config.slot_minutes
    timestamps = config.start + step * np.arange(config.n_slots, dtype=np.int64)
    cs = clear_sky(timestamps)

    regime = _regime_path(config, rng)
    ramp = _ramp_path(config, regime, rng)
    # slowly varying cloud texture, only visible in the broken regime
    texture = np.zeros(config.n_slots)
    shocks = rng.normal(0.0, 0.12, size=config.n_slots)
    for t in range(1, config.n_slots):
        texture[t] = 0.8 * texture[t - 1] + shocks[t]
    broken = regime == Regime.broken
    attenuation = REGIME_ATTENUATION[regime] + np.where(broken, texture, 0.0) - ramp
    attenuation = np.clip(attenuation, 0.05, 1.0)

    series = []
    for i in range(config.n_nodes):
        offset = config.noise * rng.normal(0.0, 1.0)
        measurement = config.noise * rng.normal(0.0, 1.0, size=config.n_slots)
        power = np.clip(cs * attenuation * (1.0 + offset) + measurement * cs, 0.0, 1.0)
        weather_noise = config.noise * rng.normal(0.0, 1.0, size=(3, config.n_slots))
        covariates = {
            "cloud_cover": np.clip(
                REGIME_CLOUD_COVER[regime] + 0.2 * (ramp > 0) + weather_noise[0],
                0.0,
                1.0,
            ),
            "irradiance": np.clip(
                1000.0 * cs * attenuation + 50.0 * weather_noise[1], 0, None
            ),
            "temperature": 15.0 + 10.0 * cs - 3.0 * (regime == Regime.overcast)
            + 5.0 * weather_noise[2],
        }
        series.append(
            RawSeries(
                node_id=f"node-{i:02d}",
                timestamps=timestamps,
                power=config.capacity * power,
                covariates=covariates,
                capacity=config.capacity,
                regime=regime.copy(),
            )
        )
    log.info(
        "synthesized %d nodes x %d slots (seed=%d)", config.n_nodes, config.n_slots, seed
    )
    return series


QueryFn = Callable[[ObservationWindow], np.ndarray]

# bound on query x case distance entries held in memory at once
_CHUNK_ENTRIES: int = 4_000_000


class CaseBase:
    """
    Historical cases for retrieval: query keys, future trajectories, the slot at which
    each case's trajectory was fully observed, and the owning node.

    Search is exact k-nearest-neighbor under Euclidean distance, restricted to cases
    whose end slot lies strictly before the requesting slot. Revealed evaluation
    windows can be appended with `insert`; each simulation run works on its own copy.
    """

    def __init__(
        self,
        keys: np.ndarray,
        trajectories: np.ndarray,
        end_slots: np.ndarray,
        node_ids: Sequence[str],
    ) -> None:
        keys = np.atleast_2d(np.asarray(keys, dtype=float))
        trajectories = np.atleast_2d(np.asarray(trajectories, dtype=float))
        n = len(node_ids)
        if len(keys) != n or len(trajectories) != n or len(end_slots) != n:
            raise ValueError("case columns have different lengths")
        self._size = n
        capacity = max(n, 16)
        self._keys = np.zeros((capacity, keys.shape[1] if n else 0))
        self._trajectories = np.zeros((capacity, trajectories.shape[1] if n else 0))
        self._end_slots = np.zeros(capacity, dtype=np.int64)
        if n:
            self._keys[:n] = keys
            self._trajectories[:n] = trajectories
            self._end_slots[:n] = np.asarray(end_slots, dtype=np.int64)
        self.node_ids: list[str] = list(node_ids)
        self.search_count: int = 0

    @classmethod
    def empty(cls) -> CaseBase:
        return cls(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0), [])

    def __len__(self) -> int:
        return self._size

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._size]

    @property
    def trajectories(self) -> np.ndarray:
        return self._trajectories[: self._size]

    @property
    def end_slots(self) -> np.ndarray:
        return self._end_slots[: self._size]

    def copy(self) -> CaseBase:
        return CaseBase(self.keys, self.trajectories, self.end_slots, self.node_ids)

    def insert(
        self, key: np.ndarray, trajectory: np.ndarray, end_slot: int, node_id: str
    ) -> None:
        if self._size == 0 and self._keys.shape[1] == 0:
            self._keys = np.zeros((16, len(key)))
            self._trajectories = np.zeros((16, len(trajectory)))
        if self._size == len(self._keys):
            grow = len(self._keys)
            self._keys = np.vstack([self._keys, np.zeros_like(self._keys[:grow])])
            self._trajectories = np.vstack(
                [self._trajectories, np.zeros_like(self._trajectories[:grow])]
            )
            self._end_slots = np.concatenate([self._end_slots, np.zeros(grow, np.int64)])
        i = self._size
        self._keys[i] = key
        self._trajectories[i] = trajectory
        self._end_slots[i] = end_slot
        self.node_ids.append(node_id)
        self._size += 1

    def search(
        self, query: np.ndarray, k: int, before_slot: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the k nearest eligible cases, nearest first."""
        return self.search_batch(np.atleast_2d(query), k, [before_slot])[0]

    def search_batch(
        self, queries: np.ndarray, k: int, before_slots: Sequence[int]
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        before = np.asarray(before_slots, dtype=np.int64)
        self.search_count += len(queries)
        n = self._size
        if n == 0 or k < 1:
            return [(np.zeros(0, np.int64), np.zeros(0)) for _ in queries]

        keys, ends = self.keys, self.end_slots
        chunk = max(1, _CHUNK_ENTRIES // n)
        m = min(n, k)
        results = []
        for lo in range(0, len(queries), chunk):
            q = queries[lo : lo + chunk]
            dist = cdist(q, keys)
            dist[ends[None, :] >= before[lo : lo + chunk, None]] = np.inf
            # every case tied with the k-th distance stays a candidate
            kth = np.partition(dist, m - 1, axis=1)[:, m - 1]
            for row in range(len(q)):
                c = np.flatnonzero((dist[row] <= kth[row]) & np.isfinite(dist[row]))
                order = np.lexsort((c, dist[row, c]))[:k]
                results.append((c[order], dist[row, c[order]]))
        return results


def build_case_base(train_samples: Sequence[Sample], query_fn: QueryFn) -> CaseBase:
    """
    One case per training sample, keyed by `query_fn(window)` and ending at the
    sample's reveal slot.
    """
    if not train_samples:
        log.warning("empty case base; cloud retrieval will fall back")
        return CaseBase.empty()
    keys = np.vstack([query_fn(s.window) for s in train_samples])
    trajectories = np.vstack([s.target.numpy for s in train_samples])
    end_slots = np.array([s.reveal_slot for s in train_samples], dtype=np.int64)
    return CaseBase(keys, trajectories, end_slots, [s.node_id for s in train_samples])
