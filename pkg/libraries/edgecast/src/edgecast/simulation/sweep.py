"""
Parameter sweeps: one simulation per (axis value, seed), run on a thread pool. Runs
share nothing mutable; artifacts that do not depend on the swept value are prepared
once per distinct preparation key and reused.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from enum import StrEnum
from typing import TYPE_CHECKING, Any, Sequence, Union

import pandas as pd
from tqdm import tqdm

from edgecast.exceptions import ConfigError
from edgecast.simulation.metrics import MetricReport

if TYPE_CHECKING:
    from edgecast.config import RunConfig
    from edgecast.pipeline import Prepared

log = logging.getLogger(__name__)

SWEEP_FILE = "sweep.csv"
SWEEP_KEYS: tuple[str, ...] = ("axis", "value", "seed")


class SweepAxis(StrEnum):
    V = "V"
    K = "K"
    rho_max = "rho_max"
    tau_max = "tau_max"
    N = "N"


AXIS_PATHS: dict[SweepAxis, str] = {
    SweepAxis.V: "controller.V",
    SweepAxis.K: "model.K",
    SweepAxis.rho_max: "controller.budgets.rho_max",
    SweepAxis.tau_max: "controller.budgets.tau_max",
    SweepAxis.N: "data.scenario.n_nodes",
}

# config sections that change what `prepare` produces
PREPARE_SECTIONS: tuple[str, ...] = (
    "data",
    "model",
    "screening",
    "calibration",
    "fusion",
    "evaluation",
    "seed",
)

Value = Union[int, float]


def run_config(base: RunConfig, axis: SweepAxis, value: Value, seed: int) -> RunConfig:
    if axis == SweepAxis.N and base.data.source != "synthetic":
        raise ConfigError("the N axis needs synthetic data")
    return base.with_overrides(
        [f"{AXIS_PATHS[axis]}={json.dumps(value)}", f"seed={seed}"]
    )


def prepare_key(config: RunConfig) -> str:
    """Canonical JSON of everything the prepared artifacts depend on."""
    resolved = config.resolved()
    key: dict[str, Any] = {s: resolved[s] for s in PREPARE_SECTIONS}
    # the static-threshold baseline is tuned against the cloud-usage budget
    key["rho_max"] = resolved["controller"]["budgets"]["rho_max"]
    return json.dumps(key, sort_keys=True)


def _progress(total: int, desc: str) -> tqdm:
    return tqdm(total=total, desc=desc, disable=log.getEffectiveLevel() > logging.INFO)


def run_sweep(
    axis: Union[SweepAxis, str],
    values: Sequence[Value],
    base: RunConfig,
    seeds: Sequence[int],
    threads: int = 1,
) -> pd.DataFrame:
    """
    Runs `base.policy` once per (value, seed) and tabulates the metric reports.

    Args:
        axis: swept parameter
        values: values of the swept parameter
        base: config every run starts from
        seeds: run seeds
        threads: worker cap

    Returns:
        one row per run, columns `axis, value, seed` followed by the metric
        columns, in the order of `values` then `seeds`
    """
    from edgecast.pipeline import prepare, simulate

    axis = SweepAxis(axis)
    if not values or not seeds:
        raise ConfigError("a sweep needs at least one value and one seed")
    runs = [
        (value, seed, run_config(base, axis, value, seed))
        for value in values
        for seed in seeds
    ]
    keys = [prepare_key(config) for _, _, config in runs]
    distinct = {k: config for k, (_, _, config) in zip(keys, runs)}
    log.info(
        "sweeping %s over %d value(s) x %d seed(s): %d runs, %d preparation(s)",
        axis.value, len(values), len(seeds), len(runs), len(distinct),
    )

    prepared: dict[str, Prepared] = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(prepare, c, True): k for k, c in distinct.items()}
        with _progress(len(futures), "prepare") as bar:
            for f in as_completed(futures):
                prepared[futures[f]] = f.result()
                bar.update()

        reports: dict[int, MetricReport] = {}
        futures = {
            pool.submit(simulate, config, prepared[key]): i
            for i, ((_, _, config), key) in enumerate(zip(runs, keys))
        }
        with _progress(len(futures), f"sweep {axis.value}") as bar:
            for f in as_completed(futures):
                _, summary = f.result()
                reports[futures[f]] = summary.metrics
                bar.update()

    rows = [
        {"axis": axis.value, "value": value, "seed": seed, **reports[i].scalars()}
        for i, (value, seed, _) in enumerate(runs)
    ]
    return pd.DataFrame(rows, columns=sweep_columns())


def sweep_columns() -> list[str]:
    return [*SWEEP_KEYS, *MetricReport().scalars()]
