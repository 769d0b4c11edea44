"""
Slot trace of a simulation run: one row per (slot, node) plus one summary row per
slot. Both tables round-trip through CSV with a fixed column order, so metrics can
be recomputed from the files alone.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Union

import pandas as pd
from pydantic import BaseModel

log = logging.getLogger(__name__)

TRACE_FILE = "trace.csv"
SLOTS_FILE = "slots.csv"


class SlotRecord(BaseModel):
    """
    One node at one slot. Error columns stay empty until the target is revealed
    inside the run.

    Attributes:
        slot: decision slot
        timestamp: epoch seconds of the slot
        node_id: node
        mode: executed mode
        raw_score: logistic routing score
        calibrated_score: alpha * raw_score
        u: ensemble variance feature
        o: OOD distance feature
        mu: weather mutation feature
        d: expert/small disagreement feature
        theta_c: cloud threshold at the load estimate (router runs only)
        j0: routing index of mode 0 (router runs only)
        j1: routing index of mode 1 (router runs only)
        j2: routing index of mode 2 (router runs only)
        w_e: fusion weight of the expert, when fused
        w_s: fusion weight of the small model, when fused
        w_c: fusion weight of the cloud branch, when fused
        cloud_fallback: the cloud branch found no eligible case
        predicted_loss: calibrator estimate of the executed mode's loss
        latency_ms: realized latency of the executed mode
        comm_cost: communication volume
        capacity: site capacity
        forecast: fused forecast, JSON list
        candidates: per-branch candidates, JSON object (optional)
        revealed: the target was revealed inside the run
        loss: realized loss
        abs_error: mean absolute error over the horizon, normalized
        sq_error: mean squared error over the horizon, normalized
        hard: ramp or weather-mutation sample
        ood: OOD score at or above the validation threshold
        oracle_label: replayed oracle routing label
    """

    slot: int
    timestamp: int
    node_id: str
    mode: int
    raw_score: float
    calibrated_score: float
    u: float
    o: float
    mu: float
    d: float
    theta_c: Optional[float] = None
    j0: Optional[float] = None
    j1: Optional[float] = None
    j2: Optional[float] = None
    w_e: Optional[float] = None
    w_s: Optional[float] = None
    w_c: Optional[float] = None
    cloud_fallback: bool = False
    predicted_loss: Optional[float] = None
    latency_ms: float
    comm_cost: float
    capacity: float = 1.0
    forecast: str
    candidates: Optional[str] = None
    revealed: bool = False
    loss: Optional[float] = None
    abs_error: Optional[float] = None
    sq_error: Optional[float] = None
    hard: bool = False
    ood: bool = False
    oracle_label: Optional[int] = None


class SlotSummary(BaseModel):
    """
    Attributes:
        slot: slot index
        n_nodes: nodes that acted in the slot
        rho: realized cloud-request ratio (share of nodes in mode 2)
        rho_star: load estimate the router acted on (router runs only)
        fp_residual: fixed-point residual (router runs only)
        avg_latency: mean realized latency over nodes
        avg_comm: mean communication volume over nodes
        q_tau: latency queue after the slot's update
        q_c: communication queue after the update
        q_rho: cloud-usage queue after the update
        lyapunov: quadratic Lyapunov value after the update
        avg_loss: one-slot average realized loss, once every node's target is
            revealed
    """

    slot: int
    n_nodes: int
    rho: float
    rho_star: Optional[float] = None
    fp_residual: Optional[float] = None
    avg_latency: float
    avg_comm: float
    q_tau: float
    q_c: float
    q_rho: float
    lyapunov: float
    avg_loss: Optional[float] = None


class SlotTrace(BaseModel):
    records: list[SlotRecord] = []
    slots: list[SlotSummary] = []

    def records_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [r.model_dump() for r in self.records], columns=list(SlotRecord.model_fields)
        )

    def slots_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [s.model_dump() for s in self.slots], columns=list(SlotSummary.model_fields)
        )

    def write(self, out_dir: Union[str, Path]) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_path, slots_path = out / TRACE_FILE, out / SLOTS_FILE
        self.records_frame().to_csv(trace_path, index=False)
        self.slots_frame().to_csv(slots_path, index=False)
        log.info("wrote %d trace rows to %s", len(self.records), trace_path)
        return trace_path, slots_path

    @classmethod
    def read(cls, out_dir: Union[str, Path]) -> SlotTrace:
        out = Path(out_dir)
        records = pd.read_csv(
            out / TRACE_FILE, dtype={"node_id": str}, float_precision="round_trip"
        )
        slots = pd.read_csv(out / SLOTS_FILE, float_precision="round_trip")
        return cls(
            records=[
                SlotRecord.model_validate(_clean(r)) for r in records.to_dict("records")
            ],
            slots=[
                SlotSummary.model_validate(_clean(s)) for s in slots.to_dict("records")
            ],
        )

    def forecast_of(self, index: int) -> list[float]:
        return json.loads(self.records[index].forecast)  # type: ignore[no-any-return]


def _clean(row: dict[str, object]) -> dict[str, object]:
    """Empty CSV cells come back as NaN; they were None when written."""
    return {k: (None if isinstance(v, float) and v != v else v) for k, v in row.items()}
