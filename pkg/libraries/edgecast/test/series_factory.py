import numpy as np

from edgecast.data import RawSeries


def make_series(
    power: list[float],
    node_id: str = "n0",
    capacity: float = 10.0,
    start: int = 0,
    step: int = 900,
) -> RawSeries:
    """A single-covariate series with evenly spaced timestamps."""
    n = len(power)
    return RawSeries(
        node_id=node_id,
        timestamps=start + step * np.arange(n),
        power=np.asarray(power, dtype=float),
        covariates={"cloud_cover": np.linspace(0.0, 1.0, n)},
        capacity=capacity,
    )
