import json
from typing import Any, Callable, Optional

import click

from edgecast.simulation.sweep import SweepAxis

# Generic callable type for function decorators
GenericCallable = Callable[..., Any]


def config_option(f: GenericCallable) -> GenericCallable:
    """Decorator to specify the JSON run config."""
    return click.option(
        "-c",
        "--config",
        type=click.Path(dir_okay=False),
        required=False,
        help="JSON run config. Defaults apply to every key it leaves out.",
    )(f)


def set_option(f: GenericCallable) -> GenericCallable:
    """Decorator to collect `section.key=value` overrides."""
    return click.option(
        "-s",
        "--set",
        "overrides",
        type=str,
        multiple=True,
        help=(
            "Override one config key, e.g. `--set controller.V=10`. Values are parsed "
            "as JSON. Can be repeated."
        ),
    )(f)


def out_option(f: GenericCallable) -> GenericCallable:
    """Decorator to specify the output directory."""
    return click.option(
        "-o",
        "--out",
        type=str,
        envvar="EDGECAST_OUTPUT_DIR",
        required=False,
        help=(
            "Directory for artifacts, traces and tables; overrides `output_dir`. "
            "Can also set EDGECAST_OUTPUT_DIR environment variable."
        ),
    )(f)


def threads_option(f: GenericCallable) -> GenericCallable:
    """Decorator to cap the worker count."""
    return click.option(
        "-t",
        "--threads",
        type=click.IntRange(min=1),
        required=False,
        help="Maximum concurrent runs. Defaults to the config's `threads`.",
    )(f)


def _split_json(value: str) -> list[Any]:
    text = value.strip()
    if text.startswith("["):
        parsed = json.loads(text)
        if not isinstance(parsed, list):
            raise ValueError("expected a list")
        return parsed
    return [json.loads(v) for v in text.split(",") if v.strip()]


# Define the callback functions that transform the inputs
def parse_values(ctx: Any, param: Any, value: Optional[str]) -> Optional[list[float]]:
    """Callback function to parse `1,10,80` or `[1, 10, 80]` into numbers."""
    if value is None:
        return None
    try:
        values = _split_json(value)
    except (json.JSONDecodeError, ValueError) as e:
        raise click.BadParameter(f"Invalid value list: {e}")
    if not values or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
    ):
        raise click.BadParameter("Values must be a nonempty list of numbers")
    return values


def parse_seeds(ctx: Any, param: Any, value: Optional[str]) -> Optional[list[int]]:
    """Callback function to parse `0,1,2` into integer seeds."""
    if value is None:
        return None
    try:
        seeds = _split_json(value)
    except (json.JSONDecodeError, ValueError) as e:
        raise click.BadParameter(f"Invalid seed list: {e}")
    integers = all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)
    if not seeds or not integers:
        raise click.BadParameter("Seeds must be a nonempty list of integers")
    return seeds


def axis_option(f: GenericCallable) -> GenericCallable:
    """Decorator to specify the swept parameter."""
    return click.option(
        "-a",
        "--axis",
        type=click.Choice([a.value for a in SweepAxis], case_sensitive=True),
        required=True,
        help="Parameter to sweep.",
    )(f)


def values_option(f: GenericCallable) -> GenericCallable:
    """Decorator to specify the swept values."""
    return click.option(
        "-v",
        "--values",
        type=str,
        required=True,
        help="Values of the swept parameter, comma-separated or a JSON list.",
        callback=parse_values,
    )(f)


def seeds_option(f: GenericCallable) -> GenericCallable:
    """Decorator to specify the run seeds."""
    return click.option(
        "--seeds",
        type=str,
        required=False,
        help="Run seeds, comma-separated or a JSON list. Defaults to the config seed.",
        callback=parse_seeds,
    )(f)
