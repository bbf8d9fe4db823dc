"""CSV export and import of simulation logs.

The first line is a versioned comment carrying the run counters as
key=value pairs, the second the column header, then one row per plant step.
Values use positional decimal notation with nine significant digits.
"""

import csv
import logging
from pathlib import Path

import numpy as np

from linkmpc.models import Scenario
from linkmpc.simulator import SimLog

logger = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 2
CSV_HEADER_COMMENT = f"# linkmpc-log v{CSV_SCHEMA_VERSION}"
LOG_COUNTERS = (
    "controller_invocations",
    "reference_refreshes",
    "predicted_range_violations",
    "predicted_cone_violations",
)

_XYZ = ("x", "y", "z")
_OUTPUT_NAMES = (
    [f"p_{a}" for a in _XYZ]
    + [f"v_{a}" for a in _XYZ]
    + [f"a_{a}" for a in _XYZ]
    + ["cos_delta", "cos_delta_rate", "range"]
)


def csv_columns(n_rotors: int, n_obstacles: int, include_timing: bool = False) -> list[str]:
    """Column names in file order."""
    cols = ["time"]
    cols += [f"p_{a}" for a in _XYZ]
    cols += ["phi", "theta", "psi"]
    cols += [f"v_{a}" for a in _XYZ]
    cols += [f"omega_{a}" for a in _XYZ]
    cols += [f"gamma_{i}" for i in range(1, n_rotors + 1)]
    cols += [f"gamma_dot_{i}" for i in range(1, n_rotors + 1)]
    cols += [f"gamma_cmd_{i}" for i in range(1, n_rotors + 1)]
    cols += [f"y_{name}" for name in _OUTPUT_NAMES]
    cols += [f"yd_{name}" for name in _OUTPUT_NAMES]
    cols += ["delta_deg", "i_tx", "i_rx", "i_link", "link_quality"]
    cols += ["range_margin_low", "range_margin_high", "cone_margin"]
    cols += [f"obstacle_dist_{j}" for j in range(1, n_obstacles + 1)]
    cols += [f"clearance_{j}" for j in range(1, n_obstacles + 1)]
    cols += [f"slack_{j}" for j in range(1, n_obstacles + 1)]
    cols += ["kkt"]
    if include_timing:
        cols += ["solve_time"]
    return cols


def _format(value: float) -> str:
    if not np.isfinite(value):
        return str(value)
    return np.format_float_positional(
        value, precision=9, unique=False, fractional=False, trim="-"
    )


def log_table(log: SimLog, include_timing: bool = False) -> np.ndarray:
    """All logged quantities as one 2-D array in column order."""
    blocks = [
        log.times[:, None],
        log.states,
        log.controls,
        log.commanded_speeds,
        log.outputs,
        log.references,
        log.misalignment_deg[:, None],
        log.i_tx[:, None],
        log.i_rx[:, None],
        log.i_link[:, None],
        log.link_quality[:, None],
        log.range_margins,
        log.cone_margin[:, None],
        log.obstacle_distances,
        log.clearances,
        log.slacks,
        log.kkt[:, None],
    ]
    if include_timing:
        blocks.append(log.solve_time[:, None])
    return np.hstack(blocks)


def header_comment(log: SimLog) -> str:
    """Version comment followed by the run counters and the abort time, if any."""
    fields = [f"{name}={getattr(log, name)}" for name in LOG_COUNTERS]
    if log.aborted_at is not None:
        fields.append(f"aborted_at={_format(log.aborted_at)}")
    return " ".join([CSV_HEADER_COMMENT, *fields])


def _parse_header(first: str, path: Path) -> dict[str, str]:
    if first != CSV_HEADER_COMMENT and not first.startswith(CSV_HEADER_COMMENT + " "):
        raise ValueError(f"{path} is not a linkmpc log (header '{first}')")
    fields = {}
    for item in first[len(CSV_HEADER_COMMENT) :].split():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed header field '{item}'")
        fields[key] = value
    return fields


def export_csv(log: SimLog, path: Path, include_timing: bool = False) -> None:
    """Write the log; output bytes depend only on the log contents."""
    path = Path(path)
    columns = csv_columns(log.scenario.gtmr.n_rotors, log.scenario.n_obstacles, include_timing)
    table = log_table(log, include_timing)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(header_comment(log) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in table:
            writer.writerow([_format(v) for v in row])
    logger.info("Wrote %d log rows to %s", table.shape[0], path)


def _read(path: Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        header = _parse_header(f.readline().strip(), path)
        reader = csv.reader(f)
        columns = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    return header, {name: data[:, i] for i, name in enumerate(columns)}


def read_csv(path: Path) -> dict[str, np.ndarray]:
    """Read a log file into a mapping from column name to values."""
    return _read(path)[1]


def load_log(path: Path, scenario: Scenario) -> SimLog:
    """Rebuild a SimLog from an exported file and the scenario that produced it."""
    header, cols = _read(path)
    n_rotors = scenario.gtmr.n_rotors
    n_obs = scenario.n_obstacles
    expected = csv_columns(n_rotors, n_obs, include_timing="solve_time" in cols)
    missing = [c for c in expected if c not in cols]
    if missing:
        raise ValueError(f"log does not match the scenario; missing columns {missing[:3]}")
    absent = [name for name in LOG_COUNTERS if name not in header]
    if absent:
        logger.warning("%s carries no %s; reporting them as 0", path, ", ".join(absent))
    n = len(cols["time"])

    def block(names: list[str]) -> np.ndarray:
        if not names:
            return np.zeros((n, 0))
        return np.column_stack([cols[c] for c in names])

    state_names = expected[1 : 13 + n_rotors]
    return SimLog(
        scenario=scenario,
        times=cols["time"],
        states=block(state_names),
        controls=block([f"gamma_dot_{i}" for i in range(1, n_rotors + 1)]),
        commanded_speeds=block([f"gamma_cmd_{i}" for i in range(1, n_rotors + 1)]),
        outputs=block([f"y_{name}" for name in _OUTPUT_NAMES]),
        references=block([f"yd_{name}" for name in _OUTPUT_NAMES]),
        i_tx=cols["i_tx"],
        i_rx=cols["i_rx"],
        i_link=cols["i_link"],
        obstacle_distances=block([f"obstacle_dist_{j}" for j in range(1, n_obs + 1)]),
        slacks=block([f"slack_{j}" for j in range(1, n_obs + 1)]),
        kkt=cols["kkt"],
        solve_time=cols.get("solve_time", np.zeros(n)),
        aborted_at=float(header["aborted_at"]) if "aborted_at" in header else None,
        **{name: int(header.get(name, 0)) for name in LOG_COUNTERS},
    )
