"""
The exhaustive (matrix x block) sweep. One worker per device pulls points off a
shared queue; a single writer on the calling thread appends rows to a JSONL
log as they arrive so an interrupted sweep can resume where it stopped. The
log is compacted into the sorted dataset CSV at the end.
"""

# Standard
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, List, Optional, Sequence, Set, Tuple, Union
import json
import math
import os
import queue
import threading

# Third Party
import pandas as pd

# Local
from .build_exec import ExecutorBackend, RunOutcome, RunStatus
from .constants import (
    DATASET_COLUMNS,
    DEFAULT_MATRIX_SIZES,
    DEFAULT_REPEATS,
    DEFAULT_STRATEGY,
    DEFAULT_TIMEOUT_S,
)
from .kernel_extractor import KernelUnit
from .launch import BlockConfig, LaunchConfig, MatrixSize, canonical_blocks
from .log import log
from .measurement import AggregateStrategy, aggregate

__all__ = [
    "BlockConfig",
    "DatasetRow",
    "SweepSpace",
    "canonical_space",
    "compact_to_csv",
    "dataset_stats",
    "load_rows",
    "measure_point",
    "retry_timeouts",
    "run_sweep",
]

RowKey = Tuple[str, int, int, int, int, int]

## Space #######################################################################


@dataclass(frozen=True)
class SweepSpace:
    matrices: Tuple[MatrixSize, ...]
    blocks: Tuple[BlockConfig, ...]

    def __post_init__(self):
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("Sweep blocks must be unique")
        if len(set(self.matrices)) != len(self.matrices):
            raise ValueError("Sweep matrices must be unique")

    def __len__(self) -> int:
        return len(self.matrices) * len(self.blocks)

    def points(self) -> List[LaunchConfig]:
        return [
            LaunchConfig.for_point(matrix, block)
            for matrix in self.matrices
            for block in self.blocks
        ]


def canonical_space(matrices: Optional[Iterable[MatrixSize]] = None) -> SweepSpace:
    """Twenty canonical blocks over the configured matrix sizes"""
    if matrices is None:
        matrices = [MatrixSize(*dims) for dims in DEFAULT_MATRIX_SIZES]
    return SweepSpace(matrices=tuple(matrices), blocks=canonical_blocks())


## Rows ########################################################################


@dataclass
class DatasetRow:
    unit_id: str
    function_name: str
    repo_index: int
    matrix_width: int
    matrix_height: int
    block_x: int
    block_y: int
    block_z: int
    runtime_ms: float
    status: str
    device_id: int
    backend: str
    timestamp: str = ""

    def __post_init__(self):
        is_nan = self.runtime_ms is None or math.isnan(self.runtime_ms)
        if is_nan:
            self.runtime_ms = math.nan
        if is_nan != (self.status != RunStatus.OK.value):
            raise ValueError(
                f"Row {self.key} has status {self.status} with runtime {self.runtime_ms}"
            )

    @property
    def key(self) -> RowKey:
        return (
            self.unit_id,
            self.matrix_width,
            self.matrix_height,
            self.block_x,
            self.block_y,
            self.block_z,
        )

    def to_record(self) -> dict:
        record = {column: getattr(self, column) for column in DATASET_COLUMNS}
        if math.isnan(self.runtime_ms):
            record["runtime_ms"] = None
        return record

    @classmethod
    def from_record(cls, record: dict) -> "DatasetRow":
        runtime = record["runtime_ms"]
        return cls(
            unit_id=str(record["unit_id"]),
            function_name=str(record["function_name"]),
            repo_index=int(record["repo_index"]),
            matrix_width=int(record["matrix_width"]),
            matrix_height=int(record["matrix_height"]),
            block_x=int(record["block_x"]),
            block_y=int(record["block_y"]),
            block_z=int(record["block_z"]),
            runtime_ms=math.nan if runtime is None else float(runtime),
            status=str(record["status"]),
            device_id=int(record["device_id"]),
            backend=str(record["backend"]),
            timestamp=str(record.get("timestamp") or ""),
        )


def utc_timestamp() -> str:
    return (
        datetime.now(timezone.utc)
        .isoformat(timespec="milliseconds")
        .replace("+00:00", "Z")
    )


def make_row(
    unit: KernelUnit,
    outcome: RunOutcome,
    device_id: int,
    backend_kind: str,
    timestamps: bool = True,
) -> DatasetRow:
    launch = outcome.launch
    return DatasetRow(
        unit_id=unit.id,
        function_name=unit.function_name,
        repo_index=unit.repo_index,
        matrix_width=launch.matrix.width,
        matrix_height=launch.matrix.height,
        block_x=launch.block.x,
        block_y=launch.block.y,
        block_z=launch.block.z,
        runtime_ms=outcome.runtime_ms,
        status=outcome.status.value,
        device_id=device_id,
        backend=backend_kind,
        timestamp=utc_timestamp() if timestamps else "",
    )


def point_key(unit: KernelUnit, launch: LaunchConfig) -> RowKey:
    return (unit.id,) + launch.key


## Resumable log ###############################################################


def load_rows(path: str) -> List[DatasetRow]:
    """Read a sweep log. A torn final line from a crash is dropped."""
    if not os.path.exists(path):
        return []
    rows = []
    with open(path, "r") as handle:
        lines = handle.read().splitlines()
    for idx, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rows.append(DatasetRow.from_record(json.loads(line)))
        except ValueError:
            if idx == len(lines) - 1:
                log.warning("Dropping torn last line of %s", path)
                continue
            raise
    return rows


def _rewrite_rows(path: str, rows: Sequence[DatasetRow]):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as handle:
        for row in rows:
            handle.write(json.dumps(row.to_record(), sort_keys=True) + "\n")
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp_path, path)


def _ends_torn(path: str) -> bool:
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return False
    with open(path, "rb") as handle:
        handle.seek(-1, os.SEEK_END)
        return handle.read(1) != b"\n"


def retry_timeouts(path: str) -> int:
    """Drop timeout rows so a resumed sweep runs those points again"""
    rows = load_rows(path)
    kept = [row for row in rows if row.status != RunStatus.TIMEOUT.value]
    removed = len(rows) - len(kept)
    if removed:
        _rewrite_rows(path, kept)
    log.info("Removed %d timeout rows from %s", removed, path)
    return removed


## Execution ###################################################################


def measure_point(
    unit: KernelUnit,
    launch: LaunchConfig,
    backend: ExecutorBackend,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    repeats: int = DEFAULT_REPEATS,
    strategy: Union[str, AggregateStrategy] = DEFAULT_STRATEGY,
) -> RunOutcome:
    """Execute one point repeatedly. A timeout ends the point at once,
    otherwise the ok runtimes are aggregated and, if none succeeded, the
    first failure is reported.
    """
    ok_runtimes = []
    first_failure = None
    wall_time = 0.0
    for _ in range(repeats):
        outcome = backend.execute(unit, launch, timeout_s)
        wall_time += outcome.wall_time_s
        if outcome.status == RunStatus.TIMEOUT:
            return RunOutcome(
                unit.id,
                launch,
                RunStatus.TIMEOUT,
                wall_time_s=wall_time,
                diagnostic=outcome.diagnostic,
            )
        if outcome.status == RunStatus.OK:
            ok_runtimes.append(outcome.runtime_ms)
        elif first_failure is None:
            first_failure = outcome
    if ok_runtimes:
        return RunOutcome(
            unit.id,
            launch,
            RunStatus.OK,
            runtime_ms=aggregate(ok_runtimes, strategy),
            wall_time_s=wall_time,
        )
    return RunOutcome(
        unit.id,
        launch,
        first_failure.status,
        wall_time_s=wall_time,
        diagnostic=first_failure.diagnostic,
    )


def run_sweep(
    units: Sequence[KernelUnit],
    space: SweepSpace,
    backend: ExecutorBackend,
    output_path: str,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    repeats: int = DEFAULT_REPEATS,
    strategy: Union[str, AggregateStrategy] = DEFAULT_STRATEGY,
    device_ids: Sequence[int] = (0,),
    timestamps: bool = True,
) -> List[DatasetRow]:
    """Measure every (unit, matrix, block) point missing from the log at
    output_path and return all rows, old and new
    """
    if repeats < 1:
        raise ValueError(f"Repeats must be >= 1, got {repeats}")
    if not device_ids or len(set(device_ids)) != len(device_ids):
        raise ValueError(f"Device ids must be distinct, got {device_ids}")
    existing = load_rows(output_path)
    if _ends_torn(output_path):
        # New rows must not be appended onto a partial line
        _rewrite_rows(output_path, existing)
    done: Set[RowKey] = {row.key for row in existing}
    tasks: "queue.Queue[Tuple[KernelUnit, LaunchConfig]]" = queue.Queue()
    total = 0
    for unit in units:
        for launch in space.points():
            if point_key(unit, launch) not in done:
                tasks.put((unit, launch))
                total += 1
    log.info(
        "Sweep: %d points to run, %d already recorded, %d device(s)",
        total,
        len(existing),
        len(device_ids),
    )

    results: queue.Queue = queue.Queue()
    stop = threading.Event()

    def worker(device_backend: ExecutorBackend):
        while not stop.is_set():
            try:
                unit, launch = tasks.get_nowait()
            except queue.Empty:
                return
            try:
                outcome = measure_point(
                    unit, launch, device_backend, timeout_s, repeats, strategy
                )
                results.put(
                    make_row(
                        unit,
                        outcome,
                        device_backend.device_id,
                        device_backend.kind.value,
                        timestamps,
                    )
                )
            except Exception as err:
                results.put(err)
                return

    threads = [
        threading.Thread(
            target=worker, args=(backend.for_device(device_id),), daemon=True
        )
        for device_id in device_ids
    ]
    for thread in threads:
        thread.start()

    new_rows = []
    error = None
    with open(output_path, "a") as handle:

        def write(row: DatasetRow):
            handle.write(json.dumps(row.to_record(), sort_keys=True) + "\n")
            handle.flush()
            os.fsync(handle.fileno())
            new_rows.append(row)

        while len(new_rows) < total:
            item = results.get()
            if isinstance(item, Exception):
                error = item
                stop.set()
                break
            write(item)
        for thread in threads:
            thread.join()
        while not results.empty():
            item = results.get()
            if isinstance(item, DatasetRow):
                write(item)

    if error is not None:
        log.error("Sweep stopped after %d new rows: %s", len(new_rows), error)
        raise error
    log.info("Sweep appended %d rows to %s", len(new_rows), output_path)
    return existing + new_rows


## Dataset #####################################################################


def rows_to_frame(rows: Iterable[DatasetRow]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [[getattr(row, column) for column in DATASET_COLUMNS] for row in rows],
        columns=list(DATASET_COLUMNS),
    )
    return frame.sort_values(
        ["unit_id", "matrix_width", "matrix_height", "block_x", "block_y", "block_z"],
        kind="mergesort",
    ).reset_index(drop=True)


def compact_to_csv(jsonl_path: str, csv_path: str) -> pd.DataFrame:
    """Write the sorted dataset CSV from a sweep log"""
    frame = rows_to_frame(load_rows(jsonl_path))
    frame.to_csv(csv_path, index=False, na_rep="NaN")
    log.info("Wrote %d rows to %s", len(frame), csv_path)
    return frame


def read_dataset_csv(csv_path: str) -> pd.DataFrame:
    return pd.read_csv(
        csv_path,
        keep_default_na=False,
        na_values={"runtime_ms": ["NaN"]},
        dtype={"unit_id": str, "function_name": str, "timestamp": str},
    )


def frame_to_rows(frame: pd.DataFrame) -> List[DatasetRow]:
    return [
        DatasetRow.from_record(record) for record in frame.to_dict(orient="records")
    ]


def dataset_stats(rows: Iterable[DatasetRow]) -> dict:
    """Row count, fraction of rows with a runtime, status tally, and the
    number of distinct units
    """
    rows = list(rows)
    status_counts = {}
    for row in rows:
        status_counts[row.status] = status_counts.get(row.status, 0) + 1
    non_nan = sum(1 for row in rows if not math.isnan(row.runtime_ms))
    return {
        "rows": len(rows),
        "non_nan_fraction": non_nan / len(rows) if rows else 0.0,
        "status_counts": dict(sorted(status_counts.items())),
        "distinct_units": len({row.unit_id for row in rows}),
    }
