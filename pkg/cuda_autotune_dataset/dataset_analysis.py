"""
Statistics over a runtime dataset: the best block per (kernel, matrix) slice,
how far the largest block falls behind it, the gain of tuning over a default
block, and per-matrix block profiles as plot-ready CSV.

Performance of a block is the slice's best runtime divided by the block's
runtime, so 1.0 is optimal. Slices missing any block are excluded from every
statistic and counted.
"""

# Standard
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence
import json
import math
import os

# Third Party
import numpy as np
import pandas as pd

# Local
from .constants import (
    DEFAULT_GAIN_THRESHOLD,
    DEFAULT_PERF_THRESHOLD,
    LARGEST_BLOCK,
    REPORT_JSON,
    REPORT_QUANTILES,
)
from .launch import BlockConfig, MatrixSize, canonical_blocks
from .log import log
from .sweep import read_dataset_csv

## Slices ######################################################################


@dataclass
class KernelSlice:
    unit_id: str
    matrix: MatrixSize
    runtimes: Dict[BlockConfig, float] = field(default_factory=dict)

    def complete(self, blocks: Sequence[BlockConfig]) -> bool:
        return all(
            block in self.runtimes
            and math.isfinite(self.runtimes[block])
            and self.runtimes[block] > 0
            for block in blocks
        )


def build_slices(frame: pd.DataFrame) -> List[KernelSlice]:
    """Group a dataset frame into one slice per (unit, matrix). Every pair that
    appears in the frame gets a slice, even when none of its rows is ok, so an
    all-failed pair is still counted as incomplete.
    """
    slices = []
    for (unit_id, width, height), group in frame.groupby(
        ["unit_id", "matrix_width", "matrix_height"], sort=True
    ):
        ok = group[(group["status"] == "ok") & group["runtime_ms"].notna()]
        runtimes = {
            BlockConfig(int(x), int(y), int(z)): float(runtime)
            for x, y, z, runtime in zip(
                ok["block_x"],
                ok["block_y"],
                ok["block_z"],
                ok["runtime_ms"],
            )
        }
        matrix = MatrixSize(int(width), int(height))
        slices.append(KernelSlice(str(unit_id), matrix, runtimes))
    return slices


def best_block(
    slice_: KernelSlice, blocks: Sequence[BlockConfig] = None
) -> Optional[BlockConfig]:
    """Minimal-runtime block, ties to fewer threads then lexicographic shape.
    None marks an incomplete slice.
    """
    blocks = blocks or canonical_blocks()
    if not slice_.complete(blocks):
        return None
    return min(blocks, key=lambda block: (slice_.runtimes[block],) + block.sort_key())


def performance(slice_: KernelSlice, block: BlockConfig, blocks=None) -> float:
    best = best_block(slice_, blocks)
    if best is None:
        raise ValueError(f"Slice {slice_.unit_id}@{slice_.matrix} is incomplete")
    return slice_.runtimes[best] / slice_.runtimes[block]


def _mean(values: Sequence[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


def _fraction(flags: Sequence[bool]) -> Optional[float]:
    return sum(flags) / len(flags) if flags else None


def _quantiles(
    values: Sequence[float], quantiles: Sequence[float]
) -> Dict[str, float]:
    if not values:
        return {}
    data = np.asarray(values, dtype=float)
    return {
        f"{q:g}": float(np.quantile(data, q, method="lower")) for q in quantiles
    }


## Reports #####################################################################


def largest_vs_best_report(
    slices: Iterable[KernelSlice],
    largest: BlockConfig = BlockConfig(*LARGEST_BLOCK),
    threshold: float = DEFAULT_PERF_THRESHOLD,
    blocks: Sequence[BlockConfig] = None,
) -> dict:
    blocks = tuple(blocks or canonical_blocks())
    if largest not in blocks:
        raise ValueError(f"Largest block {largest} is not in the sweep blocks")
    slices = list(slices)
    complete = [slice_ for slice_ in slices if slice_.complete(blocks)]
    perfs = [performance(slice_, largest, blocks) for slice_ in complete]
    return {
        "n_slices_complete": len(complete),
        "n_slices_incomplete": len(slices) - len(complete),
        "frac_largest_not_best": _fraction(
            [best_block(slice_, blocks) != largest for slice_ in complete]
        ),
        "mean_perf_largest": _mean(perfs),
        "perf_quantiles": _quantiles(perfs, REPORT_QUANTILES),
        "frac_perf_below": _fraction([perf < threshold for perf in perfs]),
    }


def gain_report(
    slices: Iterable[KernelSlice],
    default_block: BlockConfig = BlockConfig(*LARGEST_BLOCK),
    gain_threshold: float = DEFAULT_GAIN_THRESHOLD,
    blocks: Sequence[BlockConfig] = None,
) -> dict:
    """Mean gain of the best block over the default, and how often it
    exceeds gain_threshold
    """
    blocks = tuple(blocks or canonical_blocks())
    if default_block not in blocks:
        raise ValueError(f"Default block {default_block} is not in the sweep blocks")
    gains = []
    for slice_ in slices:
        best = best_block(slice_, blocks)
        if best is None:
            continue
        gains.append(slice_.runtimes[default_block] / slice_.runtimes[best] - 1.0)
    return {
        "mean_gain_optimal": _mean(gains),
        "frac_gain_above": _fraction([gain > gain_threshold for gain in gains]),
        "gain_quantiles": _quantiles(gains, REPORT_QUANTILES),
    }


def block_profile(
    slices: Iterable[KernelSlice],
    matrix: MatrixSize,
    blocks: Sequence[BlockConfig] = None,
) -> Dict[BlockConfig, float]:
    """Mean normalized runtime (runtime / best) of each block on one matrix"""
    blocks = tuple(blocks or canonical_blocks())
    selected = [
        slice_
        for slice_ in slices
        if slice_.matrix == matrix and slice_.complete(blocks)
    ]
    if not selected:
        return {}
    profile = {}
    for block in blocks:
        ratios = []
        for slice_ in selected:
            best = best_block(slice_, blocks)
            ratios.append(slice_.runtimes[block] / slice_.runtimes[best])
        profile[block] = _mean(ratios)
    return profile


def profile_frame(
    slices: Sequence[KernelSlice],
    matrices: Sequence[MatrixSize],
    blocks: Sequence[BlockConfig] = None,
) -> pd.DataFrame:
    """Block profiles with one row per block and one column per matrix"""
    blocks = tuple(blocks or canonical_blocks())
    columns = {}
    for matrix in matrices:
        profile = block_profile(slices, matrix, blocks)
        columns[matrix.label] = [profile.get(block, math.nan) for block in blocks]
    frame = pd.DataFrame(columns, index=[block.label for block in blocks])
    frame.index.name = "block"
    return frame


def kernel_rollup(
    slices: Iterable[KernelSlice],
    largest: BlockConfig = BlockConfig(*LARGEST_BLOCK),
    threshold: float = DEFAULT_PERF_THRESHOLD,
    blocks: Sequence[BlockConfig] = None,
) -> dict:
    """Per-kernel view: each kernel's complete slices averaged across matrices"""
    blocks = tuple(blocks or canonical_blocks())
    by_unit: Dict[str, List[KernelSlice]] = {}
    for slice_ in slices:
        if slice_.complete(blocks):
            by_unit.setdefault(slice_.unit_id, []).append(slice_)

    not_best = []
    perfs = []
    for unit_id in sorted(by_unit):
        unit_slices = by_unit[unit_id]
        normalized = {
            block: _mean(
                [
                    slice_.runtimes[block]
                    / slice_.runtimes[best_block(slice_, blocks)]
                    for slice_ in unit_slices
                ]
            )
            for block in blocks
        }
        kernel_best = min(
            blocks, key=lambda block: (normalized[block],) + block.sort_key()
        )
        not_best.append(kernel_best != largest)
        perfs.append(
            _mean([performance(slice_, largest, blocks) for slice_ in unit_slices])
        )
    return {
        "n_kernels": len(by_unit),
        "frac_largest_not_best": _fraction(not_best),
        "mean_perf_largest": _mean(perfs),
        "perf_quantiles": _quantiles(perfs, REPORT_QUANTILES),
        "frac_perf_below": _fraction([perf < threshold for perf in perfs]),
    }


@dataclass
class AnalysisReport:
    n_kernels_complete: int
    n_slices_incomplete: int
    threshold: float
    gain_threshold: float
    default_block: str
    empty: bool = False
    frac_largest_not_best: Optional[float] = None
    mean_perf_largest: Optional[float] = None
    perf_quantiles: Dict[str, float] = field(default_factory=dict)
    frac_perf_below: Optional[float] = None
    mean_gain_optimal: Optional[float] = None
    frac_gain_above: Optional[float] = None
    gain_quantiles: Dict[str, float] = field(default_factory=dict)
    kernel_view: dict = field(default_factory=dict)
    block_profiles: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(
    slices: Sequence[KernelSlice],
    matrices: Sequence[MatrixSize],
    threshold: float = DEFAULT_PERF_THRESHOLD,
    gain_threshold: float = DEFAULT_GAIN_THRESHOLD,
    default_block: BlockConfig = BlockConfig(*LARGEST_BLOCK),
    largest: BlockConfig = BlockConfig(*LARGEST_BLOCK),
    blocks: Sequence[BlockConfig] = None,
) -> AnalysisReport:
    blocks = tuple(blocks or canonical_blocks())
    largest_fields = largest_vs_best_report(slices, largest, threshold, blocks)
    report = AnalysisReport(
        n_kernels_complete=largest_fields["n_slices_complete"],
        n_slices_incomplete=largest_fields["n_slices_incomplete"],
        threshold=threshold,
        gain_threshold=gain_threshold,
        default_block=str(default_block),
    )
    if not largest_fields["n_slices_complete"]:
        report.empty = True
        return report

    gain_fields = gain_report(slices, default_block, gain_threshold, blocks)
    report.frac_largest_not_best = largest_fields["frac_largest_not_best"]
    report.mean_perf_largest = largest_fields["mean_perf_largest"]
    report.perf_quantiles = largest_fields["perf_quantiles"]
    report.frac_perf_below = largest_fields["frac_perf_below"]
    report.mean_gain_optimal = gain_fields["mean_gain_optimal"]
    report.frac_gain_above = gain_fields["frac_gain_above"]
    report.gain_quantiles = gain_fields["gain_quantiles"]
    report.kernel_view = kernel_rollup(slices, largest, threshold, blocks)
    for matrix in matrices:
        profile = block_profile(slices, matrix, blocks)
        if profile:
            report.block_profiles[matrix.label] = {
                block.label: value for block, value in profile.items()
            }
    return report


## Stage #######################################################################


def analyze_frame(
    frame: pd.DataFrame,
    output_dir: str,
    threshold: float = DEFAULT_PERF_THRESHOLD,
    gain_threshold: float = DEFAULT_GAIN_THRESHOLD,
    default_block: BlockConfig = BlockConfig(*LARGEST_BLOCK),
    blocks: Sequence[BlockConfig] = None,
) -> AnalysisReport:
    """Write report.json, profile.csv and one profile_<WxH>.csv per matrix"""
    blocks = tuple(blocks or canonical_blocks())
    slices = build_slices(frame)
    matrices = sorted({slice_.matrix for slice_ in slices})
    report = build_report(
        slices, matrices, threshold, gain_threshold, default_block, blocks=blocks
    )

    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, REPORT_JSON), "w") as handle:
        json.dump(report.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    if matrices:
        profiles = profile_frame(slices, matrices, blocks)
        profiles.to_csv(os.path.join(output_dir, "profile.csv"), na_rep="NaN")
        for matrix in matrices:
            profiles[[matrix.label]].to_csv(
                os.path.join(output_dir, f"profile_{matrix.label}.csv"), na_rep="NaN"
            )
    if report.empty:
        log.warning("No complete slices in the dataset, report is empty")
    else:
        log.info(
            "Analyzed %d complete slices (%d incomplete)",
            report.n_kernels_complete,
            report.n_slices_incomplete,
        )
    return report


def analyze_dataset(csv_path: str, output_dir: str, **kwargs) -> AnalysisReport:
    return analyze_frame(read_dataset_csv(csv_path), output_dir, **kwargs)
