"""
Shared constants for the library
"""

# Standard
import os

RESOURCES_DIR = os.path.join(os.path.dirname(__file__), "resources")
HARNESS_TEMPLATE = os.path.join(RESOURCES_DIR, "harness.cu.template")

## Corpus ######################################################################

# File extension -> source kind. Everything else is pruned from a repo.
SOURCE_EXTENSIONS = {
    ".c": "c",
    ".cpp": "cpp",
    ".cc": "cpp",
    ".cu": "cu",
    ".h": "header",
    ".hpp": "header",
    ".cuh": "header",
}
DEFAULT_BRANCHES = ("master", "main")
DEFAULT_FETCH_WORKERS = 8
MAX_REDIRECTS = 5
FETCH_TIMEOUT_S = 60

## Hardware limits #############################################################

WARP_SIZE = 32
MAX_THREADS_PER_BLOCK = 1024

## Sweep defaults ##############################################################

# (width, height); a spread of dims divisible and not divisible by 32
DEFAULT_MATRIX_SIZES = (
    (240, 240),
    (496, 496),
    (784, 784),
    (1016, 1016),
    (1232, 1232),
    (1680, 1680),
    (2024, 2024),
)
CANONICAL_1D_BLOCK_SIZES = tuple(range(64, 1025, 64))
CANONICAL_2D_BLOCK_SIZES = (8, 16, 24, 32)
LARGEST_BLOCK = (1024, 1, 1)

HARNESS_LAUNCHES = 1000
DEFAULT_TIMEOUT_S = 30.0
SMOKE_TIMEOUT_S = 2.0
DEFAULT_REPEATS = 10
DEFAULT_STRATEGY = "median"
DEFAULT_MAX_FIX_ATTEMPTS = 3
DEFAULT_WORKERS = 4
COMPILE_TIMEOUT_S = 600.0

DEFAULT_COMPILER_TEMPLATE = "nvcc -O3 -o {out} {src} -I {include_dir}"
COMPILER_ENV_VAR = "CUDA_AUTOTUNE_COMPILER"

## Analysis defaults ###########################################################

DEFAULT_PERF_THRESHOLD = 0.85
DEFAULT_GAIN_THRESHOLD = 0.20
REPORT_QUANTILES = (0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.0)

## Artifacts ###################################################################

MINE_MANIFEST = "mine_manifest.jsonl"
EXTRACT_MANIFEST = "extract_manifest.jsonl"
BUILD_MANIFEST = "build_manifest.jsonl"
UNITS_DIR = "units"
KERNEL_FILE = "kernel.cu"
HARNESS_FILE = "main.cu"
PARAMS_FILE = "params.json"
UNIT_FILE = "unit.json"
BUILD_LOG = "build.log"
DATASET_JSONL = "dataset.jsonl"
DATASET_CSV = "dataset.csv"
ANALYSIS_DIR = "analysis"
REPORT_JSON = "report.json"
PIPELINE_REPORT = "pipeline_report.json"

DATASET_COLUMNS = (
    "unit_id",
    "function_name",
    "repo_index",
    "matrix_width",
    "matrix_height",
    "block_x",
    "block_y",
    "block_z",
    "runtime_ms",
    "status",
    "device_id",
    "backend",
    "timestamp",
)
