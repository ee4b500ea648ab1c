"""
Build and execution of harnessed units. Compilation runs through a pluggable
backend: the real backend shells out to nvcc and runs the binaries under a
hard timeout, the simulated backend answers from a seeded latency model so the
whole pipeline runs without a GPU.
"""

# Standard
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple
import abc
import hashlib
import math
import os
import re
import shlex
import threading
import time

# Third Party
import numpy as np

# Local
from .constants import (
    BUILD_LOG,
    BUILD_MANIFEST,
    COMPILE_TIMEOUT_S,
    COMPILER_ENV_VAR,
    DEFAULT_COMPILER_TEMPLATE,
    DEFAULT_MATRIX_SIZES,
    DEFAULT_MAX_FIX_ATTEMPTS,
    DEFAULT_WORKERS,
    HARNESS_FILE,
    MAX_THREADS_PER_BLOCK,
)
from .corpus_miner import ManifestWriter, read_jsonl
from .fix_rules import apply_fix_rules, missing_files, undefined_identifiers
from .harness_synth import UnsupportedParameterError, generate_main, write_harness
from .kernel_extractor import KernelUnit, RepoIndex
from .launch import BlockConfig, LaunchConfig, MatrixSize, canonical_blocks
from .log import log
from .shell_tools import run_with_timeout, verify_executable

## Types #######################################################################


class CompilerNotFoundError(EnvironmentError):
    """Raised when the configured compiler is not on the PATH"""


class BuildStatus(str, Enum):
    OK = "ok"
    COMPILE_ERROR = "compile_error"
    FIXED_THEN_OK = "fixed_then_ok"
    HARNESS_FAILED = "harness_failed"


@dataclass
class BuildResult:
    unit_id: str
    status: BuildStatus
    attempts: int
    diagnostics: List[str] = field(default_factory=list)
    fixes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.attempts < 1:
            raise ValueError(f"Build of {self.unit_id} needs at least one attempt")
        if self.status == BuildStatus.FIXED_THEN_OK and self.attempts < 2:
            raise ValueError(f"Build of {self.unit_id} cannot be fixed in one attempt")

    @property
    def ok(self) -> bool:
        return self.status in (BuildStatus.OK, BuildStatus.FIXED_THEN_OK)

    def to_record(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "status": self.status.value,
            "attempts": self.attempts,
            "diagnostics": self.diagnostics,
            "fixes": self.fixes,
        }

    @classmethod
    def from_record(cls, record: dict) -> "BuildResult":
        return cls(
            unit_id=record["unit_id"],
            status=BuildStatus(record["status"]),
            attempts=record["attempts"],
            diagnostics=list(record.get("diagnostics", [])),
            fixes=list(record.get("fixes", [])),
        )


class RunStatus(str, Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    RUNTIME_ERROR = "runtime_error"
    PARSE_ERROR = "parse_error"


@dataclass
class RunOutcome:
    unit_id: str
    launch: LaunchConfig
    status: RunStatus
    runtime_ms: float = math.nan
    wall_time_s: float = 0.0
    diagnostic: Optional[str] = None

    def __post_init__(self):
        if self.status == RunStatus.OK:
            if not (math.isfinite(self.runtime_ms) and self.runtime_ms > 0):
                raise ValueError(
                    f"An ok run needs a finite positive runtime, got {self.runtime_ms}"
                )
        else:
            self.runtime_ms = math.nan


@dataclass
class CompileAttempt:
    ok: bool
    output: str = ""


class BackendKind(str, Enum):
    REAL = "real"
    SIMULATED = "simulated"


## Output parsing ##############################################################

_RUNTIME_RE = re.compile(r"^\s*RUNTIME_MS:\s*(\S+)\s*$")
_KERNEL_ERROR_RE = re.compile(r"^\s*KERNEL_ERROR:\s*(-?\d+)\s*$")


def parse_runtime_output(stdout: str) -> Tuple[RunStatus, float, Optional[str]]:
    """Read the harness stdout contract"""
    for line in stdout.splitlines():
        match = _KERNEL_ERROR_RE.match(line)
        if match:
            return RunStatus.RUNTIME_ERROR, math.nan, f"kernel error {match.group(1)}"
        match = _RUNTIME_RE.match(line)
        if match:
            try:
                value = float(match.group(1))
            except ValueError:
                break
            if math.isfinite(value) and value > 0:
                return RunStatus.OK, value, None
            break
    snippet = stdout.strip().splitlines()[:1]
    return (
        RunStatus.PARSE_ERROR,
        math.nan,
        f"unparseable output: {snippet[0] if snippet else '<empty>'}",
    )


def run_binary(
    argv: List[str],
    unit_id: str,
    launch: LaunchConfig,
    timeout_s: float,
    env: Optional[Dict[str, str]] = None,
) -> RunOutcome:
    """Run a harness binary and map its result onto a RunOutcome"""
    if timeout_s <= 0:
        raise ValueError(f"Timeout must be positive, got {timeout_s}")
    try:
        result = run_with_timeout(argv, timeout_s, env=env)
    except OSError as err:
        return RunOutcome(
            unit_id, launch, RunStatus.RUNTIME_ERROR, diagnostic=f"spawn failed: {err}"
        )
    if result.timed_out:
        return RunOutcome(
            unit_id,
            launch,
            RunStatus.TIMEOUT,
            wall_time_s=result.wall_time_s,
            diagnostic=f"killed after {timeout_s}s",
        )
    status, runtime, diagnostic = parse_runtime_output(result.stdout)
    if result.returncode != 0 and status != RunStatus.RUNTIME_ERROR:
        status = RunStatus.RUNTIME_ERROR
        diagnostic = f"exit code {result.returncode}: {result.stderr.strip()[:200]}"
    return RunOutcome(
        unit_id,
        launch,
        status,
        runtime_ms=runtime,
        wall_time_s=result.wall_time_s,
        diagnostic=diagnostic,
    )


## Simulated latency model #####################################################

NOISE_FRACTION = 0.005


def _seeded_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(part) for part in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class LatencyModel:
    """Per-unit runtime curve: convex in threads per block with its minimum at
    the planted block, plus a fixed cost for the wrong block dimensionality
    """

    base_ms: float
    planted: BlockConfig
    alpha: float
    beta: float
    shape_cost: float

    def penalty(self, block: BlockConfig) -> float:
        distance = (block.threads - self.planted.threads) / MAX_THREADS_PER_BLOCK
        value = 1.0 + self.alpha * abs(distance) + self.beta * distance * distance
        if block.is_1d != self.planted.is_1d:
            value += self.shape_cost
        return value


def latency_model(seed: int, unit_id: str) -> LatencyModel:
    rng = _seeded_rng(seed, unit_id)
    blocks = canonical_blocks()
    return LatencyModel(
        base_ms=float(rng.uniform(1e-6, 1e-5)),
        planted=blocks[int(rng.integers(len(blocks)))],
        alpha=float(rng.uniform(0.5, 1.5)),
        beta=float(rng.uniform(0.0, 2.0)),
        shape_cost=float(rng.uniform(0.03, 0.1)),
    )


def simulated_runtime(
    seed: int, unit_id: str, launch: LaunchConfig, noise: bool = True
) -> float:
    """Deterministic model runtime in milliseconds"""
    model = latency_model(seed, unit_id)
    epsilon = 0.0
    if noise:
        epsilon = float(
            _seeded_rng(seed, unit_id, *launch.key).uniform(
                -NOISE_FRACTION, NOISE_FRACTION
            )
        )
    return (
        model.base_ms
        * launch.matrix.elements
        * model.penalty(launch.block)
        * (1.0 + epsilon)
    )


## Backends ####################################################################


class ExecutorBackend(abc.ABC):
    kind: BackendKind

    def __init__(self, device_id: int = 0):
        self.device_id = device_id

    @abc.abstractmethod
    def compile(self, unit: KernelUnit, launch: LaunchConfig) -> CompileAttempt:
        """Compile the unit's harness for one launch"""

    @abc.abstractmethod
    def execute(
        self, unit: KernelUnit, launch: LaunchConfig, timeout_s: float
    ) -> RunOutcome:
        """Run one launch of a built unit"""

    @abc.abstractmethod
    def for_device(self, device_id: int) -> "ExecutorBackend":
        """A backend bound to another device, sharing this one's state"""


class RealBackend(ExecutorBackend):
    kind = BackendKind.REAL

    def __init__(
        self,
        compiler_template: str = DEFAULT_COMPILER_TEMPLATE,
        device_id: int = 0,
        _locks: Optional[Dict[str, threading.Lock]] = None,
    ):
        super().__init__(device_id)
        self.compiler_template = compiler_template
        self.argv_template = shlex.split(compiler_template)
        override = os.environ.get(COMPILER_ENV_VAR)
        if override:
            self.argv_template[0] = override
        try:
            verify_executable(
                self.argv_template[0],
                "https://developer.nvidia.com/cuda-downloads",
            )
        except EnvironmentError as err:
            raise CompilerNotFoundError(str(err)) from err
        self._locks = _locks if _locks is not None else {}
        self._locks_guard = threading.Lock()

    def for_device(self, device_id: int) -> "RealBackend":
        return RealBackend(self.compiler_template, device_id, self._locks)

    def _unit_lock(self, unit_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(unit_id, threading.Lock())

    @staticmethod
    def binary_path(unit: KernelUnit, launch: LaunchConfig) -> str:
        return os.path.join(unit.folder, "bin", launch.label)

    def compiler_argv(self, unit: KernelUnit, launch: LaunchConfig) -> List[str]:
        values = {
            "src": os.path.join(unit.folder, HARNESS_FILE),
            "out": self.binary_path(unit, launch),
            "include_dir": unit.include_dir,
        }
        return [token.format(**values) for token in self.argv_template]

    def compile(self, unit: KernelUnit, launch: LaunchConfig) -> CompileAttempt:
        with self._unit_lock(unit.id):
            write_harness(unit, launch)
            os.makedirs(os.path.dirname(self.binary_path(unit, launch)), exist_ok=True)
            result = run_with_timeout(
                self.compiler_argv(unit, launch), COMPILE_TIMEOUT_S, cwd=unit.folder
            )
        output = (result.stdout + "\n" + result.stderr).strip()
        if result.timed_out:
            return CompileAttempt(False, f"compiler timed out\n{output}")
        return CompileAttempt(result.returncode == 0, output)

    def execute(
        self, unit: KernelUnit, launch: LaunchConfig, timeout_s: float
    ) -> RunOutcome:
        binary = self.binary_path(unit, launch)
        if not os.path.exists(binary):
            attempt = self.compile(unit, launch)
            if not attempt.ok:
                return RunOutcome(
                    unit.id,
                    launch,
                    RunStatus.RUNTIME_ERROR,
                    diagnostic=f"compile failed for {launch.label}: {attempt.output[:200]}",
                )
        env = dict(os.environ, CUDA_VISIBLE_DEVICES=str(self.device_id))
        return run_binary([binary], unit.id, launch, timeout_s, env=env)


class SimulatedBackend(ExecutorBackend):
    kind = BackendKind.SIMULATED

    def __init__(
        self,
        seed: int = 0,
        device_id: int = 0,
        noise: bool = True,
        record_executions: bool = False,
        _executions: Optional[list] = None,
    ):
        super().__init__(device_id)
        self.seed = seed
        self.noise = noise
        self.record_executions = record_executions
        self.executions = _executions if _executions is not None else []
        self._executions_lock = threading.Lock()

    def for_device(self, device_id: int) -> "SimulatedBackend":
        return SimulatedBackend(
            self.seed, device_id, self.noise, self.record_executions, self.executions
        )

    def planted_best(self, unit_id: str) -> BlockConfig:
        return latency_model(self.seed, unit_id).planted

    def compile(self, unit: KernelUnit, launch: LaunchConfig) -> CompileAttempt:
        if unit.buildable:
            return CompileAttempt(True)
        return CompileAttempt(False, f"{unit.id} is not buildable")

    def execute(
        self, unit: KernelUnit, launch: LaunchConfig, timeout_s: float
    ) -> RunOutcome:
        start = time.monotonic()
        runtime = simulated_runtime(self.seed, unit.id, launch, self.noise)
        end = time.monotonic()
        if self.record_executions:
            with self._executions_lock:
                self.executions.append((self.device_id, start, end))
        return RunOutcome(
            unit.id, launch, RunStatus.OK, runtime_ms=runtime, wall_time_s=end - start
        )


## Build #######################################################################


def representative_launch() -> LaunchConfig:
    return LaunchConfig.for_point(
        MatrixSize(*DEFAULT_MATRIX_SIZES[0]), canonical_blocks()[0]
    )


def _write_build_log(unit: KernelUnit, lines: List[str]):
    with open(os.path.join(unit.folder, BUILD_LOG), "w") as handle:
        handle.write("\n".join(lines) + "\n")


def compile_unit(
    unit: KernelUnit,
    backend: ExecutorBackend,
    max_fix_attempts: int = DEFAULT_MAX_FIX_ATTEMPTS,
    launch: Optional[LaunchConfig] = None,
    repo: Optional[RepoIndex] = None,
) -> BuildResult:
    """Compile a unit, running the fix loop between failed attempts. The loop
    stops on success, on a no-change fix, or after max_fix_attempts fixes.
    """
    launch = launch or representative_launch()
    log_lines = [f"unit {unit.id} backend {backend.kind.value}"]
    try:
        generate_main(unit, launch)
    except UnsupportedParameterError as err:
        log.warning("Harness failed for %s: %s", unit.id, err)
        log_lines.append(f"harness: {err}")
        _write_build_log(unit, log_lines)
        return BuildResult(unit.id, BuildStatus.HARNESS_FAILED, 1, [str(err)])

    attempts = 0
    diagnostics = []
    fixes = []
    while True:
        attempts += 1
        attempt = backend.compile(unit, launch)
        log_lines.append(f"attempt {attempts}: {'ok' if attempt.ok else 'failed'}")
        if attempt.output:
            log_lines.append(attempt.output)
        if attempt.ok:
            status = BuildStatus.FIXED_THEN_OK if fixes else BuildStatus.OK
            break
        diagnostics.append(attempt.output)
        if len(fixes) >= max_fix_attempts:
            status = BuildStatus.COMPILE_ERROR
            break
        if repo is None and os.path.isdir(unit.repo_dir):
            repo = RepoIndex.from_dir(unit.repo_dir, unit.repo_index)
        fix = apply_fix_rules(unit, attempt.output, repo) if repo else None
        if fix is None:
            status = BuildStatus.COMPILE_ERROR
            break
        fixes.append(fix.rule)
        log_lines.append(f"fix {fix.rule}: {fix.description}")

    _write_build_log(unit, log_lines)
    log.debug("Built %s: %s after %d attempt(s)", unit.id, status.value, attempts)
    return BuildResult(unit.id, status, attempts, diagnostics, fixes)


def build_units(
    units: List[KernelUnit],
    backend: ExecutorBackend,
    corpus_root: str,
    max_fix_attempts: int = DEFAULT_MAX_FIX_ATTEMPTS,
    workers: int = DEFAULT_WORKERS,
    sample: Optional[int] = None,
    seed: int = 0,
) -> List[BuildResult]:
    """Build every buildable unit (or a seeded sample of them) in parallel and
    write the build manifest
    """
    candidates = [unit for unit in units if unit.buildable]
    skipped = len(units) - len(candidates)
    if skipped:
        log.info("Skipping %d non-buildable units", skipped)
    if sample is not None and sample < len(candidates):
        rng = np.random.default_rng(seed)
        picked = sorted(rng.choice(len(candidates), size=sample, replace=False))
        candidates = [candidates[int(idx)] for idx in picked]
        log.info("Trial build of %d sampled units", len(candidates))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            pool.map(
                lambda unit: compile_unit(unit, backend, max_fix_attempts),
                candidates,
            )
        )

    writer = ManifestWriter(os.path.join(corpus_root, BUILD_MANIFEST))
    for result in results:
        writer.append(result.to_record())
    summary = build_summary(results)
    log.info(
        "Built %d units: %d ok first try, %d after fixes",
        summary["total"],
        summary["status_counts"][BuildStatus.OK.value],
        summary["status_counts"][BuildStatus.FIXED_THEN_OK.value],
    )
    return results


def load_build_results(corpus_root: str) -> List[BuildResult]:
    path = os.path.join(corpus_root, BUILD_MANIFEST)
    if not os.path.exists(path):
        return []
    return [BuildResult.from_record(record) for record in read_jsonl(path)]


## Summary #####################################################################

DIAGNOSTIC_CATEGORIES = (
    "missing_include",
    "undefined_identifier",
    "duplicate_main",
    "syntax",
    "harness",
    "other",
)


def diagnostic_category(result: BuildResult) -> str:
    if result.status == BuildStatus.HARNESS_FAILED:
        return "harness"
    output = result.diagnostics[-1] if result.diagnostics else ""
    if missing_files(output):
        return "missing_include"
    if undefined_identifiers(output):
        return "undefined_identifier"
    if re.search(r"\bmain\b", output) and re.search(
        r"multiple definition|redefinition|already been defined", output
    ):
        return "duplicate_main"
    if re.search(r"\bexpected\b|syntax error", output):
        return "syntax"
    return "other"


def build_summary(results: List[BuildResult]) -> dict:
    """Build rates, fix rule usage, and a histogram of what broke"""
    total = len(results)
    counts = {status.value: 0 for status in BuildStatus}
    rules: Dict[str, int] = {}
    categories = {category: 0 for category in DIAGNOSTIC_CATEGORIES}
    for result in results:
        counts[result.status.value] += 1
        for rule in result.fixes:
            rules[rule] = rules.get(rule, 0) + 1
        if not result.ok:
            categories[diagnostic_category(result)] += 1
    ok_first = counts[BuildStatus.OK.value]
    ok_after = ok_first + counts[BuildStatus.FIXED_THEN_OK.value]
    return {
        "total": total,
        "status_counts": counts,
        "first_try_rate": ok_first / total if total else 0.0,
        "after_fix_rate": ok_after / total if total else 0.0,
        "fix_rule_counts": dict(sorted(rules.items())),
        "failure_categories": categories,
    }
