"""
Tests for building and running harnessed units
"""

# Standard
import json
import math
import os
import sys
import time

# Third Party
import pytest

# Local
from cuda_autotune_dataset.build_exec import (
    BuildResult,
    BuildStatus,
    CompilerNotFoundError,
    RealBackend,
    RunOutcome,
    RunStatus,
    SimulatedBackend,
    build_summary,
    build_units,
    compile_unit,
    load_build_results,
    parse_runtime_output,
    run_binary,
    simulated_runtime,
)
from cuda_autotune_dataset.constants import (
    BUILD_LOG,
    BUILD_MANIFEST,
    COMPILER_ENV_VAR,
    KERNEL_FILE,
)
from cuda_autotune_dataset.corpus_miner import read_jsonl
from cuda_autotune_dataset.kernel_extractor import extract_corpus
from cuda_autotune_dataset.launch import (
    BlockConfig,
    LaunchConfig,
    MatrixSize,
    canonical_blocks,
)
from tests.helpers import (
    CORPUS_ORACLE,
    FAKE_COMPILER_TEMPLATE,
    isolate_kernel,
    mock_kernel,
    temp_corpus,
    temp_repo,
)

LAUNCH = LaunchConfig.for_point(MatrixSize(240, 240), BlockConfig(256))


@pytest.fixture(scope="module")
def oracle_build():
    with open(CORPUS_ORACLE, "r") as handle:
        return json.load(handle)["build"]


@pytest.fixture
def real_backend(monkeypatch):
    monkeypatch.delenv(COMPILER_ENV_VAR, raising=False)
    return RealBackend(FAKE_COMPILER_TEMPLATE)


def _run(name, timeout_s=10):
    return run_binary([sys.executable, mock_kernel(name)], "unit", LAUNCH, timeout_s)


## Output parsing ##############################################################


def test_parse_runtime_output():
    assert parse_runtime_output("noise\nRUNTIME_MS: 0.25\n")[:2] == (RunStatus.OK, 0.25)
    status, runtime, diagnostic = parse_runtime_output("KERNEL_ERROR: 700\n")
    assert status == RunStatus.RUNTIME_ERROR
    assert math.isnan(runtime)
    assert diagnostic == "kernel error 700"
    for stdout in ("", "RUNTIME_MS: nan", "RUNTIME_MS: 0", "RUNTIME_MS: abc"):
        assert parse_runtime_output(stdout)[0] == RunStatus.PARSE_ERROR


## run_binary ##################################################################


def test_run_binary_ok():
    outcome = _run("ok.py")
    assert outcome.status == RunStatus.OK
    assert outcome.runtime_ms == 12.5
    assert outcome.diagnostic is None


def test_run_binary_kernel_error():
    outcome = _run("kernel_error.py")
    assert outcome.status == RunStatus.RUNTIME_ERROR
    assert math.isnan(outcome.runtime_ms)


def test_run_binary_garbage_output():
    outcome = _run("garbage.py")
    assert outcome.status == RunStatus.PARSE_ERROR
    assert "unparseable output" in outcome.diagnostic


def test_run_binary_negative_runtime():
    assert _run("negative.py").status == RunStatus.PARSE_ERROR


def test_run_binary_crash():
    outcome = _run("crash.py")
    assert outcome.status == RunStatus.RUNTIME_ERROR
    assert outcome.diagnostic.startswith("exit code 139")


def test_run_binary_timeout():
    """A binary that sleeps for 10s is killed at the 1s deadline"""
    timeout_s = 1.0
    start = time.monotonic()
    outcome = _run("hang.py", timeout_s=timeout_s)
    elapsed = time.monotonic() - start
    assert outcome.status == RunStatus.TIMEOUT
    assert math.isnan(outcome.runtime_ms)
    assert timeout_s <= outcome.wall_time_s <= timeout_s + 0.5
    assert elapsed <= timeout_s + 0.5
    assert outcome.diagnostic == "killed after 1.0s"


def test_run_binary_rejects_bad_timeout():
    with pytest.raises(ValueError):
        _run("ok.py", timeout_s=0)


def test_run_binary_spawn_failure():
    outcome = run_binary(["foobarbazbat"], "unit", LAUNCH, 1)
    assert outcome.status == RunStatus.RUNTIME_ERROR
    assert outcome.diagnostic.startswith("spawn failed")


def test_run_outcome_invariants():
    with pytest.raises(ValueError):
        RunOutcome("unit", LAUNCH, RunStatus.OK)
    with pytest.raises(ValueError):
        RunOutcome("unit", LAUNCH, RunStatus.OK, runtime_ms=-1.0)
    failed = RunOutcome("unit", LAUNCH, RunStatus.TIMEOUT, runtime_ms=3.0)
    assert math.isnan(failed.runtime_ms)


def test_build_result_invariants():
    with pytest.raises(ValueError):
        BuildResult("unit", BuildStatus.OK, 0)
    with pytest.raises(ValueError):
        BuildResult("unit", BuildStatus.FIXED_THEN_OK, 1)


## Simulated backend ###########################################################


@pytest.mark.parametrize("unit_id", ["0-a_cu-k", "1-b_cu-k", "2-c_cu-k", "3-d_cu-k"])
def test_simulated_planted_block_is_fastest(unit_id):
    """Without noise the planted block is the argmin of every slice"""
    backend = SimulatedBackend(seed=7, noise=False)
    planted = backend.planted_best(unit_id)
    for matrix in (MatrixSize(240, 240), MatrixSize(1016, 1016)):
        runtimes = {
            block: simulated_runtime(
                7, unit_id, LaunchConfig.for_point(matrix, block), noise=False
            )
            for block in canonical_blocks()
        }
        assert min(runtimes, key=runtimes.get) == planted


def test_simulated_runtime_is_deterministic():
    first = simulated_runtime(3, "unit", LAUNCH)
    assert simulated_runtime(3, "unit", LAUNCH) == first
    assert simulated_runtime(4, "unit", LAUNCH) != first
    assert first > 0


def test_simulated_runtime_grows_with_matrix():
    block = BlockConfig(128)
    runtimes = [
        simulated_runtime(
            0, "unit", LaunchConfig.for_point(MatrixSize(side, side), block), False
        )
        for side in (240, 496, 784, 1016)
    ]
    assert runtimes == sorted(runtimes)


def test_simulated_backend_compile_and_execute():
    with temp_corpus() as root:
        units = {unit.function_name: unit for unit in extract_corpus(root)}
    backend = SimulatedBackend(seed=1, record_executions=True)
    assert backend.compile(units["matmul"], LAUNCH).ok
    assert not backend.compile(units["reduce_sum"], LAUNCH).ok
    outcome = backend.for_device(2).execute(units["matmul"], LAUNCH, 1)
    assert outcome.status == RunStatus.OK
    assert [device for device, _, _ in backend.executions] == [2]


## Real backend ################################################################


def test_real_backend_missing_compiler(monkeypatch):
    monkeypatch.delenv(COMPILER_ENV_VAR, raising=False)
    with pytest.raises(CompilerNotFoundError):
        RealBackend("foobarbazbat -o {out} {src}")


def test_real_backend_execute_compiles_per_launch(real_backend):
    files = {"k.cu": "__global__ void k(float *out, int n) { out[0] = n; }\n"}
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        fast = real_backend.execute(unit, LAUNCH, 10)
        slow_launch = LaunchConfig.for_point(MatrixSize(240, 240), BlockConfig(1024))
        slow = real_backend.execute(unit, slow_launch, 10)
        assert os.path.exists(RealBackend.binary_path(unit, LAUNCH))
        assert os.path.exists(RealBackend.binary_path(unit, slow_launch))
    assert fast.status == RunStatus.OK
    assert 1.0 <= fast.runtime_ms < 1.1
    assert 4.0 <= slow.runtime_ms < 4.1


def test_real_backend_kernel_error(real_backend):
    files = {"k.cu": "__global__ void k(int *a) { a[0] = 1; /* FAKE_KERNEL_ERROR */ }\n"}
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        outcome = real_backend.execute(unit, LAUNCH, 10)
    assert outcome.status == RunStatus.RUNTIME_ERROR
    assert outcome.diagnostic == "kernel error 700"


## compile_unit ################################################################


def test_compile_unit_ok_first_try(real_backend):
    files = {"k.cu": "__global__ void k(float *out, int n) { out[0] = n; }\n"}
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        result = compile_unit(unit, real_backend)
        assert os.path.exists(os.path.join(unit.folder, BUILD_LOG))
    assert result.status == BuildStatus.OK
    assert result.attempts == 1
    assert result.fixes == []


def test_compile_unit_missing_include_fixed(real_backend):
    files = {
        "src/k.cu": (
            '#include "gen/config.h"\n'
            "__global__ void k(int *a) { a[0] = CONFIG_VALUE; }\n"
        ),
        "other/config.h": "#define CONFIG_VALUE 3\n",
    }
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        result = compile_unit(unit, real_backend)
    assert result.status == BuildStatus.FIXED_THEN_OK
    assert result.attempts == 2
    assert result.fixes == ["missing_include"]
    assert "No such file or directory" in result.diagnostics[0]


def test_compile_unit_std_header_fixed(real_backend):
    files = {"k.cu": "__global__ void k(float *a, int n) { a[0] = sqrtf(2.0f); }\n"}
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        result = compile_unit(unit, real_backend)
    assert result.status == BuildStatus.FIXED_THEN_OK
    assert result.fixes == ["std_header"]


def test_compile_unit_undefined_device_function_fixed(real_backend):
    files = {
        "k.cu": "__global__ void k(float *a) { a[0] = dev_scale(a[0]); }\n",
        "lib.cu": "__device__ float dev_scale(float x) { return 2.0f * x; }\n",
    }
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        with open(os.path.join(unit.folder, KERNEL_FILE), "w") as handle:
            handle.write("__global__ void k(float *a) { a[0] = dev_scale(a[0]); }\n")
        result = compile_unit(unit, real_backend)
    assert result.status == BuildStatus.FIXED_THEN_OK
    assert result.fixes == ["undefined_device_function"]


def test_compile_unit_duplicate_main_fixed(real_backend):
    files = {
        "k.cu": '#include "util.cuh"\n__global__ void k(float *a) { a[0] = value(); }\n',
        "util.cuh": (
            "__device__ float value() { return 1.0f; }\n"
            "int main() { return 0; }\n"
        ),
    }
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        result = compile_unit(unit, real_backend)
    assert result.status == BuildStatus.FIXED_THEN_OK
    assert result.fixes == ["duplicate_main"]


def test_compile_unit_unfixable(real_backend):
    """An error no rule understands stops the loop after one attempt"""
    files = {"k.cu": "__global__ void k(int *a) { a[0] = undeclared_thing; }\n"}
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        result = compile_unit(unit, real_backend)
    assert result.status == BuildStatus.COMPILE_ERROR
    assert result.attempts == 1
    assert build_summary([result])["failure_categories"]["undefined_identifier"] == 1


def test_compile_unit_fix_budget(real_backend):
    files = {"k.cu": "__global__ void k(float *a, int n) { a[0] = sqrtf(2.0f); }\n"}
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        result = compile_unit(unit, real_backend, max_fix_attempts=0)
    assert result.status == BuildStatus.COMPILE_ERROR
    assert result.attempts == 1
    assert result.fixes == []


def test_compile_unit_harness_failed():
    files = {
        "k.cu": "struct P { int a; };\n__global__ void k(P p, int *out) { out[0] = p.a; }\n"
    }
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        result = compile_unit(unit, SimulatedBackend())
    assert result.status == BuildStatus.HARNESS_FAILED
    assert not result.ok


## build_units #################################################################


def test_build_units_fixture_simulated(oracle_build):
    with temp_corpus() as root:
        units = extract_corpus(root)
        results = build_units(units, SimulatedBackend(), root, workers=4)
        records = read_jsonl(os.path.join(root, BUILD_MANIFEST))
        loaded = load_build_results(root)
    by_id = {result.unit_id: result for result in results}
    assert len(records) == len(units) - len(oracle_build["skipped"])
    assert not set(oracle_build["skipped"]) & set(by_id)
    for unit_id in oracle_build["harness_failed"]:
        assert by_id[unit_id].status == BuildStatus.HARNESS_FAILED
    assert sum(result.ok for result in results) == oracle_build["ok"]
    assert [result.to_record() for result in loaded] == records


def test_build_units_fixture_fake_compiler(real_backend, oracle_build):
    """Every buildable fixture unit compiles with the stand-in compiler"""
    with temp_corpus() as root:
        results = build_units(extract_corpus(root), real_backend, root, workers=4)
    assert sum(result.status == BuildStatus.OK for result in results) == oracle_build["ok"]


def test_build_units_sample_is_seeded():
    with temp_corpus() as root:
        units = extract_corpus(root)
        first = build_units(units, SimulatedBackend(), root, sample=4, seed=5)
        second = build_units(units, SimulatedBackend(), root, sample=4, seed=5)
    assert len(first) == 4
    assert [result.unit_id for result in first] == [result.unit_id for result in second]


def test_build_summary():
    results = [
        BuildResult("a", BuildStatus.OK, 1),
        BuildResult("b", BuildStatus.OK, 1),
        BuildResult("c", BuildStatus.FIXED_THEN_OK, 2, fixes=["std_header"]),
        BuildResult(
            "d",
            BuildStatus.COMPILE_ERROR,
            1,
            diagnostics=["x.cu(1): fatal error: y.h: No such file or directory"],
        ),
    ]
    summary = build_summary(results)
    assert summary["total"] == 4
    assert summary["first_try_rate"] == 0.5
    assert summary["after_fix_rate"] == 0.75
    assert summary["fix_rule_counts"] == {"std_header": 1}
    assert summary["failure_categories"]["missing_include"] == 1
    assert build_summary([])["after_fix_rate"] == 0.0
