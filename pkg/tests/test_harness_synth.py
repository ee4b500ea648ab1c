"""
Tests for harness generation
"""

# Standard
import json
import os

# Third Party
import pytest

# Local
from cuda_autotune_dataset.constants import HARNESS_FILE
from cuda_autotune_dataset.harness_synth import (
    DEFAULT_ROLE_TABLE,
    RoleRule,
    RoleTable,
    UnsupportedParameterError,
    element_type,
    generate_main,
    infer_role,
    matched_by_rule,
    scalar_type,
    write_harness,
)
from cuda_autotune_dataset.kernel_extractor import extract_corpus
from cuda_autotune_dataset.launch import BlockConfig, LaunchConfig, MatrixSize
from cuda_autotune_dataset.parse_cuda_sources import ParamSpec, Role
from tests.helpers import CORPUS_ORACLE, isolate_kernel, temp_corpus, temp_repo


def _scalar(name, type_text="int"):
    return ParamSpec(name, type_text, False)


def _launch(width, height, *block):
    return LaunchConfig.for_point(MatrixSize(width, height), BlockConfig(*block))


## Roles #######################################################################


@pytest.mark.parametrize(
    ["name", "role"],
    [
        ("w", Role.WIDTH),
        ("Width", Role.WIDTH),
        ("ncols", Role.WIDTH),
        ("rows", Role.HEIGHT),
        ("H", Role.HEIGHT),
        ("n", Role.SIZE),
        ("num_elements", Role.SIZE),
        ("count", Role.SIZE),
        ("K", Role.K_LIKE),
        ("stride", Role.STATIC_ONE),
        ("incx", Role.STATIC_ONE),
        ("alpha", Role.STATIC_ONE),
    ],
)
def test_infer_role_scalars(name, role):
    assert infer_role(_scalar(name)) == role


def test_infer_role_pointer_is_buffer():
    assert infer_role(ParamSpec("n", "int*", True)) == Role.BUFFER


def test_matched_by_rule():
    assert matched_by_rule(_scalar("stride"))
    assert not matched_by_rule(_scalar("alpha"))


def test_custom_role_table_first_match_wins():
    table = RoleTable(
        rules=(
            RoleRule(("n*",), Role.HEIGHT),
            RoleRule(("n",), Role.SIZE),
        )
    )
    assert infer_role(_scalar("n"), table) == Role.HEIGHT
    assert infer_role(_scalar("q"), table) == Role.STATIC_ONE


def test_role_table_covers_fixture_scalars():
    """At least nine in ten scalar parameters of the corpus hit a rule"""
    with open(CORPUS_ORACLE, "r") as handle:
        oracle = json.load(handle)
    with temp_corpus() as root:
        units = extract_corpus(root)
    scalars = [param for unit in units for param in unit.params if not param.is_pointer]
    matched = [param for param in scalars if matched_by_rule(param, DEFAULT_ROLE_TABLE)]
    assert len(scalars) == oracle["scalar_params"]
    assert len(matched) == oracle["scalar_params_matched"]
    assert len(matched) / len(scalars) >= 0.9


## Types #######################################################################


@pytest.mark.parametrize(
    ["type_text", "expected"],
    [
        ("int", "int"),
        ("const unsigned int", "unsigned int"),
        ("size_t", "size_t"),
        ("const float", "float"),
    ],
)
def test_scalar_type(type_text, expected):
    assert scalar_type(_scalar("x", type_text)) == expected


def test_scalar_type_unsupported():
    with pytest.raises(UnsupportedParameterError):
        scalar_type(_scalar("p", "Params"))
    with pytest.raises(UnsupportedParameterError):
        scalar_type(_scalar("r", "int&"))


@pytest.mark.parametrize(
    ["type_text", "expected"],
    [
        ("float*", "float"),
        ("const double* __restrict__", "double"),
        ("void*", "char"),
        ("float[16][16]", "float"),
        ("float**", "float*"),
    ],
)
def test_element_type(type_text, expected):
    assert element_type(ParamSpec("buf", type_text, True)) == expected


## generate_main ###############################################################


def test_generate_main_1d_launch():
    """A 64x64 matrix with a 256 block gets 4096 element buffers on a grid of 16"""
    with temp_corpus() as root:
        unit = isolate_kernel(root, "vector_add")
        source = generate_main(unit, _launch(64, 64, 256))
    assert "const dim3 block(256, 1, 1);" in source
    assert "const dim3 grid(16, 1, 1);" in source
    assert "cudaMalloc((void **)&arg0, 4096 * sizeof(float));" in source
    assert "cudaMemset((void *)arg2, 0, 4096 * sizeof(float));" in source
    assert "    int arg3 = 4096;" in source
    assert "vector_add<<<grid, block>>>(arg0, arg1, arg2, arg3);" in source
    assert "cudaFree(arg0);" in source
    assert "// matrix 64x64, block (256,1,1), grid (16,1,1)" in source


def test_generate_main_2d_launch():
    """Width and height parameters get the matrix dims, 2D blocks a 2D grid"""
    with temp_corpus() as root:
        unit = isolate_kernel(root, "transpose", index=1)
        source = generate_main(unit, _launch(128, 64, 16, 16))
    assert "const dim3 grid(8, 4, 1);" in source
    assert "    int arg2 = 128;" in source
    assert "    int arg3 = 64;" in source
    assert "cudaMalloc((void **)&arg1, 8192 * sizeof(float));" in source


def test_generate_main_static_and_size_roles():
    with temp_corpus() as root:
        unit = isolate_kernel(root, "fill", index=5)
        source = generate_main(unit, _launch(32, 8, 64))
    assert "    int arg1 = 256;" in source
    assert "    int arg2 = 1;" in source
    assert "    int arg3 = 1;" in source


def test_generate_main_zero_params():
    with temp_corpus() as root:
        unit = isolate_kernel(root, "no_args", index=4)
        source = generate_main(unit, _launch(64, 64, 64))
    assert "no_args<<<grid, block>>>();" in source
    assert "cudaMalloc" not in source


def test_generate_main_is_deterministic():
    with temp_corpus() as root:
        unit = isolate_kernel(root, "matmul", index=1)
        launch = _launch(240, 240, 8, 8)
        assert generate_main(unit, launch) == generate_main(unit, launch)


def test_generate_main_unsupported_struct():
    with temp_corpus() as root:
        unit = isolate_kernel(root, "uses_struct", index=4)
        with pytest.raises(UnsupportedParameterError):
            generate_main(unit, _launch(64, 64, 64))


def test_write_harness():
    files = {"k.cu": "__global__ void k(double *out, int n) { out[0] = n; }\n"}
    with temp_repo(files) as root:
        unit = isolate_kernel(root, "k")
        path = write_harness(unit, _launch(10, 10, 128))
        assert path == os.path.join(unit.folder, HARNESS_FILE)
        with open(path, "r") as handle:
            source = handle.read()
    assert '#include "kernel.cu"' in source
    assert "100 * sizeof(double)" in source
    assert "const dim3 grid(1, 1, 1);" in source
