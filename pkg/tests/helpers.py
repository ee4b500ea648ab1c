"""
Common test helpers
"""

# Standard
from contextlib import contextmanager
from typing import Dict, Iterator
import copy
import os
import shutil
import sys
import tempfile

# Local
from cuda_autotune_dataset.kernel_extractor import (
    KernelUnit,
    RepoIndex,
    closure,
    isolate,
)

TEST_DATA_DIR = os.path.realpath(
    os.path.join(
        os.path.dirname(__file__),
        "data",
    )
)

FIXTURE_CORPUS = os.path.join(TEST_DATA_DIR, "corpus")
CORPUS_ORACLE = os.path.join(TEST_DATA_DIR, "corpus_oracle.json")
MOCK_KERNELS_DIR = os.path.join(TEST_DATA_DIR, "mock_kernels")
FAKE_NVCC = os.path.join(TEST_DATA_DIR, "fake_nvcc.py")

# Compiler template that runs the stand-in compiler with this interpreter
FAKE_COMPILER_TEMPLATE = (
    f"{sys.executable} {FAKE_NVCC} -o {{out}} {{src}} -I {{include_dir}}"
)


def mock_kernel(name: str) -> str:
    """Path to an mock kernel script, run it with sys.executable"""
    return os.path.join(MOCK_KERNELS_DIR, name)


@contextmanager
def temp_corpus() -> Iterator[str]:
    """Copy the fixture corpus into a scratch directory and yield its root"""
    with tempfile.TemporaryDirectory() as workdir:
        root = os.path.join(workdir, "corpus")
        shutil.copytree(FIXTURE_CORPUS, root)
        yield root


@contextmanager
def temp_repo(files: Dict[str, str], index: int = 0) -> Iterator[str]:
    """Write a repository of sources as <tmp>/<index>/ and yield the tmp root"""
    with tempfile.TemporaryDirectory() as workdir:
        repo_dir = os.path.join(workdir, str(index))
        for rel_path, content in files.items():
            full_path = os.path.join(repo_dir, rel_path)
            os.makedirs(os.path.dirname(full_path), exist_ok=True)
            with open(full_path, "w") as handle:
                handle.write(content)
        yield workdir


def isolate_kernel(root: str, name: str, index: int = 0) -> KernelUnit:
    """Isolate the named global function of the repo at root/<index>"""
    repo = RepoIndex.from_dir(os.path.join(root, str(index)), index)
    entry = next(decl for decl in repo.kernels if decl.name == name)
    deps, device_fns = closure(entry, repo)
    units_root = os.path.join(root, "units")
    os.makedirs(units_root, exist_ok=True)
    return isolate(entry, deps, device_fns, repo, units_root)


@contextmanager
def cli_args(*args):
    """Mock out the sys.argv set so that argparse gets the desired values"""
    real_args = copy.deepcopy(sys.argv)
    sys.argv = sys.argv[:1] + list(args)
    yield
    sys.argv = real_args
