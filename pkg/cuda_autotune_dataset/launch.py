"""
Launch geometry shared by the harness generator and the sweep: thread-block
shapes, matrix sizes, and the grid that covers a matrix for a given block.
"""

# Standard
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union
import re

# Local
from .constants import (
    CANONICAL_1D_BLOCK_SIZES,
    CANONICAL_2D_BLOCK_SIZES,
    MAX_THREADS_PER_BLOCK,
    WARP_SIZE,
)


class InvalidBlockError(ValueError):
    """Raised when a block shape violates the CUDA legality rules"""


class InvalidMatrixError(ValueError):
    """Raised when a matrix size or launch is malformed"""


def ceil_div(numerator: int, denominator: int) -> int:
    """Integer ceiling division"""
    return -(-numerator // denominator)


## BlockConfig #################################################################


@dataclass(frozen=True, order=True)
class BlockConfig:
    x: int
    y: int = 1
    z: int = 1

    def __post_init__(self):
        dims = (self.x, self.y, self.z)
        if not all(isinstance(dim, int) and dim >= 1 for dim in dims):
            raise InvalidBlockError(f"Block dims must be positive integers: {dims}")
        if self.threads > MAX_THREADS_PER_BLOCK:
            raise InvalidBlockError(
                f"Block {self} has {self.threads} threads "
                f"(max {MAX_THREADS_PER_BLOCK})"
            )
        if self.threads % WARP_SIZE:
            raise InvalidBlockError(
                f"Block {self} has {self.threads} threads, "
                f"not a multiple of the warp size {WARP_SIZE}"
            )

    def __str__(self) -> str:
        return f"({self.x},{self.y},{self.z})"

    @property
    def threads(self) -> int:
        return self.x * self.y * self.z

    @property
    def is_1d(self) -> bool:
        return self.y == 1 and self.z == 1

    @property
    def label(self) -> str:
        """Compact label used in file names and CSV headers"""
        return f"{self.x}x{self.y}x{self.z}"

    def sort_key(self) -> Tuple[int, int, int, int]:
        """Smaller thread count first, then lexicographic shape"""
        return (self.threads, self.x, self.y, self.z)

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.x, self.y, self.z)

    @classmethod
    def parse(cls, value: Union[str, int, Sequence[int]]) -> "BlockConfig":
        """Build a block from "512", "16x16", "(16,16,1)", 512, or [16, 16, 1]"""
        if isinstance(value, int):
            return cls(value)
        if isinstance(value, str):
            parts = [part for part in re.split(r"[x,()\s]+", value.strip()) if part]
            try:
                dims = [int(part) for part in parts]
            except ValueError:
                raise InvalidBlockError(f"Cannot parse block [{value}]")
        else:
            dims = list(value)
        if not 1 <= len(dims) <= 3:
            raise InvalidBlockError(f"Block needs 1 to 3 dims: {value}")
        return cls(*dims)


## MatrixSize ##################################################################


@dataclass(frozen=True, order=True)
class MatrixSize:
    width: int
    height: int

    def __post_init__(self):
        if not all(
            isinstance(dim, int) and dim >= 1 for dim in (self.width, self.height)
        ):
            raise InvalidMatrixError(
                f"Matrix dims must be positive integers: {self.width}x{self.height}"
            )

    def __str__(self) -> str:
        return self.label

    @property
    def elements(self) -> int:
        return self.width * self.height

    @property
    def label(self) -> str:
        return f"{self.width}x{self.height}"

    @classmethod
    def parse(cls, value: Union[str, Sequence[int]]) -> "MatrixSize":
        """Build a matrix size from "240x240" or [240, 240]"""
        if isinstance(value, str):
            match = re.fullmatch(r"\s*(\d+)\s*[x,]\s*(\d+)\s*", value)
            if not match:
                raise InvalidMatrixError(f"Cannot parse matrix size [{value}]")
            return cls(int(match.group(1)), int(match.group(2)))
        dims = list(value)
        if len(dims) != 2:
            raise InvalidMatrixError(f"Matrix size needs 2 dims: {value}")
        return cls(*dims)


## Grid ########################################################################


def compute_grid(block: BlockConfig, matrix: MatrixSize) -> Tuple[int, int, int]:
    """Compute the grid covering the matrix. 1D blocks cover the flattened
    element count, 2D (and 3D) blocks cover width and height.
    """
    if block.is_1d:
        return (max(1, ceil_div(matrix.elements, block.x)), 1, 1)
    return (
        max(1, ceil_div(matrix.width, block.x)),
        max(1, ceil_div(matrix.height, block.y)),
        1,
    )


@dataclass(frozen=True)
class LaunchConfig:
    block: BlockConfig
    grid: Tuple[int, int, int]
    matrix: MatrixSize

    def __post_init__(self):
        if len(self.grid) != 3 or any(dim < 1 for dim in self.grid):
            raise InvalidMatrixError(f"Grid dims must be >= 1: {self.grid}")
        gx, gy, _ = self.grid
        if self.block.is_1d:
            covered = gx * self.block.x >= self.matrix.elements
        else:
            covered = (
                gx * self.block.x >= self.matrix.width
                and gy * self.block.y >= self.matrix.height
            )
        if not covered:
            raise InvalidMatrixError(
                f"Grid {self.grid} with block {self.block} does not cover {self.matrix}"
            )

    @classmethod
    def for_point(cls, matrix: MatrixSize, block: BlockConfig) -> "LaunchConfig":
        return cls(block=block, grid=compute_grid(block, matrix), matrix=matrix)

    @property
    def key(self) -> Tuple[int, int, int, int, int]:
        return (self.matrix.width, self.matrix.height) + self.block.as_tuple()

    @property
    def label(self) -> str:
        return f"{self.matrix.label}_{self.block.label}"


def canonical_blocks() -> Tuple[BlockConfig, ...]:
    """The sixteen 1D blocks divisible by 64 plus four square 2D blocks"""
    return tuple(BlockConfig(size) for size in CANONICAL_1D_BLOCK_SIZES) + tuple(
        BlockConfig(size, size) for size in CANONICAL_2D_BLOCK_SIZES
    )


def parse_blocks(values: Iterable) -> Tuple[BlockConfig, ...]:
    return tuple(BlockConfig.parse(value) for value in values)


def parse_matrices(values: Iterable) -> Tuple[MatrixSize, ...]:
    return tuple(MatrixSize.parse(value) for value in values)
