"""
The CUDA autotune dataset project is a batch pipeline that harvests GPU kernels
from source repositories, isolates each one into a standalone compilable unit,
synthesizes a timing harness, and benchmarks every kernel over a grid of matrix
sizes and thread-block shapes to produce a runtime dataset and reports on the
optimal thread-block choice.
"""
