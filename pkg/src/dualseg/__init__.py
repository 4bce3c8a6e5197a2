"""Dual-network semi-supervised 3D segmentation on synthetic phantoms."""

import os

# Pin BLAS to one thread before numpy loads anywhere downstream: training is
# specified to be single-core and bitwise reproducible, and multi-threaded
# GEMM reductions are not.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
