"""Learnable sparse high-dimensional convolutions on the permutohedral lattice."""

from .lattice import (
    FeatureSet,
    InvalidInputError,
    LatticeIndex,
    build_index,
    build_joint_index,
    elevate,
    filter_size,
    find_simplex,
    neighbors,
)
from .filterops import (
    BlurMatrix,
    MemoryBudgetError,
    PermutohedralKernel,
    bilateral_filter,
    build_blur_matrix,
    convolve,
    gaussian_kernel,
    identity_kernel,
    slice_signal,
    splat,
)
from .autograd import backward_kernel, backward_signal, dense_oracle, forward, grad_check

__version__ = "0.1.0"
