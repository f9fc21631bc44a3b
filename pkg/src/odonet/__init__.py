"""odonet: traveled-distance estimation from monocular image sequences.

A recurrent convolutional network (shared conv encoder with a correlation
layer, two bidirectional LSTM layers, many-to-one readout) predicts the
distance traveled across a 10-frame window as a multi-hot ordinal class
vector. Everything runs on a self-contained reverse-mode autodiff core
backed by numpy, with numba-compiled hot kernels (see odonet.backend).
"""

__version__ = "0.1.0"

from .tensor import ComputationTape, Tensor, backward, grad_check  # noqa: F401
