"""Backend selection for the fused kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback. Set ``ETCPT_PURE_PYTHON=1`` to force the fallback.
"""
import os

if os.environ.get("ETCPT_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as impl
        BACKEND = "python"

softmax_fwd = impl.softmax_fwd
softmax_bwd = impl.softmax_bwd
layer_norm_fwd = impl.layer_norm_fwd
layer_norm_bwd = impl.layer_norm_bwd
gelu_bwd = impl.gelu_bwd

if BACKEND == "cython":
    from . import _kernels_py

    def gelu_fwd(x, out):
        # numpy's vectorized tanh beats the scalar loop for float32
        if x.dtype == "float32":
            _kernels_py.gelu_fwd(x, out)
        else:
            impl.gelu_fwd(x, out)
else:
    gelu_fwd = impl.gelu_fwd

__all__ = ["BACKEND", "softmax_fwd", "softmax_bwd", "layer_norm_fwd",
           "layer_norm_bwd", "gelu_fwd", "gelu_bwd"]
