"""Spatiotemporal selective-state-space scanning with a toy pose pipeline."""

import os as _os

# WHY: BLAS worker threads spin-wait after every call and starve the numba
# kernels on small machines; single-threaded BLAS plus numba's workqueue
# layer is 2-3x faster end-to-end and keeps kernel timings stable. Must be
# set before numpy/numba load their backends.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")
_os.environ.setdefault("MKL_NUM_THREADS", "1")
_os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"


def _pin_blas_single_thread():
    """Runtime fallback when numpy was already imported by the host process."""
    import ctypes
    import glob

    import numpy as np

    pattern = _os.path.join(_os.path.dirname(_os.path.dirname(np.__file__)),
                            "numpy.libs", "*openblas*")
    for lib in glob.glob(pattern):
        try:
            ctypes.CDLL(lib).openblas_set_num_threads(1)
        except (OSError, AttributeError):
            pass


def _enable_heap_reuse():
    """Keep large numpy buffers on the glibc heap instead of mmap.

    The scan workload allocates and frees tens of MB per step; without this
    every buffer is returned to the OS on free and re-faulted on the next
    allocation, which dominates kernel runtime."""
    import ctypes
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_enable_heap_reuse()

from .tensor import (  # noqa: F401
    Tape,
    Tensor,
    backward,
    default_dtype,
    finite_diff_check,
    set_default_dtype,
    using_dtype,
)
from .ssm import (  # noqa: F401
    DiscretizedParams,
    SsmParams,
    init_ssm_params,
    s6_forward,
    selective_parameters,
    ssm_parallel_scan,
    ssm_recurrent,
    zoh_discretize,
)
from .routes import (  # noqa: F401
    ROUTE_IDS,
    RouteLayout,
    WindowSpec,
    build_route_layout,
    enumerate_sts6d,
    flatten_route,
    invert_route,
    window_merge,
    window_partition,
    wsts_scan_order,
)
from .pipeline import (  # noqa: F401
    AdamW,
    ClipSpec,
    DataConfig,
    ModelConfig,
    PoseModel,
    SyntheticSample,
    TrainConfig,
    build_clip,
    decode_keypoints,
    heatmap_loss,
    pck,
    stub_encoder,
    synth_dataset,
    train,
)
