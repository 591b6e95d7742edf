"""Federated length-of-stay training simulator with client recruitment.

Subpackages: `cohort` (synthetic non-IID hospital data), `recruit`
(representativeness scoring and recruitment), `nnet` (from-scratch GRU
regressor), `fed` (federated-averaging orchestration), `metrics`
(evaluation and run comparison), `harness` (experiment presets, sweeps,
artifacts) and `cli` (command-line entry point).
"""

__version__ = "0.1.0"

import os as _os

# Canonical runs are single-threaded: BLAS threading is useless at this
# model's matrix sizes (it measurably slows training) and a fixed thread
# count is what makes reruns bitwise reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

try:
    import threadpoolctl as _threadpoolctl

    # Covers the case where numpy was already imported with more threads.
    _threadpoolctl.threadpool_limits(limits=1)
except ImportError:  # pragma: no cover - threadpoolctl is a declared dependency
    pass
