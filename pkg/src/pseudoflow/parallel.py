"""Process-based parallel map for embarrassingly parallel phases.

Workers are spawned fresh with BLAS thread pools pinned to one thread so
`threads` workers never oversubscribe the machine. Results come back in
job order, and every job function must be a picklable module-level
callable taking a single argument.

With threads <= 1 the jobs run sequentially in-process; job functions are
pure, so both paths produce identical results. Spawn re-imports __main__
in each worker, so entry points must stay import-safe (the usual
`if __name__ == "__main__"` discipline in scripts).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
import multiprocessing as mp

_BLAS_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
              "NUMEXPR_NUM_THREADS")


def run_parallel(fn, jobs, threads: int):
    jobs = list(jobs)
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    saved = {v: os.environ.get(v) for v in _BLAS_VARS}
    for v in _BLAS_VARS:
        os.environ[v] = "1"
    try:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs)),
                                 mp_context=ctx) as pool:
            return list(pool.map(fn, jobs))
    finally:
        for v, val in saved.items():
            if val is None:
                os.environ.pop(v, None)
            else:
                os.environ[v] = val


__all__ = ["run_parallel"]
