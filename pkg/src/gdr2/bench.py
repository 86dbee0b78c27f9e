"""Throughput of the tokenwise recurrence vs the chunkwise engine.

Timings are wall-clock best-of-``repeats`` with BLAS pinned to one thread.
Inputs are binary32 with ``H_v`` heads of size ``d_k`` x ``d_v`` taken from
the run config. The chunk solve runs in input precision, as a binary32
training kernel would. Only the speedup ratio at one reference shape is
asserted; absolute rates depend on the machine.

On glibc the heap top padding is raised before timing so that the per-tile
temporaries of the chunked engine are not returned to the kernel and
faulted back in on every tile.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .backward import backward_chunked
from .chunkwise import forward_chunked
from .checks import random_inputs
from .config import RunConfig
from .core import make_rng
from .report import Report
from .rules import gdr2_reference

SPEEDUP_FLOOR = 5.0
REFERENCE_SHAPE = (4096, 64)
SOLVE_PRECISION = "input"
HEAP_TOP_PAD = 64 << 20
_M_TOP_PAD = -2
CSV_HEADER = ["L", "C", "H", "d_k", "d_v", "tokenwise_tok_per_s", "chunked_fwd_tok_per_s",
              "chunked_fwdbwd_tok_per_s", "speedup_fwd"]


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    if not np.isfinite(best) or best <= 0:
        raise RuntimeError("timer returned a non-positive duration")
    return best


def _reserve_heap() -> bool:
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        mallopt = ctypes.CDLL(name).mallopt
    except (OSError, AttributeError):
        return False
    return bool(mallopt(_M_TOP_PAD, HEAP_TOP_PAD))


def run_bench(cfg: RunConfig) -> tuple[Report, list[list[float]]]:
    rep = Report()
    rows: list[list[float]] = []
    H, dk, dv = cfg.H_v, cfg.d_k, cfg.d_v
    rng = make_rng(cfg.seed)
    _reserve_heap()
    lengths = sorted(set(cfg.bench_lengths) | {REFERENCE_SHAPE[0]})
    chunks = sorted(set(cfg.bench_chunks) | {REFERENCE_SHAPE[1]})
    with threadpool_limits(limits=1):
        for L in lengths:
            # mild decay keeps the cumulative factors in binary32 range for C=128
            x = random_inputs(rng, (H,), L, dk, dv, decay=(-0.1, -0.001))
            args = [x[n].astype(np.float32) for n in ("q", "k", "v", "b", "w", "g")]
            t_tok = _best_time(lambda: gdr2_reference(*args, check=False), cfg.repeats)
            for C in chunks:
                def fwd():
                    return forward_chunked(*args, chunk_size=C, solve_precision=SOLVE_PRECISION, retain=False)

                def fwd_bwd():
                    res = forward_chunked(*args, chunk_size=C, solve_precision=SOLVE_PRECISION)
                    backward_chunked(res, res.outputs)

                t_fwd = _best_time(fwd, cfg.repeats)
                t_fb = _best_time(fwd_bwd, cfg.repeats)
                speedup = t_tok / t_fwd
                rows.append([L, C, H, dk, dv, L / t_tok, L / t_fwd, L / t_fb, speedup])
                case = f"L{L}-C{C}-H{H}-dk{dk}-dv{dv}-f32"
                if (L, C) == REFERENCE_SHAPE:
                    rep.check("bench", case, "speedup_fwd", speedup, f">={SPEEDUP_FLOOR:g}")
                else:
                    rep.info("bench", case, "speedup_fwd", speedup)
    return rep, rows
