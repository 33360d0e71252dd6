"""Scaling benchmark: selective scan vs a naive full self-attention baseline.

The scan should grow linearly with the token count; the materialized-scores
attention baseline grows quadratically and is allowed to report OOM above a
configured memory cap instead of crashing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ssm
from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class BenchRow:
    tokens: int
    scan_ms: float
    attn_ms: "float | None"   # None means OOM under the cap

    def csv(self) -> str:
        attn = "OOM" if self.attn_ms is None else f"{self.attn_ms:.3f}"
        return f"{self.tokens},{self.scan_ms:.3f},{attn}"


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def naive_attention(x: np.ndarray) -> np.ndarray:
    """Full self-attention with materialized L x L scores (contrast baseline)."""
    d = x.shape[1]
    scores = (x @ x.T) / np.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores @ x


def attention_bytes_estimate(tokens: int) -> int:
    # scores matrix plus matmul/softmax working set
    return 2 * tokens * tokens * 4


def fit_growth_exponent(tokens, millis) -> float:
    """Least-squares slope of log(time) vs log(L)."""
    lx = np.log(np.asarray(tokens, dtype=np.float64))
    ly = np.log(np.asarray(millis, dtype=np.float64))
    slope = np.polyfit(lx, ly, 1)[0]
    return float(slope)


def run_bench(token_counts, d_model: int = 32, n_state: int = 16, reps: int = 5,
              mem_cap_mb: int = 1024, seed: int = 0, mode: str = "recurrent",
              single_thread: bool = True):
    """Median wall times for s6_forward and the attention baseline per L.

    Returns (rows, scan_exponent, attn_exponent); attention rows above the
    memory cap are marked OOM and excluded from its exponent fit.
    """
    counts = [int(c) for c in token_counts]
    if sorted(counts) != counts:
        raise ConfigurationError("token counts must be ascending")
    if single_thread:
        import numba
        prev_threads = numba.get_num_threads()
        numba.set_num_threads(1)
    try:
        rng = np.random.default_rng(seed)
        params = ssm.init_ssm_params(d_model, n_state, rng)
        # warm the jit before timing
        warm = Tensor(rng.standard_normal((64, d_model)).astype(np.float32))
        ssm.s6_forward(warm, params, mode)
        cap_bytes = mem_cap_mb * 1024 * 1024
        rows = []
        for tokens in counts:
            x = Tensor(rng.standard_normal((tokens, d_model)).astype(np.float32))
            scan_ms = _median_time(lambda: ssm.s6_forward(x, params, mode), reps)
            if attention_bytes_estimate(tokens) > cap_bytes:
                attn_ms = None
            else:
                xa = x.data
                attn_ms = _median_time(lambda: naive_attention(xa), reps)
            rows.append(BenchRow(tokens, scan_ms, attn_ms))
    finally:
        if single_thread:
            numba.set_num_threads(prev_threads)
    scan_exp = fit_growth_exponent([r.tokens for r in rows], [r.scan_ms for r in rows])
    attn_rows = [r for r in rows if r.attn_ms is not None]
    attn_exp = (fit_growth_exponent([r.tokens for r in attn_rows],
                                    [r.attn_ms for r in attn_rows])
                if len(attn_rows) >= 2 else float("nan"))
    return rows, scan_exp, attn_exp
