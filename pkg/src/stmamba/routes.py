"""Deterministic bijections between the (T,h,w) grid and 1-d token sequences.

Six scan routes: the frames are stacked into a panorama (vertically by
default), which is traversed row-major ("unified horizontal") and
column-major ("space vertical"); a third route walks the time axis fastest
("time depth"). Reversing each yields routes 4-6. Window partitioning tiles
each frame with non-overlapping windows extended over all frames (tubelets),
zero-padding the bottom/right edges when the frame is not divisible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tt
from .errors import ConfigurationError, DimensionError, LayoutError
from .tensor import Tensor, _record

ROUTE_IDS = (
    "unified_h_fwd", "space_v_fwd", "time_depth_fwd",
    "unified_h_rev", "space_v_rev", "time_depth_rev",
)


@dataclass(frozen=True)
class WindowSpec:
    """Non-overlapping window extents; bottom/right zero padding on misfit."""

    wh: int = 8
    ww: int = 6

    def __post_init__(self):
        if self.wh <= 0 or self.ww <= 0:
            raise ConfigurationError(f"window extents must be positive, got {self}")


@dataclass(frozen=True)
class RouteLayout:
    """Explicit permutation between grid cells (t,y,x) and token positions."""

    route_id: str
    grid: tuple  # (T, h, w)
    perm: np.ndarray   # (L,3) int32, token position -> (t,y,x)
    cells: np.ndarray  # (L,) int64, token position -> lexicographic cell index
    inv: np.ndarray    # (L,) int64, lexicographic cell index -> token position

    @property
    def n_tokens(self) -> int:
        return int(self.perm.shape[0])

    def csv_rows(self):
        for i in range(self.n_tokens):
            t, y, x = self.perm[i]
            yield int(i), int(t), int(y), int(x)


def _order_triples(route_base: str, t: int, h: int, w: int,
                   panorama_stack: str, time_depth_order: str) -> np.ndarray:
    """Token traversal as (t,y,x) triples for the three forward routes."""
    if panorama_stack not in ("vertical", "horizontal"):
        raise ConfigurationError(f"unknown panorama_stack {panorama_stack!r}")
    if time_depth_order not in ("yx", "xy"):
        raise ConfigurationError(f"unknown time_depth_order {time_depth_order!r}")
    if route_base == "unified_h":
        # row-major read of the panorama
        axes = ("t", "y", "x") if panorama_stack == "vertical" else ("y", "t", "x")
    elif route_base == "space_v":
        # column-major read of the panorama
        axes = ("x", "t", "y") if panorama_stack == "vertical" else ("t", "x", "y")
    elif route_base == "time_depth":
        axes = ("y", "x", "t") if time_depth_order == "yx" else ("x", "y", "t")
    else:
        raise ConfigurationError(f"unknown route base {route_base!r}")
    sizes = {"t": t, "y": h, "x": w}
    grids = np.meshgrid(*(np.arange(sizes[a]) for a in axes), indexing="ij")
    flat = {a: g.reshape(-1) for a, g in zip(axes, grids)}
    return np.stack([flat["t"], flat["y"], flat["x"]], axis=1).astype(np.int32)


@lru_cache(maxsize=256)
def build_route_layout(grid: tuple, route_id: str, panorama_stack: str = "vertical",
                       time_depth_order: str = "yx") -> RouteLayout:
    if route_id not in ROUTE_IDS:
        raise ConfigurationError(f"unknown route id {route_id!r}")
    t, h, w = (int(v) for v in grid)
    base, direction = route_id.rsplit("_", 1)
    perm = _order_triples(base, t, h, w, panorama_stack, time_depth_order)
    if direction == "rev":
        perm = perm[::-1].copy()
    cells = (perm[:, 0].astype(np.int64) * h * w
             + perm[:, 1].astype(np.int64) * w + perm[:, 2].astype(np.int64))
    inv = np.empty_like(cells)
    inv[cells] = np.arange(cells.shape[0], dtype=np.int64)
    for a in (perm, cells, inv):
        a.setflags(write=False)
    return RouteLayout(route_id=route_id, grid=(t, h, w), perm=perm, cells=cells, inv=inv)


def _tokens_2d(seq: Tensor) -> Tensor:
    """(T,D,h,w) -> (T*h*w, D) in lexicographic (t,y,x) cell order."""
    if seq.ndim != 4:
        raise DimensionError(f"expected feature sequence (T,D,h,w), got {seq.shape}")
    t, d, h, w = seq.shape
    return tt.reshape(tt.transpose(seq, (0, 2, 3, 1)), (t * h * w, d))


def flatten_route(seq: Tensor, route_id: str, panorama_stack: str = "vertical",
                  time_depth_order: str = "yx"):
    """Flatten a (T,D,h,w) sequence along one scan route -> ((L,D), layout)."""
    t, d, h, w = seq.shape
    layout = build_route_layout((t, h, w), route_id, panorama_stack, time_depth_order)
    tokens = tt.take_rows(_tokens_2d(seq), layout.cells, unique=True)
    return tokens, layout


def invert_route(tokens: Tensor, layout: RouteLayout) -> Tensor:
    """Inverse transformation: (L,D) tokens -> (T,D,h,w) grid."""
    t, h, w = layout.grid
    if tokens.ndim != 2 or tokens.shape[0] != layout.n_tokens:
        raise LayoutError(
            f"token count {tokens.shape} does not match layout {layout.route_id}{layout.grid}")
    cells = tt.take_rows(tokens, layout.inv, unique=True)
    return tt.transpose(tt.reshape(cells, (t, h, w, tokens.shape[1])), (0, 3, 1, 2))


def enumerate_sts6d(seq: Tensor, panorama_stack: str = "vertical",
                    time_depth_order: str = "yx"):
    """All six space-time routes, ordered k=1..6 (three forward, then reversals)."""
    t, d, h, w = seq.shape
    base = _tokens_2d(seq)
    outs = []
    for route_id in ROUTE_IDS:
        layout = build_route_layout((t, h, w), route_id, panorama_stack, time_depth_order)
        outs.append((tt.take_rows(base, layout.cells, unique=True), layout))
    return outs


# --------------------------------------------------------------------------- #
# Windowing
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class WindowPlacement:
    grid: tuple          # (T, D, h, w) of the original sequence
    spec: WindowSpec
    n_y: int
    n_x: int
    padded: tuple        # (Hp, Wp)


def window_partition(seq: Tensor, spec: WindowSpec):
    """Split (T,D,h,w) into non-overlapping (T,D,wh,ww) tubelets.

    Returns (tubelets, placement); tubelets are ordered row-major over the
    window grid. Bottom/right zero padding is applied when h or w is not
    divisible by the window extents.
    """
    if seq.ndim != 4:
        raise DimensionError(f"window_partition expects (T,D,h,w), got {seq.shape}")
    t, d, h, w = seq.shape
    wh, ww = spec.wh, spec.ww
    n_y = -(-h // wh)
    n_x = -(-w // ww)
    hp, wp = n_y * wh, n_x * ww
    xd = seq.data
    if (hp, wp) != (h, w):
        xd = np.pad(xd, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))
    outs = []
    for iy in range(n_y):
        for ix in range(n_x):
            outs.append(Tensor(
                np.ascontiguousarray(xd[:, :, iy * wh:(iy + 1) * wh, ix * ww:(ix + 1) * ww])))
    placement = WindowPlacement(grid=(t, d, h, w), spec=spec, n_y=n_y, n_x=n_x,
                                padded=(hp, wp))

    def bwd(*gouts):
        gx = np.zeros((t, d, hp, wp), dtype=seq.data.dtype)
        k = 0
        for iy in range(n_y):
            for ix in range(n_x):
                gx[:, :, iy * wh:(iy + 1) * wh, ix * ww:(ix + 1) * ww] = gouts[k]
                k += 1
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)

    _record("window_partition", (seq,), tuple(outs), bwd)
    return outs, placement


def window_merge(tubelets, placement: WindowPlacement) -> Tensor:
    """Exact inverse of window_partition (padding cropped away)."""
    t, d, h, w = placement.grid
    wh, ww = placement.spec.wh, placement.spec.ww
    n_y, n_x = placement.n_y, placement.n_x
    if len(tubelets) != n_y * n_x:
        raise LayoutError(f"expected {n_y * n_x} tubelets, got {len(tubelets)}")
    for tub in tubelets:
        if tub.shape != (t, d, wh, ww):
            raise LayoutError(f"tubelet shape {tub.shape} != {(t, d, wh, ww)}")
    hp, wp = placement.padded
    full = np.zeros((t, d, hp, wp), dtype=tubelets[0].data.dtype)
    k = 0
    for iy in range(n_y):
        for ix in range(n_x):
            full[:, :, iy * wh:(iy + 1) * wh, ix * ww:(ix + 1) * ww] = tubelets[k].data
            k += 1
    out = Tensor(np.ascontiguousarray(full[:, :, :h, :w]))

    def bwd(g):
        gpad = np.zeros((t, d, hp, wp), dtype=g.dtype)
        gpad[:, :, :h, :w] = g
        return tuple(
            np.ascontiguousarray(
                gpad[:, :, iy * wh:(iy + 1) * wh, ix * ww:(ix + 1) * ww])
            for iy in range(n_y) for ix in range(n_x))

    _record("window_merge", tuple(tubelets), (out,), bwd)
    return out


def wsts_scan_order(tubelet: Tensor):
    """Frame-by-frame raster unroll of a tubelet, forward and reverse.

    Returns (fwd_tokens, rev_tokens, fwd_layout, rev_layout); token count is
    T*wh*ww and the reverse order is the exact reversal of the forward one.
    """
    fwd_tokens, fwd_layout = flatten_route(tubelet, "unified_h_fwd")
    rev_tokens, rev_layout = flatten_route(tubelet, "unified_h_rev")
    return fwd_tokens, rev_tokens, fwd_layout, rev_layout


@dataclass(frozen=True)
class WstsLayout:
    """All window segments of a grid concatenated into one token sequence.

    Tokens run window-by-window (row-major over the window grid), each window
    unrolled frame-by-frame in raster order; ``carry`` is 0 at every segment
    start so one scan call processes all segments independently.
    """

    grid: tuple            # (T, h, w) before padding
    spec: WindowSpec
    padded: tuple          # (Hp, Wp)
    segment: int           # tokens per tubelet = T*wh*ww
    cells: np.ndarray      # (L,) forward token -> padded lexicographic cell
    cells_rev: np.ndarray
    inv_fwd: np.ndarray    # padded cell -> forward token position
    inv_rev: np.ndarray
    carry: np.ndarray      # (L,) float32 0/1


@lru_cache(maxsize=64)
def build_wsts_layout(grid: tuple, spec: WindowSpec) -> WstsLayout:
    t, h, w = grid
    wh, ww = spec.wh, spec.ww
    n_y = -(-h // wh)
    n_x = -(-w // ww)
    hp, wp = n_y * wh, n_x * ww
    iy, ix, ti, yy, xx = np.meshgrid(
        np.arange(n_y), np.arange(n_x), np.arange(t), np.arange(wh), np.arange(ww),
        indexing="ij")
    y = (iy * wh + yy).reshape(-1).astype(np.int64)
    x = (ix * ww + xx).reshape(-1).astype(np.int64)
    tt_ = ti.reshape(-1).astype(np.int64)
    cells = tt_ * (hp * wp) + y * wp + x
    ln = cells.shape[0]
    inv_fwd = np.empty(ln, dtype=np.int64)
    inv_fwd[cells] = np.arange(ln, dtype=np.int64)
    seg = t * wh * ww
    carry = np.ones(ln, dtype=np.float32)
    carry[0::seg] = 0.0
    cells_rev = cells[::-1].copy()
    inv_rev = (ln - 1) - inv_fwd
    for a in (cells, cells_rev, inv_fwd, inv_rev, carry):
        a.setflags(write=False)
    return WstsLayout(grid=(t, h, w), spec=spec, padded=(hp, wp), segment=seg,
                      cells=cells, cells_rev=cells_rev, inv_fwd=inv_fwd,
                      inv_rev=inv_rev, carry=carry)
