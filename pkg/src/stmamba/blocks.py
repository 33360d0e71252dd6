"""Model blocks: input embedding, global scan block, local window block, head.

The global block runs two streams over a (T,D,h,w) feature sequence: a main
stream (frame-wise channel attention -> LayerNorm+SiLU -> six-route selective
scans -> modulated merge) and a gating stream (depthwise conv -> LayerNorm ->
SiLU); the streams multiply and feed a position-wise FFN wrapped in a
residual connection. The local block swaps the six-route machinery for
bidirectional scans inside windowed tubelets and drops the channel attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import routes as rt
from . import ssm
from . import tensor as tt
from .errors import DimensionError
from .routes import WindowSpec
from .ssm import SsmParams
from .tensor import Tensor


# --------------------------------------------------------------------------- #
# Helpers: channels-last hops
# --------------------------------------------------------------------------- #

def _pointwise(x: Tensor, fn) -> Tensor:
    """Apply a (.., D)->(.., D') function across channels of (T,D,h,w)."""
    t, d, h, w = x.shape
    cl = tt.transpose(x, (0, 2, 3, 1))
    out = fn(cl)
    return tt.transpose(out, (0, 3, 1, 2))


def channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return _pointwise(x, lambda cl: tt.layer_norm(cl, gamma, beta, eps))


# --------------------------------------------------------------------------- #
# Input embedding
# --------------------------------------------------------------------------- #

def sincos_embedding_2d(dim: int, h: int, w: int, dtype=None) -> np.ndarray:
    """Fixed 2-d sine-cosine positional embedding, (dim, h, w).

    Half the channels encode the row coordinate, half the column, as
    interleaved sin/cos pairs over dim//4 geometric frequencies.
    """
    if dim % 4 != 0:
        raise DimensionError(f"sincos embedding needs dim divisible by 4, got {dim}")
    dtype = dtype or tt.default_dtype()
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys = np.arange(h)[None, :, None] * omega[:, None, None]     # (q, h, 1)
    xs = np.arange(w)[None, None, :] * omega[:, None, None]     # (q, 1, w)
    emb = np.zeros((dim, h, w))
    emb[0:quarter] = np.broadcast_to(np.sin(ys), (quarter, h, w))
    emb[quarter:2 * quarter] = np.broadcast_to(np.cos(ys), (quarter, h, w))
    emb[2 * quarter:3 * quarter] = np.broadcast_to(np.sin(xs), (quarter, h, w))
    emb[3 * quarter:] = np.broadcast_to(np.cos(xs), (quarter, h, w))
    return emb.astype(dtype)


@dataclass
class InputEmbedding:
    w_in: Tensor   # (Din, D)
    b_in: Tensor   # (D,)
    e_spa: Tensor  # (D, h, w) fixed sine-cosine map (not learnable)
    e_tem: Tensor  # (T, D) learnable

    def tensors(self):
        return [("w_in", self.w_in), ("b_in", self.b_in), ("e_tem", self.e_tem)]


def make_input_embedding(din: int, dim: int, t: int, h: int, w: int,
                         rng: np.random.Generator, dtype=None) -> InputEmbedding:
    dtype = dtype or tt.default_dtype()
    w_in = (rng.standard_normal((din, dim)) / np.sqrt(din)).astype(dtype)
    e_tem = (rng.standard_normal((t, dim)) * 0.02).astype(dtype)
    return InputEmbedding(
        w_in=Tensor(w_in, requires_grad=True),
        b_in=tt.zeros((dim,), requires_grad=True, dtype=dtype),
        e_spa=Tensor(sincos_embedding_2d(dim, h, w, dtype)),
        e_tem=Tensor(e_tem, requires_grad=True),
    )


def embed_sequence(f: Tensor, emb: InputEmbedding) -> Tensor:
    """Per-frame linear projection to D channels plus spatial and temporal
    embeddings; applied once before the global block stack."""
    if f.ndim != 4 or f.shape[1] != emb.w_in.shape[0]:
        raise DimensionError(
            f"embed_sequence: input {f.shape} incompatible with w_in {emb.w_in.shape}")
    x = _pointwise(f, lambda cl: tt.linear(cl, emb.w_in, emb.b_in))
    x = tt.add_channel_map(x, emb.e_spa)
    return tt.add_frame_vec(x, emb.e_tem)


# --------------------------------------------------------------------------- #
# Sequential channel attention
# --------------------------------------------------------------------------- #

@dataclass
class ChannelAttentionParams:
    w1: Tensor  # (D, D//r)
    b1: Tensor
    w2: Tensor  # (D//r, D)
    b2: Tensor
    wt: Tensor  # (T, T) cross-frame mixer, applied per channel
    bt: Tensor  # (T,)

    def tensors(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2),
                ("wt", self.wt), ("bt", self.bt)]


def make_channel_attention(dim: int, t: int, rng, reduction: int = 4, dtype=None
                           ) -> ChannelAttentionParams:
    dtype = dtype or tt.default_dtype()
    hidden = max(1, dim // reduction)
    return ChannelAttentionParams(
        w1=Tensor((rng.standard_normal((dim, hidden)) / np.sqrt(dim)).astype(dtype),
                  requires_grad=True),
        b1=tt.zeros((hidden,), requires_grad=True, dtype=dtype),
        w2=Tensor((rng.standard_normal((hidden, dim)) / np.sqrt(hidden)).astype(dtype),
                  requires_grad=True),
        b2=tt.zeros((dim,), requires_grad=True, dtype=dtype),
        wt=Tensor((np.eye(t) + 0.02 * rng.standard_normal((t, t))).astype(dtype),
                  requires_grad=True),
        bt=tt.zeros((t,), requires_grad=True, dtype=dtype),
    )


def sequential_channel_attention(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Frame-wise channel descriptors -> channel MLP -> temporal mixer ->
    sigmoid gates in (0,1), used to rescale the input sequence."""
    desc = tt.gap_frames(x)                                   # (T,D)
    s = tt.linear(tt.silu(tt.linear(desc, p.w1, p.b1)), p.w2, p.b2)
    # temporal mixing per channel: logits[t,d] = sum_t' wt[t,t'] s[t',d] + bt[t]
    mixed = tt.transpose(tt.linear(tt.transpose(s, (1, 0)), tt.transpose(p.wt, (1, 0))), (1, 0))
    logits = tt.add_row_vec(mixed, p.bt)
    gates = tt.sigmoid(logits)
    return tt.scale_channels(x, gates)


# --------------------------------------------------------------------------- #
# Gated depthwise stream
# --------------------------------------------------------------------------- #

@dataclass
class GateParams:
    dw: Tensor       # (D,1,3,3) depthwise kernel
    ln_gamma: Tensor
    ln_beta: Tensor

    def tensors(self):
        return [("dw", self.dw), ("ln_gamma", self.ln_gamma), ("ln_beta", self.ln_beta)]


def make_gate(dim: int, rng, dtype=None) -> GateParams:
    dtype = dtype or tt.default_dtype()
    dw = 0.1 * rng.standard_normal((dim, 1, 3, 3))
    dw[:, 0, 1, 1] += 1.0
    return GateParams(
        dw=Tensor(dw.astype(dtype), requires_grad=True),
        ln_gamma=tt.ones((dim,), requires_grad=True, dtype=dtype),
        ln_beta=tt.zeros((dim,), requires_grad=True, dtype=dtype),
    )


def gated_stream(x: Tensor, p: GateParams) -> Tensor:
    """Per-frame depthwise 3x3 conv -> channel LayerNorm -> SiLU."""
    y = tt.conv2d(x, p.dw, pad="same", depthwise=True)
    return tt.silu(channel_layer_norm(y, p.ln_gamma, p.ln_beta))


# --------------------------------------------------------------------------- #
# Six-route scanning and modulated merging
# --------------------------------------------------------------------------- #

def sts6d_apply(x: Tensor, route_params, mode: str = "recurrent",
                panorama_stack: str = "vertical", time_depth_order: str = "yx"):
    """Run each of the six route token streams through its own selective scan.

    x must already be normalized+activated. Returns a list of six
    (tokens, layout) pairs aligned with the k=1..6 route order.
    """
    if len(route_params) != 6:
        raise DimensionError(f"expected 6 route parameter sets, got {len(route_params)}")
    streams = rt.enumerate_sts6d(x, panorama_stack, time_depth_order)
    return [(ssm.s6_forward(tokens, p, mode), layout)
            for (tokens, layout), p in zip(streams, route_params)]


@dataclass
class StmmStageParams:
    off_w: Tensor  # (2*K2, 2D, 3, 3) offset generator
    off_b: Tensor
    mod_w: Tensor  # (K2, 2D, 3, 3) modulation generator
    mod_b: Tensor
    dcn_w: Tensor  # (D, D, 3, 3) deformable kernel
    dcn_b: Tensor

    def tensors(self):
        return [("off_w", self.off_w), ("off_b", self.off_b), ("mod_w", self.mod_w),
                ("mod_b", self.mod_b), ("dcn_w", self.dcn_w), ("dcn_b", self.dcn_b)]


@dataclass
class StmmParams:
    spatial: StmmStageParams
    temporal: StmmStageParams

    def tensors(self):
        return ([("spatial." + n, t) for n, t in self.spatial.tensors()]
                + [("temporal." + n, t) for n, t in self.temporal.tensors()])


def _make_stmm_stage(dim: int, rng, k: int = 3, dtype=None) -> StmmStageParams:
    dtype = dtype or tt.default_dtype()
    k2 = k * k
    # offsets start at zero; modulation bias 0 -> sigmoid 0.5
    return StmmStageParams(
        off_w=tt.zeros((2 * k2, 2 * dim, k, k), requires_grad=True, dtype=dtype),
        off_b=tt.zeros((2 * k2,), requires_grad=True, dtype=dtype),
        mod_w=tt.zeros((k2, 2 * dim, k, k), requires_grad=True, dtype=dtype),
        mod_b=tt.zeros((k2,), requires_grad=True, dtype=dtype),
        dcn_w=Tensor((rng.standard_normal((dim, dim, k, k))
                      / np.sqrt(dim * k2)).astype(dtype), requires_grad=True),
        dcn_b=tt.zeros((dim,), requires_grad=True, dtype=dtype),
    )


def make_stmm(dim: int, rng, dtype=None) -> StmmParams:
    return StmmParams(spatial=_make_stmm_stage(dim, rng, dtype=dtype),
                      temporal=_make_stmm_stage(dim, rng, dtype=dtype))


def _stmm_stage(base: Tensor, guide: Tensor, sp: StmmStageParams) -> Tensor:
    cat = tt.concat([base, guide], axis=1)
    # offsets and modulation share one im2col by convolving with the stacked
    # generator weights, then splitting the output channels
    k2 = sp.mod_w.shape[0]
    gen_w = tt.concat([sp.off_w, sp.mod_w], axis=0)
    gen_b = tt.concat([sp.off_b, sp.mod_b], axis=0)
    gen = tt.conv2d(cat, gen_w, gen_b, pad="same")
    off = tt.slice_channels(gen, 0, 2 * k2)
    mod = tt.sigmoid(tt.slice_channels(gen, 2 * k2, 3 * k2))
    delta = tt.deform_conv2d(base, off, mod, sp.dcn_w, sp.dcn_b)
    return tt.add(base, delta)


def stmm_merge(route_outputs, p: "StmmParams | None", use_dcn: bool = True) -> Tensor:
    """Invert the six scans to grid form, add same-type pairs, then apply the
    two modulated-compensation stages (spatial guide, then temporal guide).

    With use_dcn=False the three merged grids are simply added (the merge
    ablation)."""
    grids = [rt.invert_route(tokens, layout) for tokens, layout in route_outputs]
    f_u = tt.add(grids[0], grids[3])
    f_s = tt.add(grids[1], grids[4])
    f_t = tt.add(grids[2], grids[5])
    if not use_dcn or p is None:
        return tt.add(tt.add(f_u, f_s), f_t)
    f_us = _stmm_stage(f_u, f_s, p.spatial)
    return _stmm_stage(f_us, f_t, p.temporal)


# --------------------------------------------------------------------------- #
# FFN
# --------------------------------------------------------------------------- #

@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def make_ffn(dim: int, rng, expansion: int = 4, dtype=None) -> FfnParams:
    dtype = dtype or tt.default_dtype()
    hidden = dim * expansion
    return FfnParams(
        w1=Tensor((rng.standard_normal((dim, hidden)) / np.sqrt(dim)).astype(dtype),
                  requires_grad=True),
        b1=tt.zeros((hidden,), requires_grad=True, dtype=dtype),
        w2=Tensor((rng.standard_normal((hidden, dim)) / np.sqrt(hidden)).astype(dtype),
                  requires_grad=True),
        b2=tt.zeros((dim,), requires_grad=True, dtype=dtype),
    )


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    return _pointwise(
        x, lambda cl: tt.linear(tt.silu(tt.linear(cl, p.w1, p.b1)), p.w2, p.b2))


# --------------------------------------------------------------------------- #
# Blocks
# --------------------------------------------------------------------------- #

@dataclass
class GsmBlockParams:
    sca: ChannelAttentionParams
    ln_gamma: Tensor   # pre-scan LayerNorm affine
    ln_beta: Tensor
    route_ssm: list    # six SsmParams, one per route
    stmm: StmmParams
    gate: GateParams
    ffn: FfnParams

    def tensors(self):
        named = [("sca." + n, t) for n, t in self.sca.tensors()]
        named += [("ln_gamma", self.ln_gamma), ("ln_beta", self.ln_beta)]
        for k, sp in enumerate(self.route_ssm):
            named += [(f"route{k}." + n, t) for n, t in sp.tensors()]
        named += [("stmm." + n, t) for n, t in self.stmm.tensors()]
        named += [("gate." + n, t) for n, t in self.gate.tensors()]
        named += [("ffn." + n, t) for n, t in self.ffn.tensors()]
        return named


def make_gsm_block(dim: int, state: int, t: int, rng, reduction: int = 4,
                   expansion: int = 4, use_skip: bool = True, dtype=None) -> GsmBlockParams:
    dtype = dtype or tt.default_dtype()
    return GsmBlockParams(
        sca=make_channel_attention(dim, t, rng, reduction, dtype),
        ln_gamma=tt.ones((dim,), requires_grad=True, dtype=dtype),
        ln_beta=tt.zeros((dim,), requires_grad=True, dtype=dtype),
        route_ssm=[ssm.init_ssm_params(dim, state, rng, dtype, use_skip=use_skip)
                   for _ in range(6)],
        stmm=make_stmm(dim, rng, dtype),
        gate=make_gate(dim, rng, dtype),
        ffn=make_ffn(dim, rng, expansion, dtype),
    )


def gsm_block(x: Tensor, p: GsmBlockParams, mode: str = "recurrent",
              use_stmm: bool = True, residual: bool = True,
              panorama_stack: str = "vertical", time_depth_order: str = "yx") -> Tensor:
    att = sequential_channel_attention(x, p.sca)
    pre = tt.silu(channel_layer_norm(att, p.ln_gamma, p.ln_beta))
    route_outs = sts6d_apply(pre, p.route_ssm, mode, panorama_stack, time_depth_order)
    main = stmm_merge(route_outs, p.stmm, use_dcn=use_stmm)
    gate = gated_stream(x, p.gate)
    out = ffn(tt.mul(main, gate), p.ffn)
    return tt.add(x, out) if residual else out


@dataclass
class LrmBlockParams:
    ln_gamma: Tensor
    ln_beta: Tensor
    fwd: SsmParams
    rev: SsmParams
    gate: GateParams
    ffn: FfnParams

    def tensors(self):
        named = [("ln_gamma", self.ln_gamma), ("ln_beta", self.ln_beta)]
        named += [("fwd." + n, t) for n, t in self.fwd.tensors()]
        named += [("rev." + n, t) for n, t in self.rev.tensors()]
        named += [("gate." + n, t) for n, t in self.gate.tensors()]
        named += [("ffn." + n, t) for n, t in self.ffn.tensors()]
        return named


def make_lrm_block(dim: int, state: int, rng, expansion: int = 4,
                   use_skip: bool = True, dtype=None) -> LrmBlockParams:
    dtype = dtype or tt.default_dtype()
    return LrmBlockParams(
        ln_gamma=tt.ones((dim,), requires_grad=True, dtype=dtype),
        ln_beta=tt.zeros((dim,), requires_grad=True, dtype=dtype),
        fwd=ssm.init_ssm_params(dim, state, rng, dtype, use_skip=use_skip),
        rev=ssm.init_ssm_params(dim, state, rng, dtype, use_skip=use_skip),
        gate=make_gate(dim, rng, dtype),
        ffn=make_ffn(dim, rng, expansion, dtype),
    )


def lrm_block(x: Tensor, p: LrmBlockParams, window: WindowSpec,
              mode: str = "recurrent", residual: bool = True) -> Tensor:
    """Windowed bidirectional scan block (no channel attention).

    All tubelets are concatenated into one token sequence per direction and
    processed in a single scan call; carry=0 at segment starts makes this
    arithmetically identical to scanning each tubelet independently
    (lrm_block_reference computes the literal per-tubelet form).
    """
    t, d, h, w = x.shape
    pre = tt.silu(channel_layer_norm(x, p.ln_gamma, p.ln_beta))
    lay = rt.build_wsts_layout((t, h, w), window)
    hp, wp = lay.padded
    xp = tt.pad_spatial(pre, hp, wp) if (hp, wp) != (h, w) else pre
    base = tt.reshape(tt.transpose(xp, (0, 2, 3, 1)), (t * hp * wp, d))
    y_f = ssm.s6_forward(tt.take_rows(base, lay.cells, unique=True),
                         p.fwd, mode, carry=lay.carry)
    y_r = ssm.s6_forward(tt.take_rows(base, lay.cells_rev, unique=True),
                         p.rev, mode, carry=lay.carry)
    merged = tt.add(tt.take_rows(y_f, lay.inv_fwd, unique=True),
                    tt.take_rows(y_r, lay.inv_rev, unique=True))
    mg = tt.transpose(tt.reshape(merged, (t, hp, wp, d)), (0, 3, 1, 2))
    main = tt.crop_spatial(mg, h, w) if (hp, wp) != (h, w) else mg
    gate = gated_stream(x, p.gate)
    out = ffn(tt.mul(main, gate), p.ffn)
    return tt.add(x, out) if residual else out


def lrm_block_reference(x: Tensor, p: LrmBlockParams, window: WindowSpec,
                        mode: str = "recurrent", residual: bool = True) -> Tensor:
    """Literal per-tubelet form of lrm_block (window partition -> scan each
    tubelet forward and reverse -> merge); used to cross-check the batched
    implementation."""
    pre = tt.silu(channel_layer_norm(x, p.ln_gamma, p.ln_beta))
    tubelets, placement = rt.window_partition(pre, window)
    processed = []
    for tub in tubelets:
        fwd_tok, rev_tok, fwd_layout, rev_layout = rt.wsts_scan_order(tub)
        a = rt.invert_route(ssm.s6_forward(fwd_tok, p.fwd, mode), fwd_layout)
        b = rt.invert_route(ssm.s6_forward(rev_tok, p.rev, mode), rev_layout)
        processed.append(tt.add(a, b))
    main = rt.window_merge(processed, placement)
    gate = gated_stream(x, p.gate)
    out = ffn(tt.mul(main, gate), p.ffn)
    return tt.add(x, out) if residual else out


# --------------------------------------------------------------------------- #
# Detection head
# --------------------------------------------------------------------------- #

@dataclass
class HeadParams:
    w: Tensor  # (K, D, 3, 3)
    b: Tensor  # (K,)

    def tensors(self):
        return [("w", self.w), ("b", self.b)]


def make_head(dim: int, keypoints: int, rng, dtype=None) -> HeadParams:
    dtype = dtype or tt.default_dtype()
    return HeadParams(
        w=Tensor((rng.standard_normal((keypoints, dim, 3, 3))
                  / np.sqrt(dim * 9)).astype(dtype), requires_grad=True),
        b=tt.zeros((keypoints,), requires_grad=True, dtype=dtype),
    )


def detection_head(seq: Tensor, p: HeadParams) -> Tensor:
    """Sum frames elementwise, then a same-size 3x3 conv to K heatmaps."""
    pooled = tt.sum_over_frames(seq)
    return tt.conv2d(pooled, p.w, p.b, pad="same")
