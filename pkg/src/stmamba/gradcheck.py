"""Finite-difference verification suites at op, block, and model granularity.

All checks run in 64-bit mode; 32-bit is too noisy for central differences.
Each entry reports the max relative error between the tape gradient and a
central-difference directional derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks as bk
from . import pipeline as pl
from . import routes as rt
from . import ssm
from . import tensor as tt
from .routes import WindowSpec
from .tensor import Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    scope: str
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol


def _weighted_sum(rng, out_shape):
    w = rng.standard_normal(out_shape)

    def reduce(t):
        return tt.sum_all(tt.mul(t, Tensor(w, dtype=np.float64)))

    return reduce


def _check(f, x, rng, eps=1e-5, n_directions=3):
    return tt.finite_diff_check(f, x, eps=eps, n_directions=n_directions, rng=rng)


def op_checks(seed: int = 0):
    """(name, callable) pairs; each callable returns a max relative error.

    All random fixtures are frozen before the probed closure is built so the
    finite-difference evaluations see a deterministic function.
    """
    rng = np.random.default_rng(seed)

    def t(*shape, scale=1.0):
        return Tensor(scale * rng.standard_normal(shape), dtype=np.float64)

    checks = []

    def probe(name, op, x, out_shape, **kw):
        red = _weighted_sum(rng, out_shape)
        checks.append((name, lambda: _check(lambda v: red(op(v)), x, rng, **kw)))

    y_add = t(3, 4)
    probe("add", lambda x: tt.add(x, y_add), t(3, 4), (3, 4))
    probe("sub", lambda x: tt.sub(x, y_add), t(3, 4), (3, 4))
    probe("mul", lambda x: tt.mul(x, y_add), t(3, 4), (3, 4))
    checks.append(("scale", lambda: _check(
        lambda x: tt.sum_all(tt.scale(x, -1.7)), t(5,), rng)))
    probe("sigmoid", tt.sigmoid, t(4, 3), (4, 3))
    probe("silu", tt.silu, t(4, 3), (4, 3))
    probe("softplus", tt.softplus, t(4, 3), (4, 3))
    probe("exp", tt.exp, t(4, 3, scale=0.5), (4, 3))
    checks.append(("mean_all", lambda: _check(lambda x: tt.mean_all(x), t(4, 5), rng)))
    probe("reshape", lambda x: tt.reshape(x, (12,)), t(3, 4), (12,))
    probe("transpose", lambda x: tt.transpose(x, (2, 0, 1)), t(2, 3, 4), (4, 2, 3))
    y_cat = t(2, 2)
    probe("concat", lambda x: tt.concat([x, y_cat], axis=1), t(2, 3), (2, 5))
    idx_tr = np.array([4, 1, 0, 2, 5, 3])
    probe("take_rows", lambda x: tt.take_rows(x, idx_tr, unique=True), t(6, 3), (6, 3))

    w_lin, b_lin, x_lin = t(5, 3), t(3), t(4, 5)
    probe("linear.x", lambda x: tt.linear(x, w_lin, b_lin), t(4, 5), (4, 3))
    probe("linear.w", lambda w: tt.linear(x_lin, w, b_lin), w_lin, (4, 3))

    g_ln, b_ln, x_ln = t(6), t(6), t(3, 6)
    probe("layer_norm.x", lambda x: tt.layer_norm(x, g_ln, b_ln), t(3, 6), (3, 6))
    probe("layer_norm.gamma", lambda g: tt.layer_norm(x_ln, g, b_ln), g_ln, (3, 6))

    k_cv, b_cv, x_cv = t(4, 3, 3, 3, scale=0.5), t(4), t(3, 5, 6)
    probe("conv2d.x", lambda x: tt.conv2d(x, k_cv, b_cv, pad="same"), t(3, 5, 6), (4, 5, 6))
    probe("conv2d.k", lambda k: tt.conv2d(x_cv, k, b_cv, pad="same"), k_cv, (4, 5, 6))
    k_dw, x_dw = t(3, 1, 3, 3, scale=0.5), t(2, 3, 5, 4)
    probe("conv2d.depthwise.x",
          lambda x: tt.conv2d(x, k_dw, pad="same", depthwise=True),
          t(2, 3, 5, 4), (2, 3, 5, 4))
    probe("conv2d.depthwise.k",
          lambda k: tt.conv2d(x_dw, k, pad="same", depthwise=True),
          k_dw, (2, 3, 5, 4))

    probe("bilinear_sample", lambda x: tt.bilinear_sample(x, (1.3, 2.7)),
          t(3, 5, 6), (3,))
    probe("global_avg_pool", tt.global_avg_pool, t(3, 4, 5), (3,))
    probe("gap_frames", tt.gap_frames, t(2, 3, 4, 5), (2, 3))
    probe("sum_over_frames", tt.sum_over_frames, t(2, 3, 4, 5), (3, 4, 5))
    m_sc, x_sc = t(2, 3), t(2, 3, 4, 5)
    probe("scale_channels.x", lambda x: tt.scale_channels(x, m_sc),
          t(2, 3, 4, 5), (2, 3, 4, 5))
    probe("scale_channels.m", lambda m: tt.scale_channels(x_sc, m), m_sc, (2, 3, 4, 5))
    probe("add_channel_map", lambda e: tt.add_channel_map(x_sc, e),
          t(3, 4, 5), (2, 3, 4, 5))
    probe("add_frame_vec", lambda e: tt.add_frame_vec(x_sc, e), t(2, 3), (2, 3, 4, 5))
    x_rv = t(4, 6)
    probe("add_row_vec", lambda v: tt.add_row_vec(x_rv, v), t(4), (4, 6))
    probe("repeat_middle", lambda x: tt.repeat_middle(x, 3), t(5, 4), (5, 3, 4))
    s_ab = t(5, 1)
    probe("affine_broadcast", lambda b: tt.affine_broadcast(s_ab, b), t(3), (5, 3))

    # deformable conv, each input separately
    x_dc = t(2, 3, 6, 5)
    off_dc = Tensor(0.7 * rng.standard_normal((2, 18, 6, 5)), dtype=np.float64)
    mod_dc = Tensor(rng.uniform(0.2, 0.9, (2, 9, 6, 5)), dtype=np.float64)
    w_dc = t(4, 3, 3, 3, scale=0.4)
    b_dc = t(4)
    red_dc = _weighted_sum(rng, (2, 4, 6, 5))

    checks.append(("deform_conv2d.x", lambda: _check(
        lambda x: red_dc(tt.deform_conv2d(x, off_dc, mod_dc, w_dc, b_dc)), x_dc, rng)))
    checks.append(("deform_conv2d.offsets", lambda: _check(
        lambda o: red_dc(tt.deform_conv2d(x_dc, o, mod_dc, w_dc, b_dc)), off_dc, rng)))
    checks.append(("deform_conv2d.mod", lambda: _check(
        lambda m: red_dc(tt.deform_conv2d(x_dc, off_dc, m, w_dc, b_dc)), mod_dc, rng)))
    checks.append(("deform_conv2d.w", lambda: _check(
        lambda w: red_dc(tt.deform_conv2d(x_dc, off_dc, mod_dc, w, b_dc)), w_dc, rng)))

    # ssm ops
    ln, d, n = 9, 3, 4
    delta0 = Tensor(rng.uniform(0.05, 1.0, (ln, d)), dtype=np.float64)
    a0 = Tensor(-rng.uniform(0.2, 3.0, (d, n)), dtype=np.float64)
    b0 = t(ln, d, n)
    red_zoh = _weighted_sum(rng, (ln, d, n))

    def zoh_scalar(delta, a, b):
        dp = ssm.zoh_discretize(delta, a, b)
        return tt.add(red_zoh(dp.a_bar), red_zoh(dp.b_bar))

    checks.append(("zoh_discretize.delta", lambda: _check(
        lambda x: zoh_scalar(x, a0, b0), delta0, rng, eps=1e-6)))
    checks.append(("zoh_discretize.a", lambda: _check(
        lambda x: zoh_scalar(delta0, x, b0), a0, rng, eps=1e-6)))
    checks.append(("zoh_discretize.b", lambda: _check(
        lambda x: zoh_scalar(delta0, a0, x), b0, rng, eps=1e-6)))

    abar0 = Tensor(rng.uniform(0.05, 0.95, (ln, d, n)), dtype=np.float64)
    bbar0 = t(ln, d, n, scale=0.5)
    c0 = t(ln, d, n)
    x0s = t(ln, d)
    h00 = t(d, n)
    skip0 = t(d)
    for mode, scan in (("recurrent", ssm.ssm_recurrent), ("parallel", ssm.ssm_parallel_scan)):
        probe(f"ssm_{mode}.x",
              lambda x, scan=scan: scan(ssm.DiscretizedParams(abar0, bbar0), c0, x, h00, skip0),
              t(ln, d), (ln, d))
        probe(f"ssm_{mode}.C",
              lambda c, scan=scan: scan(ssm.DiscretizedParams(abar0, bbar0), c, x0s, h00, skip0),
              c0, (ln, d))
        probe(f"ssm_{mode}.a_bar",
              lambda a, scan=scan: scan(ssm.DiscretizedParams(a, bbar0), c0, x0s, h00, skip0),
              abar0, (ln, d))
        probe(f"ssm_{mode}.h0",
              lambda h, scan=scan: scan(ssm.DiscretizedParams(abar0, bbar0), c0, x0s, h, skip0),
              h00, (ln, d))

    for mode in ("recurrent", "parallel"):
        def s6_err(mode=mode):
            p = ssm.init_ssm_params(4, 3, np.random.default_rng(seed + 1), np.float64)
            x0 = Tensor(np.random.default_rng(seed + 3).standard_normal((11, 4)),
                        requires_grad=True, dtype=np.float64)
            red = _weighted_sum(np.random.default_rng(seed + 4), (11, 4))
            params = [x0] + [tt_ for _, tt_ in p.tensors()]
            with tt.Tape() as tape:
                loss = red(ssm.s6_forward(x0, p, mode))
            tape.backward(loss)

            def f():
                return red(ssm.s6_forward(Tensor(x0.data, dtype=np.float64), p, mode)).item()

            return tt.finite_diff_check_params(f, params, eps=1e-6, n_directions=2,
                                               rng=np.random.default_rng(seed + 2))
        checks.append((f"s6_forward.{mode}", s6_err))

    return checks


def run_op_suite(seed: int = 0, tol: float = OP_TOL):
    results = []
    for name, fn in op_checks(seed):
        results.append(CheckResult("op", name, float(fn()), tol))
    return results


def _jitter_offset_generators(params_obj, rng):
    """Move zero-initialized deformable offsets off the integer lattice.

    At offsets exactly 0 every bilinear sample sits on a grid corner where the
    interpolant is non-differentiable, so central differences are undefined;
    the check must probe a generic point."""
    stmm = getattr(params_obj, "stmm", None)
    if stmm is None:
        return
    for stage in (stmm.spatial, stmm.temporal):
        stage.off_b.data = stage.off_b.data + 0.2 * rng.standard_normal(
            stage.off_b.shape).astype(stage.off_b.data.dtype)


def _block_param_check(build_fn, forward_fn, in_shape, seed, eps=1e-6, n_directions=2):
    """FD over a block's parameter tensors plus its input."""
    rng = np.random.default_rng(seed)
    params_obj = build_fn(np.random.default_rng(seed + 10))
    _jitter_offset_generators(params_obj, rng)
    x = Tensor(rng.standard_normal(in_shape), requires_grad=True, dtype=np.float64)
    red = _weighted_sum(rng, forward_fn(x, params_obj).shape)
    tensors = [x] + [t for _, t in params_obj.tensors()]
    for t in tensors:
        t.grad = None
    with tt.Tape() as tape:
        loss = red(forward_fn(x, params_obj))
    tape.backward(loss)

    def f():
        return red(forward_fn(Tensor(x.data, dtype=np.float64), params_obj)).item()

    return tt.finite_diff_check_params(f, tensors, eps=eps, n_directions=n_directions,
                                       rng=np.random.default_rng(seed + 20))


def run_block_suite(seed: int = 0, tol: float = MODEL_TOL):
    t_, d, h, w = 3, 8, 6, 5
    results = []
    with tt.using_dtype(np.float64):
        checks = [
            ("sequential_channel_attention",
             lambda rng: bk.make_channel_attention(d, t_, rng, reduction=2),
             lambda x, p: bk.sequential_channel_attention(x, p), (t_, d, h, w)),
            ("gated_stream", lambda rng: bk.make_gate(d, rng),
             lambda x, p: bk.gated_stream(x, p), (t_, d, h, w)),
            ("gsm_block", lambda rng: bk.make_gsm_block(d, 4, t_, rng, reduction=2,
                                                        expansion=2),
             lambda x, p: bk.gsm_block(x, p), (t_, d, h, w)),
            ("lrm_block", lambda rng: bk.make_lrm_block(d, 4, rng, expansion=2),
             lambda x, p: bk.lrm_block(x, p, WindowSpec(3, 3)), (t_, d, h, w)),
            ("detection_head", lambda rng: bk.make_head(d, 4, rng),
             lambda x, p: bk.detection_head(x, p), (t_, d, h, w)),
        ]
        for name, build_fn, fwd, shape in checks:
            err = _block_param_check(build_fn, fwd, shape, seed)
            results.append(CheckResult("block", name, float(err), tol))
    return results


def toy_model_config(seed: int = 0) -> pl.ModelConfig:
    """1 GSM + 1 LRM toy: D=16, N=8, T=3, 8x6 grid."""
    return pl.ModelConfig(in_channels=4, dim=16, state=8, gsm_blocks=1, lrm_blocks=1,
                          keypoints=3, frames=3, grid=(8, 6), window=(4, 3),
                          reduction=4, expansion=2, seed=seed)


def run_model_suite(seed: int = 0, tol: float = MODEL_TOL, n_directions: int = 2):
    """Full-model finite-difference check on the 1-GSM + 1-LRM toy (64-bit)."""
    rng = np.random.default_rng(seed)
    with tt.using_dtype(np.float64):
        cfg = toy_model_config(seed)
        model = pl.PoseModel(cfg)
        for blk in model.gsm:
            _jitter_offset_generators(blk, rng)
        feats = rng.standard_normal((cfg.frames, cfg.in_channels, *cfg.grid))
        gt = rng.standard_normal((cfg.keypoints, *cfg.grid))
        vis = np.ones(cfg.keypoints, dtype=bool)
        named = model.named_parameters()
        x = Tensor(feats, requires_grad=True, dtype=np.float64)
        with tt.Tape() as tape:
            loss = pl.heatmap_loss(model.forward(x), gt, vis)
        tape.backward(loss)

        def f():
            m = pl.heatmap_loss(model.forward(Tensor(x.data, dtype=np.float64)), gt, vis)
            return m.item()

        err_in = tt.finite_diff_check_params(f, [x], eps=1e-6, n_directions=n_directions,
                                             rng=np.random.default_rng(seed + 1))
        err_params = tt.finite_diff_check_params(
            f, [t for _, t in named], eps=1e-6, n_directions=n_directions,
            rng=np.random.default_rng(seed + 2))
    return [CheckResult("model", "toy_model.input", float(err_in), tol),
            CheckResult("model", "toy_model.params", float(err_params), tol)]


def run_suite(scope: str, seed: int = 0):
    if scope == "op":
        return run_op_suite(seed)
    if scope == "block":
        return run_block_suite(seed)
    if scope == "model":
        return run_model_suite(seed)
    raise ValueError(f"unknown gradcheck scope {scope!r}")
