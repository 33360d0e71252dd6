"""End-to-end assembly: clips, synthetic data, model, loss, training loop.

The visual encoder is a fixed (non-learnable) random-projection patchifier:
it averages 4x4 patches and projects to the model's input channels, keeping
the quarter-resolution contract of the real pipeline while leaving all
trainable behavior in the scan blocks. The synthetic task is K moving
Gaussian blobs whose center-frame positions must be regressed as heatmaps;
occlusion mode hides one blob in the center frame so temporal context is
required to localize it.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import blocks as bk
from . import tensor as tt
from .errors import ConfigurationError, ContractError, DimensionError, NumericsError
from .routes import WindowSpec
from .tensor import Tensor, Tape


# --------------------------------------------------------------------------- #
# Clips
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ClipSpec:
    """Temporal span and bounding-box enlargement for clip construction."""

    span: int = 2            # frames on each side of the center frame
    enlarge: float = 1.25    # bbox scale factor about its center

    @property
    def frames(self) -> int:
        return 2 * self.span + 1


def enlarge_bbox(bbox, factor: float):
    """(x, y, w, h) scaled by ``factor`` about the box center."""
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ConfigurationError(f"empty bbox {bbox}")
    cx, cy = x + w / 2.0, y + h / 2.0
    nw, nh = w * factor, h * factor
    return (cx - nw / 2.0, cy - nh / 2.0, nw, nh)


def build_clip(frames: np.ndarray, center: int, bbox, spec: ClipSpec) -> np.ndarray:
    """Crop T frames of identical size centered on the enlarged bbox.

    frames: (F, C, H, W); bbox: (x, y, w, h). Clip boundaries are clamped at
    the video edges by repeating edge frames; the crop window is clamped to
    the image.
    """
    if frames.ndim != 4:
        raise DimensionError(f"frames must be (F,C,H,W), got {frames.shape}")
    f, _, h, w = frames.shape
    x, y, bw, bh = enlarge_bbox(bbox, spec.enlarge)
    x0 = int(np.clip(np.floor(x), 0, w - 1))
    y0 = int(np.clip(np.floor(y), 0, h - 1))
    x1 = int(np.clip(np.ceil(x + bw), x0 + 1, w))
    y1 = int(np.clip(np.ceil(y + bh), y0 + 1, h))
    idx = np.clip(np.arange(center - spec.span, center + spec.span + 1), 0, f - 1)
    return np.ascontiguousarray(frames[idx, :, y0:y1, x0:x1])


# --------------------------------------------------------------------------- #
# Stub visual encoder
# --------------------------------------------------------------------------- #

STUB_ENCODER_SEED = 1234


def stub_encoder(clip: np.ndarray, out_channels: int,
                 seed: int = STUB_ENCODER_SEED) -> np.ndarray:
    """Fixed patchifier: 4x4 patch averaging, then a seeded random projection
    to ``out_channels``. (T,C,H,W) -> (T,out_channels,H/4,W/4)."""
    t, c, h, w = clip.shape
    if h % 4 or w % 4:
        raise DimensionError(f"stub_encoder needs H,W divisible by 4, got {h}x{w}")
    pooled = clip.reshape(t, c, h // 4, 4, w // 4, 4).mean(axis=(3, 5))
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((c, out_channels)) / np.sqrt(c)
    feats = np.einsum("tchw,cd->tdhw", pooled, proj)
    return np.ascontiguousarray(feats.astype(clip.dtype))


# --------------------------------------------------------------------------- #
# Synthetic dataset
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class MotionModel:
    speed_min: float = 0.2   # feature px / frame
    speed_max: float = 1.2
    jitter: float = 0.1


@dataclass
class SyntheticSample:
    features: np.ndarray       # (T, Din, h, w)
    heatmaps: np.ndarray       # (K, h, w) center-frame ground truth
    keypoints: np.ndarray      # (K, 2) subpixel (y, x) in feature coords
    visibility: np.ndarray     # (K,) bool
    occluded: int = -1         # keypoint hidden in the center frame, -1 if none
    images: "np.ndarray | None" = None


def render_blob_frame(h_img: int, w_img: int, positions, amplitudes,
                      sigma_img: float, skip: int = -1) -> np.ndarray:
    """Single grayscale frame with Gaussian blobs at image coordinates."""
    img = np.zeros((1, h_img, w_img), dtype=np.float64)
    ys = np.arange(h_img)[:, None]
    xs = np.arange(w_img)[None, :]
    for k, (py, px) in enumerate(positions):
        if k == skip:
            continue
        d2 = (ys - py) ** 2 + (xs - px) ** 2
        img[0] += amplitudes[k] * np.exp(-d2 / (2.0 * sigma_img ** 2))
    return img


def gaussian_heatmap(h: int, w: int, center, sigma: float) -> np.ndarray:
    """Unnormalized Gaussian with value exactly 1 at the rounded center pixel."""
    cy, cx = int(np.rint(center[0])), int(np.rint(center[1]))
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    d2 = (ys - cy) ** 2 + (xs - cx) ** 2
    return np.exp(-d2 / (2.0 * sigma ** 2))


def _simulate_tracks(rng, k: int, t: int, h: int, w: int, motion: MotionModel,
                     margin: float):
    pos = np.empty((t, k, 2))
    p = np.stack([rng.uniform(margin, h - 1 - margin, k),
                  rng.uniform(margin, w - 1 - margin, k)], axis=1)
    ang = rng.uniform(0, 2 * np.pi, k)
    speed = rng.uniform(motion.speed_min, motion.speed_max, k)
    vel = np.stack([np.sin(ang), np.cos(ang)], axis=1) * speed[:, None]
    center = t // 2
    # walk outward from the center frame so the center position is margin-safe
    pos[center] = p
    fwd = p.copy()
    v = vel.copy()
    for ti in range(center + 1, t):
        fwd = fwd + v + rng.normal(0, motion.jitter, (k, 2))
        fwd, v = _reflect(fwd, v, h, w, margin)
        pos[ti] = fwd
    back = p.copy()
    v = vel.copy()
    for ti in range(center - 1, -1, -1):
        back = back - v - rng.normal(0, motion.jitter, (k, 2))
        back, v = _reflect(back, v, h, w, margin)
        pos[ti] = back
    return pos


def _reflect(p, v, h, w, margin):
    lo = np.array([margin, margin])
    hi = np.array([h - 1 - margin, w - 1 - margin])
    for axis in range(2):
        under = p[:, axis] < lo[axis]
        over = p[:, axis] > hi[axis]
        p[under, axis] = 2 * lo[axis] - p[under, axis]
        p[over, axis] = 2 * hi[axis] - p[over, axis]
        v[under | over, axis] *= -1.0
    return p, v


def synth_dataset(n: int, k: int, motion: MotionModel, seed: int,
                  grid=(32, 24), span: int = 2, occlusion: bool = True,
                  in_channels: int = 16, sigma: float = 2.0,
                  keep_images: bool = False, dtype=np.float32):
    """Generate n clips of K moving blobs with center-frame heatmap labels."""
    if n < 1 or k < 1:
        raise ConfigurationError("synth_dataset needs n, k >= 1")
    h, w = grid
    t = 2 * span + 1
    h_img, w_img = 4 * h, 4 * w
    sigma_img = 2.0 * sigma
    amplitudes = 0.5 + 0.7 * np.arange(k) / max(k - 1, 1)
    margin = min(2.0 * sigma, 0.45 * (min(h, w) - 1))
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        pos = _simulate_tracks(rng, k, t, h, w, motion, margin=margin)
        hide = int(rng.integers(k)) if occlusion else -1
        images = np.stack([
            render_blob_frame(h_img, w_img, 4.0 * pos[ti] + 1.5, amplitudes,
                              sigma_img, skip=hide if ti == t // 2 else -1)
            for ti in range(t)
        ]).astype(dtype)
        feats = stub_encoder(images, in_channels)
        center_kp = pos[t // 2]
        heatmaps = np.stack([
            gaussian_heatmap(h, w, center_kp[j], sigma) for j in range(k)
        ]).astype(dtype)
        samples.append(SyntheticSample(
            features=feats,
            heatmaps=heatmaps,
            keypoints=center_kp.copy(),
            visibility=np.ones(k, dtype=bool),
            occluded=hide,
            images=images if keep_images else None,
        ))
    return samples


# --------------------------------------------------------------------------- #
# Loss and metrics
# --------------------------------------------------------------------------- #

def heatmap_loss(pred: Tensor, gt: np.ndarray, visibility: np.ndarray) -> Tensor:
    """MSE over visible keypoints' maps: sum||pred_k - gt_k||^2 / (vis*h*w)."""
    if pred.shape != gt.shape:
        raise DimensionError(f"heatmap_loss shapes differ: {pred.shape} vs {gt.shape}")
    k, h, w = pred.shape
    vis = np.asarray(visibility, dtype=bool)
    n_vis = int(vis.sum())
    if n_vis == 0:
        return tt.zeros(())
    mask = np.zeros((k, h, w), dtype=pred.data.dtype)
    mask[vis] = 1.0 / (n_vis * h * w)
    diff = tt.sub(pred, Tensor(gt.astype(pred.data.dtype)))
    return tt.sum_all(tt.mul(tt.mul(diff, diff), Tensor(mask)))


def decode_keypoints(maps: np.ndarray) -> np.ndarray:
    """Argmax location per map; ties resolve to the smallest row-major index."""
    k, h, w = maps.shape
    flat = maps.reshape(k, h * w)
    idx = flat.argmax(axis=1)
    return np.stack([idx // w, idx % w], axis=1).astype(np.float64)


def pck(pred_kps: np.ndarray, gt_kps: np.ndarray, visibility, tau: float,
        grid) -> float:
    """Fraction of visible keypoints within tau * heatmap diagonal."""
    if tau <= 0:
        raise ConfigurationError(f"pck needs tau > 0, got {tau}")
    h, w = grid
    vis = np.asarray(visibility, dtype=bool)
    if not vis.any():
        return 0.0
    dist = np.linalg.norm(pred_kps - gt_kps, axis=1)
    return float((dist[vis] <= tau * np.hypot(h, w)).mean())


# --------------------------------------------------------------------------- #
# AdamW
# --------------------------------------------------------------------------- #

class AdamW:
    """Decoupled weight-decay Adam with bias correction over named tensors."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.named = list(named_params)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(t.data) for _, t in self.named]
        self.v = [np.zeros_like(t.data) for _, t in self.named]
        self.t = 0

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def step(self, lr: float):
        """One update. Returns names of non-finite grads; if any, the whole
        step is skipped (and flagged) rather than applied partially."""
        bad = [name for (name, p) in self.named
               if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            return bad
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.named):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            upd = p.data * (1.0 - lr * self.weight_decay) \
                - lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data = upd.astype(p.data.dtype)
        return []

    def state_arrays(self):
        out = []
        for i, (name, _) in enumerate(self.named):
            out.append((name + ".m", self.m[i]))
            out.append((name + ".v", self.v[i]))
        return out

    def load_state(self, arrays: dict, t: int):
        for i, (name, p) in enumerate(self.named):
            self.m[i] = arrays[name + ".m"].astype(p.data.dtype)
            self.v[i] = arrays[name + ".v"].astype(p.data.dtype)
        self.t = int(t)


# --------------------------------------------------------------------------- #
# Model
# --------------------------------------------------------------------------- #

@dataclass
class ModelConfig:
    in_channels: int = 16
    dim: int = 64
    state: int = 16
    gsm_blocks: int = 4
    lrm_blocks: int = 2
    keypoints: int = 5
    frames: int = 5
    grid: tuple = (32, 24)
    window: tuple = (8, 6)
    reduction: int = 4
    expansion: int = 4
    use_stmm: bool = True
    use_skip: bool = True
    residual: bool = True
    scan_mode: str = "recurrent"
    panorama_stack: str = "vertical"
    time_depth_order: str = "yx"
    seed: int = 0

    def as_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["window"] = list(self.window)
        return d


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.as_dict(), sort_keys=True).encode()).hexdigest()[:16]


class PoseModel:
    """Input embedding -> global scan blocks -> local window blocks -> head."""

    def __init__(self, cfg: ModelConfig, dtype=None):
        self.cfg = cfg
        dtype = dtype or tt.default_dtype()
        h, w = cfg.grid
        rng = np.random.default_rng(cfg.seed)
        self.embed = bk.make_input_embedding(cfg.in_channels, cfg.dim, cfg.frames,
                                             h, w, rng, dtype)
        self.gsm = [bk.make_gsm_block(cfg.dim, cfg.state, cfg.frames, rng,
                                      cfg.reduction, cfg.expansion, cfg.use_skip, dtype)
                    for _ in range(cfg.gsm_blocks)]
        self.lrm = [bk.make_lrm_block(cfg.dim, cfg.state, rng, cfg.expansion,
                                      cfg.use_skip, dtype)
                    for _ in range(cfg.lrm_blocks)]
        self.head = bk.make_head(cfg.dim, cfg.keypoints, rng, dtype)
        self.window = WindowSpec(*cfg.window)

    def forward(self, features, trace: "list | None" = None) -> Tensor:
        cfg = self.cfg
        x = features if isinstance(features, Tensor) else Tensor(features)
        expect = (cfg.frames, cfg.in_channels, cfg.grid[0], cfg.grid[1])
        if x.shape != expect:
            raise DimensionError(f"model expects features {expect}, got {x.shape}")
        x = bk.embed_sequence(x, self.embed)
        if trace is not None:
            trace.append(("embed", x))
        for i, p in enumerate(self.gsm):
            x = bk.gsm_block(x, p, cfg.scan_mode, cfg.use_stmm, cfg.residual,
                             cfg.panorama_stack, cfg.time_depth_order)
            if trace is not None:
                trace.append((f"gsm{i}", x))
        for i, p in enumerate(self.lrm):
            x = bk.lrm_block(x, p, self.window, cfg.scan_mode, cfg.residual)
            if trace is not None:
                trace.append((f"lrm{i}", x))
        out = bk.detection_head(x, self.head)
        if trace is not None:
            trace.append(("head", out))
        return out

    def named_parameters(self):
        named = [("embed." + n, t) for n, t in self.embed.tensors()]
        for i, p in enumerate(self.gsm):
            named += [(f"gsm{i}." + n, t) for n, t in p.tensors()]
        for i, p in enumerate(self.lrm):
            named += [(f"lrm{i}." + n, t) for n, t in p.tensors()]
        named += [("head." + n, t) for n, t in self.head.tensors()]
        return named

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def load_arrays(self, arrays: dict):
        for name, p in self.named_parameters():
            if name not in arrays:
                raise ContractError(f"checkpoint missing parameter {name}")
            a = arrays[name]
            if tuple(a.shape) != tuple(p.shape):
                raise ContractError(f"checkpoint shape mismatch for {name}")
            p.data = np.ascontiguousarray(a.astype(p.data.dtype))


def find_first_nonfinite(model: PoseModel, features) -> str:
    """Name of the first non-finite parameter or forward-stage tensor."""
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            return f"param:{name}"
    trace: list = []
    try:
        model.forward(features, trace=trace)
    except NumericsError:
        pass
    for name, t in trace:
        if not np.all(np.isfinite(t.data)):
            return f"stage:{name}"
    return "loss"


# --------------------------------------------------------------------------- #
# Training configuration
# --------------------------------------------------------------------------- #

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 1e-4
    milestones: list = field(default_factory=lambda: [[6, 1e-5], [12, 1e-6]])
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    pck_tau: float = 0.2
    early_stop_pck: "float | None" = None
    early_stop_loss_ratio: "float | None" = None

    def validate(self):
        last = -1
        for e, lr in self.milestones:
            if e <= last:
                raise ConfigurationError(
                    f"milestone epochs must be strictly increasing, got {self.milestones}")
            if lr <= 0:
                raise ConfigurationError("milestone lr must be positive")
            last = e
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.base_lr
    for e, v in cfg.milestones:
        if epoch >= e:
            lr = v
    return lr


@dataclass
class DataConfig:
    n_clips: int = 64
    keypoints: int = 5
    grid: tuple = (32, 24)
    span: int = 2
    occlusion: bool = True
    sigma: float = 2.0
    in_channels: int = 16
    seed: int = 0
    speed_min: float = 0.2
    speed_max: float = 1.2
    jitter: float = 0.1

    def motion(self) -> MotionModel:
        return MotionModel(self.speed_min, self.speed_max, self.jitter)

    def build(self, seed: "int | None" = None, keep_images: bool = False):
        return synth_dataset(self.n_clips, self.keypoints, self.motion(),
                             self.seed if seed is None else seed,
                             grid=self.grid, span=self.span, occlusion=self.occlusion,
                             in_channels=self.in_channels, sigma=self.sigma,
                             keep_images=keep_images)


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

CKPT_MAGIC = b"STMB"
CKPT_VERSION = 2


def save_checkpoint(path, model: PoseModel, opt: "AdamW | None", epoch: int,
                    seed: int, epoch0_loss: "float | None") -> None:
    header = {
        "config": model.cfg.as_dict(),
        "config_hash": config_hash(model.cfg),
        "seed": int(seed),
        "epoch": int(epoch),
        "epoch0_loss": epoch0_loss,
        "opt_t": opt.t if opt is not None else None,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fp:
        fp.write(CKPT_MAGIC)
        fp.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fp.write(blob)
        named = model.named_parameters()
        opt_arrays = opt.state_arrays() if opt is not None else []
        fp.write(struct.pack("<II", len(named), len(opt_arrays)))
        for name, t in named:
            nb = name.encode()
            fp.write(struct.pack("<H", len(nb)))
            fp.write(nb)
            tt.write_tensor_blob(fp, t.data)
        for name, arr in opt_arrays:
            nb = name.encode()
            fp.write(struct.pack("<H", len(nb)))
            fp.write(nb)
            tt.write_tensor_blob(fp, arr)


def load_checkpoint(path):
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != CKPT_MAGIC:
            raise ContractError(f"not a checkpoint file: {path}")
        version, hlen = struct.unpack("<II", fp.read(8))
        if version != CKPT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        header = json.loads(fp.read(hlen).decode())
        n_params, n_opt = struct.unpack("<II", fp.read(8))
        params = {}
        for _ in range(n_params):
            (nlen,) = struct.unpack("<H", fp.read(2))
            name = fp.read(nlen).decode()
            params[name] = tt.read_tensor_blob(fp)
        opt_arrays = {}
        for _ in range(n_opt):
            (nlen,) = struct.unpack("<H", fp.read(2))
            name = fp.read(nlen).decode()
            opt_arrays[name] = tt.read_tensor_blob(fp)
    return header, params, opt_arrays


def model_from_checkpoint(path):
    header, params, _ = load_checkpoint(path)
    cfg_d = dict(header["config"])
    cfg_d["grid"] = tuple(cfg_d["grid"])
    cfg_d["window"] = tuple(cfg_d["window"])
    cfg = ModelConfig(**cfg_d)
    if config_hash(cfg) != header["config_hash"]:
        raise ContractError("checkpoint config hash mismatch")
    model = PoseModel(cfg)
    model.load_arrays(params)
    return model, header


# --------------------------------------------------------------------------- #
# Train / evaluate
# --------------------------------------------------------------------------- #

@dataclass
class TrainResult:
    metrics: list
    checkpoint: str
    epoch0_loss: float
    final_loss: float
    final_pck: float
    epochs_run: int
    wall_seconds: float
    model: PoseModel


def _batched(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def evaluate_model(model: PoseModel, dataset, tau: float = 0.2):
    """Mean and per-keypoint PCK over a dataset (no tape)."""
    k = model.cfg.keypoints
    grid = model.cfg.grid
    hits = np.zeros(k)
    counts = np.zeros(k)
    mean_scores = []
    heatmaps = []
    for s in dataset:
        hm = model.forward(s.features).data
        heatmaps.append(hm)
        kp = decode_keypoints(hm)
        dist = np.linalg.norm(kp - s.keypoints, axis=1)
        ok = dist <= tau * np.hypot(*grid)
        vis = s.visibility.astype(bool)
        hits += np.where(vis, ok, 0)
        counts += vis
        mean_scores.append(pck(kp, s.keypoints, s.visibility, tau, grid))
    per_kp = hits / np.maximum(counts, 1)
    return float(np.mean(mean_scores)), per_kp, heatmaps


def train(model_cfg: ModelConfig, data_cfg: DataConfig, train_cfg: TrainConfig,
          out_dir=None, resume=None, log_fn=None, checkpoint_name="ckpt_last.bin"):
    """Deterministic training loop; logs one JSON metrics object per epoch."""
    import os

    train_cfg.validate()
    t_start = time.perf_counter()
    dataset = data_cfg.build()
    model = PoseModel(model_cfg)
    opt = AdamW(model.named_parameters(), betas=(train_cfg.beta1, train_cfg.beta2),
                weight_decay=train_cfg.weight_decay)
    start_epoch = 0
    epoch0_loss = None
    if resume is not None:
        header, params, opt_arrays = load_checkpoint(resume)
        if header["config_hash"] != config_hash(model_cfg):
            raise ContractError("resume checkpoint was built with a different model config")
        model.load_arrays(params)
        opt.load_state(opt_arrays, header["opt_t"])
        start_epoch = header["epoch"] + 1
        epoch0_loss = header["epoch0_loss"]

    metrics = []
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, checkpoint_name)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        metrics_fp = open(metrics_path, "a" if resume else "w")
    else:
        metrics_fp = None

    n = len(dataset)
    last_loss = float("nan")
    last_pck = 0.0
    epochs_run = start_epoch
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_for_epoch(train_cfg, epoch)
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        losses = []
        pcks = []
        for batch in _batched(order, train_cfg.batch_size):
            opt.zero_grad()
            for idx in batch:
                s = dataset[idx]
                with Tape() as tape:
                    hm = model.forward(s.features)
                    loss = heatmap_loss(hm, s.heatmaps, s.visibility)
                lv = loss.item()
                if not np.isfinite(lv):
                    culprit = find_first_nonfinite(model, s.features)
                    raise NumericsError(
                        f"non-finite loss at epoch {epoch} (first non-finite tensor: {culprit})")
                tape.backward(loss)
                losses.append(lv)
                kp = decode_keypoints(hm.data)
                pcks.append(pck(kp, s.keypoints, s.visibility, train_cfg.pck_tau,
                                model_cfg.grid))
            inv = 1.0 / len(batch)
            for _, p in opt.named:
                if p.grad is not None:
                    p.grad = p.grad * inv
            skipped = opt.step(lr)
            if skipped and log_fn:
                log_fn(f"step skipped, non-finite grads in: {skipped[:3]}")
        mean_loss = float(np.mean(losses))
        mean_pck = float(np.mean(pcks))
        if epoch0_loss is None:
            epoch0_loss = mean_loss
        row = {"epoch": epoch, "lr": lr, "loss": mean_loss, "pck": mean_pck}
        metrics.append(row)
        if metrics_fp:
            metrics_fp.write(json.dumps(row) + "\n")
            metrics_fp.flush()
        if log_fn:
            log_fn(f"epoch {epoch}: lr={lr:g} loss={mean_loss:.6f} pck={mean_pck:.4f}")
        if ckpt_path:
            save_checkpoint(ckpt_path, model, opt, epoch, train_cfg.seed, epoch0_loss)
        last_loss, last_pck = mean_loss, mean_pck
        epochs_run = epoch + 1
        stop_pck = train_cfg.early_stop_pck
        stop_ratio = train_cfg.early_stop_loss_ratio
        if stop_pck is not None and mean_pck >= stop_pck and (
                stop_ratio is None or mean_loss * stop_ratio <= epoch0_loss):
            if log_fn:
                log_fn(f"early stop at epoch {epoch}")
            break

    if metrics_fp:
        metrics_fp.close()
    return TrainResult(
        metrics=metrics, checkpoint=ckpt_path, epoch0_loss=float(epoch0_loss),
        final_loss=last_loss, final_pck=last_pck, epochs_run=epochs_run,
        wall_seconds=time.perf_counter() - t_start, model=model)
