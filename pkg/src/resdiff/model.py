"""x0-predicting UNet denoiser with sinusoidal time conditioning.

A compact encoder/decoder with two residual blocks per level, group
normalization (batch size 2 makes batch statistics unreliable), optional
self-attention at the bottleneck, and FiLM-style scale/shift injection of
the step embedding.  Training is Adam on the weighted x0 regression loss;
checkpoints use a small versioned binary container with a float32 payload
keyed by layer path so round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import forward_marginal
from .schedule import NoiseSchedule, ScheduleConfig, loss_weight


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 8  # target channels + condition channels
    out_channels: int = 7  # 5 fluorescence + 2 boundary channels
    base_width: int = 32
    num_levels: int = 3
    blocks_per_level: int = 2
    time_embed_dim: int = 128
    attention_at_bottleneck: bool = True

    def validate(self) -> None:
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.in_channels <= self.out_channels:
            raise ValueError("in_channels must include condition channels")

    @property
    def condition_channels(self) -> int:
        return self.in_channels - self.out_channels


def _groups(channels: int) -> int:
    # 8 groups where the width allows it, fewer for miniature configs
    return math.gcd(channels, 8)


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_c: int, out_c: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_c), in_c)
        self.conv1 = nn.Conv2d(in_c, out_c, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, 2 * out_c)
        self.norm2 = nn.GroupNorm(_groups(out_c), out_c)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1)
        self.skip = nn.Conv2d(in_c, out_c, 1) if in_c != out_c else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.temb_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Plain dot-product self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.heads = 4 if channels % 4 == 0 else 1
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        hd = c // self.heads
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, hd, h * w).unbind(1)
        attn = torch.softmax(q.transpose(-2, -1) @ k / math.sqrt(hd), dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """f(x_t, y, t): predicts the clean target from the diffused state and condition."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.num_levels)]
        td = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.stem = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        self.enc = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, w in enumerate(widths):
            in_w = widths[0] if i == 0 else widths[i - 1]
            blocks = nn.ModuleList()
            for b in range(cfg.blocks_per_level):
                blocks.append(ResBlock(in_w if b == 0 else w, w, td))
            self.enc.append(blocks)
            if i < cfg.num_levels - 1:
                self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))

        wb = widths[-1]
        self.mid1 = ResBlock(wb, wb, td)
        self.mid_attn = SelfAttention2d(wb) if cfg.attention_at_bottleneck else None
        self.mid2 = ResBlock(wb, wb, td)

        self.dec = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i, w in enumerate(widths):
            blocks = nn.ModuleList()
            for b in range(cfg.blocks_per_level):
                blocks.append(ResBlock(2 * w if b == 0 else w, w, td))
            self.dec.append(blocks)
            if i > 0:
                self.ups.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))

        self.head = nn.Sequential(
            nn.GroupNorm(_groups(widths[0]), widths[0]),
            nn.SiLU(),
            nn.Conv2d(widths[0], cfg.out_channels, 3, padding=1),
        )

    def forward(self, x_t: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x_t.shape[1] + y.shape[1] != cfg.in_channels:
            raise ValueError(
                f"channel mismatch: {x_t.shape[1]}+{y.shape[1]} != in_channels={cfg.in_channels}"
            )
        div = 2 ** (cfg.num_levels - 1)
        if x_t.shape[-1] % div or x_t.shape[-2] % div:
            raise ValueError(f"spatial size {x_t.shape[-2:]} not divisible by {div}")
        temb = self.time_mlp(time_embedding(t, cfg.time_embed_dim).to(x_t.dtype))
        h = self.stem(torch.cat([x_t, y], dim=1))
        skips = []
        for i, blocks in enumerate(self.enc):
            for blk in blocks:
                h = blk(h, temb)
            skips.append(h)
            if i < cfg.num_levels - 1:
                h = self.downs[i](h)
        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, temb)
        for i in reversed(range(cfg.num_levels)):
            h = torch.cat([h, skips[i]], dim=1)
            for blk in self.dec[i]:
                h = blk(h, temb)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[i - 1](h)
        return self.head(h)


def init_denoiser(cfg: DenoiserConfig, seed: int = 0) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(cfg)


def parameter_count(cfg: DenoiserConfig) -> int:
    return sum(p.numel() for p in Denoiser(cfg).parameters())


def denoiser_fn(net: Denoiser):
    """Adapt a torch module to the numpy (x_t, y, t) -> x0_hat sampler interface."""

    def fn(x_t: np.ndarray, y: np.ndarray, t: int) -> np.ndarray:
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x_t, dtype=np.float32))[None]
            yt = torch.from_numpy(np.ascontiguousarray(y, dtype=np.float32))[None]
            tt = torch.tensor([t], dtype=torch.long)
            out = net(xt, yt, tt)
        return out[0].numpy().astype(np.float64)

    return fn


def batch_loss(
    net: Denoiser,
    x_t: torch.Tensor,
    y: torch.Tensor,
    t: torch.Tensor,
    x0: torch.Tensor,
    s: NoiseSchedule,
    weighting: bool = False,
) -> torch.Tensor:
    """Weighted x0 regression loss, averaged over the batch."""
    out = net(x_t, y, t)
    per_example = (out - x0).pow(2).flatten(1).mean(dim=1)
    if weighting:
        w = torch.tensor(
            [loss_weight(s, int(ti)) for ti in t], dtype=per_example.dtype
        )
        per_example = w * per_example
    return per_example.mean()


def backward(
    net: Denoiser,
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
    s: NoiseSchedule,
    weighting: bool = False,
) -> dict[str, torch.Tensor]:
    """Gradients of the training loss for one batch, keyed by parameter path.

    Raises RuntimeError on a non-finite loss, reporting the offending steps.
    """
    x_t, y, t, x0 = batch
    net.zero_grad(set_to_none=True)
    loss = batch_loss(net, x_t, y, t, x0, s, weighting)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss {loss.item()} on batch with t={t.tolist()}")
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }


# --- checkpoint container ---------------------------------------------------
#
# magic "RDCK" | u16 version | u32 header length | header JSON | raw payload.
# The header lists tensors as (key, shape, dtype) in payload order; params
# are stored under "param/<path>", Adam state under "opt/<path>/<slot>".

CKPT_MAGIC = b"RDCK"
CKPT_VERSION = 1
_DTYPES = {"f4": np.float32, "i8": np.int64}


def save_checkpoint(
    path,
    net: Denoiser,
    schedule_cfg: ScheduleConfig | None = None,
    optimizer: torch.optim.Adam | None = None,
    train_meta: dict | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in net.named_parameters():
        tensors.append((f"param/{name}", p.detach().numpy().astype(np.float32, copy=False)))
    for name, b in net.named_buffers():
        tensors.append((f"buffer/{name}", b.detach().numpy().astype(np.float32, copy=False)))
    if optimizer is not None:
        params = [p for _, p in net.named_parameters()]
        names = [n for n, _ in net.named_parameters()]
        for name, p in zip(names, params):
            state = optimizer.state.get(p)
            if not state:
                continue
            for slot in ("exp_avg", "exp_avg_sq", "step"):
                v = state[slot]
                arr = v.detach().numpy() if torch.is_tensor(v) else np.asarray(v)
                tensors.append((f"opt/{name}/{slot}", arr.astype(np.float32, copy=False)))
    index = [
        {"key": k, "shape": list(a.shape), "dtype": "f4"} for k, a in tensors
    ]
    header = {
        "arch": "unet-x0",
        "config": asdict(net.cfg),
        "schedule": asdict(schedule_cfg) if schedule_cfg is not None else None,
        "param_count": sum(p.numel() for p in net.parameters()),
        "tensors": index,
        "train": train_meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
        f.write(blob)
        for _, a in tensors:
            f.write(np.ascontiguousarray(a).astype("<f4", copy=False).tobytes())


def load_checkpoint(path):
    """Returns (net, schedule_cfg or None, header dict, raw tensor dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, hlen = struct.unpack("<HI", f.read(6))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode())
        raw: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * n)
            raw[entry["key"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    cfg = DenoiserConfig(**header["config"])
    net = Denoiser(cfg)
    state = {}
    for name, p in net.named_parameters():
        key = f"param/{name}"
        if key not in raw:
            raise ValueError(f"{path}: missing tensor {key}; architecture mismatch")
        state[name] = torch.from_numpy(raw[key])
    for name, _ in net.named_buffers():
        key = f"buffer/{name}"
        if key in raw:
            state[name] = torch.from_numpy(raw[key])
    net.load_state_dict(state)
    sched_cfg = (
        ScheduleConfig(**header["schedule"]) if header.get("schedule") else None
    )
    return net, sched_cfg, header, raw


def restore_optimizer(net: Denoiser, raw: dict[str, np.ndarray], lr: float) -> torch.optim.Adam:
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for name, p in net.named_parameters():
        key = f"opt/{name}/exp_avg"
        if key not in raw:
            continue
        opt.state[p] = {
            "step": torch.from_numpy(raw[f"opt/{name}/step"]),
            "exp_avg": torch.from_numpy(raw[key]),
            "exp_avg_sq": torch.from_numpy(raw[f"opt/{name}/exp_avg_sq"]),
        }
    return opt


# --- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-4
    max_steps: int = 3000
    seed: int = 0
    weighting: bool = False
    checkpoint_every: int = 1000

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def train(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    s: NoiseSchedule,
    model_cfg: DenoiserConfig | None = None,
    out_dir=None,
    resume=None,
    log_every: int = 50,
    progress=None,
) -> tuple[Denoiser, list[tuple[int, float]]]:
    """Train the denoiser on (x0, y0) pairs already normalized to [-1, 1].

    Per step: a batch is drawn with replacement, t is sampled uniformly from
    1..T per example, and x_t comes from the forward marginal.  All draws use
    one numpy Generator whose state is checkpointed, so an interrupted run
    resumed from disk is bit-identical to an uninterrupted one.
    """
    cfg.validate()
    if not pairs:
        raise ValueError("dataset is empty")
    if model_cfg is None:
        model_cfg = DenoiserConfig(in_channels=pairs[0][0].shape[0] + pairs[0][1].shape[0],
                                   out_channels=pairs[0][0].shape[0])

    start_step = 0
    if resume is not None:
        net, sched_cfg, header, raw = load_checkpoint(resume)
        opt = restore_optimizer(net, raw, cfg.learning_rate)
        meta = header.get("train") or {}
        start_step = int(meta.get("step", 0))
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    else:
        net = init_denoiser(model_cfg, seed=cfg.seed)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        rng = np.random.default_rng(cfg.seed)

    n = len(pairs)
    loss_log: list[tuple[int, float]] = []

    def checkpoint(path, step):
        meta = {"step": step, "rng_state": rng.bit_generator.state,
                "learning_rate": cfg.learning_rate, "weighting": cfg.weighting}
        save_checkpoint(path, net, s.config, optimizer=opt, train_meta=meta)

    for step in range(start_step + 1, cfg.max_steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        ts = rng.integers(1, s.T + 1, size=cfg.batch_size)
        xts, ys, x0s = [], [], []
        for i, t in zip(idx, ts):
            x0, y0 = pairs[i]
            y_lift = np.repeat(y0, x0.shape[0], axis=0) if y0.shape[0] == 1 else y0
            xts.append(forward_marginal(x0, y_lift, s, int(t), rng))
            ys.append(y0)
            x0s.append(x0)
        batch = (
            torch.from_numpy(np.stack(xts).astype(np.float32)),
            torch.from_numpy(np.stack(ys).astype(np.float32)),
            torch.from_numpy(ts.astype(np.int64)),
            torch.from_numpy(np.stack(x0s).astype(np.float32)),
        )
        net.zero_grad(set_to_none=True)
        loss = batch_loss(net, *batch, s, weighting=cfg.weighting)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        for name, p in net.named_parameters():
            if not torch.isfinite(p).all():
                raise RuntimeError(f"non-finite parameter {name} after step {step}")
        loss_log.append((step, float(loss.item())))
        if progress is not None and (step % log_every == 0 or step == cfg.max_steps):
            progress(step, float(loss.item()))
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint(f"{out_dir}/ckpt_step{step:06d}.rdck", step)

    if out_dir is not None:
        checkpoint(f"{out_dir}/ckpt_final.rdck", cfg.max_steps)
    return net, loss_log
