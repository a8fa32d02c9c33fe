#!/usr/bin/env python3
"""Wall-clock comparison: few-step residual sampling vs the DDPM baseline.

Runs both samplers with the same denoiser on the same condition and prints
per-sampler call counts and timings.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import torch

from resdiff import diffusion as D
from resdiff.model import DenoiserConfig, denoiser_fn, init_denoiser, load_checkpoint
from resdiff.schedule import ScheduleConfig, build_schedule


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", help="optional trained checkpoint; default random net")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--steps", type=int, default=15)
    ap.add_argument("--ddpm-steps", type=int, default=1000)
    ap.add_argument("--threads", type=int, default=int(os.environ.get("RESDIFF_THREADS", 2)))
    args = ap.parse_args()
    torch.set_num_threads(args.threads)

    if args.checkpoint:
        net, sched_cfg, _, _ = load_checkpoint(args.checkpoint)
        sched_cfg = sched_cfg or ScheduleConfig()
    else:
        net = init_denoiser(DenoiserConfig(), seed=0)
        sched_cfg = ScheduleConfig()
    net.eval()
    fn = denoiser_fn(net)
    y0 = np.random.default_rng(0).uniform(-1, 1, (1, args.size, args.size))

    s = build_schedule(ScheduleConfig(T=args.steps, p=sched_cfg.p, kappa=sched_cfg.kappa,
                                      eta_1=sched_cfg.eta_1, eta_T=sched_cfg.eta_T))
    res = D.SampleTrace()
    D.sample(y0, fn, s, np.random.default_rng(1), out_channels=net.cfg.out_channels, trace=res)

    ds = D.build_ddpm_schedule(T=args.ddpm_steps)
    base = D.SampleTrace()
    D.ddpm_sample(y0, fn, ds, np.random.default_rng(1), out_channels=net.cfg.out_channels, trace=base)

    print(f"{'sampler':<22}{'denoiser calls':>16}{'seconds':>12}")
    print(f"{'residual':<22}{res.model_calls:>16}{res.wall_seconds:>12.2f}")
    print(f"{'ddpm baseline':<22}{base.model_calls:>16}{base.wall_seconds:>12.2f}")
    print(f"speedup: {base.wall_seconds / res.wall_seconds:.1f}x")


if __name__ == "__main__":
    main()
