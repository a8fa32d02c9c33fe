"""Residual-shift diffusion for brightfield-to-fluorescence translation.

Library layout: `schedule` builds the shifting sequence, `diffusion` holds
the forward/reverse processes and the DDPM baseline, `model` is the torch
denoiser plus training, `data`/`synth`/`boundaries` cover records, file
formats, the synthetic generator and mask encodings, `metrics` the
evaluation suite, and `cli` the command-line front end.
"""

__version__ = "0.1.0"
