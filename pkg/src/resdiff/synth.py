"""Procedural synthetic microscopy samples with exact ground truth.

Each record places non-overlapping elliptical cells, each with an interior
elliptical nucleus.  Fluorescence channels are deterministic functions of
the geometry plus seeded texture noise: DNA is bright inside nuclei, RNA
adds nucleolar speckles, ER and Mito are textured cytoplasm fields, and AGP
carries deliberately faint cell rims (cell borders are the weak signal).
Brightfield is a low-contrast blurred nonlinear mixture of the same
geometry.  Instance maps are recorded as ground truth and boundary masks
are derived from them, so every record is self-consistent by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .boundaries import instances_to_boundary
from .data import SampleRecord


@dataclass(frozen=True)
class GeneratorParams:
    n_cells: tuple[int, int] = (5, 20)  # target count range, inclusive
    cell_axes: tuple[float, float] = (7.0, 12.0)  # semi-axis range, px
    nucleus_frac: tuple[float, float] = (0.62, 0.80)
    min_separation: float = 2.0  # px between cell boundaries
    margin_frac: float = 0.55  # center distance from border, in units of max extent
    max_tries: int = 120
    texture_amp: float = 0.04
    bf_contrast: float = 0.28
    blur_sigma: float = 0.8


def _disk(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _ellipse_q(shape, cy, cx, a, b, theta) -> np.ndarray:
    """Quadratic form of a rotated ellipse; q <= 1 is the interior.

    Evaluated only inside the bounding box; everywhere else q is left at a
    large constant so masks and soft fields are unaffected.
    """
    q = np.full(shape, 4.0)
    ext = max(a, b) + 1.0
    y0, y1 = max(0, int(cy - ext)), min(shape[0], int(cy + ext) + 2)
    x0, x1 = max(0, int(cx - ext)), min(shape[1], int(cx + ext) + 2)
    if y0 >= y1 or x0 >= x1:
        return q
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(theta), math.sin(theta)
    u = (ca * dx + sa * dy) / a
    v = (-sa * dx + ca * dy) / b
    q[y0:y1, x0:x1] = u * u + v * v
    return q


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    f -= f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def generate_record(
    size: int,
    rng: np.random.Generator,
    params: GeneratorParams = GeneratorParams(),
    record_id: str = "r00000",
    plate: str = "synthetic",
    well: str = "",
) -> SampleRecord:
    p = params
    # cell_axes are calibrated for 64-px fields; smaller fields get
    # proportionally smaller cells so the minimum count still fits
    start_scale = min(1.0, size / 64.0)
    if start_scale * p.cell_axes[0] < 2.5 or size - 2 * p.margin_frac * start_scale * p.cell_axes[0] < 2:
        raise ValueError(f"size {size} cannot fit one non-degenerate cell with {p.cell_axes}")

    cells = np.zeros((size, size), dtype=np.int32)
    nuclei = np.zeros((size, size), dtype=np.int32)
    cell_soft = np.zeros((size, size))
    nuc_soft = np.zeros((size, size))
    rim_soft = np.zeros((size, size))
    nucleoli = np.zeros((size, size))

    sep = _disk(p.min_separation)
    blocked = np.zeros((size, size), dtype=bool)
    target = int(rng.integers(p.n_cells[0], p.n_cells[1] + 1))
    placed = 0
    scale = start_scale
    while placed < target:
        fails = 0
        while placed < target and fails < p.max_tries:
            a = rng.uniform(*p.cell_axes) * scale
            b = rng.uniform(*p.cell_axes) * scale
            theta = rng.uniform(0, math.pi)
            margin = p.margin_frac * max(a, b)
            cy = rng.uniform(margin, size - 1 - margin)
            cx = rng.uniform(margin, size - 1 - margin)
            q = _ellipse_q((size, size), cy, cx, a, b, theta)
            mask = q <= 1.0
            if not mask.any() or (mask & blocked).any():
                fails += 1
                continue
            fails = 0
            placed += 1
            cells[mask] = placed
            blocked |= ndimage.binary_dilation(mask, structure=sep)
            soft = np.clip(1.0 - q, 0.0, 1.0)
            cell_soft = np.maximum(cell_soft, soft)
            rim_soft = np.maximum(
                rim_soft, np.where(mask, np.clip((q - 0.62) / 0.38, 0.0, 1.0), 0.0)
            )

            frac = rng.uniform(*p.nucleus_frac)
            na, nb = frac * a, frac * b
            off = 0.3 * (1.0 - frac) * min(a, b)
            ncy = cy + rng.uniform(-off, off)
            ncx = cx + rng.uniform(-off, off)
            nq = _ellipse_q((size, size), ncy, ncx, na, nb, theta + rng.uniform(-0.3, 0.3))
            nmask = (nq <= 1.0) & mask
            nuclei[nmask] = placed
            nuc_soft = np.maximum(nuc_soft, np.where(nmask, np.clip(1.0 - nq, 0.0, 1.0), 0.0))

            for _spot in range(int(rng.integers(1, 4))):
                sr = rng.uniform(1.2, 2.4)
                sy = ncy + rng.uniform(-0.5, 0.5) * na
                sx = ncx + rng.uniform(-0.5, 0.5) * nb
                sq = _ellipse_q((size, size), sy, sx, sr, sr, 0.0)
                nucleoli = np.maximum(nucleoli, np.where(nmask, np.clip(1.0 - sq, 0.0, 1.0), 0.0))
        if placed >= p.n_cells[0]:
            break  # minimum met and placement saturated
        # crowded field: shrink the remaining cells until the minimum fits
        scale *= 0.85
        if scale * p.cell_axes[0] < 2.5:
            raise ValueError(f"could not place {p.n_cells[0]} cells at size {size} with {p}")

    cell_mask = (cells > 0).astype(np.float64)
    nuc_mask = (nuclei > 0).astype(np.float64)
    cyto = cell_mask * (1.0 - nuc_mask)

    def tex() -> np.ndarray:
        return p.texture_amp * _smooth_noise(rng, (size, size), 1.5)

    er_field = 0.55 + 0.45 * np.clip(0.5 + 0.5 * _smooth_noise(rng, (size, size), 2.5), 0, 1)
    granules = np.clip(_smooth_noise(rng, (size, size), 0.9), 0, None)

    # plateau fills keep the silhouette edge sharp so boundary positions stay
    # inferable from the stained channels and the brightfield
    nuc_fill = (0.55 + 0.45 * nuc_soft**0.7) * nuc_mask
    cell_fill = (0.45 + 0.55 * cell_soft) * cell_mask

    dna = 0.06 + 0.82 * nuc_fill + tex()
    rna = 0.05 + 0.16 * cyto + 0.10 * nuc_fill + 0.55 * nucleoli + tex()
    er = 0.05 + 0.30 * cyto * er_field + 0.06 * nuc_fill + tex()
    agp = 0.05 + 0.16 * rim_soft + 0.07 * cyto + tex()
    mito = 0.05 + 0.34 * cyto * np.clip(granules, 0, 1.2) + tex()

    bf_geom = 0.5 * cell_fill - 0.85 * nuc_mask + 0.5 * rim_soft
    bf = 0.5 + p.bf_contrast * ndimage.gaussian_filter(bf_geom, p.blur_sigma)
    bf = bf + 0.25 * tex()

    fluor = np.stack([dna, rna, er, agp, mito]).clip(0.0, 1.0).astype(np.float32)
    bf = bf.clip(0.0, 1.0).astype(np.float32)[None]
    seg = np.stack(
        [instances_to_boundary(nuclei), instances_to_boundary(cells)]
    ).astype(np.float32)
    return SampleRecord(
        record_id=record_id,
        bf=bf,
        fluor=fluor,
        seg=seg,
        nuclei=nuclei,
        cells=cells,
        plate=plate,
        well=well,
    )


def generate_synthetic(
    n: int,
    size: int = 64,
    seed: int = 0,
    params: GeneratorParams = GeneratorParams(),
) -> list[SampleRecord]:
    """Generate n records, each from an independent seeded substream."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    streams = np.random.SeedSequence(seed).spawn(n)
    records = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        records.append(
            generate_record(
                size,
                rng,
                params,
                record_id=f"r{i:05d}",
                plate=f"synthetic-{seed}",
                well=f"w{i:05d}",
            )
        )
    return records
