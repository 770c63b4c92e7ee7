"""Learnable Hamming-window masks that carve a window into variable patches."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, as_tensor

EPS = 1e-8
DEFAULT_THRESHOLD = 0.6
# sigmoid of the Hamming window extremes 0.08 and 1.0
SOFT_MIN = 1.0 / (1.0 + math.exp(-0.08))
SOFT_MAX = 1.0 / (1.0 + math.exp(-1.0))
INITIAL_OMEGAS = (1.0 / 3.0, 1.0 / 8.0, 1.0 / 16.0)


def instance_norm(x, eps: float = EPS):
    """Standardize along the last axis; returns ``(normalized, mean, std)``.

    ``std`` is the population std floored at ``eps``; mean/std keep a trailing
    singleton axis so they broadcast back in ``inverse_norm``.
    """
    x = as_tensor(x)
    mean = x.mean(dim=-1, keepdim=True)
    std = torch.sqrt(((x - mean) ** 2).mean(dim=-1, keepdim=True)).clamp_min(eps)
    return (x - mean) / std, mean, std


def window_raw(omega, phi, L: int) -> torch.Tensor:
    omega, phi = as_tensor(omega), as_tensor(phi)
    t = torch.arange(L, dtype=DTYPE)
    return 0.54 - 0.46 * torch.cos(2.0 * math.pi * t / (omega * (L - 1)) + phi)


def window_soft(omega, phi, L: int) -> torch.Tensor:
    """Sigmoid of the parameterized Hamming window at ``t = 0..L-1``."""
    if L < 2:
        raise ValueError("window length must be at least 2")
    return torch.sigmoid(window_raw(omega, phi, L))


def mask_runs(hard) -> list[tuple[int, int]]:
    """Maximal runs of ones as ``(offset, length)`` sorted by offset."""
    h = np.asarray(hard, dtype=np.int8).reshape(-1)
    padded = np.concatenate([[0], h, [0]])
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    return [(int(s), int(e - s)) for s, e in zip(starts, stops)]


@dataclass
class PatchMask:
    """``hard`` holds exact 0/1 values but carries the straight-through gradient."""

    soft: torch.Tensor
    hard: torch.Tensor
    runs: list[tuple[int, int]]
    threshold: float

    @property
    def selected(self) -> np.ndarray:
        return self.hard.detach().numpy().astype(bool)


def binarize(soft: torch.Tensor, threshold_b: float, anchor: Optional[torch.Tensor] = None) -> PatchMask:
    """Threshold the soft mask; backward treats the selected entries as the soft values.

    Forward yields ``1[soft > b]`` exactly. The gradient reaching ``soft`` is the
    incoming gradient gated by the hard mask, i.e. the derivative of
    ``soft * 1[soft > b]`` away from the threshold.

    ``anchor`` pins the reference point of the straight-through surrogate to a
    fixed soft vector (used by finite-difference checks of this estimator).
    """
    soft = as_tensor(soft)
    indicator = (soft > threshold_b).to(DTYPE).detach()
    gated = indicator * soft
    # ``gated - ref`` is exactly zero in the forward pass unless an anchor is given
    ref = gated.detach() if anchor is None else indicator * anchor
    hard = indicator + (gated - ref)
    return PatchMask(soft, hard, mask_runs(indicator.numpy()), float(threshold_b))


def apply_mask(x, mask: PatchMask) -> torch.Tensor:
    """Zero the unselected steps of ``x`` (broadcasts over leading batch axes)."""
    return as_tensor(x) * mask.hard


def describe_patches(mask: PatchMask) -> tuple[list[int], int, list[int]]:
    lengths = [length for _, length in mask.runs]
    offsets = [off for off, _ in mask.runs]
    return lengths, len(mask.runs), offsets


def initial_omegas(scales: int) -> list[float]:
    if scales <= len(INITIAL_OMEGAS):
        return list(INITIAL_OMEGAS[:scales])
    return list(np.geomspace(INITIAL_OMEGAS[0], INITIAL_OMEGAS[-1], scales))


class DeformableScale(nn.Module):
    """One scale: trainable period (``omega = exp(rho)``) and phase, fixed threshold."""

    def __init__(self, scale_index: int, omega: float, phi: float, threshold_b: float = DEFAULT_THRESHOLD):
        super().__init__()
        if not 0.0 < threshold_b < 1.0:
            raise ValueError("threshold_b must lie in (0, 1)")
        if omega <= 0:
            raise ValueError("omega must be positive")
        self.scale_index = scale_index
        self.threshold_b = float(threshold_b)
        self.rho = nn.Parameter(torch.tensor(math.log(omega), dtype=DTYPE))
        self.phi = nn.Parameter(torch.tensor(float(phi), dtype=DTYPE))
        self.anchor: Optional[torch.Tensor] = None

    @property
    def omega(self) -> torch.Tensor:
        return torch.exp(self.rho)

    def soft(self, L: int) -> torch.Tensor:
        return window_soft(self.omega, self.phi, L)

    def forward(self, L: int) -> PatchMask:
        return binarize(self.soft(L), self.threshold_b, self.anchor)

    def extra_repr(self) -> str:
        return f"scale={self.scale_index}, omega={self.omega.item():.4g}, phi={self.phi.item():.4g}, b={self.threshold_b}"


class FixedPatchScale(nn.Module):
    """Parameter-free stand-in: patches of ``patch_length`` separated by equal gaps.

    Scale ``d`` of ``S`` shifts the grid by ``d * 2 * patch_length // S`` steps so
    the scales jointly cover every position.
    """

    def __init__(self, scale_index: int, patch_length: int = 6, threshold_b: float = DEFAULT_THRESHOLD, n_scales: int = 1):
        super().__init__()
        if patch_length < 1:
            raise ValueError("patch_length must be positive")
        self.scale_index = scale_index
        self.patch_length = patch_length
        self.threshold_b = float(threshold_b)
        self.offset = (scale_index * 2 * patch_length) // max(n_scales, 1)

    def forward(self, L: int) -> PatchMask:
        t = np.arange(L) - self.offset
        hard = ((t // self.patch_length) % 2 == 0).astype(np.float64)
        hard_t = torch.from_numpy(hard)
        return PatchMask(hard_t.clone(), hard_t, mask_runs(hard), self.threshold_b)


def write_run_table(masks: list[PatchMask], path, scale_ids: Optional[list[int]] = None) -> None:
    """CSV ``scale,offset,length``, one block of rows per scale."""
    ids = scale_ids if scale_ids is not None else list(range(len(masks)))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale", "offset", "length"])
        for sid, mask in zip(ids, masks):
            for off, length in mask.runs:
                w.writerow([sid, off, length])


def read_run_table(path) -> dict[int, list[tuple[int, int]]]:
    out: dict[int, list[tuple[int, int]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.setdefault(int(row["scale"]), []).append((int(row["offset"]), int(row["length"])))
    return out
