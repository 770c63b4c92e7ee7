"""Token (circular conv), sinusoidal position and calendar-lookup embeddings."""
from __future__ import annotations

import functools
from typing import Optional

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, as_tensor, fan_in_uniform

KERNEL_WIDTH = 3
CALENDAR_FIELDS = (("hour", 24, 0), ("weekday", 7, 1), ("day", 31, 1), ("month", 12, 1))


class CalendarRangeError(IndexError):
    pass


def token_embed(x_hat, kernel: torch.Tensor) -> torch.Tensor:
    """Width-3 circular convolution from one channel to ``d_m``; no bias.

    ``kernel[j]`` multiplies ``x[t + j - 1]``. Output has shape ``(..., L, d_m)``.
    """
    x = as_tensor(x_hat)
    prev = torch.roll(x, 1, dims=-1)
    nxt = torch.roll(x, -1, dims=-1)
    return prev[..., None] * kernel[0] + x[..., None] * kernel[1] + nxt[..., None] * kernel[2]


@functools.lru_cache(maxsize=32)
def _positional(L: int, d_m: int) -> torch.Tensor:
    pos = np.arange(L)[:, None]
    i = np.arange(d_m // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_m)
    out = np.empty((L, d_m))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return torch.from_numpy(out)


def positional_embed(L: int, d_m: int) -> torch.Tensor:
    if d_m % 2:
        raise ValueError(f"d_m must be even, got {d_m}")
    return _positional(L, d_m).clone()


def check_calendar(calendar) -> torch.Tensor:
    cal = torch.as_tensor(np.asarray(calendar), dtype=torch.long)
    if cal.shape[-1] != 4:
        raise ValueError(f"calendar needs 4 fields per step, got shape {tuple(cal.shape)}")
    for j, (name, rows, base) in enumerate(CALENDAR_FIELDS):
        col = cal[..., j]
        if col.numel() and (col.min() < base or col.max() > rows - 1 + base):
            bad = col[(col < base) | (col > rows - 1 + base)][0].item()
            raise CalendarRangeError(f"calendar field '{name}' out of range: {bad}")
    return cal


def temporal_embed(calendar, tables: dict[str, torch.Tensor]) -> torch.Tensor:
    """Sum of the four lookup rows; weekday/day/month are 1-based, hour 0-based."""
    cal = check_calendar(calendar)
    out = None
    for j, (name, _, base) in enumerate(CALENDAR_FIELDS):
        rows = tables[name][cal[..., j] - base]
        out = rows if out is None else out + rows
    return out


class HybridEmbedding(nn.Module):
    def __init__(self, d_m: int = 16, generator: Optional[torch.Generator] = None):
        super().__init__()
        if d_m % 2:
            raise ValueError(f"d_m must be even, got {d_m}")
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.d_m = d_m
        self.kernel = nn.Parameter(fan_in_uniform((KERNEL_WIDTH, d_m), KERNEL_WIDTH, g))
        self.hour = nn.Parameter(torch.zeros(24, d_m, dtype=DTYPE))
        self.weekday = nn.Parameter(torch.zeros(7, d_m, dtype=DTYPE))
        self.day = nn.Parameter(torch.zeros(31, d_m, dtype=DTYPE))
        self.month = nn.Parameter(torch.zeros(12, d_m, dtype=DTYPE))

    @property
    def tables(self) -> dict[str, torch.Tensor]:
        return {"hour": self.hour, "weekday": self.weekday, "day": self.day, "month": self.month}

    def forward(self, x_hat: torch.Tensor, calendar=None) -> torch.Tensor:
        return hybrid_embed(x_hat, calendar, self)


def hybrid_embed(x_hat, calendar, params: HybridEmbedding) -> torch.Tensor:
    """``E = E_token + E_pos + E_temp`` with shape ``(..., L, d_m)``; no calendar means no temporal term."""
    x = as_tensor(x_hat)
    L = x.shape[-1]
    out = token_embed(x, params.kernel) + positional_embed(L, params.d_m)
    if calendar is not None:
        temp = temporal_embed(calendar, params.tables)
        if temp.shape[-2] != L:
            raise ValueError(f"calendar covers {temp.shape[-2]} steps but the sequence has {L}")
        out = out + temp
    return out
