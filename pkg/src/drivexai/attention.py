"""Chained channel/spatial attention blocks with connections between blocks.

Each block gates its input first by a channel map and then by a spatial map
(both sigmoid outputs).  From the second block on, the pre-sigmoid maps of
the previous block are mixed in: channel descriptors through a learned 1x1
merge plus a direct connection ``a*g + b*t``, spatial descriptors through the
weighted connection ``(|a*g|^2 + |b*t|^2) / (a*g + b*t)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class AttentionBlockConfig:
    channels: int = 64
    reduction: int = 16
    eps: float = 1e-6
    kernel_size: int = 7
    # carry pre-sigmoid maps to the next block (False: post-sigmoid)
    carry_logits: bool = True

    def __post_init__(self):
        if self.reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        if self.channels % self.reduction:
            raise ValueError(f"channels ({self.channels}) not divisible by reduction ratio ({self.reduction})")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction


class AttentionState(NamedTuple):
    prev_channel: torch.Tensor | None = None  # (B, C', 1, 1)
    prev_spatial: torch.Tensor | None = None  # (B, 1, H', W')


def connect_direct(g, t, alpha, beta):
    if g.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(g.shape)} vs {tuple(t.shape)}")
    return alpha * g + beta * t


def connect_weighted(g, t, alpha, beta, eps: float = 1e-6):
    if g.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(g.shape)} vs {tuple(t.shape)}")
    ag, bt = alpha * g, beta * t
    d = ag + bt
    # sign-preserving clamp of |d| to eps; d == 0 counts as +eps
    sign = torch.where(d < 0, -torch.ones_like(d), torch.ones_like(d))
    d = sign * torch.clamp(d.abs(), min=eps)
    return (ag * ag + bt * bt) / d


class SharedMLP(nn.Module):
    def __init__(self, channels, hidden):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class ChannelMerge(nn.Module):
    """1x1 conv over the stacked (current, previous) descriptor: 2 channels -> 1."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv1d(2, 1, 1)
        with torch.no_grad():
            self.conv.weight.copy_(torch.tensor([[[1.0], [0.0]]]))
            self.conv.bias.zero_()

    def forward(self, cur, prev):
        return self.conv(torch.stack([cur, prev], dim=1)).squeeze(1)


class ChannelAttention(nn.Module):
    def __init__(self, cfg: AttentionBlockConfig, connected: bool = False, prev_channels: int | None = None):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.connected = connected
        self.mlp = SharedMLP(c, cfg.hidden)
        if connected:
            self.adapter = nn.Conv2d(prev_channels, c, 1) if prev_channels not in (None, c) else None
            self.merge_avg = ChannelMerge()
            self.merge_max = ChannelMerge()
            self.alpha = nn.Parameter(torch.tensor(1.0))
            self.beta = nn.Parameter(torch.tensor(1.0))

    def logits(self, f, state: AttentionState):
        avg = f.mean(dim=(2, 3))
        mx = f.amax(dim=(2, 3))
        prev = state.prev_channel
        if not self.connected or prev is None:
            return (self.mlp(avg) + self.mlp(mx))[..., None, None]
        if self.adapter is not None:
            prev = self.adapter(prev)
        avg = self.merge_avg(avg, prev.mean(dim=(2, 3)))
        mx = self.merge_max(mx, prev.amax(dim=(2, 3)))
        return connect_direct(self.mlp(avg), self.mlp(mx), self.alpha, self.beta)[..., None, None]

    def forward(self, f, state: AttentionState = AttentionState()):
        return torch.sigmoid(self.logits(f, state))


def _pool_pair(x):
    return torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)


class SpatialAttention(nn.Module):
    def __init__(self, cfg: AttentionBlockConfig, connected: bool = False):
        super().__init__()
        self.cfg = cfg
        self.connected = connected
        k = cfg.kernel_size
        # replicate padding keeps the map of a spatially constant input constant
        self.conv = nn.Conv2d(2, 1, k, padding=k // 2, padding_mode="replicate")
        if connected:
            self.p1 = nn.Parameter(torch.tensor(1.0))
            self.p2 = nn.Parameter(torch.tensor(0.0))

    def logits(self, f, state: AttentionState):
        desc = _pool_pair(f)
        prev = state.prev_spatial
        if self.connected and prev is not None:
            if prev.shape[-2:] != f.shape[-2:]:
                prev = F.adaptive_avg_pool2d(prev, f.shape[-2:])
            desc = connect_weighted(desc, _pool_pair(prev), self.p1, self.p2, self.cfg.eps)
        return self.conv(desc)

    def forward(self, f, state: AttentionState = AttentionState()):
        return torch.sigmoid(self.logits(f, state))


class AttentionBlock(nn.Module):
    def __init__(self, cfg: AttentionBlockConfig, connected: bool = False, prev_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.channel = ChannelAttention(cfg, connected, prev_channels)
        self.spatial = SpatialAttention(cfg, connected)

    def forward(self, f, state: AttentionState = AttentionState(), maps=None):
        """Return (refined features, state for the next block).

        ``maps`` optionally forces (channel_map, spatial_map) in place of the
        computed ones; used for testing the gating algebra.
        """
        if f.shape[1] != self.cfg.channels:
            raise ValueError(f"expected {self.cfg.channels} channels, got {f.shape[1]}")
        c_logit = self.channel.logits(f, state)
        mc = torch.sigmoid(c_logit) if maps is None else maps[0]
        f1 = mc * f
        s_logit = self.spatial.logits(f1, state)
        ms = torch.sigmoid(s_logit) if maps is None else maps[1]
        f2 = ms * f1
        if self.cfg.carry_logits:
            new_state = AttentionState(c_logit, s_logit)
        else:
            new_state = AttentionState(torch.sigmoid(c_logit), torch.sigmoid(s_logit))
        return f2, new_state


class AttentionChain(nn.Module):
    def __init__(self, cfg: AttentionBlockConfig, n_blocks: int = 2):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("need at least one attention block")
        self.cfg = cfg
        self.blocks = nn.ModuleList(AttentionBlock(cfg, connected=i > 0) for i in range(n_blocks))

    def forward(self, f, state: AttentionState = AttentionState()):
        for block in self.blocks:
            f, state = block(f, state)
        return f, state


def connection_scalars(module: nn.Module):
    """Names of the learnable connection scalars (alpha/beta, p1/p2)."""
    return [n for n, p in module.named_parameters() if p.ndim == 0]


def count_parameters(cfg: AttentionBlockConfig, n_blocks: int = 1, breakdown: bool = False):
    """Exact learnable-parameter count of an ``AttentionChain(cfg, n_blocks)``."""
    c, h, k = cfg.channels, cfg.hidden, cfg.kernel_size
    parts = {
        "channel_mlp": n_blocks * ((c * h + h) + (h * c + c)),
        "spatial_conv": n_blocks * (k * k * 2 + 1),
        # blocks after the first: two 2->1 merges (w+b), alpha, beta, p1, p2
        "merge_convs": (n_blocks - 1) * 2 * 3,
        "connection_scalars": (n_blocks - 1) * 4,
    }
    total = sum(parts.values())
    return (total, parts) if breakdown else total
