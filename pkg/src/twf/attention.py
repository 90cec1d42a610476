"""Task-conditioned gates producing binary propagation masks over sibling taps.

A gate sums a channel map (b, c, 1, 1) and a spatial map (b, 1, h, w) into a
(b, c, h, w) logit grid and binarises it with a two-outcome Gumbel-Softmax
(binary concrete) plus a straight-through estimator.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class MaskPair:
    soft: torch.Tensor
    hard: torch.Tensor


class _StraightThrough(torch.autograd.Function):
    """Forward: exact 0/1 threshold of ``soft``; backward: identity."""

    @staticmethod
    def forward(ctx, soft):
        return (soft > 0.5).to(soft.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad


def sample_gumbel_pair(shape, generator=None, dtype=torch.float32, eps=1e-10):
    u = torch.rand((2,) + tuple(shape), generator=generator, dtype=dtype)
    g = -torch.log(-torch.log(u + eps) + eps)
    return g[0], g[1]


def gumbel_binarize(logit_map, temperature=1.0, train_mode=True, generator=None, noise=None):
    """Binary Gumbel-Softmax sample of ``logit_map``.

    In training mode ``soft = sigmoid((logit + g1 - g2) / temperature)`` with
    independent Gumbel noises g1, g2 (or the given ``noise`` pair) and
    ``hard = 1[soft > 0.5]`` carrying the gradient of ``soft``.  In evaluation
    mode the decision is the deterministic ``1[sigmoid(logit) > 0.5]``.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if train_mode:
        if noise is None:
            noise = sample_gumbel_pair(logit_map.shape, generator, logit_map.dtype)
        g1, g2 = noise
        soft = torch.sigmoid((logit_map + g1 - g2) / temperature)
    else:
        soft = torch.sigmoid(logit_map)
    return MaskPair(soft, _StraightThrough.apply(soft))


# ---------------------------------------------------------------------------
# task-conditioned layers

def _as_task_vector(task, batch):
    if isinstance(task, int):
        return torch.full((batch,), task, dtype=torch.long)
    task = torch.as_tensor(task, dtype=torch.long)
    if task.dim() == 0:
        task = task.expand(batch)
    return task


class _TaskBank(nn.Module):
    """Common plumbing: one module per task id, applied per task group."""

    def __init__(self, make, num_tasks=1):
        super().__init__()
        self.bank = nn.ModuleList([make() for _ in range(num_tasks)])

    @property
    def num_tasks(self):
        return len(self.bank)

    def ensure_tasks(self, num_tasks):
        """Grow the bank to ``num_tasks`` entries, warm-starting from the last one."""
        while len(self.bank) < num_tasks:
            self.bank.append(copy.deepcopy(self.bank[-1]))

    def _apply_one(self, module, x):
        return module(x)

    def forward(self, x, task):
        tasks = _as_task_vector(task, x.shape[0])
        uniq = torch.unique(tasks)
        if int(uniq.max()) >= len(self.bank) or int(uniq.min()) < 0:
            raise IndexError(f"task id outside [0, {len(self.bank)})")
        if len(uniq) == 1:
            return self._apply_one(self.bank[int(uniq[0])], x)
        parts = [None] * len(uniq)
        for i, t in enumerate(uniq.tolist()):
            sel = tasks == t
            parts[i] = (sel, self._apply_one(self.bank[t], x[sel]))
        out = x.new_empty((x.shape[0],) + parts[0][1].shape[1:])
        for sel, y in parts:
            out[sel] = y
        return out


class TaskBatchNorm(_TaskBank):
    """Batch normalisation with separate affine parameters and statistics per task.

    A task group holding a single example is normalised with the running
    statistics, since batch statistics are undefined for it.
    """

    def __init__(self, num_features, num_tasks=1, dims=2):
        cls = nn.BatchNorm2d if dims == 2 else nn.BatchNorm1d
        super().__init__(lambda: cls(num_features), num_tasks)

    def _apply_one(self, bn, x):
        per_channel = x.numel() // (x.shape[0] * x.shape[1])
        if bn.training and x.shape[0] * per_channel <= 1:
            return F.batch_norm(x, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                                False, 0.0, bn.eps)
        return bn(x)


class TaskLinear(_TaskBank):
    def __init__(self, in_features, out_features, num_tasks=1, bias=False):
        super().__init__(lambda: nn.Linear(in_features, out_features, bias=bias), num_tasks)


# ---------------------------------------------------------------------------
# branches

class SpatialAttention(nn.Module):
    """Bottleneck conv stack c -> c/4 -> (3x3, dilation 2) x2 -> 1 with task BN."""

    def __init__(self, channels, num_tasks=1, reduction=4, dilation=2):
        super().__init__()
        mid = max(1, channels // reduction)
        self.channels = channels
        self.conv_a = nn.Conv2d(channels, mid, 1, bias=False)
        self.bn_a = TaskBatchNorm(mid, num_tasks)
        self.conv_b1 = nn.Conv2d(mid, mid, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn_b1 = TaskBatchNorm(mid, num_tasks)
        self.conv_b2 = nn.Conv2d(mid, mid, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn_b2 = TaskBatchNorm(mid, num_tasks)
        self.conv_c = nn.Conv2d(mid, 1, 1)

    def forward(self, h_hat, task):
        x = F.relu(self.bn_a(self.conv_a(h_hat), task))
        x = F.relu(self.bn_b1(self.conv_b1(x), task))
        x = F.relu(self.bn_b2(self.conv_b2(x), task))
        return self.conv_c(x)


class ChannelAttention(nn.Module):
    """``tanh(BN(W1 g)) * sigmoid(BN(W2 g)) + W3 g`` on the pooled tap ``g``."""

    def __init__(self, channels, num_tasks=1):
        super().__init__()
        self.channels = channels
        self.w1 = TaskLinear(channels, channels, num_tasks)
        self.w2 = TaskLinear(channels, channels, num_tasks)
        self.w3 = TaskLinear(channels, channels, num_tasks)
        self.bn1 = TaskBatchNorm(channels, num_tasks, dims=1)
        self.bn2 = TaskBatchNorm(channels, num_tasks, dims=1)

    def forward(self, h_hat, task):
        g = h_hat.mean(dim=(2, 3))
        gated = torch.tanh(self.bn1(self.w1(g, task), task)) * torch.sigmoid(self.bn2(self.w2(g, task), task))
        return (gated + self.w3(g, task))[:, :, None, None]


class AttentionGate(nn.Module):
    """Gate for one tap layer with ``channels`` channels."""

    def __init__(self, channels, num_tasks=1, temperature=1.0):
        super().__init__()
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.channels = channels
        self.temperature = temperature
        self.spatial = SpatialAttention(channels, num_tasks)
        self.channel = ChannelAttention(channels, num_tasks)

    def _banks(self):
        return [m for m in self.modules() if isinstance(m, _TaskBank)]

    @property
    def num_tasks(self):
        return self._banks()[0].num_tasks

    def ensure_tasks(self, num_tasks):
        for bank in self._banks():
            bank.ensure_tasks(num_tasks)

    def task_parameters(self, task):
        """Parameters that belong to ``task``'s bank entries only."""
        return [p for bank in self._banks() for p in bank.bank[task].parameters()]

    def _check(self, h_hat):
        if h_hat.dim() != 4 or h_hat.shape[1] != self.channels:
            raise ValueError(f"gate expects {self.channels} channels, got shape {tuple(h_hat.shape)}")

    def spatial_map(self, h_hat, task):
        self._check(h_hat)
        return self.spatial(h_hat, task)

    def channel_map(self, h_hat, task):
        self._check(h_hat)
        return self.channel(h_hat, task)

    def logits(self, h_hat, task):
        return self.channel_map(h_hat, task) + self.spatial_map(h_hat, task)

    def forward(self, h_hat, task, train_mode=None, generator=None):
        train_mode = self.training if train_mode is None else train_mode
        return gumbel_binarize(self.logits(h_hat, task), self.temperature, train_mode, generator)


def spatial_attention(gate, h_hat, task):
    return gate.spatial_map(h_hat, task)


def channel_attention(gate, h_hat, task):
    return gate.channel_map(h_hat, task)


def attention_mask(gate, h_hat, task, train_mode=True, generator=None):
    return gate(h_hat, task, train_mode, generator)


def build_gates(tap_shapes, num_tasks=1, temperature=1.0):
    return nn.ModuleList([AttentionGate(c, num_tasks, temperature) for c, _, _ in tap_shapes])
