"""Reservoir replay memory holding (x, y, logits, task, masks) tuples."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

FORMAT_VERSION = 1
MASK_STORE_THRESHOLD = 16


@dataclass
class ReplayItem:
    x: torch.Tensor
    y: int
    logits: torch.Tensor
    task: int
    masks: list = field(default_factory=list)          # uint8 (c, h, w), possibly downscaled
    tap_sizes: list = field(default_factory=list)      # (h, w) at tap resolution
    source: str = "stream"                             # or "pretrain"

    @property
    def stored_resolutions(self):
        return [tuple(m.shape[-2:]) for m in self.masks]


# ---------------------------------------------------------------------------
# masks

def _check_binary(m):
    if m.numel() and not bool(((m == 0) | (m == 1)).all()):
        raise ValueError("mask must contain only 0 and 1")


def rescale_mask(m, direction, size=None):
    """Nearest-neighbour factor-2 resampling of a binary map over its last two dims.

    ``down`` halves maps larger than 16x16 (odd sizes are edge-padded to even
    first) and leaves smaller ones untouched.  ``up`` doubles a map and crops
    it to ``size`` (the original tap resolution); it is a no-op when the map
    already has that size.
    """
    if direction == "down":
        _check_binary(m)
        h, w = m.shape[-2:]
        if h <= MASK_STORE_THRESHOLD and w <= MASK_STORE_THRESHOLD:
            return m
        if h % 2 or w % 2:
            lead = m.shape[:-2]
            flat = m.reshape((-1, 1, h, w)).float()
            flat = torch.nn.functional.pad(flat, (0, w % 2, 0, h % 2), mode="replicate")
            m = flat.to(m.dtype).reshape(lead + flat.shape[-2:])
        return m[..., ::2, ::2].contiguous()
    if direction == "up":
        if size is None:
            raise ValueError("upscaling needs the original tap size")
        size = tuple(size)
        if tuple(m.shape[-2:]) == size:
            return m
        up = m.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
        return up[..., : size[0], : size[1]].contiguous()
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


def rle_encode(seq):
    """Run-length code of a flat 0/1 sequence as ``[(value, run_length), ...]``."""
    arr = np.asarray(seq).reshape(-1)
    if arr.size == 0:
        return []
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("run-length coding expects binary input")
    starts = np.flatnonzero(np.diff(arr)) + 1
    bounds = np.concatenate(([0], starts, [arr.size]))
    return [(int(arr[s]), int(e - s)) for s, e in zip(bounds[:-1], bounds[1:])]


def rle_decode(runs, dtype=np.uint8):
    if not runs:
        return np.zeros(0, dtype=dtype)
    values, lengths = zip(*runs)
    return np.repeat(np.asarray(values, dtype=dtype), lengths)


# ---------------------------------------------------------------------------
# reservoir

class ReservoirBuffer:
    """Fixed-capacity memory filled by reservoir sampling (Vitter's Algorithm R)."""

    def __init__(self, capacity):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.items = []
        self.seen_count = 0

    def __len__(self):
        return len(self.items)

    def is_empty(self):
        return not self.items

    def add(self, item, rng):
        """Offer one item; returns whether it was stored."""
        accepted = False
        if self.seen_count < self.capacity:
            self.items.append(item)
            accepted = True
        elif self.capacity > 0:
            j = int(rng.integers(0, self.seen_count + 1))
            if j < self.capacity:
                self.items[j] = item
                accepted = True
        self.seen_count += 1
        return accepted

    def sample(self, batch_size, rng):
        """Uniform draw with replacement; masks come back at tap resolution."""
        if not self.items or batch_size <= 0:
            return []
        picks = rng.integers(0, len(self.items), size=batch_size)
        return [_restore(self.items[i]) for i in picks]

    def tasks(self):
        return {it.task for it in self.items}

    def state_dict(self):
        return {
            "version": FORMAT_VERSION,
            "capacity": self.capacity,
            "seen_count": self.seen_count,
            "slots": [_encode_item(it) for it in self.items],
        }

    def load_state_dict(self, state):
        if state.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported buffer format version {state.get('version')}")
        self.capacity = state["capacity"]
        self.seen_count = state["seen_count"]
        self.items = [_decode_item(s) for s in state["slots"]]
        return self


class SplitReservoirBuffer:
    """Two reservoirs sharing one capacity: pretraining rehearsal plus the CL stream.

    ``fraction`` of the slots go to pretraining examples, the rest follow the
    ordinary reservoir over the stream.  Replay batches draw uniformly over
    the union of stored items.
    """

    def __init__(self, capacity, fraction):
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"pretrain rehearsal fraction {fraction} out of range [0,1]")
        n_pre = int(round(capacity * fraction))
        self.capacity = capacity
        self.fraction = fraction
        self.pretrain = ReservoirBuffer(n_pre)
        self.stream = ReservoirBuffer(capacity - n_pre)

    @property
    def items(self):
        return self.pretrain.items + self.stream.items

    @property
    def seen_count(self):
        return self.stream.seen_count

    def __len__(self):
        return len(self.pretrain) + len(self.stream)

    def is_empty(self):
        return len(self) == 0

    def add(self, item, rng):
        target = self.pretrain if item.source == "pretrain" else self.stream
        return target.add(item, rng)

    def sample(self, batch_size, rng):
        items = self.items
        if not items or batch_size <= 0:
            return []
        return [_restore(items[i]) for i in rng.integers(0, len(items), size=batch_size)]

    def tasks(self):
        return {it.task for it in self.items}

    def state_dict(self):
        return {"version": FORMAT_VERSION, "fraction": self.fraction, "capacity": self.capacity,
                "pretrain": self.pretrain.state_dict(), "stream": self.stream.state_dict()}

    def load_state_dict(self, state):
        self.fraction, self.capacity = state["fraction"], state["capacity"]
        self.pretrain.load_state_dict(state["pretrain"])
        self.stream.load_state_dict(state["stream"])
        return self


def reservoir_add(buffer, item, rng):
    return buffer.add(item, rng)


def sample_batch(buffer, batch_size, rng):
    return buffer.sample(batch_size, rng)


def make_item(x, y, logits, task, masks=(), source="stream"):
    """Build a ReplayItem, binarising and downscaling the given per-layer masks."""
    stored, sizes = [], []
    for m in masks:
        m = m.detach()
        _check_binary(m)
        sizes.append(tuple(m.shape[-2:]))
        stored.append(rescale_mask(m.to(torch.uint8), "down"))
    return ReplayItem(x.detach().clone(), int(y), logits.detach().clone(), int(task),
                      stored, sizes, source)


def mix_pretrain_rehearsal(capacity, fraction, pretrain_items=(), rng=None):
    """Buffer reserving ``fraction`` of its slots for pretraining examples.

    ``pretrain_items`` (ReplayItems with ``source="pretrain"``) are streamed
    through the reserved reservoir.  ``fraction == 0`` yields a plain
    ReservoirBuffer so behaviour is unchanged.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"pretrain rehearsal fraction {fraction} out of range [0,1]")
    if fraction == 0.0:
        return ReservoirBuffer(capacity)
    buf = SplitReservoirBuffer(capacity, fraction)
    rng = rng if rng is not None else np.random.default_rng(0)
    for item in pretrain_items:
        buf.pretrain.add(item, rng)
    return buf


def collate(items):
    """Stack replay items into tensors; masks become a per-layer list of float tensors."""
    x = torch.stack([it.x for it in items])
    y = torch.tensor([it.y for it in items], dtype=torch.long)
    logits = torch.stack([it.logits for it in items]) if items[0].logits is not None else None
    task = torch.tensor([it.task for it in items], dtype=torch.long)
    masks = None
    if items[0].masks:
        masks = [torch.stack([it.masks[l] for it in items]).float() for l in range(len(items[0].masks))]
    return x, y, logits, task, masks


def _restore(item):
    if not item.masks:
        return item
    masks = [rescale_mask(m, "up", size) for m, size in zip(item.masks, item.tap_sizes)]
    return replace(item, masks=masks)


def _encode_item(item):
    return {
        "x": item.x, "y": item.y, "logits": item.logits, "task": item.task,
        "source": item.source, "tap_sizes": [list(s) for s in item.tap_sizes],
        "masks": [{"shape": list(m.shape), "rle": rle_encode(m.numpy())} for m in item.masks],
    }


def _decode_item(slot):
    masks = [torch.from_numpy(rle_decode(m["rle"]).reshape(m["shape"])) for m in slot["masks"]]
    return ReplayItem(slot["x"], slot["y"], slot["logits"], slot["task"], masks,
                      [tuple(s) for s in slot["tap_sizes"]], slot.get("source", "stream"))
