"""Layered feature extractors with tap points, pretraining and sibling cloning.

Each backbone is a stack of ``L`` stages followed by a linear classifier over
the globally pooled output of the last stage.  A *tap* is the output of a
stage taken before its closing ReLU (the pre-activation response), which is
what the margin-ReLU distillation operates on.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NonFiniteLossError

log = logging.getLogger(__name__)


class LayeredBackbone(nn.Module):
    """Base class: subclasses fill ``self.stages`` and ``self.classifier``."""

    def __init__(self, in_channels, input_size, num_classes):
        super().__init__()
        self.in_channels = in_channels
        self.input_size = input_size
        self.num_classes = num_classes
        self.frozen = False

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels or tuple(x.shape[-2:]) != (self.input_size,) * 2:
            raise ValueError(
                f"expected input (b, {self.in_channels}, {self.input_size}, {self.input_size}), "
                f"got {tuple(x.shape)}"
            )

    def embed(self, x):
        """Return ``(features, taps)``: pooled penultimate features and all taps."""
        self._check_input(x)
        taps = []
        out = x
        for stage in self.stages:
            tap = stage(out)
            taps.append(tap)
            out = F.relu(tap)
        return F.adaptive_avg_pool2d(out, 1).flatten(1), taps

    def forward_with_taps(self, x):
        """Return ``(logits, taps)`` where ``taps[l]`` is stage ``l``'s pre-activation output."""
        feats, taps = self.embed(x)
        return self.classifier(feats), taps

    def features(self, x):
        return self.embed(x)[0]

    def forward(self, x):
        return self.forward_with_taps(x)[0]

    @property
    def num_taps(self):
        return len(self.stages)

    @torch.no_grad()
    def tap_shapes(self):
        was_training = self.training
        self.eval()
        probe = torch.zeros(2, self.in_channels, self.input_size, self.input_size)
        _, taps = self.forward_with_taps(probe)
        self.train(was_training)
        return [tuple(t.shape[1:]) for t in taps]

    def feature_parameters(self):
        """Named parameters of the feature extractor (everything but the classifier)."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("classifier.")]

    def train(self, mode=True):
        # a frozen sibling keeps its normalisation layers on running statistics
        return super().train(mode and not self.frozen)

    def replace_classifier(self, num_classes):
        self.classifier = nn.Linear(self.classifier.in_features, num_classes)
        self.num_classes = num_classes
        return self


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1, last_relu=True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))
        self.last_relu = last_relu

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out)) + self.shortcut(x)
        return F.relu(out) if self.last_relu else out


class _ResStage(nn.Sequential):
    pass


class ResNet18(LayeredBackbone):
    """CIFAR-style ResNet-18; taps are the four residual macro-stages."""

    def __init__(self, num_classes, in_channels=3, input_size=32, nf=64):
        super().__init__(in_channels, input_size, num_classes)
        self.nf = nf
        stem = nn.Sequential(nn.Conv2d(in_channels, nf, 3, 1, 1, bias=False),
                             nn.BatchNorm2d(nf), nn.ReLU())
        stages, in_planes = [], nf
        for i, (mult, stride) in enumerate([(1, 1), (2, 2), (4, 2), (8, 2)]):
            planes = nf * mult
            blocks = [BasicBlock(in_planes, planes, stride), BasicBlock(planes, planes, 1, last_relu=False)]
            if i == 0:
                blocks.insert(0, stem)
            stages.append(_ResStage(*blocks))
            in_planes = planes
        self.stages = nn.ModuleList(stages)
        self.classifier = nn.Linear(nf * 8, num_classes)


class DeskCNN(LayeredBackbone):
    """Small four-block CNN for CPU-scale runs; taps are the conv blocks.

    Block ``l`` is conv3x3-BN at width ``widths[l]``; blocks after the first
    downsample by 2 with a max-pool in front of the convolution.
    """

    def __init__(self, num_classes, in_channels=1, input_size=32, widths=(16, 32, 64, 128)):
        super().__init__(in_channels, input_size, num_classes)
        self.widths = tuple(widths)
        stages, prev = [], in_channels
        for i, w in enumerate(widths):
            layers = [nn.MaxPool2d(2)] if i else []
            layers += [nn.Conv2d(prev, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w)]
            stages.append(nn.Sequential(*layers))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.classifier = nn.Linear(prev, num_classes)


ARCHITECTURES = {"resnet18": ResNet18, "desk_cnn": DeskCNN}


def build_backbone(arch, num_classes, in_channels, input_size, **kwargs):
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}") from None
    return cls(num_classes, in_channels=in_channels, input_size=input_size, **kwargs)


def forward_with_taps(model, x):
    return model.forward_with_taps(x)


def clone_frozen(model):
    """Deep copy of ``model`` with gradients disabled and BN locked in eval mode."""
    sibling = copy.deepcopy(model)
    sibling.frozen = True
    sibling.eval()
    for p in sibling.parameters():
        p.requires_grad_(False)
    return sibling


def parameter_checksum(model):
    """SHA-256 over every parameter and buffer (names included)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class SiblingPair:
    """Trainable student plus the frozen pretrained sibling it started from."""

    def __init__(self, student, sibling=None):
        self.student = student
        self.sibling = sibling if sibling is not None else clone_frozen(student)
        if student.tap_shapes() != self.sibling.tap_shapes():
            raise ValueError("student and sibling tap shapes differ")

    def sibling_checksum(self):
        return parameter_checksum(self.sibling)


# ---------------------------------------------------------------------------
# pretraining

def pretrain_supervised(model, dataset, epochs, lr=0.1, batch_size=64, momentum=0.9,
                        weight_decay=5e-4, augment=None, seed=0, probe_size=256):
    """Supervised training on a pretraining ImageSet; returns a state dict.

    ``dataset`` labels must index ``model``'s classifier.  With ``epochs=0``
    the (random) initial weights are returned unchanged.  A NaN loss aborts
    with NonFiniteLossError.
    """
    if int(dataset.labels.max()) >= model.num_classes:
        raise ConfigError(
            f"dataset has labels up to {int(dataset.labels.max())} but the classifier has "
            f"{model.num_classes} outputs"
        )
    gen = torch.Generator().manual_seed(seed)
    if epochs <= 0:
        return copy.deepcopy(model.state_dict())
    probe_idx = torch.randperm(len(dataset), generator=gen)[:probe_size]
    before = probe_loss(model, dataset, probe_idx)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs * steps_per_epoch)
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(dataset), generator=gen)
        for step in range(steps_per_epoch):
            idx = perm[step * batch_size:(step + 1) * batch_size]
            x, y = dataset.batch(idx, augment, gen)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"pretraining diverged at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        log.info("pretrain epoch %d loss %.4f", epoch, loss.item())
    after = probe_loss(model, dataset, probe_idx)
    log.info("pretrain probe loss %.4f -> %.4f", before, after)
    if not after < before:
        log.warning("pretraining did not lower the probe loss (%.4f -> %.4f)", before, after)
    return copy.deepcopy(model.state_dict())


@torch.no_grad()
def probe_loss(model, dataset, idx):
    was_training = model.training
    model.eval()
    x, y = dataset.batch(idx)
    loss = F.cross_entropy(model(x), y).item()
    model.train(was_training)
    return loss


@torch.no_grad()
def accuracy(model, dataset, batch_size=256):
    was_training = model.training
    model.eval()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x, y = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        correct += (model(x).argmax(1) == y).sum().item()
    model.train(was_training)
    return correct / max(1, len(dataset))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, arch, pretrain_dataset=None, extra=None):
    payload = {
        "arch": arch,
        "arch_kwargs": _arch_kwargs(model),
        "num_classes": model.num_classes,
        "in_channels": model.in_channels,
        "input_size": model.input_size,
        "tap_shapes": model.tap_shapes(),
        "pretrain_dataset": pretrain_dataset,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def _arch_kwargs(model):
    if isinstance(model, ResNet18):
        return {"nf": model.nf}
    if isinstance(model, DeskCNN):
        return {"widths": list(model.widths)}
    return {}


def load_checkpoint(path, model=None):
    """Load a checkpoint, rebuilding the model if none is given.

    Raises ValueError when the stored tap shapes disagree with the model.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if model is None:
        model = build_backbone(payload["arch"], payload["num_classes"], payload["in_channels"],
                               payload["input_size"], **payload["arch_kwargs"])
    stored = [tuple(s) for s in payload["tap_shapes"]]
    if model.tap_shapes() != stored:
        raise ValueError(f"checkpoint tap shapes {stored} do not match model {model.tap_shapes()}")
    model.load_state_dict(payload["state_dict"])
    return model, payload
