"""Objective terms.

Reduction convention everywhere: sum over feature / logit / mask elements,
mean over the batch, sum over tap layers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteLossError

BCE_CLAMP = 1e-6


@dataclass
class LossWeights:
    alpha: float = 0.0            # logits replay
    beta: float = 0.0             # label replay
    lambda_aux: float = 0.0       # diversity
    lambda_fp: float = 0.0        # masked feature propagation
    lambda_fp_replay: float = 0.0  # stored-mask BCE
    temperature_aux: float = 1.0
    ewc_lambda: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_aux", "lambda_fp", "lambda_fp_replay", "ewc_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.temperature_aux > 0:
            raise ValueError("temperature_aux must be positive")


def margin_relu(x, margins):
    """Per-channel ``max(x, m_c)``; ``margins`` has one entry per channel (dim 1)."""
    margins = torch.as_tensor(margins, dtype=x.dtype, device=x.device)
    if margins.dim() == 0:
        margins = margins.expand(x.shape[1])
    if margins.numel() != x.shape[1]:
        raise ValueError(f"{margins.numel()} margins for {x.shape[1]} channels")
    return torch.maximum(x, margins.view((1, -1) + (1,) * (x.dim() - 2)))


@torch.no_grad()
def estimate_margins(sibling, batches):
    """Per-channel mean of the negative tap responses, one tensor per tap layer.

    Channels that never respond negatively get a zero margin.
    """
    sums, counts = None, None
    for x in batches:
        _, taps = sibling.forward_with_taps(x)
        if sums is None:
            sums = [torch.zeros(t.shape[1], dtype=torch.float64) for t in taps]
            counts = [torch.zeros(t.shape[1], dtype=torch.float64) for t in taps]
        for l, t in enumerate(taps):
            neg = t.clamp(max=0).double()
            sums[l] += neg.sum(dim=(0, 2, 3))
            counts[l] += (t < 0).double().sum(dim=(0, 2, 3))
    if sums is None:
        raise ValueError("no batches to estimate margins from")
    return [torch.where(c > 0, s / c.clamp(min=1), torch.zeros_like(s)).float()
            for s, c in zip(sums, counts)]


def zero_margins(tap_shapes):
    return [torch.zeros(c) for c, _, _ in tap_shapes]


def masked_feature_distillation(h, h_hat, hard_mask, margins):
    """Batch mean of ``sum(|mask * (h - margin_relu(h_hat))|^2)``."""
    if h.shape != h_hat.shape or h.shape != hard_mask.shape:
        raise ValueError(f"shape mismatch: {tuple(h.shape)}, {tuple(h_hat.shape)}, {tuple(hard_mask.shape)}")
    if h.shape[0] == 0:
        return h.new_zeros(())
    residual = hard_mask * (h - margin_relu(h_hat, margins))
    return residual.pow(2).flatten(1).sum(1).mean()


def mask_bce(soft, stored):
    """Batch mean of the summed BCE between gate probabilities and stored 0/1 masks."""
    if soft.shape != stored.shape:
        raise ValueError(f"soft mask {tuple(soft.shape)} vs stored {tuple(stored.shape)}")
    if soft.shape[0] == 0:
        return soft.new_zeros(())
    p = soft.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    bce = F.binary_cross_entropy(p, stored.to(p.dtype), reduction="none")
    return bce.flatten(1).sum(1).mean()


def fp_loss(student_taps, sibling_taps, masks, margins, stored_masks=None, num_replay=0,
            lambda_fp=1.0, lambda_fp_replay=1.0):
    """Feature-propagation objective over a batch laid out as [current | replay].

    ``masks`` are the MaskPairs freshly sampled for the whole batch with each
    example's own task; ``stored_masks[l]`` holds the replay items' stored
    layer-``l`` masks at tap resolution.
    """
    total = student_taps[0].new_zeros(())
    if lambda_fp:
        first = sum(masked_feature_distillation(h, h_hat, m.hard, mg)
                    for h, h_hat, m, mg in zip(student_taps, sibling_taps, masks, margins))
        total = total + lambda_fp * first
    if num_replay and lambda_fp_replay:
        if stored_masks is None or len(stored_masks) != len(masks):
            raise ValueError("replay items are missing stored masks")
        second = sum(mask_bce(m.soft[-num_replay:], s) for m, s in zip(masks, stored_masks))
        total = total + lambda_fp_replay * second
    return total


def pooled_mask_vectors(mask):
    """L2-normalised channel-wise average activity, shape (n, c)."""
    return F.normalize(mask.mean(dim=(2, 3)), dim=1)


def aux_diversity_loss(masks, temperature=1.0, lambda_aux=1.0):
    """Diversity term over per-layer masks for one batch of n >= 2 examples.

    ``-lambda * sum_l sum_j log(exp(g_j.g_j / T) / mean_k exp(g_j.g_k / T))``
    with ``g`` the normalised pooled masks.  Never positive; zero when all
    pooled vectors coincide.
    """
    total = None
    for mask in masks:
        n = mask.shape[0]
        if n < 2:
            raise ValueError("diversity loss needs at least two examples")
        g = pooled_mask_vectors(mask)
        sim = g @ g.t() / temperature
        log_ratio = sim.diagonal() - (torch.logsumexp(sim, dim=1) - math.log(n))
        term = log_ratio.sum()
        total = term if total is None else total + term
    return -lambda_aux * total


def cl_replay_loss(model_logits, stored_logits, labels, alpha, beta):
    """``alpha * mean ||f(x) - l||^2 + beta * CE(y, f(x))`` over a replay batch."""
    if model_logits.shape != stored_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(model_logits.shape)} vs {tuple(stored_logits.shape)}")
    if model_logits.shape[0] == 0:
        return model_logits.new_zeros(())
    loss = model_logits.new_zeros(())
    if alpha:
        loss = loss + alpha * (model_logits - stored_logits).pow(2).sum(1).mean()
    if beta:
        loss = loss + beta * F.cross_entropy(model_logits, labels)
    return loss


def classification_nll(output, target):
    return F.cross_entropy(output, target, reduction="none")


def estimate_fisher_diag(model, batches, num_batches=None, nll=classification_nll, params=None):
    """Diagonal empirical Fisher: mean over examples of squared per-example gradients.

    ``batches`` yields ``(x, y)``; ``nll(output, y)`` returns per-example
    negative log-likelihoods.  ``params`` optionally restricts the estimate to
    a list of parameter names.  Returns ``{name: tensor}``.
    """
    from torch.func import functional_call, grad, vmap

    named = dict(model.named_parameters())
    names = list(params) if params is not None else [n for n, p in named.items() if p.requires_grad]
    frozen = {n: p.detach() for n, p in named.items() if n not in names}
    buffers = dict(model.named_buffers())

    def example_nll(trainable, x, y):
        out = functional_call(model, ({**frozen, **trainable}, buffers), (x[None],))
        return nll(out, y[None]).sum()

    per_example = vmap(grad(example_nll), in_dims=(None, 0, 0))
    fisher = {n: torch.zeros_like(named[n]) for n in names}
    seen = 0
    was_training = model.training
    model.eval()
    for b, (x, y) in enumerate(batches):
        if num_batches is not None and b >= num_batches:
            break
        grads = per_example({n: named[n].detach() for n in names}, x, y)
        for n in names:
            fisher[n] += grads[n].pow(2).sum(0)
        seen += len(x)
    model.train(was_training)
    if seen == 0:
        raise ValueError("cannot estimate the Fisher information from an empty dataset")
    return {n: f / seen for n, f in fisher.items()}


def ewc_penalty(theta, theta_t, fisher_diag, ewc_lambda):
    """``lambda * sum_p F_p (theta_p - theta_t_p)^2``; accepts tensors or name-keyed dicts."""
    if isinstance(theta, dict):
        keys = list(fisher_diag)
        total = None
        for k in keys:
            term = ewc_penalty(theta[k], theta_t[k], fisher_diag[k], 1.0)
            total = term if total is None else total + term
        return ewc_lambda * total if total is not None else torch.zeros(())
    if theta.shape != theta_t.shape or theta.shape != fisher_diag.shape:
        raise ValueError("theta, theta_t and fisher_diag must share a shape")
    return ewc_lambda * (fisher_diag * (theta - theta_t).pow(2)).sum()


def total_objective(stream_ce, l_cl, l_fp, l_aux, reg=0.0):
    """Sum of the terms (``reg`` carries baseline regularisers such as EwC or LwF).

    Any non-finite term aborts naming the culprit.
    """
    terms = {"stream_ce": stream_ce, "l_cl": l_cl, "l_fp": l_fp, "l_aux": l_aux, "reg": reg}
    for name, value in terms.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLossError(f"loss term {name} is not finite ({float(torch.as_tensor(value).detach())})", {"term": name})
    return stream_ce + l_cl + l_fp + l_aux + reg
