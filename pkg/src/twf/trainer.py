"""Continual training loops for TwF and the baselines, plus evaluation."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .analysis import AccuracyMatrix, faa, ff
from .attention import build_gates
from .backbone import parameter_checksum
from .buffer import ReservoirBuffer, collate, make_item, mix_pretrain_rehearsal
from .errors import ConfigError, NonFiniteLossError
from .losses import (
    LossWeights,
    aux_diversity_loss,
    cl_replay_loss,
    estimate_fisher_diag,
    estimate_margins,
    ewc_penalty,
    fp_loss,
    total_objective,
    zero_margins,
)

log = logging.getLogger(__name__)

METHODS = ("twf", "finetune", "joint", "er", "derpp", "derpp_ewc", "lwf", "oewc")
BUFFER_METHODS = ("twf", "er", "derpp", "derpp_ewc")


@dataclass
class TrainerConfig:
    method: str = "twf"
    epochs_per_task: int = 5
    batch_size: int = 32
    replay_batch_size: int | None = None
    lr: float = 0.03
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_decay: float = 1.0
    lr_decay_steps: tuple = ()
    weights: LossWeights = field(default_factory=LossWeights)
    buffer_size: int = 0
    seed: int = 0
    pretrain_rehearsal_fraction: float = 0.0
    gumbel_temperature: float = 1.0
    margin_mode: str = "negative_mean"   # or "zero"
    aux_masks: str = "soft"              # masks fed to the diversity term: "soft" or "hard"
    refresh_margins: bool = False
    oewc_gamma: float = 1.0
    lwf_alpha: float = 0.0
    lwf_tau: float = 2.0
    fisher_batches: int = 10
    fisher_batch_size: int = 32

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.lr_decay_steps = tuple(self.lr_decay_steps or ())
        if self.replay_batch_size is None:
            self.replay_batch_size = self.batch_size
        problems = validate_trainer_config(self)
        if problems:
            raise ConfigError("; ".join(problems))


def validate_trainer_config(cfg):
    problems = []
    if cfg.method not in METHODS:
        problems.append(f"method {cfg.method!r} unknown; valid methods: {', '.join(METHODS)}")
    if cfg.epochs_per_task <= 0:
        problems.append("epochs_per_task must be positive")
    if cfg.batch_size <= 0 or cfg.replay_batch_size <= 0:
        problems.append("batch sizes must be positive")
    if cfg.buffer_size < 0:
        problems.append("buffer_size must be non-negative")
    if not 0.0 <= cfg.pretrain_rehearsal_fraction <= 1.0:
        problems.append(f"pretrain_rehearsal_fraction {cfg.pretrain_rehearsal_fraction} out of range [0,1]")
    elif cfg.pretrain_rehearsal_fraction > 0 and cfg.method not in ("er", "derpp", "derpp_ewc"):
        problems.append("pretraining rehearsal is only available for er, derpp and derpp_ewc")
    if cfg.aux_masks not in ("soft", "hard"):
        problems.append(f"aux_masks {cfg.aux_masks!r} must be 'soft' or 'hard'")
    if cfg.margin_mode not in ("negative_mean", "zero"):
        problems.append(f"margin_mode {cfg.margin_mode!r} must be 'negative_mean' or 'zero'")
    if not cfg.gumbel_temperature > 0:
        problems.append("gumbel_temperature must be positive")
    if cfg.lr <= 0:
        problems.append("lr must be positive")
    return problems


def _num(v):
    return v.item() if torch.is_tensor(v) else float(v)


# ---------------------------------------------------------------------------
# learners

class Learner:
    """One continual-learning method.  ``observe`` performs one optimiser step."""

    uses_buffer = False

    def __init__(self, pair, config, stream, pretrain=None):
        self.pair = pair
        self.model = pair.student
        self.config = config
        self.stream = stream
        self.pretrain = pretrain
        self.buffer = None
        self.np_rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        if self.uses_buffer:
            self.buffer = self._make_buffer()

    def _make_buffer(self):
        return ReservoirBuffer(self.config.buffer_size)

    def parameters(self):
        return list(self.model.parameters())

    def begin_task(self, task):
        pass

    def end_task(self, task):
        pass

    def observe(self, x, y, task, opt):
        raise NotImplementedError

    def _step(self, loss, opt):
        opt.zero_grad()
        loss.backward()
        opt.step()

    def side_generator(self, tag):
        """Generator for auxiliary sampling that must not shift the data order."""
        seed = int(np.random.SeedSequence([self.config.seed, tag]).generate_state(1)[0])
        return torch.Generator().manual_seed(seed)

    def _replay(self):
        if self.buffer is None or self.buffer.is_empty():
            return []
        return self.buffer.sample(self.config.replay_batch_size, self.np_rng)


class Finetune(Learner):
    def observe(self, x, y, task, opt):
        ce = F.cross_entropy(self.model(x), y)
        loss = total_objective(ce, 0.0, 0.0, 0.0)
        self._step(loss, opt)
        return {"stream_ce": ce.item()}


class ReplayLearner(Learner):
    """Shared ER / DER++ step: CE on the stream plus logits and label replay."""

    uses_buffer = True
    alpha_beta = None

    def __init__(self, pair, config, stream, pretrain=None):
        self.pretrain_head = None
        super().__init__(pair, config, stream, pretrain)

    def _make_buffer(self):
        frac = self.config.pretrain_rehearsal_fraction
        if frac == 0:
            return ReservoirBuffer(self.config.buffer_size)
        if self.pretrain is None:
            raise ConfigError("pretraining rehearsal needs the pretraining dataset")
        # the pretrained classifier is kept as an auxiliary head for replayed source items
        self.pretrain_head = copy.deepcopy(self.pair.sibling.classifier)
        self.pretrain_head.requires_grad_(True)
        return mix_pretrain_rehearsal(self.config.buffer_size, frac, self._pretrain_items(),
                                      self.np_rng)

    def _pretrain_items(self):
        data = self.pretrain.train
        order = torch.randperm(len(data), generator=self.side_generator(0))
        sibling = self.pair.sibling
        for start in range(0, len(order), 256):
            idx = order[start:start + 256]
            x, y = data.batch(idx)
            with torch.no_grad():
                logits = sibling(x)
            for i in range(len(idx)):
                yield make_item(x[i], y[i], logits[i], -1, source="pretrain")

    def parameters(self):
        params = list(self.model.parameters())
        if self.pretrain_head is not None:
            params += list(self.pretrain_head.parameters())
        return params

    def weights(self):
        w = self.config.weights
        return (w.alpha, w.beta) if self.alpha_beta is None else self.alpha_beta

    def regulariser(self):
        return 0.0

    def observe(self, x, y, task, opt):
        n = len(x)
        items = self._replay()
        stream_items = [it for it in items if it.source == "stream"]
        source_items = [it for it in items if it.source == "pretrain"]
        xs = [x] + [collate(group)[0] for group in (stream_items, source_items) if group]
        feats, _ = self.model.embed(torch.cat(xs))
        logits = self.model.classifier(feats)
        ce = F.cross_entropy(logits[:n], y)
        alpha, beta = self.weights()
        l_cl = logits.new_zeros(())
        if stream_items:
            _, yr, lr, _, _ = collate(stream_items)
            l_cl = l_cl + cl_replay_loss(logits[n:n + len(stream_items)], lr, yr, alpha, beta)
        if source_items:
            _, yp, lp, _, _ = collate(source_items)
            src_logits = self.pretrain_head(feats[n + len(stream_items):])
            l_cl = l_cl + cl_replay_loss(src_logits, lp, yp, alpha, beta)
        reg = self.regulariser()
        loss = total_objective(ce, l_cl, 0.0, 0.0, reg)
        self._step(loss, opt)
        for i in range(n):
            self.buffer.add(make_item(x[i], y[i], logits[i], task), self.np_rng)
        return {"stream_ce": ce.item(), "l_cl": _num(l_cl), "reg": _num(reg)}


class ER(ReplayLearner):
    alpha_beta = (0.0, 1.0)


class DERpp(ReplayLearner):
    pass


class DERppEwC(DERpp):
    """DER++ anchored to the pretraining weights by a diagonal-Fisher penalty."""

    def __init__(self, pair, config, stream, pretrain=None):
        super().__init__(pair, config, stream, pretrain)
        if pretrain is None:
            raise ConfigError("derpp_ewc needs the pretraining dataset to estimate the Fisher")
        sibling = pair.sibling
        names = [n for n, _ in sibling.feature_parameters()]
        self.anchor = {n: p.detach().clone() for n, p in sibling.feature_parameters()}
        self.fisher = estimate_fisher_diag(
            sibling, _batches(pretrain.train, config.fisher_batch_size, self.side_generator(2)),
            config.fisher_batches, params=names)

    def regulariser(self):
        if not self.config.weights.ewc_lambda:
            return 0.0
        theta = dict(self.model.feature_parameters())
        return ewc_penalty(theta, self.anchor, self.fisher, self.config.weights.ewc_lambda)


class OnlineEwC(Learner):
    """Online EWC: Fisher accumulated with decay gamma at every task boundary."""

    def __init__(self, pair, config, stream, pretrain=None):
        super().__init__(pair, config, stream, pretrain)
        self.fisher = None
        self.anchor = None

    def penalty(self):
        if self.fisher is None:
            return 0.0
        theta = dict(self.model.named_parameters())
        return ewc_penalty(theta, self.anchor, self.fisher, self.config.weights.ewc_lambda)

    def observe(self, x, y, task, opt):
        ce = F.cross_entropy(self.model(x), y)
        reg = self.penalty()
        loss = total_objective(ce, 0.0, 0.0, 0.0, reg)
        self._step(loss, opt)
        return {"stream_ce": ce.item(), "reg": _num(reg)}

    def end_task(self, task):
        data = self.stream.train.subset(self.stream.tasks[task].train_idx)
        new = estimate_fisher_diag(self.model, _batches(data, self.config.fisher_batch_size, self.side_generator(3 + task)),
                                   self.config.fisher_batches)
        if self.fisher is None:
            self.fisher = new
        else:
            self.fisher = {n: self.config.oewc_gamma * f + new[n] for n, f in self.fisher.items()}
        self.anchor = {n: p.detach().clone() for n, p in self.model.named_parameters()}


class LwF(Learner):
    """Distils the previous-boundary model's responses on past classes."""

    def __init__(self, pair, config, stream, pretrain=None):
        super().__init__(pair, config, stream, pretrain)
        self.old = None
        self.old_classes = []

    def observe(self, x, y, task, opt):
        logits = self.model(x)
        ce = F.cross_entropy(logits, y)
        kd = logits.new_zeros(())
        if self.old is not None and self.config.lwf_alpha:
            with torch.no_grad():
                target = self.old(x)[:, self.old_classes]
            tau = self.config.lwf_tau
            kd = F.kl_div(F.log_softmax(logits[:, self.old_classes] / tau, 1),
                          F.softmax(target / tau, 1), reduction="batchmean") * tau ** 2
            kd = self.config.lwf_alpha * kd
        loss = total_objective(ce, 0.0, 0.0, 0.0, kd)
        self._step(loss, opt)
        return {"stream_ce": ce.item(), "kd": _num(kd)}

    def end_task(self, task):
        self.old = copy.deepcopy(self.model).eval()
        for p in self.old.parameters():
            p.requires_grad_(False)
        self.old_classes = sorted(c for t in self.stream.tasks[: task + 1] for c in t.classes)


class TwF(Learner):
    """Sibling feature propagation through task-conditioned binary gates plus logits replay."""

    uses_buffer = True

    def __init__(self, pair, config, stream, pretrain=None):
        super().__init__(pair, config, stream, pretrain)
        shapes = self.model.tap_shapes()
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.gates = build_gates(shapes, 1, config.gumbel_temperature)
        self.margins = zero_margins(shapes)
        # gate noise has its own stream so data order matches the other methods
        self.noise_gen = self.side_generator(1)
        w = config.weights
        self.use_gates = bool(w.lambda_fp or w.lambda_fp_replay or w.lambda_aux)

    def parameters(self):
        params = list(self.model.parameters())
        if self.use_gates:
            params += list(self.gates.parameters())
        return params

    def begin_task(self, task):
        for gate in self.gates:
            gate.ensure_tasks(task + 1)
        if self.config.margin_mode == "negative_mean" and (task == 0 or self.config.refresh_margins):
            data = self.stream.train.subset(self.stream.tasks[task].train_idx)
            self.margins = estimate_margins(self.pair.sibling,
                                            (x for x, _ in _batches(data, 256, None)))
        self.gates.train()

    def observe(self, x, y, task, opt):
        cfg, w = self.config, self.config.weights
        n = len(x)
        items = self._replay()
        m = len(items)
        if m:
            xr, yr, lr, tr, mr = collate(items)
            x_all = torch.cat([x, xr])
            t_all = torch.cat([torch.full((n,), task, dtype=torch.long), tr])
        else:
            x_all, t_all, mr = x, torch.full((n,), task, dtype=torch.long), None
        logits, taps = self.model.forward_with_taps(x_all)
        with torch.no_grad():
            _, sib_taps = self.pair.sibling.forward_with_taps(x_all)
        ce = F.cross_entropy(logits[:n], y)
        l_cl = cl_replay_loss(logits[n:], lr, yr, w.alpha, w.beta) if m else logits.new_zeros(())
        masks = None
        l_fp = l_aux = logits.new_zeros(())
        if self.use_gates:
            masks = [gate(h, t_all, train_mode=True, generator=self.noise_gen)
                     for gate, h in zip(self.gates, sib_taps)]
            stored = mr if (m and mr is not None) else None
            l_fp = fp_loss(taps, sib_taps, masks, self.margins, stored, m if stored else 0,
                           w.lambda_fp, w.lambda_fp_replay)
            if w.lambda_aux and n >= 2:
                # soft probabilities never pool to an exactly-zero vector, where the
                # diversity term and its gradient both vanish
                which = [mk.soft[:n] if cfg.aux_masks == "soft" else mk.hard[:n] for mk in masks]
                l_aux = aux_diversity_loss(which, w.temperature_aux, w.lambda_aux)
        loss = total_objective(ce, l_cl, l_fp, l_aux)
        self._step(loss, opt)
        for i in range(n):
            item_masks = [mk.hard[i] for mk in masks] if masks is not None else ()
            self.buffer.add(make_item(x[i], y[i], logits[i], task, item_masks), self.np_rng)
        out = {"stream_ce": ce.item(), "l_cl": l_cl.item(), "l_fp": l_fp.item(), "l_aux": l_aux.item()}
        if masks is not None:
            out["mask_density"] = [mk.hard[:n].mean().item() for mk in masks]
        return out


LEARNERS = {
    "twf": TwF, "finetune": Finetune, "joint": Finetune, "er": ER, "derpp": DERpp,
    "derpp_ewc": DERppEwC, "lwf": LwF, "oewc": OnlineEwC,
}


def make_learner(pair, config, stream, pretrain=None):
    try:
        cls = LEARNERS[config.method]
    except KeyError:
        raise ConfigError(f"unknown method {config.method!r}; valid methods: {', '.join(METHODS)}") from None
    return cls(pair, config, stream, pretrain)


def _batches(data, batch_size, gen):
    order = torch.randperm(len(data), generator=gen) if gen is not None else torch.arange(len(data))
    for start in range(0, len(order), batch_size):
        yield data.batch(order[start:start + batch_size])


# ---------------------------------------------------------------------------
# loops

def train_task(learner, task, log_sink=None):
    """Run ``epochs_per_task`` epochs of ``learner`` over task ``task`` of its stream."""
    cfg = learner.config
    stream = learner.stream
    data_idx = torch.as_tensor(stream.tasks[task].train_idx)
    learner.begin_task(task)
    learner.model.train()
    opt = torch.optim.SGD(learner.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.lr_decay_steps), cfg.lr_decay)
    steps = math.ceil(len(data_idx) / cfg.batch_size)
    for epoch in range(cfg.epochs_per_task):
        perm = data_idx[torch.randperm(len(data_idx), generator=learner.gen)]
        for step in range(steps):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x, y = stream.train.batch(idx, stream.augment, learner.gen)
            try:
                terms = learner.observe(x, y, task, opt)
            except NonFiniteLossError as exc:
                ctx = {"task": task, "epoch": epoch, "step": step, **exc.context}
                raise NonFiniteLossError(f"{exc} (task {task}, epoch {epoch}, step {step})", ctx) from exc
            if log_sink is not None:
                log_sink({"task": task, "epoch": epoch, "step": step, **terms})
        sched.step()
    learner.end_task(task)


@torch.no_grad()
def evaluate(model, stream, upto=None, batch_size=256):
    """Per-task ``(class_il, task_il)`` accuracies for tasks ``0..upto``.

    Class-IL takes the argmax over every class logit; Task-IL restricts it
    to the test item's own task classes.
    """
    upto = stream.num_tasks - 1 if upto is None else upto
    was_training = model.training
    model.eval()
    class_il, task_il = [], []
    for task in stream.tasks[: upto + 1]:
        allowed = torch.zeros(model.num_classes, dtype=torch.bool)
        allowed[list(task.classes)] = True
        hit_c = hit_t = 0
        for start in range(0, len(task.test_idx), batch_size):
            x, y = stream.test.batch(task.test_idx[start:start + batch_size])
            logits = model(x)
            hit_c += (logits.argmax(1) == y).sum().item()
            masked = logits.masked_fill(~allowed, float("-inf"))
            hit_t += (masked.argmax(1) == y).sum().item()
        total = max(1, len(task.test_idx))
        if hit_t < hit_c:
            raise AssertionError(f"Task-IL accuracy below Class-IL on task {task.index}")
        class_il.append(hit_c / total)
        task_il.append(hit_t / total)
    model.train(was_training)
    return class_il, task_il


def evaluate_protocol(model, stream, protocol, upto=None):
    class_il, task_il = evaluate(model, stream, upto)
    if protocol == "class_il":
        return class_il
    if protocol == "task_il":
        return task_il
    raise ValueError(f"protocol must be 'class_il' or 'task_il', got {protocol!r}")


@dataclass
class RunResult:
    model: nn.Module
    class_il: AccuracyMatrix
    task_il: AccuracyMatrix
    logs: list
    learner: Learner
    snapshots: list
    sibling_checksum_before: str
    sibling_checksum_after: str

    def metrics(self):
        out = {}
        for name, matrix in (("class_il", self.class_il), ("task_il", self.task_il)):
            out[name] = {"faa": faa(matrix), "ff": _safe_ff(matrix), "matrix": matrix.to_list()}
        return out


def _safe_ff(matrix):
    try:
        return ff(matrix)
    except ValueError:
        return None


def run_continual(stream, pair, config, pretrain=None, log_path=None, keep_snapshots=False):
    """Train ``pair.student`` over every task of ``stream`` with ``config.method``.

    After each task both protocols are evaluated on all tasks seen so far.
    ``joint`` trains once on the union of the tasks and fills only the final
    column (its forgetting is reported as undefined).
    """
    torch.manual_seed(config.seed)
    before = parameter_checksum(pair.sibling)
    logs = []
    fh = open(log_path, "w") if log_path else None

    def sink(record):
        logs.append(record)
        if fh is not None:
            fh.write(json.dumps(record) + "\n")

    T = stream.num_tasks
    class_m, task_m = AccuracyMatrix(T), AccuracyMatrix(T)
    snapshots = []
    train_stream = stream.joint() if config.method == "joint" else stream
    learner = make_learner(pair, config, train_stream, pretrain)
    try:
        for task in range(train_stream.num_tasks):
            train_task(learner, task, sink)
            if keep_snapshots:
                snapshots.append(copy.deepcopy(pair.student.state_dict()))
            if config.method == "joint":
                c_acc, t_acc = evaluate(pair.student, stream)
                class_m.record_column(T - 1, c_acc)
                task_m.record_column(T - 1, t_acc)
            else:
                c_acc, t_acc = evaluate(pair.student, stream, upto=task)
                class_m.record_column(task, c_acc)
                task_m.record_column(task, t_acc)
            log.info("%s task %d class-il %s task-il %s", config.method, task,
                     np.round(c_acc, 3).tolist(), np.round(t_acc, 3).tolist())
    finally:
        if fh is not None:
            fh.close()
    after = parameter_checksum(pair.sibling)
    return RunResult(pair.student, class_m, task_m, logs, learner, snapshots, before, after)


def trainer_config_from_dict(d):
    """Build a TrainerConfig from a flat dict, ignoring unknown keys."""
    names = {f.name for f in fields(TrainerConfig)}
    return TrainerConfig(**{k: v for k, v in d.items() if k in names})
