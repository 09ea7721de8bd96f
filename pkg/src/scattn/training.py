"""End-to-end optimization: teacher-forced cross-entropy under Adadelta.

The reference path is single-threaded and bit-deterministic for a fixed
seed. Setting threads > 1 (or the SCA_THREADS environment variable for the
CLI) evaluates per-example gradients concurrently, each on its own graph,
and reduces them in example order, so the result is identical to the
single-threaded run.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import decode_caption
from .errors import ConfigError, DimensionError, DomainError, TrainingDiverged
from .tensor import Tensor
from .vocab import PAD


def cross_entropy_loss(p_seq, targets):
    """Mean over non-PAD positions of -log p_t[target_t]."""
    if len(p_seq) != len(targets):
        raise DimensionError(
            f"cross_entropy_loss: {len(p_seq)} distributions vs {len(targets)} targets"
        )
    terms = [
        T.neg(T.log_map(T.pick(p, y)))
        for p, y in zip(p_seq, targets)
        if y != PAD
    ]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.div_scalar(total, float(len(terms)))


def dropout_mask(shape, rate, rng, train=True):
    """Inverted dropout mask: zeros with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return Tensor(np.ones(shape))
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))


class AdadeltaState:
    """Running averages of squared gradients and squared updates per parameter."""

    def __init__(self, params, rho=0.95, epsilon=1e-6):
        if not 0.0 <= rho < 1.0:
            raise ConfigError(f"rho must be in [0, 1), got {rho}")
        if epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {epsilon}")
        self.rho = rho
        self.epsilon = epsilon
        self.eg2 = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.edx2 = {name: np.zeros_like(t.data) for name, t in params.items()}


def adadelta_update(params, grads, state):
    """Apply one accumulator-scaled step to every parameter, in name order."""
    rho, eps = state.rho, state.epsilon
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"adadelta_update: grad shape {g.shape} != param {p.data.shape} for {name}")
        eg2 = state.eg2[name]
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        dx = -np.sqrt(state.edx2[name] + eps) / np.sqrt(eg2 + eps) * g
        edx2 = state.edx2[name]
        edx2 *= rho
        edx2 += (1.0 - rho) * dx * dx
        p.data += dx


def early_stop_check(val_history, patience):
    """True once the best (first-reached) value is more than ``patience`` entries old."""
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    if not val_history:
        return False
    best = int(np.argmin(val_history))
    return (len(val_history) - 1 - best) >= patience


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    dropout: float = 0.5
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class TrainResult:
    history: list           # rows of (epoch, train_loss, val_loss)
    best_epoch: int
    best_val: float
    best_state: dict        # checkpoint entries at the best validation epoch
    fresh_names: list = field(default_factory=list)  # params a warm start did not cover


def _example_pass(model, image, caption_ids, masks):
    ps, targets = model.teacher_forced(image, caption_ids, drop_masks=masks)
    loss = cross_entropy_loss(ps, targets)
    grads = T.backward(loss, into={})
    return float(loss.data), grads


def _eval_loss(model, examples):
    if not examples:
        return float("nan")
    total = 0.0
    with T.no_grad():
        for ex in examples:
            ps, targets = model.teacher_forced(ex.image_tensor(), ex.token_ids)
            total += float(cross_entropy_loss(ps, targets).data)
    return total / len(examples)


def train(dataset, model, cfg, warm_start=None):
    """Optimize the model on dataset.train, validating on dataset.val.

    ``warm_start`` is a checkpoint entry dict; parameters with matching
    names and shapes are copied in, the rest keep their fresh
    initialization. The model is left at its best-validation state.
    """
    train_set = list(dataset.train)
    val_set = list(dataset.val)
    if not train_set:
        raise ConfigError("empty training split")
    fresh = model.load_matching(warm_start) if warm_start is not None else []

    params = model.parameters()
    tensor_to_name = {id(t): n for n, t in params.items()}
    opt = AdadeltaState(params)
    rng = np.random.default_rng(cfg.seed)
    hidden = model.config.hidden_dim

    history = []
    val_losses = []
    best = TrainResult(history=history, best_epoch=-1, best_val=math.inf,
                       best_state={}, fresh_names=fresh)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(len(train_set))
            epoch_loss = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                # masks are drawn sequentially in batch order so threaded and
                # single-threaded runs consume the stream identically
                jobs = []
                for ex in batch:
                    n_steps = len(ex.token_ids) + 1
                    masks = [dropout_mask(hidden, cfg.dropout, rng) for _ in range(n_steps)]
                    jobs.append((ex.image_tensor(), ex.token_ids, masks))
                if pool is not None:
                    results = list(pool.map(
                        lambda j: _example_pass(model, *j), jobs
                    ))
                else:
                    results = [_example_pass(model, *j) for j in jobs]
                acc = {}
                for loss_val, grads in results:  # fixed example order
                    if not math.isfinite(loss_val):
                        raise TrainingDiverged(
                            f"non-finite training loss at epoch {epoch}"
                        )
                    epoch_loss += loss_val
                    for t, g in grads.items():
                        name = tensor_to_name.get(id(t))
                        if name is None:
                            continue
                        if name in acc:
                            acc[name] += g
                        else:
                            acc[name] = g.copy()
                scale = 1.0 / len(batch)
                for name in acc:
                    acc[name] *= scale
                adadelta_update(params, acc, opt)
            train_loss = epoch_loss / len(train_set)
            val_loss = _eval_loss(model, val_set) if val_set else train_loss
            if not math.isfinite(val_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            history.append((epoch, train_loss, val_loss))
            val_losses.append(val_loss)
            if val_loss < best.best_val:
                best.best_val = val_loss
                best.best_epoch = epoch
                best.best_state = model.state_entries()
                best.best_state = {k: v.copy() for k, v in best.best_state.items()}
            if early_stop_check(val_losses, cfg.patience):
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if best.best_state:
        model.load_matching(best.best_state)
    return model, best


def next_token_accuracy(model, examples):
    """Teacher-forced argmax accuracy over all steps of all examples."""
    hits = 0
    total = 0
    with T.no_grad():
        for ex in examples:
            ps, targets = model.teacher_forced(ex.image_tensor(), ex.token_ids)
            for p, y in zip(ps, targets):
                if y == PAD:
                    continue
                total += 1
                if int(np.argmax(p.data)) == y:
                    hits += 1
    return hits / total if total else 0.0


def exact_match_rate(model, examples, width=5, max_len=16):
    """Fraction of examples whose decoded caption equals the reference exactly."""
    if not examples:
        return 0.0
    hits = 0
    for ex in examples:
        tokens, _ = decode_caption(model, ex.image_tensor(), mode="beam",
                                   width=width, max_len=max_len)
        if tokens == list(ex.token_ids):
            hits += 1
    return hits / len(examples)
