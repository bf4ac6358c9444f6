"""Training loop: optimizers, multi-domain strategies, divergence guard.

The default optimizer is conjugate gradient descent with a bounded Armijo
backtracking line search (steepest-descent restarts on negative curvature
coefficient or every ``restart_every`` steps).  Each step costs one
gradient evaluation plus at most ``max_trials`` forward-only evaluations of
the same mini-batch; batchnorm running statistics only advance on the
gradient evaluation, so the line-search objective is deterministic.

Divergence is a reportable outcome, not an exception: the loop stops and the
log carries status ``diverged``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .dataset import PreparedSet, Sample, make_composites, prepare, remap_to_objects
from .errors import ConfigError, DataError, NumericFaultError
from .losses import ClassStats, loss_bgc, loss_wce
from .metrics import ConfusionMatrix
from .models import Model
from .rng import RngState
from .scenes import Palette


# ---------------------------------------------------------------------------
# optimizers

@dataclass(frozen=True)
class LineSearchParams:
    initial_step: float = 1.0
    c1: float = 1e-4
    backtrack: float = 0.5
    max_trials: int = 3


@dataclass(frozen=True)
class GuardParams:
    ratio: float = 1.5
    patience: int = 5
    decay: float = 0.9


@dataclass
class StepInfo:
    loss: float
    grad_norm: float
    alpha: float
    evals: int
    applied: bool


class ScgdState:
    """Direction memory for the conjugate-gradient optimizer."""

    def __init__(self):
        self.prev_grad = None
        self.prev_dir = None
        self.since_restart = 0


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """Plain gradient descent; raises on non-finite gradients."""
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericFaultError(f"sgd_step: non-finite gradient for {name!r}")
        p.data -= lr * g


def scgd_step(loss_fn, params: dict, state: ScgdState,
              ls: LineSearchParams = LineSearchParams(),
              restart_every: int = 20) -> StepInfo:
    """One conjugate-gradient step with Armijo backtracking.

    ``loss_fn(want_grads, update_stats) -> (loss, grads | None)`` must be
    deterministic for the current mini-batch.  The direction is
    ``d = -g + max(0, beta) * d_prev`` with the polak-ribiere coefficient;
    restarts fall back to steepest descent.  Step sizes try
    ``initial_step * backtrack**i`` for i < max_trials and accept the first
    trial satisfying ``f(p + a d) <= f(p) + c1 * a * g.d``; with no
    acceptance the smallest finite trial is taken.  At most
    1 + max_trials loss evaluations per step.
    """
    loss0, grads = loss_fn(True, True)
    evals = 1
    if not math.isfinite(loss0):
        return StepInfo(loss0, float("nan"), 0.0, evals, False)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericFaultError(f"scgd_step: non-finite gradient for {name!r}")

    gnorm_sq = sum(float((g * g).sum()) for g in grads.values())
    restart = state.prev_grad is None or state.since_restart >= restart_every
    beta = 0.0
    if not restart:
        num = sum(float((g * (g - state.prev_grad[k])).sum())
                  for k, g in grads.items())
        den = sum(float((pg * pg).sum()) for pg in state.prev_grad.values())
        beta = num / den if den > 0 else 0.0
        if beta < 0.0:
            beta = 0.0
            restart = True
    if restart or beta == 0.0:
        direction = {k: -g for k, g in grads.items()}
        descent = -gnorm_sq
        state.since_restart = 0
    else:
        direction = {k: -g + beta * state.prev_dir[k] for k, g in grads.items()}
        descent = sum(float((grads[k] * d).sum()) for k, d in direction.items())
        if descent >= 0.0:                   # stale memory: force steepest descent
            direction = {k: -g for k, g in grads.items()}
            descent = -gnorm_sq
            state.since_restart = 0

    base = {k: p.data.copy() for k, p in params.items()}
    alpha = ls.initial_step
    accepted = None
    smallest_finite = None
    for _ in range(ls.max_trials):
        for k, p in params.items():
            p.data[...] = base[k] + alpha * direction[k]
        f_trial = loss_fn(False, False)[0]
        evals += 1
        if math.isfinite(f_trial):
            smallest_finite = (alpha, f_trial)
            if f_trial <= loss0 + ls.c1 * alpha * descent:
                accepted = (alpha, f_trial)
                break
        alpha *= ls.backtrack
    if accepted is None:
        if smallest_finite is None:
            for k, p in params.items():
                p.data[...] = base[k]
            raise NumericFaultError("scgd_step: loss non-finite at every trial step")
        accepted = smallest_finite
    for k, p in params.items():
        p.data[...] = base[k] + accepted[0] * direction[k]
    state.prev_grad = grads
    state.prev_dir = direction
    state.since_restart += 1
    return StepInfo(loss0, math.sqrt(gnorm_sq), accepted[0], evals, True)


# ---------------------------------------------------------------------------
# divergence guard

class DivergenceGuard:
    """Flags divergence when the loss EMA exceeds 1.5x its minimum for five
    consecutive evaluations, or immediately on a non-finite loss."""

    def __init__(self, params: GuardParams = GuardParams()):
        self.params = params
        self.ema = None
        self.low = math.inf
        self.streak = 0
        self.diverged = False

    def update(self, loss: float) -> bool:
        if self.diverged:
            return True
        if not math.isfinite(loss):
            self.diverged = True
            return True
        decay = self.params.decay
        self.ema = loss if self.ema is None else decay * self.ema + (1 - decay) * loss
        if self.low < math.inf and self.ema > self.params.ratio * self.low:
            self.streak += 1
        else:
            self.streak = 0
        self.low = min(self.low, self.ema)
        if self.streak >= self.params.patience:
            self.diverged = True
        return self.diverged


# ---------------------------------------------------------------------------
# logs

@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    grad_norm: float
    alpha: float
    evals: int


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    grad_norm_mean: float
    grad_norm_var: float
    per_class: float | None
    global_acc: float | None


class TrainingLog:
    def __init__(self):
        self.steps: list[StepRecord] = []
        self.epochs: list[EpochRecord] = []
        self.status = "completed"

    def step_losses(self):
        return np.array([s.loss for s in self.steps])

    def grad_norms(self):
        return np.array([s.grad_norm for s in self.steps])

    def grad_norm_variance(self) -> float:
        norms = self.grad_norms()
        finite = norms[np.isfinite(norms)]
        return float(finite.var()) if finite.size else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "split", "loss", "grad_norm_mean",
                          "grad_norm_var", "per_class", "global"])
            for rec in self.epochs:
                out.writerow([
                    rec.epoch, rec.split, f"{rec.loss:.6f}",
                    f"{rec.grad_norm_mean:.6f}", f"{rec.grad_norm_var:.6e}",
                    "" if rec.per_class is None else f"{rec.per_class:.2f}",
                    "" if rec.global_acc is None else f"{rec.global_acc:.2f}"])

    def write_status(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.status + "\n")


# ---------------------------------------------------------------------------
# evaluation helpers

def predict_labels(model: Model, images, batch_size: int = 8) -> np.ndarray:
    """Argmax class map per pixel, eval mode, off the tape."""
    out = []
    with autodiff.stop_recording():
        for start in range(0, images.shape[0], batch_size):
            logits = model.forward(images[start:start + batch_size], mode="eval")
            out.append(logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate(model: Model, data: PreparedSet, batch_size: int = 8) -> ConfusionMatrix:
    """Confusion matrix of the model on a labeled prepared set."""
    if data.labels is None:
        raise DataError("evaluate: prepared set has no labels")
    labels = data.labels
    if getattr(model.config, "class_space", "full") == "objects":
        labels = remap_to_objects(labels, model.config.object_class_ids)
    cm = ConfusionMatrix(model.config.num_classes)
    predicted = predict_labels(model, data.images, batch_size)
    cm.update(predicted, labels)
    return cm


# ---------------------------------------------------------------------------
# strategies

STRATEGIES = ("e2e_dense", "e2e_sparse", "e2e_mixed", "bgc", "flying_cars",
              "ensemble_fusion")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "bgc"
    epochs: int = 6
    steps_per_epoch: int = 25
    batch_dense: int = 6
    batch_sparse: int = 2
    lam: float = 0.25
    optimizer: str = "scgd"
    lr: float = 0.05
    seed: int = 0
    eval_every: int = 1
    restart_every: int = 20
    line_search: LineSearchParams = field(default_factory=LineSearchParams)
    guard: GuardParams = field(default_factory=GuardParams)

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.optimizer not in ("scgd", "sgd"):
            raise ConfigError(f"optimizer must be scgd|sgd, got {self.optimizer!r}")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be positive")
        if self.batch_dense < 0 or self.batch_sparse < 0 \
                or self.batch_dense + self.batch_sparse < 1:
            raise ConfigError("batch sizes must be non-negative and sum to >= 1")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")


@dataclass
class TrainData:
    """Raw samples per domain; preprocessing happens inside train()."""
    dense: list[Sample] = field(default_factory=list)
    sparse: list[Sample] = field(default_factory=list)
    eval_samples: list[Sample] | None = None
    palette: Palette | None = None


@dataclass
class TrainResult:
    model: Model
    log: TrainingLog

    @property
    def status(self):
        return self.log.status


def _model_space_labels(model, labels):
    if getattr(model.config, "class_space", "full") == "objects":
        return remap_to_objects(labels, model.config.object_class_ids)
    return labels


def _weights_for(model, labels_stack):
    stats = ClassStats.from_labels([labels_stack], model.config.num_classes)
    return stats.weights()


def train(model: Model, data: TrainData, config: TrainConfig) -> TrainResult:
    """Run the configured strategy; returns the model plus its log.

    Sampling is uniform with replacement from each pool, reproducible from
    ``config.seed``; step ``t`` uses rng child ``(seed, t)`` for both batch
    draws and dropout masks, so a rerun reproduces the checkpoint bitwise.
    """
    config.validate()
    strategy = config.strategy

    if strategy == "ensemble_fusion" and model.config.kind != "ensemble":
        raise ConfigError("ensemble_fusion needs an ensemble model")
    if strategy != "ensemble_fusion" and model.config.kind == "ensemble":
        raise ConfigError(f"{strategy} cannot train an ensemble model")

    needs_dense = strategy in ("e2e_dense", "e2e_mixed", "bgc", "flying_cars",
                               "ensemble_fusion")
    needs_sparse = strategy in ("e2e_sparse", "e2e_mixed", "bgc",
                                "ensemble_fusion")
    if needs_dense and not data.dense:
        raise DataError(f"{strategy}: no dense samples provided")
    if needs_sparse and not data.sparse:
        raise DataError(f"{strategy}: no sparse samples provided")

    dense_samples = list(data.dense)
    if strategy == "flying_cars":
        if data.palette is None:
            raise ConfigError("flying_cars needs the palette to composite objects")
        dense_samples = dense_samples + make_composites(config.seed, data.palette,
                                                        dense_samples)

    dense_set = prepare(dense_samples) if dense_samples else None
    sparse_set = prepare(data.sparse) if data.sparse else None
    eval_set = prepare(data.eval_samples) if data.eval_samples else None

    # per-strategy batch maker: returns kwargs for the loss closure
    single_batch = config.batch_dense + config.batch_sparse
    if strategy in ("e2e_dense", "flying_cars"):
        labels = _model_space_labels(model, dense_set.labels)
        weights = _weights_for(model, labels)
        pool = (dense_set.images, labels)
        draw = _single_pool_draw(pool, single_batch, weights)
    elif strategy == "e2e_sparse":
        labels = _model_space_labels(model, sparse_set.labels)
        weights = _weights_for(model, labels)
        pool = (sparse_set.images, labels)
        draw = _single_pool_draw(pool, single_batch, weights)
    elif strategy == "e2e_mixed":
        labels_d = _model_space_labels(model, dense_set.labels)
        labels_s = _model_space_labels(model, sparse_set.labels)
        images = np.concatenate([dense_set.images, sparse_set.images])
        labels = np.concatenate([labels_d, labels_s])
        weights = _weights_for(model, labels)
        draw = _single_pool_draw((images, labels), single_batch, weights)
    else:                                     # bgc, ensemble_fusion
        labels_d = _model_space_labels(model, dense_set.labels)
        labels_s = _model_space_labels(model, sparse_set.labels)
        weights_d = _weights_for(model, labels_d)
        weights_s = _weights_for(model, labels_s)
        draw = _two_pool_draw((dense_set.images, labels_d, weights_d),
                              (sparse_set.images, labels_s, weights_s),
                              config.batch_dense, config.batch_sparse,
                              config.lam)

    log = run_loop(model, draw, epochs=config.epochs,
                   steps_per_epoch=config.steps_per_epoch,
                   optimizer=config.optimizer, lr=config.lr, seed=config.seed,
                   line_search=config.line_search, guard_params=config.guard,
                   restart_every=config.restart_every, eval_set=eval_set,
                   eval_every=config.eval_every)
    return TrainResult(model, log)


def run_loop(model: Model, draw, *, epochs: int, steps_per_epoch: int,
             optimizer: str = "scgd", lr: float = 0.05, seed: int = 0,
             line_search: LineSearchParams = LineSearchParams(),
             guard_params: GuardParams = GuardParams(), restart_every: int = 20,
             eval_set: PreparedSet | None = None,
             eval_every: int = 0) -> TrainingLog:
    """Optimization loop shared by training and distillation.

    ``draw(model, step_rng) -> loss_fn`` binds one mini-batch; ``loss_fn``
    follows the :func:`scgd_step` contract.  A fired divergence guard or a
    numeric fault ends the loop with status ``diverged``.
    """
    params = model.trainable()
    if not params:
        raise ConfigError("model has no trainable parameters")
    root = RngState(seed)
    log = TrainingLog()
    guard = DivergenceGuard(guard_params)
    state = ScgdState()
    step_index = 0

    for epoch in range(epochs):
        epoch_records = []
        for _ in range(steps_per_epoch):
            step_rng = root.child(step_index)
            loss_fn = draw(model, step_rng)
            try:
                if optimizer == "scgd":
                    info = scgd_step(loss_fn, params, state, line_search,
                                     restart_every)
                else:
                    loss0, grads = loss_fn(True, True)
                    if math.isfinite(loss0):
                        sgd_step(params, grads, lr)
                        gnorm = math.sqrt(sum(float((g * g).sum())
                                              for g in grads.values()))
                        info = StepInfo(loss0, gnorm, lr, 1, True)
                    else:
                        info = StepInfo(loss0, float("nan"), 0.0, 1, False)
            except NumericFaultError:
                info = StepInfo(float("nan"), float("nan"), 0.0, 1, False)
            log.steps.append(StepRecord(epoch, step_index, info.loss,
                                        info.grad_norm, info.alpha, info.evals))
            epoch_records.append(info)
            step_index += 1
            if guard.update(info.loss):
                log.status = "diverged"
                break
        _close_epoch(log, epoch, epoch_records, model, eval_set,
                     eval_every, epochs)
        if log.status == "diverged":
            break
    return log


def _close_epoch(log, epoch, records, model, eval_set, eval_every, epochs):
    if not records:
        return
    losses_arr = np.array([r.loss for r in records])
    norms = np.array([r.grad_norm for r in records])
    finite = norms[np.isfinite(norms)]
    per_class = global_acc = None
    want_eval = (eval_every and eval_set is not None
                 and ((epoch + 1) % eval_every == 0 or epoch == epochs - 1))
    if want_eval and log.status != "diverged":
        cm = evaluate(model, eval_set)
        per_class = cm.per_class_accuracy()
        global_acc = cm.global_accuracy()
    log.epochs.append(EpochRecord(
        epoch, "train",
        float(np.nanmean(losses_arr)) if np.isfinite(losses_arr).any() else float("nan"),
        float(finite.mean()) if finite.size else float("nan"),
        float(finite.var()) if finite.size else float("nan"),
        per_class, global_acc))


def _single_pool_draw(pool, batch_size, weights):
    images, labels = pool
    count = images.shape[0]

    def draw(model, step_rng):
        gen = step_rng.child(0).generator()
        idx = gen.integers(0, count, size=batch_size)
        xb, yb = images[idx], labels[idx]
        dropout_rng = step_rng.child(1)

        def loss_fn(want_grads, update_stats):
            if want_grads:
                with autodiff.record() as tape:
                    logits = model.forward(xb, mode="train", rng=dropout_rng,
                                           update_running=update_stats)
                    loss = loss_wce(logits, yb, weights)
                autodiff.backward(tape, loss, params=list(model.trainable().values()))
                grads = {k: p.grad for k, p in model.trainable().items()}
                return float(loss.data), grads
            with autodiff.stop_recording():
                logits = model.forward(xb, mode="train", rng=dropout_rng,
                                       update_running=update_stats)
                loss = loss_wce(logits, yb, weights)
            return float(loss.data), None

        return loss_fn

    return draw


def _two_pool_draw(dense_pool, sparse_pool, n_dense, n_sparse, lam):
    images_d, labels_d, weights_d = dense_pool
    images_s, labels_s, weights_s = sparse_pool
    count_d, count_s = images_d.shape[0], images_s.shape[0]

    def draw(model, step_rng):
        gen = step_rng.child(0).generator()
        idx_d = gen.integers(0, count_d, size=n_dense)
        idx_s = gen.integers(0, count_s, size=n_sparse)
        xd, yd = images_d[idx_d], labels_d[idx_d]
        xs, ys = images_s[idx_s], labels_s[idx_s]
        dropout_rng = step_rng.child(1)

        if model.config.kind == "ensemble":
            # frozen experts are deterministic per batch: score them once and
            # let line-search trials re-run the fusion head only
            pd, ps = model.base_probs(xd), model.base_probs(xs)

            def fwd(update_stats):
                return (model.fusion_forward(pd, mode="train",
                                             update_running=update_stats),
                        model.fusion_forward(ps, mode="train",
                                             update_running=update_stats))
        else:
            def fwd(update_stats):
                return (model.forward(xd, mode="train", rng=dropout_rng.child(0),
                                      update_running=update_stats),
                        model.forward(xs, mode="train", rng=dropout_rng.child(1),
                                      update_running=update_stats))

        def loss_fn(want_grads, update_stats):
            def build():
                logits_d, logits_s = fwd(update_stats)
                return loss_bgc(logits_d, yd, weights_d,
                                logits_s, ys, weights_s, lam)
            if want_grads:
                with autodiff.record() as tape:
                    loss = build()
                autodiff.backward(tape, loss, params=list(model.trainable().values()))
                grads = {k: p.grad for k, p in model.trainable().items()}
                return float(loss.data), grads
            with autodiff.stop_recording():
                loss = build()
            return float(loss.data), None

        return loss_fn

    return draw
