"""Knowledge transfer from a trained teacher to a compact student.

The teacher's per-pixel class distributions over the whole transfer set are
computed once and stored on disk (:class:`TeacherCache`); distillation never
touches ground-truth annotations, so unlabeled imagery participates on equal
footing.  Transfer methods:

* ``tk_l``: plain cross-entropy against the teacher's argmax label maps.
* ``tk_smp``: soft-target cross-entropy against the full distributions.
* ``tk_smp_drop``: like ``tk_smp`` with dropout active in the student.
* ``tk_smp_wce``: soft targets reweighted by inverse teacher-class frequency
  (frequencies counted over the entire transfer set).

Batches mix a labeled-pool part and an unlabeled-pool part; the unlabeled
term is scaled by ``lam_unlabeled``, mirroring the two-domain training loss.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, checkpoint
from .dataset import PreparedSet, Sample, prepare
from .errors import ConfigError, DataError, FormatError
from .losses import ClassStats, distill_ce, distill_wce, loss_wce
from .metrics import ConfusionMatrix
from .models import Model
from .ops import softmax_array
from .training import (GuardParams, LineSearchParams, TrainResult, TrainingLog,
                       evaluate, run_loop)

METHODS = ("tk_l", "tk_smp", "tk_smp_drop", "tk_smp_wce")

_INDEX = "index.tsv"
_KEYFILE = "key.txt"


class TeacherCache:
    """On-disk store of teacher predictions, one tensor file per sample.

    Files use the shared binary tensor container: a float32 ``probs`` entry
    (L, H, W) plus the uint8 ``labels`` argmax map.  ``key`` fingerprints the
    teacher parameters and sample ids so callers can detect stale caches.
    """

    def __init__(self, directory):
        self.directory = directory
        index_path = os.path.join(directory, _INDEX)
        if not os.path.exists(index_path):
            raise DataError(f"{directory}: missing cache index {_INDEX}")
        with open(os.path.join(directory, _KEYFILE), encoding="utf-8") as fh:
            self.key = fh.read().strip()
        self._probs = {}
        self._labels = {}
        with open(index_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise FormatError(f"{index_path}:{lineno}: expected 2 "
                                      f"fields, got {len(fields)}")
                sid, rel = fields
                config, entries = checkpoint.read_tensor_file(
                    os.path.join(directory, rel))
                named = {name: arr for name, _, arr in entries}
                if config.get("role") != "teacher_cache" \
                        or "probs" not in named or "labels" not in named:
                    raise FormatError(f"{directory}/{rel}: not a teacher "
                                      f"cache entry")
                self._probs[sid] = named["probs"]
                self._labels[sid] = named["labels"]

    @property
    def ids(self):
        return tuple(self._probs)

    @property
    def num_classes(self):
        first = next(iter(self._probs.values()))
        return first.shape[0]

    def probs(self, sid):
        return self._probs[sid]

    def labels(self, sid):
        return self._labels[sid]

    def label_stats(self) -> ClassStats:
        """Teacher argmax class counts over every cached sample."""
        return ClassStats.from_labels(self._labels.values(), self.num_classes)

    @staticmethod
    def cache_key(teacher: Model, ids) -> str:
        digest = hashlib.sha256()
        digest.update(teacher.state_signature())
        for sid in sorted(ids):
            digest.update(sid.encode("utf-8"))
        return digest.hexdigest()

    @staticmethod
    def build(directory, teacher: Model, transfer: PreparedSet,
              batch_size: int = 8) -> "TeacherCache":
        """Run the teacher in eval mode over the transfer images and persist
        softmax distributions; ground-truth labels are never consulted."""
        os.makedirs(directory, exist_ok=True)
        ids = transfer.ids
        rows = []
        with autodiff.stop_recording():
            for start in range(0, len(transfer), batch_size):
                stop = min(start + batch_size, len(transfer))
                logits = teacher.forward(transfer.images[start:stop], mode="eval")
                probs = softmax_array(logits.data).astype(np.float32)
                for offset, sid in enumerate(ids[start:stop]):
                    rel = f"{sid}.sdnc"
                    p = probs[offset]
                    checkpoint.write_tensor_file(
                        os.path.join(directory, rel),
                        {"role": "teacher_cache", "id": sid},
                        [("probs", checkpoint.BUFFER, p),
                         ("labels", checkpoint.BUFFER,
                          p.argmax(axis=0).astype(np.uint8))])
                    rows.append((sid, rel))
        with open(os.path.join(directory, _INDEX), "w", encoding="utf-8") as fh:
            for sid, rel in rows:
                fh.write(f"{sid}\t{rel}\n")
        with open(os.path.join(directory, _KEYFILE), "w", encoding="utf-8") as fh:
            fh.write(TeacherCache.cache_key(teacher, ids) + "\n")
        return TeacherCache(directory)


# ---------------------------------------------------------------------------
# distillation

@dataclass(frozen=True)
class TransferConfig:
    method: str = "tk_smp_wce"
    epochs: int = 6
    steps_per_epoch: int = 25
    batch_labeled: int = 6
    batch_unlabeled: int = 2
    lam_unlabeled: float = 0.25
    dropout_p: float = 0.3          # tk_smp_drop only
    optimizer: str = "scgd"
    lr: float = 0.05
    seed: int = 0
    eval_every: int = 1
    restart_every: int = 20
    line_search: LineSearchParams = field(default_factory=LineSearchParams)
    guard: GuardParams = field(default_factory=GuardParams)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown transfer method {self.method!r}")
        if self.optimizer not in ("scgd", "sgd"):
            raise ConfigError(f"optimizer must be scgd|sgd, got {self.optimizer!r}")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be positive")
        if self.batch_labeled < 1:
            raise ConfigError("batch_labeled must be >= 1")
        if self.batch_unlabeled < 0:
            raise ConfigError("batch_unlabeled must be >= 0")
        if self.lam_unlabeled < 0:
            raise ConfigError("lam_unlabeled must be >= 0")
        if self.method == "tk_smp_drop" and not 0.0 < self.dropout_p < 1.0:
            raise ConfigError("tk_smp_drop needs dropout_p in (0, 1)")


@dataclass
class TransferData:
    """Transfer-set imagery; any annotations on the samples are ignored."""
    labeled: list[Sample] = field(default_factory=list)
    unlabeled: list[Sample] = field(default_factory=list)
    eval_samples: list[Sample] | None = None


def distill(student: Model, cache: TeacherCache, data: TransferData,
            config: TransferConfig) -> TrainResult:
    """Train the student against cached teacher predictions."""
    config.validate()
    if not data.labeled:
        raise DataError("distill: transfer set has no labeled-pool samples")
    if student.config.num_classes != cache.num_classes:
        raise DataError(f"student has {student.config.num_classes} classes, "
                        f"teacher cache has {cache.num_classes}")

    labeled = prepare(data.labeled)
    unlabeled = prepare(data.unlabeled) if data.unlabeled else None
    eval_set = prepare(data.eval_samples) if data.eval_samples else None
    for sid in labeled.ids + (unlabeled.ids if unlabeled else ()):
        if sid not in cache._probs:
            raise DataError(f"distill: sample {sid!r} missing from teacher cache")

    method = config.method
    weights = None
    if method == "tk_smp_wce":
        weights = cache.label_stats().weights()
    dropout_p = config.dropout_p if method == "tk_smp_drop" else None

    def batch_targets(ids):
        if method == "tk_l":
            return np.stack([cache.labels(sid) for sid in ids])
        return np.stack([cache.probs(sid) for sid in ids])

    def method_loss(logits, ids):
        if method == "tk_l":
            ones = np.ones(cache.num_classes)
            return loss_wce(logits, batch_targets(ids), ones)
        if method in ("tk_smp", "tk_smp_drop"):
            return distill_ce(logits, batch_targets(ids))
        return distill_wce(logits, batch_targets(ids), weights)

    use_unlabeled = unlabeled is not None and config.batch_unlabeled > 0

    def draw(model, step_rng):
        gen = step_rng.child(0).generator()
        idx_l = gen.integers(0, len(labeled), size=config.batch_labeled)
        xb = labeled.images[idx_l]
        ids_l = [labeled.ids[i] for i in idx_l]
        if use_unlabeled:
            idx_u = gen.integers(0, len(unlabeled), size=config.batch_unlabeled)
            xu = unlabeled.images[idx_u]
            ids_u = [unlabeled.ids[i] for i in idx_u]
        dropout_rng = step_rng.child(1)

        def loss_fn(want_grads, update_stats):
            from . import ops

            def build():
                logits = model.forward(xb, mode="train",
                                       rng=dropout_rng.child(0),
                                       dropout_p=dropout_p,
                                       update_running=update_stats)
                loss = method_loss(logits, ids_l)
                if use_unlabeled:
                    logits_u = model.forward(xu, mode="train",
                                             rng=dropout_rng.child(1),
                                             dropout_p=dropout_p,
                                             update_running=update_stats)
                    loss = ops.add(loss, ops.scale(method_loss(logits_u, ids_u),
                                                   config.lam_unlabeled))
                return loss

            if want_grads:
                with autodiff.record() as tape:
                    loss = build()
                autodiff.backward(tape, loss,
                                  params=list(model.trainable().values()))
                grads = {k: p.grad for k, p in model.trainable().items()}
                return float(loss.data), grads
            with autodiff.stop_recording():
                loss = build()
            return float(loss.data), None

        return loss_fn

    log = run_loop(student, draw, epochs=config.epochs,
                   steps_per_epoch=config.steps_per_epoch,
                   optimizer=config.optimizer, lr=config.lr, seed=config.seed,
                   line_search=config.line_search, guard_params=config.guard,
                   restart_every=config.restart_every, eval_set=eval_set,
                   eval_every=config.eval_every)
    return TrainResult(student, log)


# ---------------------------------------------------------------------------
# reporting

def agreement(model_a: Model, model_b: Model, images,
              batch_size: int = 8) -> float:
    """Percent of pixels where the two models' argmax classes coincide."""
    from .training import predict_labels
    a = predict_labels(model_a, images, batch_size)
    b = predict_labels(model_b, images, batch_size)
    return float((a == b).mean() * 100.0)


def transfer_report(path, student: Model, teacher: Model, test_samples,
                    class_names) -> dict:
    """Evaluate both models on a labeled test set and write the comparison.

    Returns {"teacher": metrics, "student": metrics, "agreement": percent}.
    """
    test = prepare(test_samples)
    if test.labels is None:
        raise DataError("transfer_report: test samples must be labeled")
    cm_teacher = evaluate(teacher, test)
    cm_student = evaluate(student, test)
    agree = agreement(student, teacher, test.images)
    class_names = list(class_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["name"] + class_names +
                     ["per_class", "global", "agreement_vs_teacher"])
        for name, cm, agr in (("teacher", cm_teacher, 100.0),
                              ("student", cm_student, agree)):
            recalls = ["" if np.isnan(r) else f"{r:.2f}"
                       for r in cm.class_recalls()]
            out.writerow([name] + recalls +
                         [f"{cm.per_class_accuracy():.2f}",
                          f"{cm.global_accuracy():.2f}", f"{agr:.2f}"])
    return {"teacher": {"per_class": cm_teacher.per_class_accuracy(),
                        "global": cm_teacher.global_accuracy()},
            "student": {"per_class": cm_student.per_class_accuracy(),
                        "global": cm_student.global_accuracy()},
            "agreement": agree}
