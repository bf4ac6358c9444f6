"""Synthetic multi-domain benchmark: experts, fusion teacher, students.

One seed of the benchmark generates a train/test split, trains the two
single-domain experts, fuses them into a teacher, distills students with
each transfer method, and runs the mixed-versus-scheduled sampling
comparison.  Results and wall-clock per phase are persisted under the seed
directory, so completed phases are reused on rerun.

The step sizes and schedules below are calibrated to the 64x64 synthetic
scenes; they are deliberately fixed (not exposed as config) so benchmark
numbers are comparable across machines.
"""

import json
import os
import time
from dataclasses import dataclass, field

from . import checkpoint, dataset, distill, metrics, training
from .models import ModelConfig, Model, build_ensemble, build_model
from .rng import RngState
from .scenes import get_palette

NUM_CLASSES = 8
WIDTH = HEIGHT = 64
NUM_DENSE = 200
NUM_SPARSE = 200
NUM_UNLABELED = 120
NUM_TEST = 100
# dense scenes skew object-poor and sparse scenes object-rich, so the two
# domains genuinely complement each other; the test split mixes densities.
DENSE_OBJECTS = (0, 3)
SPARSE_OBJECTS = (1, 6)
TEST_OBJECTS = (1, 6)
OBJECT_NAMES = ("car", "pedestrian", "sign")

EXPERT = dict(kind="tnet", num_blocks=8, feature_maps=32, kernel=3)
STUDENT = dict(kind="tnet", num_blocks=8, feature_maps=64, kernel=3)
FUSION_MAPS = (32, 32)

# loss scale differs per objective (weighted losses shrink gradients by the
# mean class weight), so each phase carries its own initial step size.
GUARD = training.GuardParams(ratio=4.0, patience=8, decay=0.95)
DENSE_STEP, DENSE_EPOCHS = 100.0, 15
SPARSE_STEP, SPARSE_EPOCHS = 100.0, 10
FUSION_STEP, FUSION_EPOCHS = 0.3, 8
STUDENT_E2E_STEP, STUDENT_E2E_EPOCHS = 300.0, 10
WCE_STEP, WCE_EPOCHS = 30.0, 30
SMP_STEP, SMP_EPOCHS = 1.0, 30
TKL_STEP, TKL_EPOCHS = 1.0, 30
STEPS_PER_EPOCH = 20
DISTILL_STEPS_PER_EPOCH = 15

MIX_EPOCHS = 4  # sampling comparison: short runs, statistics only


@dataclass
class SeedOutcome:
    """Everything one benchmark seed produced: accuracies, run statuses,
    gradient-norm variances for the sampling comparison, seconds per phase."""
    seed: int
    per_class: dict = field(default_factory=dict)
    global_acc: dict = field(default_factory=dict)
    statuses: dict = field(default_factory=dict)
    grad_var: dict = field(default_factory=dict)
    elapsed: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=1, sort_keys=True)

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as fh:
            return SeedOutcome(**json.load(fh))


def _expert_config(palette):
    return ModelConfig(num_classes=NUM_CLASSES, **EXPERT)


def _sparse_config(palette):
    obj = tuple(palette.id_of(n) for n in OBJECT_NAMES)
    return ModelConfig(num_classes=4, class_space="objects",
                       object_class_ids=obj, **EXPERT)


def _student_config():
    return ModelConfig(num_classes=NUM_CLASSES, **STUDENT)


def run_seed(root, seed: int) -> SeedOutcome:
    """Run (or resume) one benchmark seed under ``root/seed<k>``."""
    sdir = os.path.join(root, f"seed{seed}")
    os.makedirs(sdir, exist_ok=True)
    outcome_path = os.path.join(sdir, "outcome.json")
    out = (SeedOutcome.load(outcome_path) if os.path.exists(outcome_path)
           else SeedOutcome(seed))
    palette = get_palette(NUM_CLASSES)

    t0 = time.time()
    train_dir = os.path.join(sdir, "train")
    test_dir = os.path.join(sdir, "test")
    if not os.path.exists(os.path.join(test_dir, "manifest.tsv")):
        dataset.generate_dataset(train_dir, seed=100 + seed,
                                 num_dense=NUM_DENSE, num_sparse=NUM_SPARSE,
                                 num_unlabeled=NUM_UNLABELED,
                                 width=WIDTH, height=HEIGHT,
                                 dense_objects=DENSE_OBJECTS,
                                 sparse_objects=SPARSE_OBJECTS)
        dataset.generate_dataset(test_dir, seed=900 + seed,
                                 num_dense=NUM_TEST, num_sparse=0,
                                 num_unlabeled=0, width=WIDTH, height=HEIGHT,
                                 dense_objects=TEST_OBJECTS)
        out.elapsed["data"] = time.time() - t0
    train_samples = dataset.read_dataset(train_dir)
    dense = [s for s in train_samples if s.domain == "dense"]
    sparse = [s for s in train_samples if s.domain == "sparse"]
    unlabeled = [s for s in train_samples if s.domain == "unlabeled"]
    test_set = dataset.prepare(dataset.read_dataset(test_dir))

    def measure(name, model):
        cm = training.evaluate(model, test_set)
        m = metrics.metrics(cm)
        out.per_class[name] = m["per_class"]
        out.global_acc[name] = m["global"]

    def phase(name, make):
        """Train-or-load one model; records elapsed, status and accuracy."""
        path = os.path.join(sdir, f"{name}.sdnc")
        if out.statuses.get(name) == "diverged":
            return None
        if os.path.exists(path) and name in out.statuses:
            return checkpoint.load_model(path)
        t0 = time.time()
        model, status = make()
        out.elapsed[name] = time.time() - t0
        out.statuses[name] = status
        if status == "completed":
            checkpoint.save_model(path, model)
            measure(name, model)
        out.save(outcome_path)
        return model if status == "completed" else None

    def fit(model, data, **cfg):
        result = training.train(model, data, training.TrainConfig(**cfg))
        return model, result.log.status

    dense_model = phase("dense_only", lambda: fit(
        build_model(_expert_config(palette), RngState(seed).child(1)),
        training.TrainData(dense=dense),
        strategy="e2e_dense", epochs=DENSE_EPOCHS,
        steps_per_epoch=STEPS_PER_EPOCH, seed=seed, eval_every=0,
        line_search=training.LineSearchParams(initial_step=DENSE_STEP),
        guard=GUARD))
    sparse_model = phase("sparse_only", lambda: fit(
        build_model(_sparse_config(palette), RngState(seed).child(2)),
        training.TrainData(sparse=sparse),
        strategy="e2e_sparse", epochs=SPARSE_EPOCHS,
        steps_per_epoch=STEPS_PER_EPOCH, seed=seed, eval_every=0,
        line_search=training.LineSearchParams(initial_step=SPARSE_STEP),
        guard=GUARD))
    teacher = None
    if dense_model is not None and sparse_model is not None:
        teacher = phase("ensemble", lambda: fit(
            build_ensemble(dense_model, sparse_model, FUSION_MAPS,
                           RngState(seed).child(3)),
            training.TrainData(dense=dense, sparse=sparse),
            strategy="ensemble_fusion", epochs=FUSION_EPOCHS,
            steps_per_epoch=STEPS_PER_EPOCH, seed=seed, eval_every=0,
            line_search=training.LineSearchParams(initial_step=FUSION_STEP),
            guard=GUARD))

    phase("student_e2e", lambda: fit(
        build_model(_student_config(), RngState(seed).child(4)),
        training.TrainData(dense=dense),
        strategy="e2e_dense", epochs=STUDENT_E2E_EPOCHS,
        steps_per_epoch=STEPS_PER_EPOCH, seed=seed, eval_every=0,
        line_search=training.LineSearchParams(initial_step=STUDENT_E2E_STEP),
        guard=GUARD))

    if teacher is not None:
        t0 = time.time()
        cache_dir = os.path.join(sdir, "teacher_cache")
        transfer = dataset.prepare(train_samples)
        key = distill.TeacherCache.cache_key(teacher, transfer.ids)
        if not (os.path.exists(os.path.join(cache_dir, "key.txt"))
                and distill.TeacherCache(cache_dir).key == key):
            distill.TeacherCache.build(cache_dir, teacher, transfer)
            out.elapsed["cache"] = time.time() - t0
            out.save(outcome_path)
        cache = distill.TeacherCache(cache_dir)

        def transfer_fit(model, method, step, epochs):
            result = distill.distill(
                model, cache,
                distill.TransferData(labeled=dense + sparse,
                                     unlabeled=unlabeled),
                distill.TransferConfig(
                    method=method, epochs=epochs,
                    steps_per_epoch=DISTILL_STEPS_PER_EPOCH, seed=seed,
                    eval_every=0,
                    line_search=training.LineSearchParams(initial_step=step),
                    guard=GUARD))
            return model, result.log.status

        for name, method, step, epochs in (
                ("student_tk_smp_wce", "tk_smp_wce", WCE_STEP, WCE_EPOCHS),
                ("student_tk_smp", "tk_smp", SMP_STEP, SMP_EPOCHS),
                ("student_tk_l", "tk_l", TKL_STEP, TKL_EPOCHS)):
            phase(name, lambda m=method, s=step, e=epochs: transfer_fit(
                build_model(_student_config(), RngState(seed).child(4)),
                m, s, e))

    _sampling_comparison(out, sdir, palette, dense, sparse, seed)
    out.save(outcome_path)
    return out


def _sampling_comparison(out, sdir, palette, dense, sparse, seed):
    """Pooled 50/50 mixing versus the scheduled two-pool draw, identical
    data and seed; records gradient-norm variances and final statuses."""
    if "bgc" in out.statuses and "e2e_mixed" in out.statuses:
        return
    data = training.TrainData(dense=dense, sparse=sparse)
    for strategy, batches in (("e2e_mixed", dict(batch_dense=4, batch_sparse=4)),
                              ("bgc", dict(batch_dense=4, batch_sparse=4))):
        t0 = time.time()
        model = build_model(_expert_config(palette), RngState(seed).child(5))
        result = training.train(model, data, training.TrainConfig(
            strategy=strategy, epochs=MIX_EPOCHS,
            steps_per_epoch=STEPS_PER_EPOCH, seed=seed, eval_every=0,
            line_search=training.LineSearchParams(initial_step=DENSE_STEP),
            guard=GUARD, **batches))
        out.statuses[strategy] = result.log.status
        out.grad_var[strategy] = result.log.grad_norm_variance()
        out.elapsed[strategy] = time.time() - t0


def run_benchmark(root, seeds=(0, 1, 2)) -> list[SeedOutcome]:
    return [run_seed(root, seed) for seed in seeds]


def mean_per_class(outcomes, name) -> float:
    vals = [o.per_class[name] for o in outcomes if name in o.per_class]
    if len(vals) != len(outcomes):
        return float("nan")
    return sum(vals) / len(vals)


def total_elapsed(outcomes, names) -> float:
    return sum(o.elapsed.get(n, 0.0) for o in outcomes for n in names)
