"""Label providers and the sequential teacher-to-student training chain.

A chain trains one classifier per stage.  The first stage usually learns from
ground-truth labels; every later stage learns from labels produced on the fly
by a frozen teacher, by default the previous stage's output, and never reads
the training split's hard labels.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adversarial import AdversarialConfig, compose_batch, jitter
from .checkpoint import (
    file_hash,
    load_checkpoint,
    load_label_cache,
    model_hash,
    save_checkpoint,
    save_label_cache,
)
from .data import check_simplex, epoch_batches, one_hot, sample_crops, stream
from .evaluation import MetricsRecord, evaluate_split, read_metrics, write_metrics
from .exceptions import ConfigError, ProtocolError
from .losses import check_loss_choice, loss_from_logits, loss_grad_wrt_logits
from .nn import SGD, Classifier, build_arch, softmax
from .taxonomy import taxonomy_label_table

logger = logging.getLogger(__name__)

PROVIDERS = (
    "ground_truth",
    "soft_dynamic",
    "hard_dynamic",
    "soft_static",
    "category_visual",
    "category_taxonomy",
)
TEACHER_PROVIDERS = ("soft_dynamic", "hard_dynamic", "soft_static", "category_visual")
# providers that look up each training image's ground-truth class
LABEL_READING_PROVIDERS = ("ground_truth", "category_visual", "category_taxonomy")


# --------------------------------------------------------------------------
# Schedules and stages
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSchedule:
    epochs: int = 60
    lr_initial: float = 0.05
    lr_drops: tuple = ((42, 10.0), (51, 10.0))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        drops = tuple((int(e), float(d)) for e, d in self.lr_drops)
        object.__setattr__(self, "lr_drops", drops)
        if self.epochs < 1:
            raise ConfigError("must be at least 1", field="schedule.epochs")
        if self.batch_size < 2:
            raise ConfigError("must be at least 2 (batch statistics)", field="schedule.batch_size")
        if not self.lr_initial >= 0:
            raise ConfigError("must be non-negative", field="schedule.lr_initial")
        epochs = [e for e, _ in drops]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError("drop epochs must be strictly increasing", field="schedule.lr_drops")
        if any(e < 0 or e >= self.epochs for e in epochs):
            raise ConfigError(f"drop epochs must lie in [0, {self.epochs})", field="schedule.lr_drops")
        if any(d <= 0 for _, d in drops):
            raise ConfigError("divisors must be positive", field="schedule.lr_drops")

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch; each drop applies from its epoch on."""
        lr = self.lr_initial
        for start, divisor in self.lr_drops:
            if epoch >= start:
                lr /= divisor
        return lr

    def to_dict(self):
        d = asdict(self)
        d["lr_drops"] = [list(x) for x in self.lr_drops]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


SCHEDULE_PRESETS = {
    # "desk" keeps the 0.7 / 0.85 drop positions of the 200-epoch schedules below
    "desk": TrainingSchedule(),
    "imagenet": TrainingSchedule(epochs=200, lr_initial=0.1, lr_drops=((140, 10.0), (170, 10.0)), batch_size=256),
    "imagenet_lowlr": TrainingSchedule(epochs=200, lr_initial=0.01, lr_drops=((140, 10.0), (170, 10.0)), batch_size=256),
}


@dataclass
class RefineryStage:
    """Everything needed to train one student."""

    provider: str = "ground_truth"
    loss: str = "cross_entropy_soft"
    student_arch: str = "smallnet"
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    teacher: Classifier = None
    adversarial: AdversarialConfig = None
    init: str = "random"
    init_model: Classifier = None
    taxonomy: object = None
    taxonomy_normalization: str = "sum"
    taxonomy_temperature: float = 1.0
    name: str = "stage"
    area_range: tuple = (0.08, 1.0)
    ratio_range: tuple = (3 / 4, 4 / 3)
    eval_every: int = 1
    eval_ks: tuple = (1, 5)
    cache_dir: str = None

    def validate(self, stage_index=0, num_classes=None):
        if self.provider not in PROVIDERS:
            raise ConfigError(f"unknown provider {self.provider!r}; choose from {PROVIDERS}", field="provider")
        check_loss_choice(self.loss)
        if self.provider in TEACHER_PROVIDERS and self.teacher is None:
            raise ConfigError(f"provider {self.provider!r} needs a teacher", field="teacher")
        if self.provider not in TEACHER_PROVIDERS and self.teacher is not None and self.adversarial is None:
            raise ConfigError(f"provider {self.provider!r} does not use a teacher", field="teacher")
        if self.provider == "category_taxonomy" and self.taxonomy is None:
            raise ConfigError("category_taxonomy needs a taxonomy tree", field="taxonomy")
        if self.adversarial is not None and self.teacher is None:
            raise ConfigError("adversarial jittering needs a teacher", field="adversarial")
        if stage_index > 0 and self.provider in LABEL_READING_PROVIDERS:
            raise ConfigError(
                f"stage {stage_index + 1} would read ground-truth labels through provider {self.provider!r}",
                field="provider",
            )
        if self.init not in ("random", "from_checkpoint"):
            raise ConfigError("must be 'random' or 'from_checkpoint'", field="init")
        if self.init == "from_checkpoint" and self.init_model is None:
            raise ConfigError("init=from_checkpoint needs an initial model", field="init")
        if self.eval_every < 1:
            raise ConfigError("must be at least 1", field="eval_every")
        for model, what in ((self.teacher, "teacher"), (self.init_model, "init")):
            if model is not None and num_classes is not None and model.arch.num_classes != num_classes:
                raise ConfigError(
                    f"{what} predicts {model.arch.num_classes} classes, dataset has {num_classes}", field=what
                )
        if self.init_model is not None and self.init_model.arch.name != self.student_arch:
            raise ConfigError(
                f"initial model is {self.init_model.arch.name!r}, student is {self.student_arch!r}", field="init"
            )


# --------------------------------------------------------------------------
# Label providers
# --------------------------------------------------------------------------


def _check_frozen(teacher):
    if teacher.is_training:
        raise ProtocolError("teacher is flagged as training; teachers must be frozen")


def generate_labels(teacher, crop_batch):
    """Teacher's softmax on ``crop_batch`` using that batch's own BN statistics.

    The teacher's stored running statistics are neither used nor modified.
    """
    _check_frozen(teacher)
    logits = teacher.forward(crop_batch, bn_mode="train", update_stats=False)
    teacher.clear_cache()
    return softmax(logits.astype(np.float64)).astype(np.float32)


def harden(probs):
    """One-hot at each row's argmax; ties go to the lowest class index."""
    probs = np.asarray(probs)
    return one_hot(np.argmax(probs, axis=-1), probs.shape[-1])


def hard_dynamic_labels(teacher, crop_batch):
    return harden(generate_labels(teacher, crop_batch))


def _cache_path(cache_dir, kind, teacher, dataset):
    if cache_dir is None:
        return None
    path = Path(cache_dir) / f"{kind}-{model_hash(teacher)[:16]}-{dataset.content_hash()[:16]}.lrlc"
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def soft_static_labels(teacher, dataset, cache_dir=None):
    """One label per training image from its center crop, with running BN statistics.

    Returns ``(ids, table)`` with rows in dataset order.
    """
    path = _cache_path(cache_dir, "soft_static", teacher, dataset)
    if path is not None and path.exists():
        keys, table = load_label_cache(path)
        if np.array_equal(keys, dataset.ids):
            return keys, table
    _check_frozen(teacher)
    logits = teacher.predict_logits(dataset.center_crops(teacher.arch.input_size))
    table = softmax(logits.astype(np.float64)).astype(np.float32)
    if path is not None:
        save_label_cache(path, dataset.ids, table)
    return dataset.ids.copy(), table


def category_visual_labels(teacher, dataset, cache_dir=None):
    """Per-category label: the mean soft-static label over that category's images."""
    path = _cache_path(cache_dir, "category_visual", teacher, dataset)
    k = dataset.num_classes
    if path is not None and path.exists():
        keys, table = load_label_cache(path)
        if np.array_equal(keys, np.arange(k)):
            return table
    _, static = soft_static_labels(teacher, dataset, cache_dir)
    members = dataset.class_indices(purpose="training")
    table = np.empty((k, k), np.float32)
    for c in range(k):
        if len(members[c]) == 0:
            raise ConfigError(f"category {c} ({dataset.class_names[c]}) has no training images")
        row = static[members[c]].astype(np.float64).mean(axis=0)
        table[c] = row / row.sum()
    if path is not None:
        save_label_cache(path, np.arange(k), table)
    return table


def category_taxonomy_labels(tree, categories, normalization="sum", temperature=1.0):
    """Per-category label from normalized Wu-Palmer similarities."""
    return taxonomy_label_table(tree, list(categories), normalization, temperature)


class _Labeler:
    """Target labels for a batch of training crops under one provider."""

    def __init__(self, stage, dataset):
        self.stage = stage
        self.dataset = dataset
        self.provider = stage.provider
        self.table = None
        k = dataset.num_classes
        if self.provider == "soft_static":
            self.table = soft_static_labels(stage.teacher, dataset, stage.cache_dir)[1]
        elif self.provider == "category_visual":
            self.table = category_visual_labels(stage.teacher, dataset, stage.cache_dir)
        elif self.provider == "category_taxonomy":
            self.table = category_taxonomy_labels(
                stage.taxonomy, range(k), stage.taxonomy_normalization, stage.taxonomy_temperature
            )
        self.teacher_calls = 0

    def __call__(self, x, indices):
        if self.provider == "ground_truth":
            return one_hot(self.dataset.read_labels(indices, "training"), self.dataset.num_classes)
        if self.provider == "soft_dynamic":
            self.teacher_calls += 1
            return generate_labels(self.stage.teacher, x)
        if self.provider == "hard_dynamic":
            self.teacher_calls += 1
            return hard_dynamic_labels(self.stage.teacher, x)
        if self.provider == "soft_static":
            return self.table[indices]
        return self.table[self.dataset.read_labels(indices, "training")]


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _init_student(stage, num_classes, stage_index):
    if stage.init == "from_checkpoint":
        student = stage.init_model.copy()
    else:
        arch = build_arch(stage.student_arch, num_classes)
        student = Classifier.create(arch, rng=stream(stage.schedule.seed, "init", stage_index))
    student.bn_mode = "train"
    student.is_training = True
    return student


def train_stage(stage, dataset, val=None, stage_index=0):
    """Train one student under ``stage`` and return ``(student, MetricsRecord)``.

    Each step samples fresh crops, asks the provider for their labels (dynamic
    providers label exactly the tensor the student sees, in the same batch),
    optionally appends jittered copies, and takes one SGD step on the mean
    loss.  With a fixed schedule seed the result is bit-reproducible.
    """
    stage.validate(stage_index, dataset.num_classes)
    if len(dataset) < 2:
        raise ConfigError("training split needs at least 2 images", field="dataset")
    sched = stage.schedule
    teacher = stage.teacher
    teacher_digest = None
    if teacher is not None:
        teacher.is_training = False
        teacher_digest = model_hash(teacher)
    started = time.perf_counter()
    labeler = _Labeler(stage, dataset)
    student = _init_student(stage, dataset.num_classes, stage_index)
    size = student.arch.input_size
    opt = SGD(sched.momentum, sched.weight_decay)
    metrics = MetricsRecord(stage.name)
    adv = stage.adversarial
    lo_hi = dataset.input_range
    try:
        for epoch in range(sched.epochs):
            lr = sched.lr_at(epoch)
            losses = []
            batches = epoch_batches(len(dataset), sched.batch_size, sched.seed, epoch, stage_index)
            for b, idx in enumerate(batches):
                specs = sample_crops(dataset, idx, sched.seed, epoch, b, stage_index, size,
                                     stage.area_range, stage.ratio_range)
                x = dataset.crops(idx, specs, size)
                if adv is not None and epoch >= adv.enabled_from_epoch:
                    # soft dynamic labels are differentiated through the teacher inside jitter
                    fixed = None if stage.provider == "soft_dynamic" else labeler(x, idx)
                    x_adv = jitter(teacher, student, x, adv.eta, adv.clip, lo_hi, fixed)
                    x = compose_batch(x, x_adv)
                    idx = np.repeat(idx, 2)
                targets = labeler(x, idx)
                logits = student.forward(x, bn_mode="train")
                losses.append(loss_from_logits(stage.loss, targets, logits))
                grads, _ = student.backward(loss_grad_wrt_logits(stage.loss, targets, logits), need_input_grad=False)
                opt.step(student, grads, lr)
            student.clear_cache()
            metrics.log(epoch, train_loss=float(np.mean(losses)), train_lr=lr)
            last = epoch == sched.epochs - 1
            if last or (epoch + 1) % stage.eval_every == 0:
                _evaluate_into(metrics, epoch, student, dataset, val, stage.eval_ks, per_category=last)
            logger.info("%s epoch %d: %s", stage.name, epoch, metrics.epochs[-1])
    finally:
        student.is_training = False
        student.bn_mode = "eval"
        student.clear_cache()
    if teacher is not None and model_hash(teacher) != teacher_digest:
        raise ProtocolError(f"teacher of stage {stage.name!r} changed during training")
    metrics.wall_clock = time.perf_counter() - started
    return student, metrics


def _evaluate_into(metrics, epoch, student, train, val, ks, per_category):
    res = evaluate_split(student, train, ks, purpose="evaluation")
    values = {"train_top1": res["top1"]}
    if per_category:
        metrics.train_per_category = res["per_category"]
    if val is not None:
        vres = evaluate_split(student, val, ks, purpose="evaluation")
        values.update({f"val_top{k}": vres[f"top{k}"] for k in ks})
        if per_category:
            metrics.val_per_category = vres["per_category"]
    metrics.log(epoch, **values)


# --------------------------------------------------------------------------
# Chains
# --------------------------------------------------------------------------


@dataclass
class StageConfig:
    """Serializable description of one chain stage.

    ``teacher`` is ``None`` for the previous stage's output, ``"stage:<name>"``
    for an earlier named stage, or a checkpoint path.  ``init_checkpoint`` is
    used with ``init="from_checkpoint"``; it defaults to the teacher.
    """

    name: str
    provider: str = "ground_truth"
    loss: str = "cross_entropy_soft"
    arch: str = "smallnet"
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    adversarial: AdversarialConfig = None
    init: str = "random"
    teacher: str = None
    init_checkpoint: str = None
    taxonomy_normalization: str = "sum"
    taxonomy_temperature: float = 1.0
    eval_every: int = 1

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        d["adversarial"] = None if self.adversarial is None else self.adversarial.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["schedule"] = TrainingSchedule.from_dict(d.get("schedule", {}))
        if d.get("adversarial") is not None:
            d["adversarial"] = AdversarialConfig(**d["adversarial"])
        return cls(**d)


@dataclass
class ChainConfig:
    stages: list
    seed: int = 0
    area_range: tuple = (0.08, 1.0)
    ratio_range: tuple = (3 / 4, 4 / 3)
    topk: tuple = (1, 5)
    num_bins: int = 20

    def to_dict(self):
        return {
            "stages": [s.to_dict() for s in self.stages],
            "seed": self.seed,
            "area_range": list(self.area_range),
            "ratio_range": list(self.ratio_range),
            "topk": list(self.topk),
            "num_bins": self.num_bins,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            stages=[StageConfig.from_dict(s) for s in d["stages"]],
            seed=d.get("seed", 0),
            area_range=tuple(d.get("area_range", (0.08, 1.0))),
            ratio_range=tuple(d.get("ratio_range", (3 / 4, 4 / 3))),
            topk=tuple(d.get("topk", (1, 5))),
            num_bins=d.get("num_bins", 20),
        )


@dataclass
class RefinementChain:
    config: ChainConfig
    models: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    hashes: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    manifest_path: Path = None

    @property
    def final(self):
        return self.models[-1]


MANIFEST_NAME = "chain.json"


def read_manifest(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_model(ref, models_by_name, previous, what):
    if ref is None:
        if previous is None:
            raise ConfigError(f"the first stage has no previous stage to use as {what}", field=what)
        return previous
    if ref.startswith("stage:"):
        name = ref[len("stage:"):]
        if name not in models_by_name:
            raise ConfigError(f"no earlier stage named {name!r}", field=what)
        return models_by_name[name]
    return load_checkpoint(ref)


def run_chain(config, dataset, val=None, out_dir=None, taxonomy=None, resume=True):
    """Train every stage in order, wiring each output in as the next teacher.

    With ``out_dir`` each checkpoint, its metrics and a manifest are written
    after every stage.  A completed stage whose configuration, teacher, data
    and checkpoint hash all match the manifest is loaded instead of retrained.
    A failing stage is marked in the manifest and the error re-raised.
    """
    out = Path(out_dir) if out_dir is not None else None
    old_entries = []
    manifest = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        (out / "metrics").mkdir(exist_ok=True)
        manifest_path = out / MANIFEST_NAME
        if resume and manifest_path.exists():
            old = read_manifest(manifest_path)
            # chain-wide settings (seed, crop ranges, eval) must match for any stage to be reused
            settings = {k: v for k, v in config.to_dict().items() if k != "stages"}
            if {k: v for k, v in old.get("chain", {}).items() if k != "stages"} == settings:
                old_entries = old.get("stages", [])
        manifest = {
            "format": "label-refinery-chain",
            "version": 1,
            "chain": config.to_dict(),
            "dataset_sha256": dataset.content_hash(),
            "stages": [{"name": s.name, "status": "pending"} for s in config.stages],
        }
    result = RefinementChain(config, manifest_path=out / MANIFEST_NAME if out else None)
    by_name = {}
    previous = None
    for i, sc in enumerate(config.stages):
        stage_t0 = time.perf_counter()
        try:
            teacher = None
            if sc.provider in TEACHER_PROVIDERS or sc.adversarial is not None:
                teacher = _resolve_model(sc.teacher, by_name, previous, "teacher")
            elif sc.teacher is not None:
                raise ConfigError(f"provider {sc.provider!r} does not use a teacher", field=f"chain[{i}].teacher")
            if i > 0 and sc.teacher is None and teacher is None:
                raise ConfigError(
                    f"stage {i + 1} must learn from a teacher; provider {sc.provider!r} reads ground truth",
                    field=f"chain[{i}].provider",
                )
            init_model = None
            if sc.init == "from_checkpoint":
                init_model = _resolve_model(sc.init_checkpoint, by_name, teacher, "init_checkpoint")
            teacher_sha = model_hash(teacher) if teacher is not None else None
            schedule = replace(sc.schedule, seed=config.seed)
            stage = RefineryStage(
                provider=sc.provider, loss=sc.loss, student_arch=sc.arch, schedule=schedule,
                teacher=teacher, adversarial=sc.adversarial, init=sc.init, init_model=init_model,
                taxonomy=taxonomy, taxonomy_normalization=sc.taxonomy_normalization,
                taxonomy_temperature=sc.taxonomy_temperature, name=sc.name,
                area_range=config.area_range, ratio_range=config.ratio_range,
                eval_every=sc.eval_every, eval_ks=config.topk,
                cache_dir=str(out / "cache") if out else None,
            )
            ckpt_rel = f"checkpoints/{i + 1:02d}-{sc.name}.lrfy"
            metrics_rel = f"metrics/{i + 1:02d}-{sc.name}.jsonl"
            reused = None
            if out is not None and i < len(old_entries):
                reused = _try_reuse(old_entries[i], sc, teacher_sha, dataset, out, ckpt_rel, metrics_rel)
            if reused is not None:
                student, metrics = reused
                result.skipped.append(sc.name)
                logger.info("stage %s already complete, skipping", sc.name)
            else:
                student, metrics = train_stage(stage, dataset, val, stage_index=i)
            digest = model_hash(student)
            if out is not None:
                save_checkpoint(student, out / ckpt_rel)
                if reused is None:
                    write_metrics(metrics, out / metrics_rel)
                manifest["stages"][i] = {
                    "name": sc.name,
                    "status": "completed",
                    "config": sc.to_dict(),
                    "checkpoint": ckpt_rel,
                    "sha256": digest,
                    "teacher_sha256": teacher_sha,
                    "dataset_sha256": dataset.content_hash(),
                    "metrics": metrics_rel,
                    "final_metrics": metrics.summary(),
                }
                write_manifest(out / MANIFEST_NAME, manifest)
        except Exception as exc:
            if out is not None:
                manifest["stages"][i] = {
                    "name": sc.name,
                    "status": "failed",
                    "config": sc.to_dict(),
                    "error": f"{type(exc).__name__}: {exc}",
                    "seconds": time.perf_counter() - stage_t0,
                }
                write_manifest(out / MANIFEST_NAME, manifest)
            raise
        by_name[sc.name] = student
        previous = student
        result.models.append(student)
        result.metrics.append(metrics)
        result.hashes.append(digest)
    return result


def _try_reuse(entry, sc, teacher_sha, dataset, out, ckpt_rel, metrics_rel):
    if entry.get("status") != "completed" or entry.get("config") != sc.to_dict():
        return None
    if entry.get("teacher_sha256") != teacher_sha or entry.get("dataset_sha256") != dataset.content_hash():
        return None
    ckpt = out / ckpt_rel
    if not ckpt.exists() or file_hash(ckpt) != entry.get("sha256"):
        return None
    metrics_path = out / metrics_rel
    if not metrics_path.exists():
        return None
    model = load_checkpoint(ckpt, expected_arch=sc.arch)
    return model, read_metrics(metrics_path)
