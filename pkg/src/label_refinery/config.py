"""YAML experiment configuration with line-precise validation.

Example::

    version: 1
    seed: 0
    dataset:
      root: data/toy          # classes.tsv, stats.tsv, train.lrds, val.lrds
    taxonomy:                 # only needed by category_taxonomy stages
      tree: data/toy/taxonomy.tsv
      leaves: data/toy/leaves.tsv
    chain:
      - name: gt
        provider: ground_truth
        schedule: {preset: desk, epochs: 20}
      - name: refined
        provider: soft_dynamic
        loss: kl_label_to_output

Relative paths are resolved against the configuration file's directory.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .adversarial import AdversarialConfig
from .exceptions import ConfigError
from .losses import LOSS_CHOICES
from .nn import ARCHITECTURES
from .refinery import (
    LABEL_READING_PROVIDERS,
    PROVIDERS,
    SCHEDULE_PRESETS,
    TEACHER_PROVIDERS,
    ChainConfig,
    StageConfig,
    TrainingSchedule,
)

CONFIG_VERSION = 1

_TOP_KEYS = {"version", "seed", "dataset", "taxonomy", "chain", "crops", "eval", "output"}
_STAGE_KEYS = {
    "name", "arch", "provider", "loss", "schedule", "adversarial", "init", "teacher",
    "init_checkpoint", "taxonomy_normalization", "taxonomy_temperature", "eval_every",
}
_SCHEDULE_KEYS = {"preset", "epochs", "lr_initial", "lr_drops", "momentum", "weight_decay", "batch_size"}


@dataclass
class ExperimentConfig:
    chain: ChainConfig
    dataset_root: Path
    train_split: str = "train"
    val_split: str = "val"
    taxonomy_tree: Path = None
    taxonomy_leaves: Path = None
    output: Path = None
    source: Path = None
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def with_seed(self, seed):
        """Copy with every stream re-seeded from ``seed``."""
        stages = [replace(s, schedule=replace(s.schedule, seed=seed)) for s in self.chain.stages]
        return replace(self, seed=seed, chain=replace(self.chain, stages=stages, seed=seed))


class _Doc:
    """Plain Python values plus the source line of every key path."""

    def __init__(self, text, source):
        self.source = source
        self.lines = {}
        try:
            loader = yaml.SafeLoader(text)
            try:
                node = loader.get_single_node()
                self.value = {} if node is None else self._convert(loader, node, ())
            finally:
                loader.dispose()
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            line = mark.line + 1 if mark is not None else None
            raise ConfigError(f"malformed YAML: {exc.problem}", field=source, line=line) from None

    def _convert(self, loader, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            out = {}
            for key_node, value_node in node.value:
                key = loader.construct_object(key_node, deep=True)
                if key in out:
                    raise ConfigError("duplicate key", field=_dotted(path + (key,)), line=key_node.start_mark.line + 1)
                out[key] = self._convert(loader, value_node, path + (key,))
                self.lines[path + (key,)] = key_node.start_mark.line + 1
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._convert(loader, item, path + (i,)) for i, item in enumerate(node.value)]
        return loader.construct_object(node, deep=True)

    def line(self, path):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def error(self, path, message):
        return ConfigError(message, field=_dotted(path), line=self.line(path))


def _dotted(path):
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def _expect(doc, path, value, types, what):
    if not isinstance(value, types) or isinstance(value, bool) and bool not in _tuple(types):
        raise doc.error(path, f"expected {what}, got {type(value).__name__}")
    return value


def _tuple(t):
    return t if isinstance(t, tuple) else (t,)


def _mapping(doc, path, value, allowed):
    _expect(doc, path, value, dict, "a mapping")
    for key in value:
        if key not in allowed:
            raise doc.error(tuple(path) + (key,), f"unknown key; expected one of {sorted(allowed)}")
    return value


def _path(doc, path, value, base, must_exist=True):
    _expect(doc, path, value, str, "a path")
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.exists():
        raise doc.error(path, f"file {value!r} does not exist")
    return p


def _pair(doc, path, value):
    _expect(doc, path, value, list, "a two-element list")
    if len(value) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise doc.error(path, "expected two numbers")
    lo, hi = float(value[0]), float(value[1])
    if not 0 < lo <= hi:
        raise doc.error(path, "expected 0 < low <= high")
    return (lo, hi)


def _schedule(doc, path, value, seed):
    if value is None:
        value = {}
    _mapping(doc, path, value, _SCHEDULE_KEYS)
    preset = value.get("preset", "desk")
    if preset not in SCHEDULE_PRESETS:
        raise doc.error(path + ("preset",), f"unknown preset {preset!r}; choose from {sorted(SCHEDULE_PRESETS)}")
    params = SCHEDULE_PRESETS[preset].to_dict()
    params["seed"] = seed
    for key in _SCHEDULE_KEYS - {"preset"}:
        if key in value:
            params[key] = value[key]
    try:
        return TrainingSchedule.from_dict(params)
    except ConfigError as exc:
        key = (exc.field or "").removeprefix("schedule.")
        raise doc.error(path + ((key,) if key else ()), str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise doc.error(path, f"invalid schedule: {exc}") from None


def _stage(doc, path, value, base, earlier, seed, index):
    _mapping(doc, path, value, _STAGE_KEYS)
    if "name" not in value:
        raise doc.error(path, "missing required key 'name'")
    name = _expect(doc, path + ("name",), value["name"], str, "a string")
    if not name or "/" in name or name in earlier:
        raise doc.error(path + ("name",), f"stage name {name!r} must be non-empty, unique and contain no '/'")
    arch = value.get("arch", "smallnet")
    if arch not in ARCHITECTURES:
        raise doc.error(path + ("arch",), f"unknown arch {arch!r}; choose from {sorted(ARCHITECTURES)}")
    provider = value.get("provider", "ground_truth" if index == 0 else "soft_dynamic")
    if provider not in PROVIDERS:
        raise doc.error(path + ("provider",), f"unknown provider {provider!r}; choose from {list(PROVIDERS)}")
    if index > 0 and provider in LABEL_READING_PROVIDERS:
        raise doc.error(path + ("provider",), f"stage {index + 1} cannot read ground-truth labels via {provider!r}")
    loss = value.get("loss", "cross_entropy_soft" if provider == "ground_truth" else "kl_label_to_output")
    if loss not in LOSS_CHOICES:
        raise doc.error(path + ("loss",), f"unknown loss {loss!r}; choose from {list(LOSS_CHOICES)}")
    adversarial = None
    if value.get("adversarial") is not None:
        adv = _mapping(doc, path + ("adversarial",), value["adversarial"], {"eta", "clip", "enabled_from_epoch"})
        try:
            adversarial = AdversarialConfig(**adv)
        except ConfigError as exc:
            raise doc.error(path + ("adversarial",), str(exc)) from None
    teacher = value.get("teacher")
    needs_teacher = provider in TEACHER_PROVIDERS or adversarial is not None
    if teacher is not None:
        if not needs_teacher:
            raise doc.error(path + ("teacher",), f"provider {provider!r} does not use a teacher")
        teacher = _model_ref(doc, path + ("teacher",), teacher, base, earlier)
    elif needs_teacher and index == 0:
        raise doc.error(path + ("teacher",), "the first stage needs an explicit teacher checkpoint")
    init = value.get("init", "random")
    if init not in ("random", "from_checkpoint"):
        raise doc.error(path + ("init",), "expected 'random' or 'from_checkpoint'")
    init_ckpt = value.get("init_checkpoint")
    if init_ckpt is not None:
        if init != "from_checkpoint":
            raise doc.error(path + ("init_checkpoint",), "only used with init: from_checkpoint")
        init_ckpt = _model_ref(doc, path + ("init_checkpoint",), init_ckpt, base, earlier)
    elif init == "from_checkpoint" and teacher is None and index == 0:
        raise doc.error(path + ("init",), "from_checkpoint on the first stage needs init_checkpoint")
    norm = value.get("taxonomy_normalization", "sum")
    if norm not in ("sum", "softmax"):
        raise doc.error(path + ("taxonomy_normalization",), "expected 'sum' or 'softmax'")
    temp = _expect(doc, path + ("taxonomy_temperature",), value.get("taxonomy_temperature", 1.0),
                   (int, float), "a number")
    if temp <= 0:
        raise doc.error(path + ("taxonomy_temperature",), "must be positive")
    eval_every = _expect(doc, path + ("eval_every",), value.get("eval_every", 1), int, "an integer")
    if eval_every < 1:
        raise doc.error(path + ("eval_every",), "must be at least 1")
    return StageConfig(
        name=name, provider=provider, loss=loss, arch=arch,
        schedule=_schedule(doc, path + ("schedule",), value.get("schedule"), seed),
        adversarial=adversarial, init=init, teacher=teacher, init_checkpoint=init_ckpt,
        taxonomy_normalization=norm, taxonomy_temperature=float(temp), eval_every=eval_every,
    )


def _model_ref(doc, path, value, base, earlier):
    _expect(doc, path, value, str, "'stage:<name>' or a checkpoint path")
    if value.startswith("stage:"):
        if value[len("stage:"):] not in earlier:
            raise doc.error(path, f"no earlier stage named {value[len('stage:'):]!r}")
        return value
    return str(_path(doc, path, value, base))


def parse_config(text, source="<config>", base_dir="."):
    """Validate a configuration document and return an :class:`ExperimentConfig`."""
    doc = _Doc(text, source)
    base = Path(base_dir)
    top = _mapping(doc, (), doc.value, _TOP_KEYS)
    if "version" not in top:
        raise ConfigError("missing required key 'version'", field="version", line=1)
    if top["version"] != CONFIG_VERSION:
        raise doc.error(("version",), f"unsupported version {top['version']!r}; expected {CONFIG_VERSION}")
    seed = _expect(doc, ("seed",), top.get("seed", 0), int, "an integer")
    if seed < 0:
        raise doc.error(("seed",), "must be non-negative")

    if "dataset" not in top:
        raise doc.error((), "missing required key 'dataset'")
    ds = _mapping(doc, ("dataset",), top["dataset"], {"root", "train_split", "val_split"})
    if "root" not in ds:
        raise doc.error(("dataset",), "missing required key 'root'")
    root = _path(doc, ("dataset", "root"), ds["root"], base)
    train_split = ds.get("train_split", "train")
    val_split = ds.get("val_split", "val")
    _path(doc, ("dataset", "root"), str(root / "classes.tsv"), base)
    for key, split in (("train_split", train_split), ("val_split", val_split)):
        if split is None:
            continue
        if not ((root / f"{split}.lrds").exists() or (root / f"{split}.manifest").exists()):
            raise doc.error(("dataset", key), f"no {split}.lrds or {split}.manifest in {root}")

    tree = leaves = None
    if top.get("taxonomy") is not None:
        tx = _mapping(doc, ("taxonomy",), top["taxonomy"], {"tree", "leaves"})
        if "tree" not in tx:
            raise doc.error(("taxonomy",), "missing required key 'tree'")
        tree = _path(doc, ("taxonomy", "tree"), tx["tree"], base)
        if tx.get("leaves") is not None:
            leaves = _path(doc, ("taxonomy", "leaves"), tx["leaves"], base)

    crops = _mapping(doc, ("crops",), top.get("crops") or {}, {"area_range", "ratio_range"})
    area = _pair(doc, ("crops", "area_range"), crops.get("area_range", [0.08, 1.0]))
    if area[1] > 1:
        raise doc.error(("crops", "area_range"), "area fractions must not exceed 1")
    ratio = _pair(doc, ("crops", "ratio_range"), crops.get("ratio_range", [3 / 4, 4 / 3]))
    ev = _mapping(doc, ("eval",), top.get("eval") or {}, {"topk", "num_bins"})
    topk = ev.get("topk", [1, 5])
    if not isinstance(topk, list) or not topk or not all(isinstance(k, int) and k >= 1 for k in topk):
        raise doc.error(("eval", "topk"), "expected a non-empty list of positive integers")
    bins = _expect(doc, ("eval", "num_bins"), ev.get("num_bins", 20), int, "an integer")

    if "chain" not in top:
        raise doc.error((), "missing required key 'chain'")
    chain = _expect(doc, ("chain",), top["chain"], list, "a list of stages")
    if not chain:
        raise doc.error(("chain",), "needs at least one stage")
    stages, earlier = [], set()
    for i, entry in enumerate(chain):
        st = _stage(doc, ("chain", i), entry, base, earlier, seed, i)
        if st.provider == "category_taxonomy" and tree is None:
            raise doc.error(("chain", i, "provider"), "category_taxonomy needs a 'taxonomy.tree' file")
        earlier.add(st.name)
        stages.append(st)

    output = None
    if top.get("output") is not None:
        output = _path(doc, ("output",), top["output"], base, must_exist=False)
    return ExperimentConfig(
        chain=ChainConfig(stages, seed=seed, area_range=area, ratio_range=ratio, topk=tuple(topk), num_bins=bins),
        dataset_root=root, train_split=train_split, val_split=val_split,
        taxonomy_tree=tree, taxonomy_leaves=leaves, output=output, seed=seed, raw=doc.value,
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", field=str(path)) from None
    cfg = parse_config(text, source=str(path), base_dir=path.parent)
    cfg.source = path
    return cfg
