"""Experiment configuration: flat sectioned key=value files.

Sections: [task] [teacher] [train] [objective.<label>] [eval]. The format is
deliberately dumb so whole experiments diff cleanly; the config hash is taken
over a canonical re-serialization of the parsed values, which makes it stable
under reformatting and key reordering. Every output file of a run embeds this
hash, and runners refuse to mix files with different hashes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .objectives import ObjectiveSpec, WeightTransform
from .task import TaskConfig, TeacherSpec
from .training import TrainConfig
from .vocab import ADD, MUL

_OP_BY_NAME = {"ADD": ADD, "MUL": MUL}
_NAME_BY_OP = {ADD: "ADD", MUL: "MUL"}

_BASE_ALIASES = {
    "sft": "sft",
    "forward-kl": "forward-kl",
    "kl": "forward-kl",
    "reverse-kl": "reverse-kl",
    "symmetric-kl": "symmetric-kl",
    "gkd": "gkd",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSettings:
    n_problems: int = 5000
    samples_per_problem: int = 1
    max_len: int = 24
    seed: int = 1234

    def __post_init__(self) -> None:
        if self.n_problems < 1 or self.samples_per_problem < 1 or self.max_len < 1:
            raise ConfigError("corpus sizes must be >= 1")


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 0.1
    epochs: int = 6
    batch_size: int = 16
    warmup_fraction: float = 0.05
    clip_norm: float = 1.0
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    family: str = "tabular"
    order: int = 1
    embed_dim: int = 8
    hidden_dim: int = 32
    init_scale: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        if self.family not in ("tabular", "feedforward"):
            raise ConfigError(f"unknown student family {self.family!r}")
        if not self.seeds:
            raise ConfigError("at least one training seed is required")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_fraction=self.warmup_fraction,
            clip_norm=self.clip_norm,
            seed=seed,
            optimizer=self.optimizer,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            weight_decay=self.weight_decay,
        )


@dataclass(frozen=True)
class EvalConfig:
    horizons: tuple[int, ...] = (2, 4, 8, 16)
    eval_size: int = 2000
    drift_problems: int = 500
    seed: int = 7

    def __post_init__(self) -> None:
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise ConfigError("horizons must be non-empty and >= 1")
        if self.eval_size < 1 or self.drift_problems < 1:
            raise ConfigError("evaluation set sizes must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = TaskConfig()
    corpus: CorpusSettings = CorpusSettings()
    teacher: TeacherSpec = TeacherSpec()
    train: TrainSettings = TrainSettings()
    eval: EvalConfig = EvalConfig()
    objectives: tuple[tuple[str, ObjectiveSpec], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        labels = [label for label, _ in self.objectives]
        if len(labels) != len(set(labels)):
            raise ConfigError("objective labels must be unique")

    def objective(self, label: str) -> ObjectiveSpec:
        for lab, spec in self.objectives:
            if lab == label:
                return spec
        raise ConfigError(f"no objective labelled {label!r}")


def default_objectives() -> tuple[tuple[str, ObjectiveSpec], ...]:
    return (
        ("sft", ObjectiveSpec(base="sft", transform=WeightTransform("constant-one"))),
        ("sigmoid_t1", ObjectiveSpec(base="sft", transform=WeightTransform("sigmoid", tau=1.0))),
    )


def default_config() -> ExperimentConfig:
    return ExperimentConfig(objectives=default_objectives())


def _parse_bool(val: str, key: str) -> bool:
    low = val.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {val!r}")


def _parse_int_list(val: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in val.split(",") if v.strip())


def _sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = val
    return sections


def _take(section: dict[str, str], section_name: str, casts: dict[str, object]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, val in section.items():
        if key not in casts:
            raise ConfigError(f"unknown key {key!r} in [{section_name}]")
        out[key] = casts[key](val)  # type: ignore[operator]
    return out


def _parse_objective(label: str, body: dict[str, str]) -> ObjectiveSpec:
    allowed = {"base", "transform", "tau", "tau_convention", "clip_c", "gkd_lambda", "gkd_beta"}
    for key in body:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [objective.{label}]")
    base_raw = body.get("base", "sft").lower()
    if base_raw not in _BASE_ALIASES:
        raise ConfigError(f"objective.{label}: unknown base {base_raw!r}")
    transform = WeightTransform(
        kind=body.get("transform", "constant-one"),
        tau=float(body.get("tau", 1.0)),
        clip=float(body.get("clip_c", 5.0)),
        tau_convention=body.get("tau_convention", "divide"),
    )
    return ObjectiveSpec(
        base=_BASE_ALIASES[base_raw],
        transform=transform,
        gkd_lambda=float(body.get("gkd_lambda", 0.0)),
        gkd_beta=float(body.get("gkd_beta", 0.5)),
    )


def parse_config(text: str) -> ExperimentConfig:
    sections = _sections(text)
    known = {"task", "teacher", "train", "eval"}
    for name in sections:
        if name not in known and not name.startswith("objective."):
            raise ConfigError(f"unknown section [{name}]")

    task_body = dict(sections.get("task", {}))
    task_kw = _take(
        task_body,
        "task",
        {
            "modulus": int,
            "chain_length": int,
            "ops": str,
            "n_problems": int,
            "samples_per_problem": int,
            "max_len": int,
            "corpus_seed": int,
        },
    )
    ops_raw = task_kw.pop("ops", None)
    ops = TaskConfig().ops
    if ops_raw is not None:
        try:
            ops = tuple(_OP_BY_NAME[name.strip().upper()] for name in str(ops_raw).split(","))
        except KeyError as exc:
            raise ConfigError(f"unknown operator {exc.args[0]!r} in [task] ops") from None
    corpus_kw = {
        "n_problems": task_kw.pop("n_problems", CorpusSettings.n_problems),
        "samples_per_problem": task_kw.pop("samples_per_problem", CorpusSettings.samples_per_problem),
        "max_len": task_kw.pop("max_len", CorpusSettings.max_len),
        "seed": task_kw.pop("corpus_seed", CorpusSettings.seed),
    }

    teacher_kw = _take(
        dict(sections.get("teacher", {})),
        "teacher",
        {
            "epsilon_instructed": float,
            "epsilon_plain": float,
            "instructed": lambda v: _parse_bool(v, "instructed"),
        },
    )
    train_kw = _take(
        dict(sections.get("train", {})),
        "train",
        {
            "learning_rate": float,
            "epochs": int,
            "batch_size": int,
            "warmup_fraction": float,
            "clip_norm": float,
            "optimizer": str,
            "adam_beta1": float,
            "adam_beta2": float,
            "adam_eps": float,
            "weight_decay": float,
            "family": str,
            "order": int,
            "embed_dim": int,
            "hidden_dim": int,
            "init_scale": float,
            "seeds": _parse_int_list,
        },
    )
    # per-family training defaults from the coarse sweep: tabular trains with
    # sgd at 0.1, the feed-forward family with adam at 3e-3
    if train_kw.get("family") == "feedforward":
        train_kw.setdefault("optimizer", "adam")
        train_kw.setdefault("learning_rate", 3e-3)
    eval_kw = _take(
        dict(sections.get("eval", {})),
        "eval",
        {
            "horizons": _parse_int_list,
            "eval_size": int,
            "drift_problems": int,
            "eval_seed": int,
        },
    )
    if "eval_seed" in eval_kw:
        eval_kw["seed"] = eval_kw.pop("eval_seed")

    objectives = []
    for name, body in sections.items():
        if name.startswith("objective."):
            label = name[len("objective.") :]
            if not label:
                raise ConfigError("objective sections need a label: [objective.<label>]")
            objectives.append((label, _parse_objective(label, body)))
    if not objectives:
        objectives = list(default_objectives())

    try:
        task = TaskConfig(
            modulus=task_kw.get("modulus", TaskConfig.modulus),
            chain_length=task_kw.get("chain_length", TaskConfig.chain_length),
            ops=ops,
        )
        return ExperimentConfig(
            task=task,
            corpus=CorpusSettings(**corpus_kw),
            teacher=TeacherSpec(**teacher_kw),
            train=TrainSettings(**train_kw),
            eval=EvalConfig(**eval_kw),
            objectives=tuple(objectives),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical serialization; also the byte stream the config hash covers."""
    lines = ["[task]"]
    lines.append(f"modulus = {cfg.task.modulus}")
    lines.append(f"chain_length = {cfg.task.chain_length}")
    lines.append(f"ops = {','.join(_NAME_BY_OP[o] for o in cfg.task.ops)}")
    lines.append(f"n_problems = {cfg.corpus.n_problems}")
    lines.append(f"samples_per_problem = {cfg.corpus.samples_per_problem}")
    lines.append(f"max_len = {cfg.corpus.max_len}")
    lines.append(f"corpus_seed = {cfg.corpus.seed}")
    lines.append("")
    lines.append("[teacher]")
    lines.append(f"epsilon_instructed = {cfg.teacher.epsilon_instructed!r}")
    lines.append(f"epsilon_plain = {cfg.teacher.epsilon_plain!r}")
    lines.append(f"instructed = {'true' if cfg.teacher.instructed else 'false'}")
    lines.append("")
    lines.append("[train]")
    t = cfg.train
    lines.append(f"learning_rate = {t.learning_rate!r}")
    lines.append(f"epochs = {t.epochs}")
    lines.append(f"batch_size = {t.batch_size}")
    lines.append(f"warmup_fraction = {t.warmup_fraction!r}")
    lines.append(f"clip_norm = {t.clip_norm!r}")
    lines.append(f"optimizer = {t.optimizer}")
    lines.append(f"adam_beta1 = {t.adam_beta1!r}")
    lines.append(f"adam_beta2 = {t.adam_beta2!r}")
    lines.append(f"adam_eps = {t.adam_eps!r}")
    lines.append(f"weight_decay = {t.weight_decay!r}")
    lines.append(f"family = {t.family}")
    lines.append(f"order = {t.order}")
    lines.append(f"embed_dim = {t.embed_dim}")
    lines.append(f"hidden_dim = {t.hidden_dim}")
    lines.append(f"init_scale = {t.init_scale!r}")
    lines.append(f"seeds = {','.join(str(s) for s in t.seeds)}")
    lines.append("")
    for label, spec in cfg.objectives:
        lines.append(f"[objective.{label}]")
        lines.append(f"base = {spec.base}")
        lines.append(f"transform = {spec.transform.kind}")
        lines.append(f"tau = {spec.transform.tau!r}")
        lines.append(f"tau_convention = {spec.transform.tau_convention}")
        lines.append(f"clip_c = {spec.transform.clip!r}")
        lines.append(f"gkd_lambda = {spec.gkd_lambda!r}")
        lines.append(f"gkd_beta = {spec.gkd_beta!r}")
        lines.append("")
    lines.append("[eval]")
    lines.append(f"horizons = {','.join(str(h) for h in cfg.eval.horizons)}")
    lines.append(f"eval_size = {cfg.eval.eval_size}")
    lines.append(f"drift_problems = {cfg.eval.drift_problems}")
    lines.append(f"eval_seed = {cfg.eval.seed}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:16]
