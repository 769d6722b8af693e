"""Experiment configuration: a flat UTF-8 ``key=value`` file with dotted keys.

    # comments and blank lines are ignored
    seed=0
    data.source=mnist
    model.n=100
    train.lr=0.015

Unknown keys are rejected. Relative data paths are resolved against the
directory of the config file; the output directory against the working
directory. :meth:`ExperimentConfig.canonical` renders every key except
``output.dir``, defaults included, in sorted order; its SHA-256 addresses the
output directory so that different configurations never share artifacts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .network import Activation
from .robustness import AttackKind
from .training import OptimizerKind, TrainConfig


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _kinds(text: str) -> tuple[AttackKind, ...]:
    return tuple(AttackKind(v.strip()) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, (AttackKind, OptimizerKind)):
        return value.value
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # dataset
    data_source: str = "synth"
    train_images: str = "data/mnist/train-images-idx3-ubyte.gz"
    train_labels: str = "data/mnist/train-labels-idx1-ubyte.gz"
    test_images: str = "data/mnist/t10k-images-idx3-ubyte.gz"
    test_labels: str = "data/mnist/t10k-labels-idx1-ubyte.gz"
    train_count: int = 5000
    test_count: int = 1000
    synth_classes: int = 2
    synth_dim: int = 10
    synth_margin: float = 3.0
    synth_sigma: float = 1.0
    # model
    n: int = 20
    gamma: float = 0.95
    activation: str = "relu"
    bias_only: bool = False
    t_scale: float = 1.0
    # training
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    lam: float = 0.0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    tol: float = 1e-6
    max_iter: int = 500
    # evaluation
    eval_tol: float = 1e-10
    eval_max_iter: int = 20000
    attack_kinds: tuple = (AttackKind.INVERSION, AttackKind.UNIFORM_NOISE, AttackKind.FGSM, AttackKind.PGDM)
    epsilons: tuple = (0.0, 0.01, 0.02, 0.05, 0.1)
    attack_count: int = 200
    attack_seed: int = 0
    pgdm_steps: int = 20
    # solver comparison
    compare_n: int = 50
    compare_count: int = 10
    compare_mu: float = 0.9
    compare_tol: float = 1e-8
    # not part of the hash
    out_dir: str = field(default="out", compare=False)
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.data_source not in ("mnist", "synth"):
            raise ValueError(f"data.source must be mnist or synth, got {self.data_source!r}")
        if not self.gamma < 1:
            raise ValueError("model.gamma must be < 1")
        if self.n < 1 or self.train_count < 1 or self.test_count < 1:
            raise ValueError("sizes must be positive")
        if list(self.epsilons) != sorted(self.epsilons) or any(e < 0 for e in self.epsilons):
            raise ValueError("attack.epsilons must be ascending and nonnegative")
        Activation.parse(self.activation)
        self.train_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lam=self.lam,
            seed=self.seed,
            optimizer=self.optimizer,
            tol=self.tol,
            max_iter=self.max_iter,
        )

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def canonical(self) -> str:
        items = [(key, _fmt(getattr(self, name))) for key, (name, _) in KEYS_HASHED.items()]
        return "".join(f"{k}={v}\n" for k, v in sorted(items))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def output_dir(self) -> Path:
        return Path(self.out_dir) / self.config_hash()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


# dotted key -> (field name, parser)
KEYS = {
    "seed": ("seed", int),
    "data.source": ("data_source", str),
    "data.train_images": ("train_images", str),
    "data.train_labels": ("train_labels", str),
    "data.test_images": ("test_images", str),
    "data.test_labels": ("test_labels", str),
    "data.train_count": ("train_count", int),
    "data.test_count": ("test_count", int),
    "synth.classes": ("synth_classes", int),
    "synth.dim": ("synth_dim", int),
    "synth.margin": ("synth_margin", float),
    "synth.sigma": ("synth_sigma", float),
    "model.n": ("n", int),
    "model.gamma": ("gamma", float),
    "model.activation": ("activation", str),
    "model.bias_only": ("bias_only", _bool),
    "model.t_scale": ("t_scale", float),
    "train.lr": ("lr", float),
    "train.batch_size": ("batch_size", int),
    "train.epochs": ("epochs", int),
    "train.lambda": ("lam", float),
    "train.optimizer": ("optimizer", OptimizerKind),
    "train.tol": ("tol", float),
    "train.max_iter": ("max_iter", int),
    "eval.tol": ("eval_tol", float),
    "eval.max_iter": ("eval_max_iter", int),
    "attack.kinds": ("attack_kinds", _kinds),
    "attack.epsilons": ("epsilons", _floats),
    "attack.count": ("attack_count", int),
    "attack.seed": ("attack_seed", int),
    "attack.pgdm_steps": ("pgdm_steps", int),
    "compare.n": ("compare_n", int),
    "compare.count": ("compare_count", int),
    "compare.mu": ("compare_mu", float),
    "compare.tol": ("compare_tol", float),
    "output.dir": ("out_dir", str),
}

assert {name for name, _ in KEYS.values()} == {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
KEYS_HASHED = {k: v for k, v in KEYS.items() if k != "output.dir"}


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        if key not in KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        name, conv = KEYS[key]
        try:
            values[name] = conv(value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return ExperimentConfig(base_dir=str(base_dir), **values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
