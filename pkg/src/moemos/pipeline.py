"""Run configuration and the generate -> split -> normalize -> train -> evaluate flow."""
from __future__ import annotations

import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, Normalizer, apply_normalizer, fit_normalizer, split_dataset
from .loss import LossWeights
from .metrics import evaluate_model
from .model import MoeConfig, MoeModel, init_model
from .numkernel import RngState
from .synthgen import (GroundTruth, SynthConfig, attach_ratings, generate_auxiliary, generate_dataset,
                       simulate_raters)
from .train import StageConfig, run_full_pipeline

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODEL_KEYS = ("n_experts", "expert_hidden", "expert_out_dim", "dropout_rate", "gate_hidden")
STAGE_KEYS = ("epochs", "lr_max", "batch_size", "dataset_role", "weight_decay", "patience", "max_grad_norm")
MODEL_SEED_KEY = 100


class ConfigError(ValueError):
    pass


def default_stages() -> list[StageConfig]:
    return [StageConfig(1, dataset_role="aux", batch_size=32),
            StageConfig(2, batch_size=8),
            StageConfig(3, batch_size=8)]


@dataclass
class RunConfig:
    seed: int = 0
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: dict = field(default_factory=lambda: {"n_experts": 4, "expert_hidden": [256, 128],
                                                 "expert_out_dim": 64, "dropout_rate": 0.1,
                                                 "gate_hidden": 0})
    loss: LossWeights = field(default_factory=LossWeights)
    stages: list[StageConfig] = field(default_factory=default_stages)

    def validate(self) -> None:
        self.synth.validate()
        self.moe_config(self.synth.dim, self.synth.n_systems).validate()
        for s in self.stages:
            s.validate()
        if sorted(s.stage for s in self.stages) != [1, 2, 3]:
            raise ConfigError("exactly one configuration per stage 1, 2, 3 is required")
        for s in self.stages:
            if s.dataset_role not in ("aux", "train", "val", "test"):
                raise ConfigError(f"stage{s.stage}: unknown dataset_role {s.dataset_role!r}")
            if s.dataset_role == "aux" and self.synth.aux_per_system == 0:
                raise ConfigError(f"stage{s.stage} trains on the auxiliary set but synth.aux_per_system is 0")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {self.fractions}")

    def moe_config(self, input_dim: int, n_classes: int) -> MoeConfig:
        return MoeConfig(input_dim=input_dim, n_classes=n_classes, **self.model)

    def to_dict(self) -> dict:
        synth = dataclasses.asdict(self.synth)
        synth.pop("seed")
        return {
            "seed": self.seed,
            "split": {"fractions": list(self.fractions)},
            "synth": synth,
            "model": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.model.items()},
            "loss": {k: v for k, v in dataclasses.asdict(self.loss).items() if k not in ("alpha", "beta")},
            **{f"stage{s.stage}": {k: getattr(s, k) for k in STAGE_KEYS} for s in self.stages},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"seed", "split", "synth", "model", "loss", "stage1", "stage2", "stage3"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections/keys: {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        split = dict(d.get("split", {}))
        _reject_unknown("split", split, {"fractions"})
        fractions = tuple(float(f) for f in split.get("fractions", (0.6, 0.2, 0.2)))

        synth_d = dict(d.get("synth", {}))
        synth_fields = {f.name for f in dataclasses.fields(SynthConfig)} - {"seed"}
        _reject_unknown("synth", synth_d, synth_fields)
        synth = SynthConfig(**synth_d, seed=seed)

        model = cls().model
        model_d = dict(d.get("model", {}))
        _reject_unknown("model", model_d, set(MODEL_KEYS))
        model.update(model_d)

        loss_d = dict(d.get("loss", {}))
        _reject_unknown("loss", loss_d, {f.name for f in dataclasses.fields(LossWeights)} - {"alpha", "beta"})
        loss = LossWeights(**loss_d)

        stages = []
        for default in default_stages():
            sd = dict(d.get(f"stage{default.stage}", {}))
            _reject_unknown(f"stage{default.stage}", sd, set(STAGE_KEYS))
            base = {k: getattr(default, k) for k in STAGE_KEYS}
            base.update(sd)
            stages.append(StageConfig(stage=default.stage, **base))
        cfg = cls(seed, fractions, synth, model, loss, stages)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        return RunConfig.from_dict(d)


def _reject_unknown(section: str, d: dict, allowed: set) -> None:
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "config" in d and "stages" in d:  # a run summary
        d = d["config"]
    return RunConfig.from_dict(d)


# -- data ------------------------------------------------------------------

@dataclass
class SyntheticData:
    dataset: Dataset          # labeled by the training rater pool
    shifted: Dataset          # same utterances labeled by the disjoint test pool
    truth: GroundTruth
    aux: Dataset              # classification-only pre-training set (may be empty)


def make_synthetic(cfg: RunConfig) -> SyntheticData:
    base, truth = generate_dataset(cfg.synth)
    same = attach_ratings(base, simulate_raters(truth, cfg.synth, "train"))
    shifted = attach_ratings(base, simulate_raters(truth, cfg.synth, "test"))
    return SyntheticData(same, shifted, truth, generate_auxiliary(cfg.synth))


@dataclass
class Prepared:
    train: Dataset
    val: Dataset
    test: Dataset
    normalizer: Normalizer
    split_ids: dict[str, list[str]]
    aux: Dataset | None = None

    def as_roles(self) -> dict[str, Dataset]:
        roles = {"train": self.train, "val": self.val, "test": self.test}
        if self.aux is not None and len(self.aux):
            roles["aux"] = self.aux
        return roles


def prepare(dataset: Dataset, cfg: RunConfig, aux: Dataset | None = None) -> Prepared:
    """Split the target set, fit the normalizer on its train part, and apply it everywhere."""
    train, val, test = split_dataset(dataset, cfg.fractions, seed=cfg.seed)
    norm = fit_normalizer(train)
    ids = {"train": train.utt_ids, "val": val.utt_ids, "test": test.utt_ids}
    if aux is not None and len(aux):
        aux = apply_normalizer(norm, Dataset(aux.samples, aux.dim, train.system_vocab))
    return Prepared(apply_normalizer(norm, train), apply_normalizer(norm, val),
                    apply_normalizer(norm, test), norm, ids, aux)


def select(dataset: Dataset, utt_ids: list[str], normalizer: Normalizer | None = None) -> Dataset:
    pos = {u: i for i, u in enumerate(dataset.utt_ids)}
    missing = [u for u in utt_ids if u not in pos]
    if missing:
        raise ValueError(f"{len(missing)} utterances not in dataset, e.g. {missing[0]}")
    sub = dataset.subset([pos[u] for u in utt_ids])
    return apply_normalizer(normalizer, sub) if normalizer is not None else sub


def train_model(cfg: RunConfig, prepared: Prepared, datasets: dict | None = None):
    d = prepared.train
    model = init_model(cfg.moe_config(d.dim, len(d.system_vocab)), RngState(cfg.seed).spawn(MODEL_SEED_KEY))
    roles = prepared.as_roles()
    if datasets:
        roles.update(datasets)
    return run_full_pipeline(model, cfg.stages, roles, cfg.loss, seed=cfg.seed)


@dataclass
class ExperimentResult:
    model: MoeModel
    histories: list[dict]
    prepared: Prepared
    same: tuple          # (utterance, system, accuracy) on test split, training-pool labels
    shifted: tuple       # same utterances, disjoint-pool labels


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    data = make_synthetic(cfg)
    prepared = prepare(data.dataset, cfg, data.aux)
    model, histories = train_model(cfg, prepared)
    same = evaluate_model(model, prepared.test)
    shifted_test = select(data.shifted, prepared.split_ids["test"], prepared.normalizer)
    shifted = evaluate_model(model, shifted_test)
    return ExperimentResult(model, histories, prepared, same, shifted)


def write_training_log(histories: list[dict], path) -> None:
    cols = ["stage", "epoch", "alpha", "beta", "total", "mos", "classification", "diversity",
            "sparsity", "lr", "val_loss"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for h in histories:
            for row in h["epochs"]:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


def gate_matrix(model: MoeModel, d: Dataset) -> np.ndarray:
    return model.forward(d.embeddings, train=False).gate_weights
