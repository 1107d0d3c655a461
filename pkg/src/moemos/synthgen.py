"""Synthetic embedding / rater oracle.

System k's utterances sit in an isotropic Gaussian cloud around ``s * e_k``;
each utterance has a true MOS near its system's base score, and raters add a
fixed personal bias plus per-rating noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, Sample
from .numkernel import RngState

# stream keys; systems use their own index so they never collide with these
_RATER_BIAS_KEY = 10_000
_ASSIGN_KEY = 20_000
_AUX_KEY = 30_000


@dataclass
class SynthConfig:
    n_systems: int = 4
    dim: int = 64
    per_system: int = 200
    system_mos: list[float] = field(default_factory=lambda: [2.0, 3.0, 3.5, 4.5])
    cluster_sep: float = 4.0
    embed_noise: float = 1.0
    utterance_noise: float = 0.1
    rater_bias_std: float = 0.3
    rater_noise_std: float = 0.2
    n_raters_train: int = 10
    n_raters_test: int = 10
    raters_per_utt: int = 4
    aux_per_system: int = 1000  # unlabeled-MOS classification set for stage 1; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if self.n_systems < 2:
            raise ValueError("n_systems must be >= 2")
        if len(self.system_mos) != self.n_systems:
            raise ValueError(f"system_mos has {len(self.system_mos)} entries, expected {self.n_systems}")
        if any(not 1.0 <= m <= 5.0 for m in self.system_mos):
            raise ValueError("system_mos entries must lie in [1, 5]")
        if self.dim < self.n_systems:
            raise ValueError(f"dim ({self.dim}) must be >= n_systems ({self.n_systems})")
        if self.per_system < 1:
            raise ValueError("per_system must be >= 1")
        if self.cluster_sep <= 0:
            raise ValueError("cluster_sep must be positive")
        for name in ("embed_noise", "utterance_noise", "rater_bias_std", "rater_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.raters_per_utt < 1:
            raise ValueError("raters_per_utt must be >= 1")
        if self.aux_per_system < 0:
            raise ValueError("aux_per_system must be >= 0")

    def rater_pool(self, pool: str) -> list[str]:
        if pool == "train":
            return [f"r{i}" for i in range(self.n_raters_train)]
        if pool == "test":
            return [f"r{i}" for i in range(self.n_raters_train, self.n_raters_train + self.n_raters_test)]
        raise ValueError(f"unknown rater pool {pool!r}")


@dataclass
class GroundTruth:
    utt_ids: list[str]
    true_mos: np.ndarray
    system_index: np.ndarray
    rater_biases: dict[str, float]

    def system_true_mos(self) -> np.ndarray:
        k = int(self.system_index.max()) + 1
        return np.array([self.true_mos[self.system_index == i].mean() for i in range(k)])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for u, m, k in zip(self.utt_ids, self.true_mos, self.system_index):
                fh.write(json.dumps({"kind": "utterance", "utt_id": u, "system_index": int(k),
                                     "true_mos": float(m)}) + "\n")
            for r, b in self.rater_biases.items():
                fh.write(json.dumps({"kind": "rater", "rater_id": r, "bias": b}) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        utts, mos, sys_idx, biases = [], [], [], {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if rec["kind"] == "utterance":
                utts.append(rec["utt_id"])
                mos.append(rec["true_mos"])
                sys_idx.append(rec["system_index"])
            else:
                biases[rec["rater_id"]] = rec["bias"]
        return cls(utts, np.array(mos), np.array(sys_idx, dtype=np.int64), biases)


def system_name(k: int) -> str:
    return f"sys{k:02d}"


def generate_dataset(cfg: SynthConfig) -> tuple[Dataset, GroundTruth]:
    """Draw embeddings and true MOS; dataset ``mos`` holds the true (rater-free) score."""
    cfg.validate()
    root = RngState(cfg.seed)
    samples, utt_ids, true_mos, sys_idx = [], [], [], []
    for k in range(cfg.n_systems):
        rng = root.spawn(k)
        center = np.zeros(cfg.dim)
        center[k] = cfg.cluster_sep
        emb = center + rng.normal(0.0, cfg.embed_noise, (cfg.per_system, cfg.dim))
        # float32-representable so the binary format round-trips exactly
        emb = emb.astype(np.float32).astype(np.float64)
        mos = np.clip(cfg.system_mos[k] + rng.normal(0.0, cfg.utterance_noise, cfg.per_system), 1.0, 5.0)
        for j in range(cfg.per_system):
            uid = f"{system_name(k)}_utt{j:04d}"
            samples.append(Sample(uid, system_name(k), emb[j], mos=float(mos[j])))
            utt_ids.append(uid)
            true_mos.append(mos[j])
            sys_idx.append(k)
    bias_rng = root.spawn(_RATER_BIAS_KEY)
    n_total = cfg.n_raters_train + cfg.n_raters_test
    biases = bias_rng.normal(0.0, cfg.rater_bias_std, n_total)
    rater_biases = {f"r{i}": float(b) for i, b in enumerate(biases)}
    truth = GroundTruth(utt_ids, np.array(true_mos), np.array(sys_idx, dtype=np.int64), rater_biases)
    return Dataset(tuple(samples)), truth


def generate_auxiliary(cfg: SynthConfig) -> Dataset:
    """A larger classification-only set from the same systems (no MOS labels).

    Uses its own seed streams, so it never repeats target utterances.
    """
    cfg.validate()
    if cfg.aux_per_system == 0:
        return Dataset(())
    root = RngState(cfg.seed).spawn(_AUX_KEY)
    samples = []
    for k in range(cfg.n_systems):
        rng = root.spawn(k)
        center = np.zeros(cfg.dim)
        center[k] = cfg.cluster_sep
        emb = center + rng.normal(0.0, cfg.embed_noise, (cfg.aux_per_system, cfg.dim))
        emb = emb.astype(np.float32).astype(np.float64)
        samples.extend(Sample(f"aux_{system_name(k)}_utt{j:05d}", system_name(k), emb[j])
                       for j in range(cfg.aux_per_system))
    return Dataset(tuple(samples), cfg.dim, tuple(system_name(k) for k in range(cfg.n_systems)))


def simulate_raters(truth: GroundTruth, cfg: SynthConfig, pool: str) -> list[tuple[tuple[str, float], ...]]:
    """Per-utterance rater scores drawn from the ``train`` or ``test`` rater pool.

    Every utterance is scored by ``raters_per_utt`` distinct raters chosen at
    random from the pool; each score is clamp(true + rater bias + noise, 1, 5).
    """
    raters = cfg.rater_pool(pool)
    if not raters:
        raise ValueError(f"rater pool {pool!r} is empty")
    if cfg.raters_per_utt > len(raters):
        raise ValueError(f"raters_per_utt ({cfg.raters_per_utt}) exceeds pool size ({len(raters)})")
    rng = RngState(cfg.seed).spawn(_ASSIGN_KEY, 0 if pool == "train" else 1)
    out = []
    for m in truth.true_mos:
        chosen = np.sort(rng.choice(len(raters), cfg.raters_per_utt, replace=False))
        noise = rng.normal(0.0, cfg.rater_noise_std, cfg.raters_per_utt) if cfg.rater_noise_std > 0 \
            else np.zeros(cfg.raters_per_utt)
        scores = []
        for r, e in zip(chosen, noise):
            rid = raters[r]
            scores.append((rid, float(np.clip(m + truth.rater_biases[rid] + e, 1.0, 5.0))))
        out.append(tuple(scores))
    return out


def attach_ratings(dataset: Dataset, ratings) -> Dataset:
    """Replace each sample's mos with the mean of its rater scores."""
    samples = []
    for s, scores in zip(dataset.samples, ratings):
        mos = float(np.mean([v for _, v in scores]))
        samples.append(Sample(s.utt_id, s.system_id, s.embedding, mos=mos, rater_scores=scores))
    return Dataset(tuple(samples), dataset.dim, dataset.system_vocab)


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
