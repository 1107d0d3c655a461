"""Embedding datasets: JSON-lines manifests, MOEB binary embeddings, pooling,
normalization and stratified splits."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"MOEB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    utt_id: str
    system_id: str
    embedding: np.ndarray
    mos: float | None = None
    rater_scores: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim == 2:
            emb = pool_features(emb)
        if emb.ndim != 1:
            raise DatasetError(f"{self.utt_id}: embedding must be a vector or a frame matrix")
        if not np.isfinite(emb).all():
            raise DatasetError(f"{self.utt_id}: embedding contains NaN or Inf")
        object.__setattr__(self, "embedding", emb)
        if self.rater_scores is not None:
            scores = tuple((str(r), float(s)) for r, s in self.rater_scores)
            object.__setattr__(self, "rater_scores", scores)
            if self.mos is not None and scores:
                mean = float(np.mean([s for _, s in scores]))
                if abs(mean - self.mos) > 1e-6:
                    raise DatasetError(
                        f"{self.utt_id}: mos {self.mos} inconsistent with rater mean {mean}")


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    dim: int = field(default=0)
    system_vocab: tuple[str, ...] = field(default=())

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        dims = {s.embedding.shape[0] for s in samples}
        if len(dims) > 1:
            raise DatasetError(f"embedding dimension mismatch across samples: {sorted(dims)}")
        if samples:
            object.__setattr__(self, "dim", dims.pop())
        systems = sorted({s.system_id for s in samples})
        if not self.system_vocab:
            object.__setattr__(self, "system_vocab", tuple(systems))
        else:
            object.__setattr__(self, "system_vocab", tuple(self.system_vocab))
            missing = set(systems) - set(self.system_vocab)
            if missing:
                raise DatasetError(f"system_vocab missing {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def embeddings(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.dim))
        return np.stack([s.embedding for s in self.samples])

    @property
    def mos(self) -> np.ndarray:
        return np.array([np.nan if s.mos is None else s.mos for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.system_vocab)}
        return np.array([index[s.system_id] for s in self.samples], dtype=np.int64)

    @property
    def system_ids(self) -> list[str]:
        return [s.system_id for s in self.samples]

    @property
    def utt_ids(self) -> list[str]:
        return [s.utt_id for s in self.samples]

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.dim, self.system_vocab)

    def with_embeddings(self, X: np.ndarray) -> "Dataset":
        samples = tuple(replace(s, embedding=x) for s, x in zip(self.samples, X))
        return Dataset(samples, X.shape[1] if len(X) else self.dim, self.system_vocab)


def pool_features(frames) -> np.ndarray:
    """Mean over the frame axis of a (T, D) matrix."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise DatasetError(f"expected a (T, D) frame matrix, got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise DatasetError("cannot pool zero frames")
    return frames.mean(axis=0)


# -- binary embeddings -------------------------------------------------------

def write_embeddings(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise DatasetError("embedding rows must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows.shape[1], rows.shape[0]))
        fh.write(rows.astype("<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: unknown magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * dim * count:
        raise DatasetError(f"{path}: expected {count}x{dim} float32 rows, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float64)


# -- manifests ---------------------------------------------------------------

def load_manifest(path, require_labels: bool = False) -> Dataset:
    path = Path(path)
    cache: dict[Path, np.ndarray] = {}
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            utt_id = rec.get("utt_id")
            if not isinstance(utt_id, str) or not isinstance(rec.get("system_id"), str):
                raise DatasetError(f"{path}:{lineno}: utt_id and system_id must be strings")
            has_inline, has_ref = "embedding" in rec, "embedding_ref" in rec
            if has_inline == has_ref:
                raise DatasetError(f"{utt_id}: exactly one of embedding / embedding_ref required")
            if has_inline:
                emb = np.asarray(rec["embedding"], dtype=np.float64)
            else:
                ref = rec["embedding_ref"]
                bin_path = (path.parent / ref["path"]).resolve()
                if bin_path not in cache:
                    cache[bin_path] = read_embeddings(bin_path)
                rows = cache[bin_path]
                idx = int(ref["row_index"])
                if not 0 <= idx < len(rows):
                    raise DatasetError(f"{utt_id}: row_index {idx} out of range for {bin_path}")
                emb = rows[idx]
            mos = rec.get("mos")
            if mos is None and require_labels:
                raise DatasetError(f"{utt_id}: missing mos label")
            samples.append(Sample(utt_id=utt_id, system_id=rec["system_id"], embedding=emb,
                                  mos=None if mos is None else float(mos),
                                  rater_scores=rec.get("rater_scores")))
    return Dataset(tuple(samples))


def save_manifest(dataset: Dataset, path, binary_name: str | None = None) -> None:
    """Write a manifest; with ``binary_name`` embeddings go to a MOEB file next to it.

    Inline embeddings are stored as JSON floats (exact round trip); the binary
    file stores float32, so only float32-representable data round-trips exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary_name is not None:
        write_embeddings(path.parent / binary_name, dataset.embeddings)
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(dataset.samples):
            rec: dict = {"utt_id": s.utt_id, "system_id": s.system_id}
            if s.mos is not None:
                rec["mos"] = s.mos
            if s.rater_scores is not None:
                rec["rater_scores"] = [[r, v] for r, v in s.rater_scores]
            if binary_name is None:
                rec["embedding"] = s.embedding.tolist()
            else:
                rec["embedding_ref"] = {"path": binary_name, "row_index": i}
            fh.write(json.dumps(rec) + "\n")


# -- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise DatasetError("normalizer scale must be positive")

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.shape[0]:
            raise DatasetError(f"dimension mismatch: normalizer {self.mean.shape[0]} vs data {X.shape[-1]}")
        return (X - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def fit_normalizer(train: Dataset) -> Normalizer:
    if len(train) == 0:
        raise DatasetError("cannot fit a normalizer on an empty dataset")
    X = train.embeddings
    std = X.std(axis=0)  # population std
    return Normalizer(X.mean(axis=0), np.where(std < 1e-12, 1.0, std))


def apply_normalizer(n: Normalizer, d: Dataset) -> Dataset:
    if d.dim != n.mean.shape[0]:
        raise DatasetError(f"dimension mismatch: normalizer {n.mean.shape[0]} vs dataset {d.dim}")
    return d.with_embeddings(n.transform(d.embeddings))


# -- splitting ---------------------------------------------------------------

def split_dataset(d: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified (per system) split into train/val/test.

    Each system's samples are shuffled and cut by floor(fraction * count) for
    val and test; the remainder goes to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DatasetError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    by_system: dict[str, list[int]] = {}
    for i, s in enumerate(d.samples):
        by_system.setdefault(s.system_id, []).append(i)
    for system in sorted(by_system):
        idx = np.asarray(by_system[system])[rng.permutation(len(by_system[system]))]
        n = len(idx)
        n_val = int(np.floor(fractions[1] * n + 1e-9))
        n_test = int(np.floor(fractions[2] * n + 1e-9))
        if n - n_val - n_test < 1:
            # keep train nonempty for tiny systems
            n_test = max(0, n - n_val - 1)
            n_val = min(n_val, n - 1 - n_test)
        n_train = n - n_val - n_test
        parts[0].extend(idx[:n_train].tolist())
        parts[1].extend(idx[n_train:n_train + n_val].tolist())
        parts[2].extend(idx[n_train + n_val:].tolist())
    return tuple(d.subset(sorted(p)) for p in parts)
