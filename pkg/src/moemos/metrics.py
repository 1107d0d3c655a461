"""Utterance- and system-level MSE / LCC / SRCC / KTAU, competition ranking,
and leaderboard rendering."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

METRICS = ("mse", "lcc", "srcc", "ktau")
LOWER_IS_BETTER = {"mse": True, "lcc": False, "srcc": False, "ktau": False}


@dataclass
class MetricsReport:
    level: str
    mse: float
    lcc: float | None   # None: undefined (constant input)
    srcc: float | None
    ktau: float | None
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in ("level", "mse", "lcc", "srcc", "ktau", "n")})


def average_ranks(x) -> np.ndarray:
    """1-based ranks with tied values given the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float | None:
    return pearson(average_ranks(x), average_ranks(y))


def _tie_pairs(x: np.ndarray) -> int:
    _, counts = np.unique(x, return_counts=True)
    return int(sum(int(t) * (int(t) - 1) // 2 for t in counts))


def kendall_tau_b(x, y) -> float | None:
    """Tie-corrected Kendall tau: (C - D) / sqrt((n0 - n1)(n0 - n2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    s = int(np.sum(sx * sy))          # concordant minus discordant
    n0 = n * (n - 1) // 2
    denom = (n0 - _tie_pairs(x)) * (n0 - _tie_pairs(y))
    if denom == 0:
        return None
    return s / math.sqrt(denom)


def utterance_metrics(pred, true, level: str = "utterance") -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"pred and true must be equal-length vectors, got {pred.shape} and {true.shape}")
    if len(pred) < 2:
        raise ValueError("need at least 2 points")
    mse = float(np.mean((pred - true) ** 2))
    return MetricsReport(level, mse, pearson(pred, true), spearman(pred, true),
                         kendall_tau_b(pred, true), len(pred))


def system_means(values, system_ids) -> tuple[list[str], np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    names = sorted(set(system_ids))
    ids = np.asarray(system_ids)
    return names, np.array([values[ids == s].mean() for s in names])


def system_metrics(pred, true, system_ids) -> MetricsReport:
    if len(system_ids) != len(pred) or len(pred) != len(true):
        raise ValueError("pred, true and system_ids must have equal length")
    names, p = system_means(pred, system_ids)
    if len(names) < 2:
        raise ValueError("system-level metrics need at least 2 systems")
    _, t = system_means(true, system_ids)
    return utterance_metrics(p, t, level="system")


def competition_rank(values, higher_is_better: bool) -> list[int]:
    """Standard competition ranking ("1224"): ties share the best rank of their group."""
    vals = [float(v) for v in values]
    key = [-v if higher_is_better else v for v in vals]
    # rank = 1 + number of entries strictly better
    return [1 + sum(1 for o in key if o < k) for k in key]


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(np.atleast_2d(logits), axis=1) == np.asarray(labels)))


def evaluate_model(model, data, mos_override=None):
    """(utterance report, system report, classification accuracy) in eval mode."""
    X = data.embeddings
    true = data.mos if mos_override is None else np.asarray(mos_override, dtype=np.float64)
    if np.isnan(true).any():
        raise ValueError("evaluation data must carry MOS labels")
    out = model.forward(X, train=False)
    utt = utterance_metrics(out.mos_pred, true)
    sysm = system_metrics(out.mos_pred, true, data.system_ids)
    return utt, sysm, accuracy(out.class_logits, data.labels)


# -- rank tables -----------------------------------------------------------

def format_value(v: float | None) -> str:
    if v is None:
        return "n/a"
    return str(Decimal(repr(float(v))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def rank_table(entries: list[tuple[str, MetricsReport]]) -> list[dict]:
    """Rows of {name, raw, ranks}; undefined metrics get rank None."""
    if not entries:
        raise ValueError("rank table needs at least one entry")
    ranks: dict[str, list] = {}
    for m in METRICS:
        vals = [getattr(r, m) for _, r in entries]
        defined = [i for i, v in enumerate(vals) if v is not None]
        col: list = [None] * len(vals)
        for i, rk in zip(defined, competition_rank([vals[i] for i in defined], not LOWER_IS_BETTER[m])):
            col[i] = rk
        ranks[m] = col
    return [{"name": name, "raw": rep.to_dict(), "ranks": {m: ranks[m][i] for m in METRICS}}
            for i, (name, rep) in enumerate(entries)]


def render_rank_table(entries: list[tuple[str, MetricsReport]], level: str | None = None) -> str:
    rows = rank_table(entries)
    level = level or entries[0][1].level
    title = f"{level.capitalize()}-level"
    width = max(6, max(len(r["name"]) for r in rows))
    head = f"{'':<{width}} | {'MSE':>6} {'LCC':>6} {'SRCC':>6} {'KTAU':>6} | {'MSE':>4} {'LCC':>4} {'SRCC':>4} {'KTAU':>4}"
    lines = [f"{'':<{width}} | {title + ' (Raw)':<27} | {title + ' (Rank)'}", head, "-" * len(head)]
    for r in rows:
        raw = " ".join(f"{format_value(r['raw'][m]):>6}" for m in METRICS)
        rk = " ".join(f"{'-' if r['ranks'][m] is None else r['ranks'][m]:>4}" for m in METRICS)
        lines.append(f"{r['name']:<{width}} | {raw} | {rk}")
    return "\n".join(lines)


def rank_table_json(entries: list[tuple[str, MetricsReport]]) -> str:
    return json.dumps({"rows": rank_table(entries)}, indent=2)
