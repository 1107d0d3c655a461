"""Three-stage training: AdamW, per-epoch cosine annealing, global-norm clipping,
early stopping on validation loss, and a finite-difference gradient checker."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .loss import LossBreakdown, LossWeights, loss_and_grads, objective, task_weight_schedule, total_loss
from .model import MoeModel, expert_utilization
from .numkernel import ParamTensor, RngState

log = logging.getLogger(__name__)

DEFAULT_LR = {1: 1e-4, 2: 5e-5, 3: 1e-5}
DEFAULT_EPOCHS = {1: 12, 2: 15, 3: 10}


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: int
    epochs: int | None = None
    lr_max: float | None = None
    batch_size: int = 32
    dataset_role: str = "train"
    weight_decay: float = 0.01
    patience: int = 5
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"invalid stage {self.stage}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.lr_max is None:
            self.lr_max = DEFAULT_LR[self.stage]

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.weight_decay < 0 or self.max_grad_norm <= 0:
            raise ValueError("weight_decay must be >= 0 and max_grad_norm > 0")


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = math.inf
    epochs_since_improvement: int = 0
    history: list[dict] = field(default_factory=list)


# -- optimizer pieces ------------------------------------------------------

def adamw_step(params: list[ParamTensor], state: TrainState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    b1, b2 = betas
    for p in params:
        if not np.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {p.name}")
    state.step += 1
    t = state.step
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.values))
        v = state.v.setdefault(p.name, np.zeros_like(p.values))
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.values = p.values - lr * weight_decay * p.values
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(lr_max: float, epoch: int, epochs: int) -> float:
    """Cosine decay from lr_max at the first epoch to 0.01 * lr_max at the last."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epochs == 1:
        return lr_max
    lr_min = 0.01 * lr_max
    if epoch == epochs - 1:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def clip_gradients(params: list[ParamTensor], max_norm: float = 1.0) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


class EarlyStopper:
    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


# -- training loop ---------------------------------------------------------

def _arrays(d: Dataset):
    return d.embeddings, d.mos, d.labels


def evaluate_loss(model: MoeModel, d: Dataset, w: LossWeights) -> LossBreakdown:
    X, mos, labels = _arrays(d)
    return total_loss(model.forward(X, train=False), mos, labels, w)


def train_step(model: MoeModel, X, mos, labels, w: LossWeights, rng: RngState | None,
               train: bool = True) -> LossBreakdown:
    model.zero_grad()
    out = model.forward(X, train=train, rng=rng)
    breakdown, d_mos, d_logits, d_gates = loss_and_grads(out, mos, labels, w)
    model.backward(out, d_mos, d_logits, d_gates)
    return breakdown


def run_stage(model: MoeModel, cfg: StageConfig, train: Dataset, val: Dataset,
              weights: LossWeights, seed: int = 0, state: TrainState | None = None):
    """Train one stage in place; returns (model, history).

    The model ends holding the parameters from its best validation epoch.
    """
    cfg.validate()
    state = state or TrainState()
    history = {"stage": cfg.stage, "epochs": [], "steps": [], "stop_reason": "completed",
               "epochs_run": 0, "best_epoch": None}
    if cfg.epochs == 0:
        history["stop_reason"] = "zero_epochs"
        return model, history
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be nonempty")

    rng = RngState(seed).spawn(cfg.stage)
    params = model.parameters()
    X, mos, labels = _arrays(train)
    val_w = weights.with_tasks(*task_weight_schedule(cfg.stage, cfg.epochs - 1, cfg.epochs))
    stopper = EarlyStopper(cfg.patience)
    best = model.copy()

    for epoch in range(cfg.epochs):
        alpha, beta = task_weight_schedule(cfg.stage, epoch, cfg.epochs)
        w = weights.with_tasks(alpha, beta)
        lr = cosine_lr(cfg.lr_max, epoch, cfg.epochs)
        order = rng.permutation(len(train))
        sums = np.zeros(5)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            br = train_step(model, X[idx], mos[idx], labels[idx], w, rng)
            pre = clip_gradients(params, cfg.max_grad_norm)
            post = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
            adamw_step(params, state, lr, weight_decay=cfg.weight_decay)
            sums += len(idx) * np.array([br.total, br.mos, br.classification, br.diversity, br.sparsity])
            history["steps"].append({"step": state.step, "epoch": epoch, "grad_norm": pre,
                                     "clipped_norm": post})
        means = sums / len(train)

        out = model.forward(val.embeddings, train=False)
        vloss = total_loss(out, val.mos, val.labels, val_w).total
        if not math.isfinite(vloss):
            raise TrainingError(f"validation loss diverged in stage {cfg.stage}, epoch {epoch}")
        mean_w, freq = expert_utilization(out.gate_weights)
        improved, stop = stopper.update(epoch, vloss)
        if improved:
            best.load_values(model)
        history["epochs"].append({
            "stage": cfg.stage, "epoch": epoch, "alpha": alpha, "beta": beta, "lr": lr,
            "total": means[0], "mos": means[1], "classification": means[2],
            "diversity": means[3], "sparsity": means[4], "val_loss": vloss,
            "gate_mean": mean_w.tolist(), "gate_argmax_freq": freq.tolist(),
        })
        log.info("stage %d epoch %d lr %.3g train %.4f val %.4f", cfg.stage, epoch, lr, means[0], vloss)
        if stop:
            history["stop_reason"] = "early_stop"
            break

    state.best_val = stopper.best
    state.epochs_since_improvement = stopper.bad_epochs
    history["epochs_run"] = len(history["epochs"])
    history["best_epoch"] = stopper.best_epoch
    history["best_val_loss"] = stopper.best
    model.load_values(best)
    state.history.append(history)
    return model, history


def run_full_pipeline(model: MoeModel, stages: list[StageConfig], datasets: dict[str, Dataset],
                      weights: LossWeights, seed: int = 0):
    """Run stages in order, resetting optimizer state at each boundary.

    ``datasets`` maps roles to splits; each stage trains on ``datasets[stage.dataset_role]``
    and early-stops on ``datasets["val"]``.
    """
    histories = []
    for cfg in sorted(stages, key=lambda s: s.stage):
        model, hist = run_stage(model, cfg, datasets[cfg.dataset_role], datasets["val"], weights,
                                seed=seed, state=TrainState())
        histories.append(hist)
    return model, histories


# -- gradient verification -------------------------------------------------

def grad_check(model: MoeModel, X, mos, labels, weights: LossWeights, n_params: int = 200,
               step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least ``n_params`` scalar parameters spread over every tensor.
    Runs in eval mode so dropout cannot perturb the comparison.  The
    finite differences are evaluated on a long-double copy of the parameters,
    which keeps cancellation noise well below the float64 analytic gradient's
    own rounding on platforms where long double is wider than double.
    """
    return grad_check_report(model, X, mos, labels, weights, n_params, step, seed)["max_rel_error"]


def _allocate(n: int, sizes: list[int]) -> list[int]:
    """Spread n samples over tensors: an even share each, capped by size, with the
    shortfall from small tensors handed to tensors that still have room."""
    quota = [min(s, max(1, math.ceil(n / len(sizes)))) for s in sizes]
    while sum(quota) < min(n, sum(sizes)):
        for i, s in enumerate(sizes):
            if quota[i] < s and sum(quota) < n:
                quota[i] += 1
    return quota


def grad_check_report(model: MoeModel, X, mos, labels, weights: LossWeights, n_params: int = 200,
                      step: float = 1e-5, seed: int = 0) -> dict:
    X = np.asarray(X, dtype=np.float64)
    train_step(model, X, mos, labels, weights, rng=None, train=False)
    params = model.parameters()
    analytic = {p.name: p.grad.copy() for p in params}
    saved = [p.values for p in params]
    for p in params:
        p.values = p.values.astype(np.longdouble)
    rng = np.random.default_rng(seed)
    quota = _allocate(n_params, [p.values.size for p in params])

    base = model.forward(X, train=False).cache["E"]
    n_exp = model.cfg.n_experts

    def f(owner):
        # only the expert owning the perturbed tensor needs recomputing
        cached = {i: base[:, i] for i in range(n_exp) if i != owner}
        return objective(model.forward(X, train=False, expert_outputs=cached), mos, labels, weights)

    worst, checked, per_name = 0.0, 0, {}
    for p, k in zip(params, quota):
        owner = int(p.name[6:].split(".")[0]) if p.name.startswith("expert") else None
        flat = p.values.reshape(-1)
        picks = rng.choice(flat.size, size=k, replace=False)
        tensor_worst = 0.0
        for j in picks:
            orig = flat[j]
            flat[j] = orig + step
            up = f(owner)
            flat[j] = orig - step
            down = f(owner)
            flat[j] = orig
            num = (up - down) / (2 * np.longdouble(step))
            a = analytic[p.name].reshape(-1)[j]
            err = float(abs(a - num) / max(abs(a), abs(num), 1e-8))
            tensor_worst = max(tensor_worst, err)
            checked += 1
        per_name[p.name] = tensor_worst
        worst = max(worst, tensor_worst)
    for p, v in zip(params, saved):
        p.values = v
    model.zero_grad()
    return {"max_rel_error": worst, "n_checked": checked, "per_tensor": per_name}
