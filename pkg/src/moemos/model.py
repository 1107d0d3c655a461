"""Mixture-of-experts head with a MOS regression output and a system classifier.

Gate:    g(x) = softmax(W_g x + b_g)
Mixture: r(x) = sum_i g_i(x) * E_i(x)        (experts emit width-H representations)
Heads:   mos = w_m . r + b_m,  logits = W_c r + b_c
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .numkernel import ParamTensor, RngState

CHECKPOINT_MAGIC = b"MOEM"
CHECKPOINT_VERSION = 1
MOS_MIN, MOS_MAX = 1.0, 5.0


@dataclass
class MoeConfig:
    n_experts: int = 4
    input_dim: int = 64
    expert_hidden: tuple[int, ...] = (256, 128)
    expert_out_dim: int = 64
    dropout_rate: float = 0.1
    n_classes: int = 4
    gate_hidden: int = 0  # 0 = single affine gate

    def __post_init__(self):
        self.expert_hidden = tuple(int(h) for h in self.expert_hidden)

    def validate(self, allow_linear: bool = False) -> None:
        if self.n_experts < 2:
            raise ValueError("n_experts must be >= 2")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        allowed = {0, 2, 3} if allow_linear else {2, 3}
        if len(self.expert_hidden) not in allowed:
            raise ValueError(f"expert_hidden must have 2 or 3 layers, got {list(self.expert_hidden)}")
        if any(h < 1 for h in self.expert_hidden) or self.input_dim < 1 or self.expert_out_dim < 1:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.gate_hidden < 0:
            raise ValueError("gate_hidden must be >= 0")


@dataclass
class ForwardOutput:
    mos_pred: np.ndarray       # clamped to [1, 5] in eval mode
    mos_raw: np.ndarray        # unclamped, used by the loss
    class_logits: np.ndarray
    gate_weights: np.ndarray
    mixed_repr: np.ndarray
    cache: dict = field(default=None, repr=False)  # type: ignore[assignment]

    def __len__(self) -> int:
        return int(np.atleast_1d(self.mos_raw).shape[0])


def _layer(name: str, fan_in: int, fan_out: int, rng: RngState) -> list[ParamTensor]:
    return [ParamTensor(f"{name}.W", nk.glorot_uniform(fan_out, fan_in, rng)),
            ParamTensor(f"{name}.b", np.zeros(fan_out))]


class MoeModel:
    def __init__(self, cfg: MoeConfig, gate, experts, mos_head, cls_head):
        self.cfg = cfg
        self.gate = gate            # list of [W, b] layers
        self.experts = experts      # list (per expert) of list of [W, b] layers
        self.mos_head = mos_head    # [W (1, H), b (1,)]
        self.cls_head = cls_head    # [W (C, H), b (C,)]

    def parameters(self) -> list[ParamTensor]:
        """All tensors in checkpoint order: gate, experts ascending, mos head, cls head."""
        out = [p for layer in self.gate for p in layer]
        for expert in self.experts:
            out.extend(p for layer in expert for p in layer)
        return out + list(self.mos_head) + list(self.cls_head)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "MoeModel":
        clone = init_model(self.cfg, RngState(0), allow_linear=True)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.values = src.values.copy()
        return clone

    def load_values(self, other: "MoeModel") -> None:
        for dst, src in zip(self.parameters(), other.parameters()):
            dst.values = src.values.copy()

    # -- forward ---------------------------------------------------------

    def _gate(self, X):
        acts = [X]
        pre = []
        h = X
        for li, (W, b) in enumerate(self.gate):
            z = nk.linear_forward(h, W, b)
            pre.append(z)
            h = nk.relu(z) if li < len(self.gate) - 1 else z
            acts.append(h)
        return nk.softmax(h), (acts, pre)

    def _expert(self, i: int, X, train: bool, rng: RngState | None):
        layers = self.experts[i]
        acts, pre, masks = [X], [], []
        h = X
        for li, (W, b) in enumerate(layers):
            z = nk.linear_forward(h, W, b)
            pre.append(z)
            if li < len(layers) - 1:
                h = nk.relu(z)
                if train and self.cfg.dropout_rate > 0:
                    m = nk.dropout_mask(h.shape, self.cfg.dropout_rate, rng)
                    h = h * m
                else:
                    m = None
                masks.append(m)
            else:
                h = z
            acts.append(h)
        return h, (acts, pre, masks)

    def forward(self, X, train: bool = False, rng: RngState | None = None,
                expert_outputs: dict[int, np.ndarray] | None = None) -> ForwardOutput:
        """Batched or single-vector forward pass.

        ``expert_outputs`` maps expert index to a precomputed eval-mode output
        for this X; those experts are not re-run (used by the gradient checker).
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        Xb = X[None, :] if single else X
        if Xb.shape[1] != self.cfg.input_dim:
            raise ValueError(f"dimension mismatch: input dim {Xb.shape[1]} vs model input_dim {self.cfg.input_dim}")
        if not np.isfinite(Xb).all():
            raise ValueError("input contains NaN or Inf")
        if train and self.cfg.dropout_rate > 0 and rng is None:
            raise ValueError("train mode with dropout needs an RngState")
        g, gate_cache = self._gate(Xb)
        outs, exp_caches = [], []
        for i in range(self.cfg.n_experts):
            if expert_outputs is not None and i in expert_outputs:
                outs.append(expert_outputs[i])
                exp_caches.append(None)
                continue
            e, c = self._expert(i, Xb, train, rng)
            outs.append(e)
            exp_caches.append(c)
        E = np.stack(outs, axis=1)                     # (B, N, H)
        mixed = np.einsum("bn,bnh->bh", g, E)
        mos_raw = nk.linear_forward(mixed, *self.mos_head)[:, 0]
        logits = nk.linear_forward(mixed, *self.cls_head)
        mos_pred = mos_raw if train else np.clip(mos_raw, MOS_MIN, MOS_MAX)
        cache = {"X": Xb, "g": g, "gate": gate_cache, "E": E, "experts": exp_caches, "mixed": mixed}
        if single:
            return ForwardOutput(mos_pred[0], mos_raw[0], logits[0], g[0], mixed[0], cache)
        return ForwardOutput(mos_pred, mos_raw, logits, g, mixed, cache)

    # -- backward --------------------------------------------------------

    def backward(self, out: ForwardOutput, d_mos, d_logits, d_gates=None) -> None:
        """Accumulate parameter gradients given dL/d(mos_raw), dL/d(logits), dL/d(gates)."""
        c = out.cache
        g, E, mixed = c["g"], c["E"], c["mixed"]
        d_mos = np.asarray(d_mos, dtype=np.float64).reshape(-1, 1)
        d_logits = np.asarray(d_logits, dtype=np.float64).reshape(g.shape[0], -1)

        Wm, bm = self.mos_head
        dW, db, d_mixed = nk.linear_backward(mixed, Wm, d_mos)
        Wm.grad += dW
        bm.grad += db
        Wc, bc = self.cls_head
        dW, db, dx = nk.linear_backward(mixed, Wc, d_logits)
        Wc.grad += dW
        bc.grad += db
        d_mixed = d_mixed + dx

        d_g = np.einsum("bh,bnh->bn", d_mixed, E)
        if d_gates is not None:
            d_g = d_g + np.asarray(d_gates, dtype=np.float64).reshape(g.shape)
        for i, (acts, pre, masks) in enumerate(c["experts"]):
            up = g[:, i:i + 1] * d_mixed
            layers = self.experts[i]
            for li in range(len(layers) - 1, -1, -1):
                if li < len(layers) - 1:
                    if masks[li] is not None:
                        up = up * masks[li]
                    up = nk.relu_backward(pre[li], up)
                W, b = layers[li]
                dW, db, up = nk.linear_backward(acts[li], W, up)
                W.grad += dW
                b.grad += db

        up = nk.softmax_backward(g, d_g)
        acts, pre = c["gate"]
        for li in range(len(self.gate) - 1, -1, -1):
            if li < len(self.gate) - 1:
                up = nk.relu_backward(pre[li], up)
            W, b = self.gate[li]
            dW, db, up = nk.linear_backward(acts[li], W, up)
            W.grad += dW
            b.grad += db


def init_model(cfg: MoeConfig, rng: RngState, allow_linear: bool = False) -> MoeModel:
    """Glorot-uniform weights, zero biases; each component draws from its own sub-stream."""
    cfg.validate(allow_linear=allow_linear)
    D, N, H = cfg.input_dim, cfg.n_experts, cfg.expert_out_dim
    grng = rng.spawn(0)
    if cfg.gate_hidden:
        gate = [_layer("gate.0", D, cfg.gate_hidden, grng), _layer("gate.1", cfg.gate_hidden, N, grng)]
    else:
        gate = [_layer("gate", D, N, grng)]
    experts = []
    widths = [D, *cfg.expert_hidden, H]
    for i in range(N):
        erng = rng.spawn(1, i)
        experts.append([_layer(f"expert{i}.{li}", widths[li], widths[li + 1], erng)
                        for li in range(len(widths) - 1)])
    mos_head = _layer("mos_head", H, 1, rng.spawn(2))
    cls_head = _layer("cls_head", H, cfg.n_classes, rng.spawn(3))
    return MoeModel(cfg, gate, experts, mos_head, cls_head)


def gate_forward(m: MoeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.cfg.input_dim:
        raise ValueError(f"dimension mismatch: input dim {x.shape[-1]} vs model input_dim {m.cfg.input_dim}")
    return m._gate(x)[0]


def expert_forward(m: MoeModel, i: int, x, train: bool = False, rng: RngState | None = None) -> np.ndarray:
    if not 0 <= i < m.cfg.n_experts:
        raise IndexError(f"expert index {i} out of range [0, {m.cfg.n_experts})")
    return m._expert(i, np.asarray(x, dtype=np.float64), train, rng)[0]


def moe_forward(m: MoeModel, x, train: bool = False, rng: RngState | None = None) -> ForwardOutput:
    return m.forward(x, train=train, rng=rng)


def expert_utilization(gates) -> tuple[np.ndarray, np.ndarray]:
    """(mean gate weight per expert, fraction of rows whose argmax is each expert)."""
    gates = np.atleast_2d(np.asarray(gates, dtype=np.float64))
    if gates.shape[0] == 0:
        raise ValueError("expert_utilization needs a nonempty batch")
    # np.argmax returns the first maximal index, i.e. ties go to the lowest index
    counts = np.bincount(gates.argmax(axis=1), minlength=gates.shape[1])
    return gates.mean(axis=0), counts / gates.shape[0]


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(m: MoeModel, path) -> None:
    cfg_bytes = json.dumps(asdict(m.cfg), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    params = m.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        parts.append(struct.pack("<I", p.values.ndim))
        parts.append(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
        parts.append(p.values.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MoeModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", raw, 8)
    cfg = MoeConfig(**json.loads(raw[12:12 + n].decode("utf-8")))
    off = 12 + n
    m = init_model(cfg, RngState(0), allow_linear=True)
    params = m.parameters()
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    if count != len(params):
        raise ValueError(f"{path}: expected {len(params)} tensors, found {count}")
    for p in params:
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        if tuple(dims) != p.shape:
            raise ValueError(f"{path}: tensor {p.name} has shape {dims}, expected {p.shape}")
        size = int(np.prod(dims)) * 8
        p.values = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=off).reshape(dims).astype(np.float64)
        p.grad = np.zeros_like(p.values)
        off += size
    return m
