"""Three-headed Q-network, optimizers, replay memory and the TD update.

The network is a ReLU MLP trunk feeding three linear heads: attributes
(|A|+1, last slot Null), predicates (|P|+1, last slot Null) and categories
(|C|+1, last slot Terminal). Heads share one trunk unless ``separate`` is set.

Checkpoint format (little-endian)::

    magic      4 bytes  b"VRLQ"
    version    u32      1
    header_len u32
    header     JSON (architecture, parameter order and shapes, optimizer, step, config)
    parameters float32, in header order
    optimizer  float32 accumulators, same order (absent for plain SGD)
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HEADS = ("a", "p", "c")
CKPT_MAGIC = b"VRLQ"
CKPT_VERSION = 1


class QModel:
    def __init__(self, state_dim: int, head_sizes: Sequence[int], hidden: Sequence[int] = (256, 256),
                 separate: bool = False, seed: int | None = 0, dtype=np.float64):
        if len(head_sizes) != 3:
            raise ValueError("need three head sizes (attribute, predicate, category)")
        self.state_dim = int(state_dim)
        self.head_sizes = tuple(int(n) for n in head_sizes)
        self.hidden = tuple(int(h) for h in hidden)
        self.separate = bool(separate)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.trunks = HEADS if self.separate else ("t",)
        rng = np.random.default_rng(seed)
        for t in self.trunks:
            fan_in = self.state_dim
            for l, width in enumerate(self.hidden):
                self._init(rng, f"{t}{l}", width, fan_in)
                fan_in = width
        last = self.hidden[-1] if self.hidden else self.state_dim
        for h, n in zip(HEADS, self.head_sizes):
            self._init(rng, h, n, last)

    def _init(self, rng, name, fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(self.dtype)
        self.params[f"{name}.b"] = rng.uniform(-bound, bound, size=fan_out).astype(self.dtype)

    def trunk_of(self, head: str) -> str:
        return head if self.separate else "t"

    def copy(self) -> "QModel":
        return copy.deepcopy(self)

    def zero_(self) -> "QModel":
        for v in self.params.values():
            v[...] = 0.0
        return self

    def forward(self, f: np.ndarray, cache: bool = False):
        """Q-values for each head. ``f`` may be one state or a batch of states."""
        x = np.asarray(f, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.state_dim:
            raise ValueError(f"state has dimension {x.shape[1]}, model expects {self.state_dim}")
        acts: dict[str, list[np.ndarray]] = {}
        top: dict[str, np.ndarray] = {}
        for t in self.trunks:
            h = x
            layers = [h]
            for l in range(len(self.hidden)):
                h = h @ self.params[f"{t}{l}.W"].T + self.params[f"{t}{l}.b"]
                np.maximum(h, 0.0, out=h)
                layers.append(h)
            acts[t] = layers
            top[t] = h
        qs = tuple(top[self.trunk_of(h)] @ self.params[f"{h}.W"].T + self.params[f"{h}.b"] for h in HEADS)
        if single:
            qs = tuple(q[0] for q in qs)
        if cache:
            return qs, acts
        return qs

    def __call__(self, f):
        return self.forward(f)

    def allclose(self, other: "QModel") -> bool:
        return all(np.array_equal(v, other.params[k]) for k, v in self.params.items())


def forward(m: QModel, f: np.ndarray):
    return m.forward(f)


# -- transitions and replay -------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    actions: tuple[int, int, int]
    rewards: tuple[float, float, float]
    next_state: np.ndarray
    # head slot indices allowed in the next state, per head
    next_sets: tuple[np.ndarray, np.ndarray, np.ndarray]
    terminal: bool = False
    _mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def next_mask(self, head_sizes: Sequence[int]) -> np.ndarray:
        """``next_sets`` as one boolean vector over the concatenated heads."""
        if self._mask is None or self._mask.shape[0] != sum(head_sizes):
            m = np.zeros(sum(head_sizes), dtype=bool)
            off = 0
            for allowed, n in zip(self.next_sets, head_sizes):
                m[off + np.asarray(allowed, dtype=np.intp)] = True
                off += n
            self._mask = m
        return self._mask


class ReplayMemory:
    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._buf)

    def push(self, t: Transition) -> None:
        if len(self._buf) < self.capacity:
            self._buf.append(t)
        else:
            self._buf[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if not self._buf:
            raise ValueError("cannot sample from an empty replay memory")
        size = len(self._buf)
        idx = rng.integers(0, size, size=n) if n > size else rng.choice(size, size=n, replace=False)
        return [self._buf[i] for i in idx]

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if len(self._buf) < self.capacity:
            return list(self._buf)
        return self._buf[self._next:] + self._buf[:self._next]


def replay_push(mem: ReplayMemory, t: Transition) -> None:
    mem.push(t)


def replay_sample(mem: ReplayMemory, n: int, rng: np.random.Generator) -> list[Transition]:
    return mem.sample(n, rng)


# -- action selection -------------------------------------------------------

def masked_argmax(q: np.ndarray, allowed: np.ndarray) -> int:
    """Highest-Q slot among ``allowed``; ties go to the lowest index."""
    allowed = np.sort(np.asarray(allowed))
    return int(allowed[int(np.argmax(q[allowed]))])


def select_actions(qs, sets, eps: float, rng: np.random.Generator) -> tuple[int, int, int]:
    """Epsilon-greedy choice per head, restricted to each head's allowed slots."""
    out = []
    for q, allowed in zip(qs, sets):
        allowed = np.asarray(allowed)
        if len(allowed) == 0:
            raise ValueError("empty action set")
        if eps > 0 and rng.random() < eps:
            out.append(int(allowed[int(rng.integers(len(allowed)))]))
        else:
            out.append(masked_argmax(q, allowed))
    return tuple(out)


# -- optimizers -------------------------------------------------------------

class SGD:
    """Plain gradient descent (used for hand-checkable updates)."""

    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * g

    def state_arrays(self) -> list[np.ndarray]:
        return []


class RMSProp:
    """RMSProp without momentum; one accumulator shared across all heads."""

    name = "rmsprop"

    def __init__(self, lr: float, decay: float = 0.95, eps: float = 1e-6):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.ms: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            ms = self.ms.get(k)
            if ms is None:
                ms = self.ms[k] = np.zeros_like(g)
            ms *= self.decay
            ms += (1.0 - self.decay) * np.square(g)
            denom = np.sqrt(ms)
            denom += self.eps
            np.divide(g, denom, out=denom)
            denom *= self.lr
            params[k] -= denom

    def state_arrays(self) -> list[np.ndarray]:
        return [self.ms[k] for k in sorted(self.ms)]


# -- TD update --------------------------------------------------------------

def _masked_max(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise max of ``q`` over allowed slots; 0 for rows with none (terminal)."""
    best = np.where(mask, q, -np.inf).max(axis=1)
    best[~mask.any(axis=1)] = 0.0
    return best


def td_targets(target, batch: Sequence[Transition], gamma: float, masked: bool = True) -> np.ndarray:
    """Bootstrapped targets, shape (batch, 3). Terminal rows use the reward alone."""
    r = np.array([t.rewards for t in batch], dtype=float)
    if gamma == 0.0:
        return r
    live = np.array([not t.terminal for t in batch])
    if not live.any():
        return r
    nxt = np.stack([t.next_state for t in batch])
    qn = target.forward(nxt)
    sizes = target.head_sizes
    if masked:
        mask = np.stack([t.next_mask(sizes) for t in batch])
    off = 0
    for k in range(3):
        if masked:
            best = _masked_max(qn[k], mask[:, off:off + sizes[k]])
        else:
            best = qn[k].max(axis=1)
        off += sizes[k]
        r[:, k] += gamma * best * live
    return r


def td_loss_and_grads(model: QModel, batch: Sequence[Transition], targets: np.ndarray,
                      heads: Sequence[str] = HEADS):
    """Loss ``mean_b sum_h 0.5 * delta^2`` and its gradient, targets held fixed."""
    x = np.stack([t.state for t in batch])
    acts = np.array([t.actions for t in batch], dtype=int)
    B = len(batch)
    qs, cache = model.forward(x, cache=True)
    grads: dict[str, np.ndarray] = {}
    top_grad: dict[str, np.ndarray] = {}
    rows = np.arange(B)
    loss = 0.0
    deltas = np.zeros((B, 3))
    for k, h in enumerate(HEADS):
        if h not in heads:
            continue
        delta = targets[:, k] - qs[k][rows, acts[:, k]]
        deltas[:, k] = delta
        loss += 0.5 * float(np.dot(delta, delta)) / B
        dq = np.zeros_like(qs[k])
        dq[rows, acts[:, k]] = -delta / B
        t = model.trunk_of(h)
        hl = cache[t][-1]
        grads[f"{h}.W"] = dq.T @ hl
        grads[f"{h}.b"] = dq.sum(axis=0)
        g_top = dq @ model.params[f"{h}.W"]
        top_grad[t] = top_grad[t] + g_top if t in top_grad else g_top
    for t, gh in top_grad.items():
        layers = cache[t]
        for l in reversed(range(len(model.hidden))):
            gz = gh * (layers[l + 1] > 0)
            grads[f"{t}{l}.W"] = gz.T @ layers[l]
            grads[f"{t}{l}.b"] = gz.sum(axis=0)
            if l:
                gh = gz @ model.params[f"{t}{l}.W"]
    return loss, grads, deltas


def q_update(online: QModel, target, batch: Sequence[Transition], gamma: float, optimizer,
             heads: Sequence[str] = HEADS, masked: bool = True) -> float:
    """One semi-gradient Q-learning step on ``batch``; returns the loss before the step."""
    if not batch:
        raise ValueError("empty batch")
    for t in batch:
        for k, n in enumerate(online.head_sizes):
            if not 0 <= t.actions[k] < n:
                raise ValueError(f"action slot {t.actions[k]} out of range for head {HEADS[k]} (size {n})")
    y = td_targets(target, batch, gamma, masked)
    loss, grads, _ = td_loss_and_grads(online, batch, y, heads)
    optimizer.step(online.params, grads)
    return loss


def sync_target(online: QModel, target: QModel, step: int, tau: int) -> QModel:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step % tau == 0:
        return online.copy()
    return target


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str | Path, model: QModel, optimizer=None, step: int = 0, config: dict | None = None) -> None:
    names = sorted(model.params)
    opt_names = sorted(optimizer.ms) if isinstance(optimizer, RMSProp) else []
    header = {
        "state_dim": model.state_dim,
        "head_sizes": list(model.head_sizes),
        "hidden": list(model.hidden),
        "separate": model.separate,
        "dtype": model.dtype.name,
        "params": [[k, list(model.params[k].shape)] for k in names],
        "optimizer": None if optimizer is None else {
            "name": optimizer.name,
            "lr": optimizer.lr,
            **({"decay": optimizer.decay, "eps": optimizer.eps} if isinstance(optimizer, RMSProp) else {}),
            "state": [[k, list(optimizer.ms[k].shape)] for k in opt_names],
        },
        "step": int(step),
        "config": config or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for k in names:
            fh.write(np.asarray(model.params[k], dtype="<f4").tobytes())
        for k in opt_names:
            fh.write(np.asarray(optimizer.ms[k], dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Return ``(model, optimizer, step, config)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    model = QModel(header["state_dim"], header["head_sizes"], header["hidden"], header["separate"], seed=None,
                   dtype=np.dtype(header.get("dtype", "float32")))

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(model.dtype).reshape(shape)
        off += 4 * n
        return arr

    for k, shape in header["params"]:
        model.params[k] = take(shape)
    opt = None
    oh = header["optimizer"]
    if oh is not None:
        if oh["name"] == "rmsprop":
            opt = RMSProp(oh["lr"], oh["decay"], oh["eps"])
            for k, shape in oh["state"]:
                opt.ms[k] = take(shape)
        else:
            opt = SGD(oh["lr"])
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return model, opt, header["step"], header["config"]
