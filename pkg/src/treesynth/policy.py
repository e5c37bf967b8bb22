"""Next-statement policies.

Two policies share one interface (``action_probs(state, legal)``):

* :class:`UniformPolicy` spreads mass evenly over the legal actions.
* :class:`PolicyModel` featurizes a state and applies a softmax layer,
  optionally behind one tanh hidden layer. The optional history block feeds
  the statements executed so far into the model.

DeepCoder feature layout (``FeatureConfig.history`` toggles the last block).
One 27-wide block per register slot ``r0..r{R-1}`` followed by the target,
mean-pooled over examples::

    kind_int kind_list kind_empty      one-hot, empty is the padding sentinel
    int_value                          raw, scaled by 1/256 in the model
    length min max sum                 raw list statistics
    is_sorted                          flag
    eq len_eq perm subset member prefix suffix
                                       relations to the example's target
    elem_0..elem_7                     first 8 list elements, clipped to +-256
    pad_0..pad_7                       1 where the element is absent

The relations: equal value; lists of equal length; same multiset; every
target element occurs in the register; the int target is in the register
list (or the int register is in the target list); the target is a prefix /
suffix of the register.

then ``num_registers full`` and, when enabled, the history block::

    op_count_0..op_count_{37}          raw counts, scaled by 1/14
    last_{j}_op_*, _arg1_*, _arg2_*, _out_*   one-hot 4-tuples, j = 1..k

Model file (``MODEL_FORMAT_VERSION`` = 1)::

    b"TSPOLICY\\n" header_len:u32le header:utf-8 JSON (sorted keys) payload

The header lists the arrays (name, shape) in payload order; the payload is
their float64 little-endian bytes, concatenated. ``payload_sha256`` guards
against truncation.
"""

from __future__ import annotations

import functools
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .deepcoder import INT_MAX, INT_MIN, MAX_REGISTERS, NUM_OPS, Program, encode_action
from .errors import CorruptFile, VersionMismatch
from .state import SearchState, initial_state, step

MODEL_MAGIC = b"TSPOLICY\n"
MODEL_FORMAT_VERSION = 1
N_ELEMS = 8
HISTORY_SCALE = 1 / 14


class Policy(Protocol):
    def action_probs(self, state: Any, legal: np.ndarray) -> np.ndarray: ...


class UniformPolicy:
    def action_probs(self, state: Any, legal: np.ndarray) -> np.ndarray:
        return np.full(len(legal), 1.0 / len(legal)) if len(legal) else np.zeros(0)


@dataclass(frozen=True)
class FeatureConfig:
    dsl: str = "deepcoder"
    history: bool = True
    k: int = 3
    max_registers: int = MAX_REGISTERS
    grid_size: int = 8
    hidden: int = 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 64
    l2: float = 1e-5
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.l2 < 0:
            raise ValueError(f"invalid training config {self}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingError(RuntimeError):
    pass


# -- featurizers -------------------------------------------------------------


class DeepCoderFeaturizer:
    SLOT = 32
    REL = 9  # offset of the target relations

    def __init__(self, cfg: FeatureConfig):
        self.cfg = cfg
        R = cfg.max_registers
        names: list[str] = []
        scale: list[float] = []
        slot_names = (
            [("kind_int", 1), ("kind_list", 1), ("kind_empty", 1), ("int_value", 1 / 256)]
            + [("length", 1 / 20), ("min", 1 / 256), ("max", 1 / 256), ("sum", 1 / 5120)]
            + [("is_sorted", 1)]
            + [(f"{r}_target", 1) for r in RELATIONS]
            + [(f"elem_{i}", 1 / 256) for i in range(N_ELEMS)]
            + [(f"pad_{i}", 1) for i in range(N_ELEMS)]
        )
        assert len(slot_names) == self.SLOT
        for slot in [f"r{i}" for i in range(R)] + ["target"]:
            for n, s in slot_names:
                names.append(f"{slot}.{n}")
                scale.append(s)
        names += ["num_registers", "full"]
        scale += [1 / R, 1]
        self.base_dim = len(names)
        if cfg.history:
            for o in range(NUM_OPS):
                names.append(f"op_count_{o}")
                scale.append(HISTORY_SCALE)
            for j in range(1, cfg.k + 1):
                for part, size in (("op", NUM_OPS), ("arg1", R), ("arg2", R), ("out", R)):
                    for v in range(size):
                        names.append(f"last_{j}_{part}_{v}")
                        scale.append(1)
        self.names = names
        self.scale = np.array(scale)
        self.dim = len(names)
        self.n_actions = NUM_OPS * R * R
        self.version = f"deepcoder-v1-ops{NUM_OPS}-r{R}"

    def __call__(self, s: SearchState) -> np.ndarray:
        R = self.cfg.max_registers
        W = self.SLOT
        pooled = np.zeros((R + 1) * W)
        for env in s.envs:
            block = np.zeros((R + 1, W))
            block[:, 2] = 1.0
            t = env.target
            for i, v in enumerate(env.registers):
                block[i] = _value_block(v)
                block[i, self.REL : self.REL + len(RELATIONS)] = _relations(v, t)
            block[R] = _value_block(t)
            block[R, self.REL : self.REL + len(RELATIONS)] = _relations(t, t)
            pooled += block.ravel()
        pooled /= len(s.envs)
        n = s.num_registers
        x = np.zeros(self.dim)
        x[: pooled.size] = pooled
        x[pooled.size] = n
        x[pooled.size + 1] = n == R
        if self.cfg.history and s.history:
            self._history(s.history, x[self.base_dim :])
        return x

    def _history(self, history, out: np.ndarray) -> None:
        R = self.cfg.max_registers
        for st in history:
            out[st.op] += 1
        off = NUM_OPS
        width = NUM_OPS + 3 * R
        for j, st in enumerate(reversed(history[-self.cfg.k :])):
            base = off + j * width
            out[base + st.op] = 1
            out[base + NUM_OPS + st.arg1] = 1
            out[base + NUM_OPS + R + st.arg2] = 1
            out[base + NUM_OPS + 2 * R + st.out] = 1


RELATIONS = ("eq", "len_eq", "perm", "subset", "member", "prefix", "suffix")
ELEM = DeepCoderFeaturizer.REL + len(RELATIONS)


@functools.lru_cache(maxsize=65536)
def _relations(v, t) -> tuple[float, ...]:
    vl, tl = isinstance(v, tuple), isinstance(t, tuple)
    if vl and tl:
        n = len(t)
        return (
            float(v == t),
            float(len(v) == n),
            float(len(v) == n and sorted(v) == sorted(t)),
            float(set(t) <= set(v)),
            0.0,
            float(v[:n] == t),
            float(n <= len(v) and v[len(v) - n :] == t),
        )
    member = (vl and t in v) or (tl and v in t)
    return (float(v == t), 0.0, 0.0, 0.0, float(member), 0.0, 0.0)


@functools.lru_cache(maxsize=65536)
def _value_block(v) -> np.ndarray:
    b = np.zeros(DeepCoderFeaturizer.SLOT)
    if isinstance(v, tuple):
        b[1] = 1
        n = len(v)
        b[4] = n
        if n:
            b[5] = min(v)
            b[6] = max(v)
            b[7] = sum(v)
        b[8] = all(v[i] <= v[i + 1] for i in range(n - 1))
        m = min(n, N_ELEMS)
        b[ELEM : ELEM + m] = np.clip(v[:m], INT_MIN, INT_MAX)
        b[ELEM + N_ELEMS + m : ELEM + 2 * N_ELEMS] = 1
    else:
        b[0] = 1
        b[3] = v
        b[ELEM + N_ELEMS :] = 1
    b.setflags(write=False)
    return b


def featurizer_for(cfg: FeatureConfig):
    return _featurizer(cfg)


@functools.lru_cache(maxsize=None)
def _featurizer(cfg: FeatureConfig):
    if cfg.dsl == "deepcoder":
        return DeepCoderFeaturizer(cfg)
    if cfg.dsl == "karel":
        from .karel import KarelFeaturizer

        return KarelFeaturizer(cfg)
    raise ValueError(f"unknown dsl {cfg.dsl!r}")


def featurize(s, cfg: FeatureConfig) -> np.ndarray:
    """Raw (unscaled) feature vector of ``s``; see the module docstring for the layout."""
    return featurizer_for(cfg)(s)


def layout_hash(cfg: FeatureConfig) -> str:
    f = featurizer_for(cfg)
    h = hashlib.sha256()
    h.update(json.dumps(asdict(cfg), sort_keys=True).encode())
    h.update("\n".join(f.names).encode())
    h.update(np.asarray(f.scale, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# -- model -------------------------------------------------------------------


@dataclass
class PolicyOutput:
    probs: np.ndarray
    legal: np.ndarray

    @property
    def dead(self) -> bool:
        return len(self.legal) == 0


def masked_renormalize(probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the illegal entries and renormalize; uniform over legal if no mass is left."""
    out = np.where(mask, probs, 0.0)
    total = out.sum()
    if total > 0:
        return out / total
    n = int(mask.sum())
    return mask / n if n else out


@dataclass
class PolicyModel:
    config: FeatureConfig
    params: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)
    _wt: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def featurizer(self):
        return featurizer_for(self.config)

    @property
    def version(self) -> str:
        return self.featurizer.version

    def inputs(self, s) -> np.ndarray:
        f = self.featurizer
        return f(s) * f.scale

    def logits(self, x: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
        p = self.params
        if self.config.hidden:
            x = np.tanh(x @ p["W1"] + p["b1"])
            W, b = p["W2"], p["b2"]
        else:
            W, b = p["W1"], p["b1"]
        if cols is None:
            return x @ W + b
        # cached by array identity: replace params rather than editing them in place
        key = id(W)
        if self._wt is None or self._wt[0] != key:
            self._wt = (key, np.ascontiguousarray(W.T))
        return self._wt[1][cols] @ x + b[cols]

    def action_probs(self, state, legal: np.ndarray) -> np.ndarray:
        if len(legal) == 0:
            return np.zeros(0)
        z = self.logits(self.inputs(state), legal)
        z = np.exp(z - z.max())
        return z / z.sum()


def new_model(cfg: FeatureConfig, seed: int = 0) -> PolicyModel:
    f = featurizer_for(cfg)
    rng = np.random.default_rng([seed, 1])
    if cfg.hidden:
        params = {
            "W1": rng.normal(0, 1 / np.sqrt(f.dim), (f.dim, cfg.hidden)),
            "b1": np.zeros(cfg.hidden),
            "W2": rng.normal(0, 1 / np.sqrt(cfg.hidden), (cfg.hidden, f.n_actions)),
            "b2": np.zeros(f.n_actions),
        }
    else:
        params = {"W1": np.zeros((f.dim, f.n_actions)), "b1": np.zeros(f.n_actions)}
    meta = {"dsl": cfg.dsl, "action_space": f.version, "layout_hash": layout_hash(cfg), "seed": seed}
    return PolicyModel(cfg, params, meta)


def predict(m: PolicyModel, s) -> PolicyOutput:
    """Full softmax over the action space, masked to the legal actions of ``s``."""
    if getattr(s, "dsl", m.config.dsl) != m.config.dsl or _state_version(s) != m.version:
        raise VersionMismatch(f"model is for {m.version}, state is {_state_version(s)}")
    legal = s.legal_actions()
    z = m.logits(m.inputs(s))
    z = np.exp(z - z.max())
    probs = z / z.sum()
    mask = np.zeros(len(probs), dtype=bool)
    mask[legal] = True
    return PolicyOutput(masked_renormalize(probs, mask), legal)


def _state_version(s) -> str:
    return s.ctx.version


# -- training ----------------------------------------------------------------


def expand_to_pairs(
    program: Program, io: Sequence, max_registers: int = MAX_REGISTERS, drop=None
) -> list[tuple[SearchState, int]]:
    """Teacher-forced (state after prefix i, statement i+1) pairs of a DeepCoder sample."""
    kw = {} if drop is None else {"drop": drop}
    s = initial_state(io, max_registers, **kw)
    pairs = []
    for stmt in program.statements:
        pairs.append((s, encode_action(stmt.op, stmt.arg1, stmt.arg2, max_registers)))
        s = step(s, stmt)
    return pairs


def _design(model: PolicyModel, pairs: Sequence[tuple[Any, int]]):
    n = len(pairs)
    f = model.featurizer
    X = np.empty((n, f.dim))
    mask = np.zeros((n, f.n_actions), dtype=bool)
    y = np.empty(n, dtype=np.int64)
    for i, (s, a) in enumerate(pairs):
        X[i] = f(s)
        mask[i, s.legal_actions()] = True
        y[i] = a
    X *= f.scale
    if not mask[np.arange(n), y].all():
        bad = int(np.flatnonzero(~mask[np.arange(n), y])[0])
        raise TrainingError(f"pair {bad}: label {y[bad]} is not a legal action")
    return X, mask, y


def loss_and_grad(
    model: PolicyModel, X: np.ndarray, mask: np.ndarray, y: np.ndarray, l2: float, grad: bool = True
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean masked cross-entropy plus ``l2/2 * ||W||^2``, and its gradient."""
    p = model.params
    n = len(y)
    if model.config.hidden:
        h = np.tanh(X @ p["W1"] + p["b1"])
        z = h @ p["W2"] + p["b2"]
        weights = ("W1", "W2")
    else:
        h = X
        z = X @ p["W1"] + p["b1"]
        weights = ("W1",)
    z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    tot = e.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(tot) - z[rows, y]))
    loss += 0.5 * l2 * sum(float(np.sum(p[w] ** 2)) for w in weights)
    if not grad:
        return loss, {}
    d = e / tot[:, None]
    d[rows, y] -= 1
    d /= n
    g: dict[str, np.ndarray] = {}
    if model.config.hidden:
        g["W2"] = h.T @ d + l2 * p["W2"]
        g["b2"] = d.sum(axis=0)
        dh = (d @ p["W2"].T) * (1 - h**2)
        g["W1"] = X.T @ dh + l2 * p["W1"]
        g["b1"] = dh.sum(axis=0)
    else:
        g["W1"] = X.T @ d + l2 * p["W1"]
        g["b1"] = d.sum(axis=0)
    return loss, g


def train(
    pairs: Sequence[tuple[Any, int]],
    cfg: TrainConfig,
    features: FeatureConfig | None = None,
    log=None,
) -> PolicyModel:
    """Fit a policy by mini-batch gradient descent on the masked cross-entropy.

    The returned model carries the per-epoch full-data loss in ``loss_trace``.
    """
    if not pairs:
        raise TrainingError("empty training set")
    features = features or FeatureConfig()
    model = new_model(features, cfg.seed)
    X, mask, y = _design(model, pairs)
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(y)
    adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_buf = {k: np.empty_like(v) for k, v in model.params.items()}
    t = 0
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            _, g = loss_and_grad(model, X[idx], mask[idx], y[idx], cfg.l2)
            t += 1
            for k, gk in g.items():
                if cfg.optimizer == "sgd":
                    model.params[k] -= cfg.learning_rate * gk
                    continue
                # Adam, written in place: the weight matrices are large
                m, v, buf = adam_m[k], adam_v[k], adam_buf[k]
                m *= 0.9
                m += 0.1 * gk
                v *= 0.999
                np.multiply(gk, gk, out=buf)
                buf *= 0.001
                v += buf
                np.sqrt(v, out=buf)
                buf *= 1 / np.sqrt(1 - 0.999**t)
                buf += 1e-8
                np.divide(m, buf, out=buf)
                buf *= cfg.learning_rate / (1 - 0.9**t)
                model.params[k] -= buf
        loss, _ = loss_and_grad(model, X, mask, y, cfg.l2, grad=False)
        if not np.isfinite(loss):
            norms = {k: float(np.linalg.norm(v)) for k, v in model.params.items()}
            raise TrainingError(f"non-finite loss at epoch {epoch}; parameter norms {norms}")
        trace.append(loss)
        if log:
            log(epoch, loss)
    model.loss_trace = trace
    model._wt = None  # params were updated in place
    model.metadata.update(
        {"train": asdict(cfg), "num_pairs": n, "history": features.history, "hidden": features.hidden}
    )
    return model


# -- persistence -------------------------------------------------------------


def save(m: PolicyModel, path: str | Path) -> None:
    names = sorted(m.params)
    arrays = [np.ascontiguousarray(m.params[k], dtype="<f8") for k in names]
    payload = b"".join(a.tobytes() for a in arrays)
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "dsl": m.config.dsl,
        "action_space": m.version,
        "layout_hash": layout_hash(m.config),
        "feature_config": asdict(m.config),
        "seed": m.metadata.get("seed"),
        "metadata": m.metadata,
        "loss_trace": m.loss_trace,
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in zip(names, arrays)],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MODEL_MAGIC + struct.pack("<I", len(hb)) + hb + payload)


def load(path: str | Path) -> PolicyModel:
    data = Path(path).read_bytes()
    if not data.startswith(MODEL_MAGIC) or len(data) < len(MODEL_MAGIC) + 4:
        raise CorruptFile(f"{path}: not a policy model file")
    off = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off : off + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path}: bad header ({e})") from None
    payload = data[off + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptFile(f"{path}: payload is truncated or damaged")
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise VersionMismatch(f"{path}: model format {header.get('format_version')}")
    cfg = FeatureConfig(**header["feature_config"])
    current = featurizer_for(cfg).version
    if header["action_space"] != current:
        raise VersionMismatch(f"{path}: model action space {header['action_space']}, expected {current}")
    if header["layout_hash"] != layout_hash(cfg):
        raise VersionMismatch(f"{path}: feature layout changed since the model was saved")
    params = {}
    pos = 0
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        params[spec["name"]] = np.frombuffer(payload, "<f8", count, pos).reshape(spec["shape"]).copy()
        pos += 8 * count
    return PolicyModel(cfg, params, header["metadata"], header["loss_trace"])
