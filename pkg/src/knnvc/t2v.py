"""Text-to-voice matching network.

A sentence embedding passes through three affine -> LeakyReLU -> LayerNorm
blocks to become a query. The query attends over a bag of enrollment speaker
embeddings with multi-head scaled dot-product attention, and the per-head
attention weights are averaged into one distribution over speakers. Only the
MLP and the query/key projections are trained; the embeddings are frozen.

All maths is float64 and the gradients are derived by hand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .interp import SpeakerDistribution

CHECKPOINT_MAGIC = b"T2V1"

TEXT_DIM = 384
HIDDEN_DIMS = (1024, 768, 256)
NUM_HEADS = 16
LEAKY_SLOPE = 0.01
LN_EPS = 1e-5


@dataclass(frozen=True)
class T2VModel:
    """Parameters of the matching network, keyed in declaration order."""

    params: dict[str, np.ndarray]
    in_dim: int = TEXT_DIM
    hidden_dims: tuple[int, ...] = HIDDEN_DIMS
    num_heads: int = NUM_HEADS

    @property
    def model_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_params(self, params: Mapping[str, np.ndarray]) -> "T2VModel":
        return replace(self, params=dict(params))


def parameter_shapes(in_dim=TEXT_DIM, hidden_dims=HIDDEN_DIMS) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = in_dim
    for i, width in enumerate(hidden_dims):
        shapes[f"mlp{i}.weight"] = (width, prev)
        shapes[f"mlp{i}.bias"] = (width,)
        shapes[f"mlp{i}.ln_gain"] = (width,)
        shapes[f"mlp{i}.ln_bias"] = (width,)
        prev = width
    shapes["attn.query_weight"] = (prev, prev)
    shapes["attn.query_bias"] = (prev,)
    shapes["attn.key_weight"] = (prev, prev)
    shapes["attn.key_bias"] = (prev,)
    return shapes


def init_model(seed: int = 0, in_dim: int = TEXT_DIM, hidden_dims=HIDDEN_DIMS,
               num_heads: int = NUM_HEADS) -> T2VModel:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; biases start at zero and LN gains at one."""
    hidden_dims = tuple(int(h) for h in hidden_dims)
    if hidden_dims[-1] % num_heads:
        raise ValueError(f"model dim {hidden_dims[-1]} not divisible by {num_heads} heads")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(in_dim, hidden_dims).items():
        if name.endswith("weight"):
            bound = np.sqrt(6.0 / shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("ln_gain"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return T2VModel(params, in_dim, hidden_dims, num_heads)


@dataclass(frozen=True)
class EnrollmentBag:
    speaker_ids: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        ids = tuple(str(s) for s in self.speaker_ids)
        emb = np.array(self.embeddings, dtype=np.float64, copy=True)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValueError(f"bag embeddings must be M x D with M >= 1, got {emb.shape}")
        if len(ids) != emb.shape[0]:
            raise ValueError(f"{len(ids)} ids for {emb.shape[0]} embeddings")
        if len(set(ids)) != len(ids):
            raise ValueError("enrollment speaker ids must be unique")
        if not np.isfinite(emb).all():
            raise ValueError("bag embeddings contain non-finite values")
        emb.flags.writeable = False
        object.__setattr__(self, "speaker_ids", ids)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self):
        return len(self.speaker_ids)

    def index(self, speaker_id: str) -> int:
        return self.speaker_ids.index(speaker_id)


def build_bag(utterance_embeddings: Mapping[str, np.ndarray], speaker_of: Mapping[str, str]) -> EnrollmentBag:
    """Average per-utterance speaker embeddings into one row per speaker.

    Speakers appear in order of their first utterance.
    """
    groups: dict[str, list[np.ndarray]] = {}
    for utt, vec in utterance_embeddings.items():
        if utt not in speaker_of:
            raise KeyError(f"no speaker for utterance {utt!r}")
        groups.setdefault(speaker_of[utt], []).append(np.asarray(vec, dtype=np.float64))
    ids = list(groups)
    return EnrollmentBag(tuple(ids), np.stack([np.mean(groups[s], axis=0) for s in ids]))


# --------------------------------------------------------------------------
# forward / backward


def _logsumexp(x, axis):
    mx = np.max(x, axis=axis, keepdims=True)
    return (mx + np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True))).squeeze(axis)


def _check_inputs(model: T2VModel, x: np.ndarray, bag: EnrollmentBag):
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"text embeddings must have dim {model.in_dim}, got shape {x.shape}")
    if bag.embeddings.shape[1] != model.model_dim:
        raise ValueError(f"speaker embeddings have dim {bag.embeddings.shape[1]}, model expects {model.model_dim}")
    if not np.isfinite(x).all():
        raise ValueError("text embeddings contain non-finite values")


def forward_batch(model: T2VModel, x, bag: EnrollmentBag):
    """Run the network on a B x in_dim batch.

    Returns ``(probs, cache)`` where ``probs`` is B x M and ``cache`` keeps
    every intermediate that :func:`backward` needs.
    """
    p = model.params
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_inputs(model, x, bag)
    cache = {"x": x, "layers": []}
    z = x
    for i in range(len(model.hidden_dims)):
        h = z @ p[f"mlp{i}.weight"].T + p[f"mlp{i}.bias"]
        a = np.where(h > 0, h, LEAKY_SLOPE * h)
        mu = a.mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(a.var(axis=1, keepdims=True) + LN_EPS)
        xhat = (a - mu) * inv_std
        cache["layers"].append({"input": z, "pre": h, "xhat": xhat, "inv_std": inv_std})
        z = xhat * p[f"mlp{i}.ln_gain"] + p[f"mlp{i}.ln_bias"]

    n, heads, dh = x.shape[0], model.num_heads, model.head_dim
    emb = bag.embeddings
    q = z @ p["attn.query_weight"].T + p["attn.query_bias"]
    k = emb @ p["attn.key_weight"].T + p["attn.key_bias"]
    qh = q.reshape(n, heads, dh)
    kh = k.reshape(len(bag), heads, dh)
    logits = np.einsum("bhd,mhd->bhm", qh, kh) / np.sqrt(dh)
    log_attn = logits - _logsumexp(logits, axis=2)[..., None]
    attn = np.exp(log_attn)
    probs = attn.mean(axis=1)
    if not (np.isfinite(probs).all() and np.isfinite(z).all()):
        raise FloatingPointError("non-finite activations in forward pass")
    cache.update(emb=emb, query_in=z, qh=qh, kh=kh, log_attn=log_attn, attn=attn)
    return probs, cache


def forward(model: T2VModel, text_embedding, bag: EnrollmentBag):
    """Distribution over the bag's speakers for one text embedding, plus the cache."""
    x = np.asarray(text_embedding, dtype=np.float64).reshape(1, -1)
    probs, cache = forward_batch(model, x, bag)
    return _to_distribution(probs[0], bag), cache


def _to_distribution(row: np.ndarray, bag: EnrollmentBag) -> SpeakerDistribution:
    return SpeakerDistribution.from_weights(bag.speaker_ids, row / row.sum())


def infer_distribution(model: T2VModel, description_embedding, bag: EnrollmentBag) -> SpeakerDistribution:
    x = np.asarray(description_embedding, dtype=np.float64).reshape(1, -1)
    probs, _ = forward_batch(model, x, bag)
    return _to_distribution(probs[0], bag)


def _log_target_prob(cache, targets):
    n_heads = cache["log_attn"].shape[1]
    lt = cache["log_attn"][np.arange(len(targets)), :, targets]  # B x H
    return lt, _logsumexp(lt, axis=1) - np.log(n_heads)


def batch_loss(model: T2VModel, x, targets, bag: EnrollmentBag) -> float:
    targets = _check_targets(targets, len(bag))
    _, cache = forward_batch(model, x, bag)
    _, logp = _log_target_prob(cache, targets)
    return float(-logp.mean()) + 0.0


def _check_targets(targets, m: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    if ((t < 0) | (t >= m)).any():
        raise ValueError(f"target index out of range for a bag of {m} speakers")
    return t


def backward(model: T2VModel, cache, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy of the cached batch and its gradient for every parameter."""
    p = model.params
    targets = np.asarray(targets, dtype=np.intp)
    n = len(targets)
    rows = np.arange(n)
    lt, logp = _log_target_prob(cache, targets)
    loss = float(-logp.mean()) + 0.0

    # d(-log mean_h a_h[t]) / d logits_h = w_h * (a_h - onehot(t)),
    # with w_h = a_h[t] / sum_h' a_h'[t] the head's share of the target mass.
    head_share = np.exp(lt - _logsumexp(lt, axis=1)[:, None])
    d_logits = cache["attn"].copy()
    d_logits[rows, :, targets] -= 1.0
    d_logits *= head_share[:, :, None] / n

    qh, kh = cache["qh"], cache["kh"]
    heads, dh = qh.shape[1], qh.shape[2]
    scale = 1.0 / np.sqrt(dh)
    d_q = (np.einsum("bhm,mhd->bhd", d_logits, kh) * scale).reshape(n, heads * dh)
    d_k = (np.einsum("bhm,bhd->mhd", d_logits, qh) * scale).reshape(kh.shape[0], heads * dh)

    grads = {}
    z = cache["query_in"]
    grads["attn.query_weight"] = d_q.T @ z
    grads["attn.query_bias"] = d_q.sum(axis=0)
    grads["attn.key_weight"] = d_k.T @ cache["emb"]
    grads["attn.key_bias"] = d_k.sum(axis=0)
    d_z = d_q @ p["attn.query_weight"]

    for i in reversed(range(len(model.hidden_dims))):
        layer = cache["layers"][i]
        xhat, inv_std = layer["xhat"], layer["inv_std"]
        grads[f"mlp{i}.ln_gain"] = (d_z * xhat).sum(axis=0)
        grads[f"mlp{i}.ln_bias"] = d_z.sum(axis=0)
        d_xhat = d_z * p[f"mlp{i}.ln_gain"]
        d_a = inv_std * (d_xhat - d_xhat.mean(axis=1, keepdims=True)
                         - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True))
        d_h = np.where(layer["pre"] > 0, d_a, LEAKY_SLOPE * d_a)
        grads[f"mlp{i}.weight"] = d_h.T @ layer["input"]
        grads[f"mlp{i}.bias"] = d_h.sum(axis=0)
        if i > 0:
            d_z = d_h @ p[f"mlp{i}.weight"]

    grads = {name: grads[name] for name in p}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    return loss, grads


def loss_and_grads(model: T2VModel, batch, bag: EnrollmentBag):
    """Mean cross-entropy over ``batch`` and its exact gradients.

    ``batch`` is either a sequence of ``(text_embedding, target_index)`` pairs
    or a tuple ``(X, targets)`` of arrays.
    """
    x, targets = _unpack_batch(batch)
    targets = _check_targets(targets, len(bag))
    _, cache = forward_batch(model, x, bag)
    return backward(model, cache, targets)


def _unpack_batch(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray) and np.ndim(batch[0]) == 2:
        return batch[0], batch[1]
    xs, ts = zip(*batch)
    return np.stack([np.asarray(v, dtype=np.float64) for v in xs]), np.array(ts)


# --------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    learning_rate: float = 5e-5
    weight_decay: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    batch_size: int = 16
    full_batch_max: int = 90

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
               cfg: TrainConfig, step_index: int):
    """One AdamW update; returns new ``(params, state)`` and leaves the inputs alone.

    Decoupled decay shrinks each parameter by ``lr * weight_decay`` before the
    bias-corrected Adam step is subtracted.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        updated = theta * (1.0 - cfg.learning_rate * cfg.weight_decay)
        updated = updated - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if not np.isfinite(updated).all():
            raise FloatingPointError(f"non-finite update for {name}")
        new_params[name], new_m[name], new_v[name] = updated, m, v
    return new_params, AdamState(new_m, new_v, step_index)


def _batches(n: int, cfg: TrainConfig):
    if n <= cfg.full_batch_max:
        idx = np.arange(n)
        while True:
            yield idx
    rng = np.random.default_rng(cfg.seed)
    while True:
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            yield order[s:s + cfg.batch_size]


def train(dataset, bag: EnrollmentBag, cfg: TrainConfig, model: T2VModel | None = None,
          **model_kwargs) -> tuple[T2VModel, list[float]]:
    """Train for exactly ``cfg.steps`` AdamW steps.

    ``dataset`` is a sequence of ``(text_embedding, target)`` pairs where the
    target is a bag index or speaker id, or a tuple ``(X, targets)``. When no
    model is given one is initialised from ``cfg.seed``. Returns the final
    model and the loss of each step's batch before its update.
    """
    x, targets = _dataset_arrays(dataset, bag)
    if model is None:
        model_kwargs.setdefault("in_dim", x.shape[1])
        model = init_model(cfg.seed, **model_kwargs)
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState.zeros_like(params)
    losses = []
    batches = _batches(len(x), cfg)
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        current = model.with_params(params)
        loss, grads = loss_and_grads(current, (x[idx], targets[idx]), bag)
        losses.append(loss)
        params, state = adamw_step(params, grads, state, cfg, step)
    return model.with_params(params), losses


def _dataset_arrays(dataset, bag: EnrollmentBag):
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray) and np.ndim(dataset[0]) == 2:
        x, raw = np.asarray(dataset[0], dtype=np.float64), list(dataset[1])
    else:
        if not dataset:
            raise ValueError("empty dataset")
        xs, raw = zip(*dataset)
        x = np.stack([np.asarray(v, dtype=np.float64) for v in xs])
    if len(x) == 0:
        raise ValueError("empty dataset")
    targets = np.array([bag.index(t) if isinstance(t, str) else int(t) for t in raw], dtype=np.intp)
    return x, _check_targets(targets, len(bag))


def accuracy(model: T2VModel, x, targets, bag: EnrollmentBag) -> float:
    probs, _ = forward_batch(model, x, bag)
    return float((probs.argmax(axis=1) == np.asarray(targets)).mean())


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: T2VModel, path) -> None:
    header = [CHECKPOINT_MAGIC,
              struct.pack("<II", model.in_dim, len(model.hidden_dims)),
              struct.pack(f"<{len(model.hidden_dims)}I", *model.hidden_dims),
              struct.pack("<I", model.num_heads)]
    body = [np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
            for name in parameter_shapes(model.in_dim, model.hidden_dims)]
    Path(path).write_bytes(b"".join(header + body))


def load_model(path) -> T2VModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    in_dim, n_layers = struct.unpack_from("<II", data, 4)
    pos = 12
    hidden = struct.unpack_from(f"<{n_layers}I", data, pos)
    pos += 4 * n_layers
    (heads,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for name, shape in parameter_shapes(in_dim, hidden).items():
        count = int(np.prod(shape))
        if pos + 8 * count > len(data):
            raise ValueError(f"{path}: truncated while reading {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return T2VModel(params, in_dim, tuple(hidden), heads)
