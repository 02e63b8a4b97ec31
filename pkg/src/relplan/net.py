"""Relevance classifier: patch tokens, a small pre-LN attention encoder and one
perceptron head per predicate kind. Forward and backward passes are explicit
numpy code; training uses Adam with batch polling across predicates.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from relplan.errors import (
    EmptyDataset,
    IoFailure,
    ModelPredicateMissing,
    NonFiniteActivation,
    NonFiniteGradient,
    ShapeMismatch,
)
from relplan.scene import IMAGE_SIZE, VIEW_SIZE, PredicateKind

PATCH = VIEW_SIZE
GRID = IMAGE_SIZE // PATCH
N_CONTEXT = GRID * GRID
N_TOKENS = N_CONTEXT + 3
PATCH_DIM = PATCH * PATCH * 3
READOUT = slice(N_CONTEXT, N_TOKENS)
# context patches carry labels 1..9, all three canonical views label 0
POSITION_LABELS = np.array(list(range(1, N_CONTEXT + 1)) + [0, 0, 0])

PIXEL_CENTER = 0.5
LN_EPS = 1e-5
PROB_CLAMP = 1e-7
ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8

SAME_PLANE_ETA = 0.86
ON_TOP_ETA = 0.66


def default_eta(kind: PredicateKind) -> float:
    return ON_TOP_ETA if kind is PredicateKind.OnTop else SAME_PLANE_ETA


@dataclass(frozen=True)
class NetConfig:
    dim: int = 64
    n_blocks: int = 2
    ff_mult: int = 4
    head_hidden: int = 512


@dataclass
class ModelParams:
    """Named parameter arrays in declaration order.

    ``predicates`` lists the heads present; ``trained`` the kinds that have
    seen data (empty for a fresh model).
    """

    arrays: dict[str, np.ndarray]
    config: NetConfig
    predicates: tuple[str, ...]
    seed: int = 0
    trained: tuple[str, ...] = ()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def covers(self, kind: PredicateKind) -> bool:
        if kind.value not in self.predicates:
            return False
        return not self.trained or kind.value in self.trained

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.config, self.predicates, self.seed, self.trained)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def _block_names(i: int) -> list[str]:
    p = f"block{i}."
    return [p + n for n in ("ln1.scale", "ln1.offset", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                            "ln2.scale", "ln2.offset", "ff1", "ff1_bias", "ff2", "ff2_bias")]


def head_names(kind: str) -> list[str]:
    p = f"head.{kind}."
    return [p + n for n in ("w1", "b1", "w2", "b2", "w3", "b3")]


def trunk_names(cfg: NetConfig) -> list[str]:
    names = ["patch_proj", "pos_table"]
    for i in range(cfg.n_blocks):
        names += _block_names(i)
    return names + ["final_ln.scale", "final_ln.offset"]


def param_shapes(cfg: NetConfig, predicates: Sequence[str]) -> dict[str, tuple[int, ...]]:
    d, f, h = cfg.dim, cfg.dim * cfg.ff_mult, cfg.head_hidden
    shapes: dict[str, tuple[int, ...]] = {"patch_proj": (PATCH_DIM, d), "pos_table": (N_CONTEXT + 1, d)}
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        shapes.update({
            p + "ln1.scale": (d,), p + "ln1.offset": (d,),
            p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.scale": (d,), p + "ln2.offset": (d,),
            p + "ff1": (d, f), p + "ff1_bias": (f,), p + "ff2": (f, d), p + "ff2_bias": (d,),
        })
    shapes["final_ln.scale"] = (d,)
    shapes["final_ln.offset"] = (d,)
    for kind in predicates:
        w1, b1, w2, b2, w3, b3 = head_names(kind)
        shapes.update({w1: (3 * d, h), b1: (h,), w2: (h, h), b2: (h,), w3: (h, 1), b3: (1,)})
    return shapes


def init_params(
    seed: int = 0, config: NetConfig | None = None, predicates: Iterable[PredicateKind | str] | None = None
) -> ModelParams:
    cfg = config or NetConfig()
    kinds = tuple(PredicateKind(k).value for k in (predicates if predicates is not None else PredicateKind))
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg, kinds).items():
        if name == "pos_table":
            arrays[name] = rng.normal(0.0, 0.02, shape)
        elif name.endswith(".scale"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(arrays, cfg, kinds, seed)


# --- elementwise pieces ---------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _layer_norm(x, scale, offset):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * scale + offset, (xhat, inv)


def _layer_norm_back(dy, scale, cache):
    xhat, inv = cache
    dxhat = dy * scale
    n = xhat.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(red), dy.sum(red)


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


# --- embedding --------------------------------------------------------------


def patchify(images: np.ndarray) -> np.ndarray:
    """(B, 96, 96, 3) -> (B, 9, 3072), patches in row-major order."""
    b = images.shape[0]
    x = images.reshape(b, GRID, PATCH, GRID, PATCH, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, N_CONTEXT, PATCH_DIM)


def _token_inputs(images, subj, ref, query) -> np.ndarray:
    images, subj, ref, query = (np.asarray(a) for a in (images, subj, ref, query))
    if images.ndim == 3:
        images, subj, ref, query = images[None], subj[None], ref[None], query[None]
    if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeMismatch(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {images.shape[1:]}")
    b = images.shape[0]
    for v in (subj, ref, query):
        if v.shape != (b, VIEW_SIZE, VIEW_SIZE, 3):
            raise ShapeMismatch(f"views must be ({b}, {VIEW_SIZE}, {VIEW_SIZE}, 3), got {v.shape}")
    views = np.stack([subj, ref, query], axis=1).reshape(b, 3, PATCH_DIM)
    return np.concatenate([patchify(images), views], axis=1)


def center_pixels(x: np.ndarray) -> np.ndarray:
    """Shift pixel values from [0, 1] to [-0.5, 0.5] before embedding.

    Without this the flat gray view background dominates every view token
    and training stalls at the all-irrelevant solution.
    """
    return x - PIXEL_CENTER


def model_inputs(images, subj, ref, query, dtype=np.float64) -> np.ndarray:
    """Centered, flattened (B, 12, 3072) patch matrix fed to the patch projection."""
    return center_pixels(_token_inputs(images, subj, ref, query).astype(dtype))


def embed_inputs(image, goal_views, query_view, params: ModelParams) -> np.ndarray:
    """Token matrix (12, D), or (B, 12, D) for batched inputs."""
    single = np.asarray(image).ndim == 3
    patches = _token_inputs(image, goal_views[0], goal_views[1], query_view).astype(params["patch_proj"].dtype)
    tokens = patches @ params["patch_proj"] + params["pos_table"][POSITION_LABELS]
    return tokens[0] if single else tokens


# --- forward / backward -----------------------------------------------------


def _forward(tokens: np.ndarray, params: ModelParams, kind: str, keep: bool):
    if f"head.{kind}.w1" not in params.arrays:
        raise ModelPredicateMissing(f"model has no head for {kind}")
    cfg = params.config
    d = cfg.dim
    scale = 1.0 / math.sqrt(d)
    caches = []
    h = tokens
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        a, ln1 = _layer_norm(h, params[p + "ln1.scale"], params[p + "ln1.offset"])
        q = a @ params[p + "wq"] + params[p + "bq"]
        k = a @ params[p + "wk"] + params[p + "bk"]
        v = a @ params[p + "wv"] + params[p + "bv"]
        att = _softmax(q @ k.transpose(0, 2, 1) * scale)
        o = att @ v
        h = h + o @ params[p + "wo"] + params[p + "bo"]
        bn, ln2 = _layer_norm(h, params[p + "ln2.scale"], params[p + "ln2.offset"])
        f_pre = bn @ params[p + "ff1"] + params[p + "ff1_bias"]
        f_act = gelu(f_pre)
        h = h + f_act @ params[p + "ff2"] + params[p + "ff2_bias"]
        if keep:
            caches.append((a, ln1, q, k, v, att, o, bn, ln2, f_pre, f_act))
    z, lnf = _layer_norm(h, params["final_ln.scale"], params["final_ln.offset"])
    r = z[:, READOUT].reshape(len(z), 3 * d)
    w1, b1, w2, b2, w3, b3 = (params[n] for n in head_names(kind))
    u1_pre = r @ w1 + b1
    u1 = gelu(u1_pre)
    u2_pre = u1 @ w2 + b2
    u2 = gelu(u2_pre)
    logit = (u2 @ w3 + b3)[:, 0]
    prob = sigmoid(logit)
    if not np.all(np.isfinite(prob)):
        raise NonFiniteActivation("non-finite output probability")
    cache = (caches, lnf, r, u1_pre, u1, u2_pre, u2) if keep else None
    return prob, cache


def forward(tokens: np.ndarray, params: ModelParams, predicate: PredicateKind | str) -> np.ndarray | float:
    """Relevance probability for one (12, D) token matrix or a (B, 12, D) batch."""
    kind = PredicateKind(predicate).value
    single = tokens.ndim == 2
    prob, _ = _forward(tokens[None] if single else tokens, params, kind, keep=False)
    return float(prob[0]) if single else prob


def predict_batch(params: ModelParams, images, subj_views, ref_views, query_views, predicate, chunk: int = 256) -> np.ndarray:
    """Probabilities for raw [0, 1] inputs (centered here before embedding)."""
    kind = PredicateKind(predicate)
    if kind.value not in params.predicates:
        raise ModelPredicateMissing(f"model has no head for {kind.value}")
    n = len(images)
    out = np.empty(n)
    dtype = params["patch_proj"].dtype
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        x = model_inputs(images[sl], subj_views[sl], ref_views[sl], query_views[sl], dtype)
        out[sl] = forward(x @ params["patch_proj"] + params["pos_table"][POSITION_LABELS], params, kind)
    return out


def weighted_bce_loss(prob, label, eta: float = 1.0):
    """-[eta*y*ln(p) + (1-y)*ln(1-p)], elementwise, with p clamped away from 0 and 1."""
    p = np.clip(np.asarray(prob, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(label, dtype=float)
    loss = -(eta * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def loss_and_grad(
    params: ModelParams, patches: np.ndarray, labels: np.ndarray, predicate: PredicateKind | str, eta: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean weighted BCE over the batch and its exact gradient.

    ``patches`` is the (B, 12, 3072) output of ``model_inputs``. Every parameter
    gets a gradient entry; heads of other predicates get exact zeros.
    """
    kind = PredicateKind(predicate).value
    b = len(labels)
    if b == 0:
        raise EmptyDataset("empty batch")
    cfg = params.config
    d = cfg.dim
    scale = 1.0 / math.sqrt(d)
    tokens = patches @ params["patch_proj"] + params["pos_table"][POSITION_LABELS]
    prob, (caches, lnf, r, u1_pre, u1, u2_pre, u2) = _forward(tokens, params, kind, keep=True)
    y = np.asarray(labels, dtype=float)
    loss = float(np.mean(weighted_bce_loss(prob, y, eta)))

    g = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    inside = (prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP)
    dlogit = np.where(inside, (1.0 - y) * prob - eta * y * (1.0 - prob), 0.0) / b

    hw1, hb1, hw2, hb2, hw3, hb3 = head_names(kind)
    g[hw3] = u2.T @ dlogit[:, None]
    g[hb3] = np.array([dlogit.sum()])
    du2 = dlogit[:, None] * params[hw3][:, 0] * gelu_grad(u2_pre)
    g[hw2] = u1.T @ du2
    g[hb2] = du2.sum(0)
    du1 = (du2 @ params[hw2].T) * gelu_grad(u1_pre)
    g[hw1] = r.T @ du1
    g[hb1] = du1.sum(0)
    dr = du1 @ params[hw1].T

    dz = np.zeros_like(tokens)
    dz[:, READOUT] = dr.reshape(b, 3, d)
    dh, g["final_ln.scale"], g["final_ln.offset"] = _layer_norm_back(dz, params["final_ln.scale"], lnf)

    for i in reversed(range(cfg.n_blocks)):
        p = f"block{i}."
        a, ln1, q, k, v, att, o, bn, ln2, f_pre, f_act = caches[i]
        # feed-forward residual
        g[p + "ff2"] = _flat(f_act).T @ _flat(dh)
        g[p + "ff2_bias"] = dh.sum((0, 1))
        df = (dh @ params[p + "ff2"].T) * gelu_grad(f_pre)
        g[p + "ff1"] = _flat(bn).T @ _flat(df)
        g[p + "ff1_bias"] = df.sum((0, 1))
        dbn = df @ params[p + "ff1"].T
        dx, g[p + "ln2.scale"], g[p + "ln2.offset"] = _layer_norm_back(dbn, params[p + "ln2.scale"], ln2)
        dh = dh + dx
        # attention residual
        g[p + "wo"] = _flat(o).T @ _flat(dh)
        g[p + "bo"] = dh.sum((0, 1))
        do = dh @ params[p + "wo"].T
        datt = do @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        da = np.zeros_like(a)
        for nm, dm in (("q", dq), ("k", dk), ("v", dv)):
            g[p + "w" + nm] = _flat(a).T @ _flat(dm)
            g[p + "b" + nm] = dm.sum((0, 1))
            da += dm @ params[p + "w" + nm].T
        dx, g[p + "ln1.scale"], g[p + "ln1.offset"] = _layer_norm_back(da, params[p + "ln1.scale"], ln1)
        dh = dh + dx

    g["patch_proj"] = patches.reshape(-1, PATCH_DIM).T @ dh.reshape(-1, d)
    np.add.at(g["pos_table"], POSITION_LABELS, dh.sum(0))
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    return loss, g


def backward(batch, params: ModelParams, eta: float, predicate: PredicateKind | str) -> dict[str, np.ndarray]:
    """Gradient of the mean batch loss. ``batch`` is (images, subj, ref, query, labels)."""
    images, subj, ref, query, labels = batch
    patches = model_inputs(images, subj, ref, query, params["patch_proj"].dtype)
    return loss_and_grad(params, patches, labels, predicate, eta)[1]


def batch_loss(batch, params: ModelParams, eta: float, predicate: PredicateKind | str) -> float:
    images, subj, ref, query, labels = batch
    prob = predict_batch(params, images, subj, ref, query, predicate)
    return float(np.mean(weighted_bce_loss(prob, labels, eta)))


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place Adam update of the parameters named in ``grads``.

    Step counts are kept per parameter so heads that sit out a round keep
    their own bias correction.
    """
    for name, gr in grads.items():
        p = params.arrays[name]
        if gr.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {gr.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        t = state.t[name] = state.t[name] + 1
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_B1
        m += (1 - ADAM_B1) * gr
        v *= ADAM_B2
        v += (1 - ADAM_B2) * gr * gr
        mhat = m / (1 - ADAM_B1**t)
        vhat = v / (1 - ADAM_B2**t)
        p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


# --- decisions and evaluation ------------------------------------------------


def decide_relevance(prob: float, beta: float) -> bool:
    """Relevant iff prob >= beta, so lowering beta only ever adds objects."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return prob >= beta


@dataclass
class Rates:
    true_relevant_rate: float
    true_irrelevant_rate: float
    false_irrelevant_rate: float
    total_accuracy: float
    n: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def rates(probs: np.ndarray, labels: np.ndarray, beta: float) -> Rates:
    if len(labels) == 0:
        raise EmptyDataset("no labeled samples")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    pred = np.asarray(probs) >= beta
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    pos, neg = tp + fn, tn + fp
    return Rates(
        tp / pos if pos else 1.0,
        tn / neg if neg else 1.0,
        fn / pos if pos else 0.0,
        (tp + tn) / len(y),
        len(y),
    )


def predict_samples(params: ModelParams, samples, chunk: int = 256) -> np.ndarray:
    """Probabilities for every row of a SampleSet, each under its own predicate head."""
    out = np.empty(len(samples))
    kinds = list(PredicateKind)
    for ki in np.unique(samples.kinds):
        rows = np.nonzero(samples.kinds == ki)[0]
        kind = kinds[int(ki)]
        if not params.covers(kind):
            raise ModelPredicateMissing(f"model was not trained for {kind.value}")
        for s in range(0, len(rows), chunk):
            sel = rows[s : s + chunk]
            images, subj, ref, query, _ = samples.batch(sel, params["patch_proj"].dtype)
            out[sel] = predict_batch(params, images, subj, ref, query, kind, chunk)
    return out


def evaluate(params: ModelParams, samples, beta: float = 0.5) -> Rates:
    if len(samples) == 0:
        raise EmptyDataset("no labeled samples")
    return rates(predict_samples(params, samples), samples.labels, beta)


# --- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 50
    eta: dict[str, float] = field(default_factory=dict)
    beta: float = 0.5
    epochs: int = 20
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        for k, e in self.eta.items():
            PredicateKind(k)
            if not 0 < e <= 1:
                raise ValueError("eta must lie in (0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    def eta_for(self, kind: PredicateKind) -> float:
        return self.eta.get(kind.value, default_eta(kind))


@dataclass
class EpochMetrics:
    epoch: int
    predicate: str
    loss: float
    true_relevant_rate: float = math.nan
    true_irrelevant_rate: float = math.nan
    false_irrelevant_rate: float = math.nan
    total_accuracy: float = math.nan

    def to_row(self) -> dict:
        return dict(self.__dict__)


METRIC_COLUMNS = ["epoch", "predicate", "loss", "true_relevant_rate", "true_irrelevant_rate",
                  "false_irrelevant_rate", "total_accuracy"]


def polling_schedule(sizes: Mapping[PredicateKind, int], batch_size: int, seed: int, epoch: int):
    """Per-round batches for one epoch: a list of (kind, row indices).

    Rounds visit predicates in enum order. The epoch lasts until the largest
    dataset is used up; smaller ones wrap around onto fresh permutations.
    """
    kinds = [k for k in PredicateKind if sizes.get(k, 0) > 0]
    if not kinds:
        raise EmptyDataset("no training data")
    n_max = max(sizes[k] for k in kinds)
    n_rounds = -(-n_max // batch_size)
    streams = {}
    for k in kinds:
        rng = np.random.default_rng([seed, epoch, list(PredicateKind).index(k)])
        n = sizes[k]
        reps = -(-n_rounds * batch_size // n)
        streams[k] = np.concatenate([rng.permutation(n) for _ in range(reps)])
    rounds = []
    for r in range(n_rounds):
        lo, hi = r * batch_size, (r + 1) * batch_size
        for k in kinds:
            if sizes[k] == n_max:
                hi_k = min(hi, n_max)
                rows = streams[k][lo:hi_k]
            else:
                rows = streams[k][lo:hi]
            rounds.append((k, rows))
    return rounds


def train_batch_polling(
    datasets,
    config: TrainConfig,
    params: ModelParams | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    heldout=None,
    net_config: NetConfig | None = None,
    on_epoch: Callable[[int, ModelParams, AdamState, list[EpochMetrics]], None] | None = None,
) -> tuple[ModelParams, AdamState, list[EpochMetrics]]:
    """Train on ``datasets`` (predicate -> SampleSet) by batch polling.

    Each round draws one batch per predicate in fixed order; every batch
    updates the shared trunk and that predicate's head. Held-out metrics
    (if ``heldout`` is given, same mapping) are recorded per epoch.
    """
    sets = {PredicateKind(k): v for k, v in datasets.items() if len(v)}
    if not sets:
        raise EmptyDataset("no training data")
    if params is None:
        params = init_params(config.seed, net_config)
    params.arrays = {n: a.astype(config.dtype, copy=False) for n, a in params.arrays.items()}
    adam = adam or AdamState()
    for moments in (adam.m, adam.v):
        for n in moments:
            moments[n] = moments[n].astype(config.dtype, copy=False)
    trained = set(params.trained) | {k.value for k in sets}
    params.trained = tuple(k.value for k in PredicateKind if k.value in trained)
    trunk = trunk_names(params.config)
    dtype = params["patch_proj"].dtype
    history: list[EpochMetrics] = []
    for epoch in range(start_epoch, start_epoch + config.epochs):
        sums = {k: 0.0 for k in sets}
        counts = {k: 0 for k in sets}
        for kind, rows in polling_schedule({k: len(v) for k, v in sets.items()}, config.batch_size, config.seed, epoch):
            images, subj, ref, query, labels = sets[kind].batch(rows, dtype)
            patches = model_inputs(images, subj, ref, query, dtype)
            loss, grads = loss_and_grad(params, patches, labels, kind, config.eta_for(kind))
            active = {n: grads[n] for n in trunk + head_names(kind.value)}
            adam_step(params, active, adam, config.learning_rate)
            sums[kind] += loss * len(rows)
            counts[kind] += len(rows)
        epoch_rows = []
        for kind in sets:
            m = EpochMetrics(epoch + 1, kind.cli_name, sums[kind] / counts[kind])
            if heldout is not None and kind in heldout and len(heldout[kind]):
                rt = evaluate(params, heldout[kind], config.beta)
                m.true_relevant_rate = rt.true_relevant_rate
                m.true_irrelevant_rate = rt.true_irrelevant_rate
                m.false_irrelevant_rate = rt.false_irrelevant_rate
                m.total_accuracy = rt.total_accuracy
            epoch_rows.append(m)
        history.extend(epoch_rows)
        if on_epoch is not None:
            on_epoch(epoch + 1, params, adam, epoch_rows)
    return params, adam, history


# --- checkpoint -------------------------------------------------------------

MAGIC = b"RELPLAN1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None, epoch: int = 0) -> None:
    """Binary checkpoint: magic, header length, JSON header, float32 LE blocks."""
    names = params.names()
    header = {
        "version": CHECKPOINT_VERSION,
        "dim": params.config.dim,
        "n_blocks": params.config.n_blocks,
        "ff_mult": params.config.ff_mult,
        "head_hidden": params.config.head_hidden,
        "predicates": list(params.predicates),
        "trained": list(params.trained),
        "seed": params.seed,
        "epoch": epoch,
        "params": [[n, list(params[n].shape)] for n in names],
        "adam": None if adam is None else {n: adam.t[n] for n in names if n in adam.t},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
            if adam is not None:
                for n in names:
                    if n in adam.t:
                        f.write(np.ascontiguousarray(adam.m[n], dtype="<f4").tobytes())
                        f.write(np.ascontiguousarray(adam.v[n], dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path) -> tuple[ModelParams, AdamState | None, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:8] != MAGIC:
        raise ShapeMismatch("not a relplan checkpoint")
    (n_header,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n_header])
    if header["version"] != CHECKPOINT_VERSION:
        raise ShapeMismatch(f"unsupported checkpoint version {header['version']}")
    cfg = NetConfig(header["dim"], header["n_blocks"], header["ff_mult"], header["head_hidden"])
    offset = 12 + n_header

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * count
        return arr

    arrays = {n: take(tuple(shape)) for n, shape in header["params"]}
    expected = param_shapes(cfg, header["predicates"])
    if {n: tuple(a.shape) for n, a in arrays.items()} != expected:
        raise ShapeMismatch("checkpoint parameter shapes do not match its header")
    params = ModelParams(arrays, cfg, tuple(header["predicates"]), header["seed"], tuple(header["trained"]))
    adam = None
    if header["adam"] is not None:
        adam = AdamState()
        for n, _ in header["params"]:
            if n in header["adam"]:
                adam.m[n] = take(arrays[n].shape)
                adam.v[n] = take(arrays[n].shape)
                adam.t[n] = int(header["adam"][n])
    if offset != len(raw):
        raise ShapeMismatch("checkpoint has trailing or missing bytes")
    return params, adam, int(header["epoch"])
