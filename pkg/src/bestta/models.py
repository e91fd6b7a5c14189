"""Small frozen convolutional classifier with a BeIN splice point.

Each block is ``conv3x3 -> BN -> ReLU``. The head is either ``"dense"``, a
per-position linear classifier giving ``(H*W, K)`` logits (the segmentation
analog), or ``"pool"``, global average pooling plus a linear layer giving
``(K,)`` logits. BeIN, when present, sits between the BN and the ReLU of block
``insertion_index`` (1-based), so it always sees a BN output.

Batch-norm runs in one of three modes:

* ``"frozen"``   running statistics (deployment),
* ``"instance"`` per-sample statistics (BN-stats-adapt / TENT baselines),
* ``"batch"``    mini-batch statistics (pretraining only).
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConvergenceFailure, InvalidShape, StaleCache
from .losses import log_softmax
from .normalization import BeINCache, BeINLayer, FrozenBatchNorm, bein_forward
from .tensor import STD_EPS, global_average_pool

FIXTURE_FORMAT = "bestta-fixture"
FIXTURE_VERSION = 1


# ---------------------------------------------------------------------------
# convolution primitives (stride 1, "same" zero padding, odd kernels)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape ``(C*k*k, N*H*W)``."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def conv2d(x: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return the convolution output and the patch matrix used to compute it."""
    n, _, h, w = x.shape
    o, _, k, _ = weight.shape
    cols = _im2col(x, k)
    out = weight.reshape(o, -1) @ cols
    return out.reshape(o, n, h, w).transpose(1, 0, 2, 3), cols


def conv2d_input_grad(g: np.ndarray, weight: np.ndarray) -> np.ndarray:
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv2d(g, np.ascontiguousarray(flipped))[0]


def conv2d_weight_grad(g: np.ndarray, cols: np.ndarray, weight_shape) -> np.ndarray:
    o = weight_shape[0]
    rows = g.transpose(1, 0, 2, 3).reshape(o, -1)
    return (rows @ cols.T).reshape(weight_shape)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class ToyModel:
    conv_weights: list
    bns: list
    head_w: np.ndarray
    head_b: np.ndarray
    insertion_index: int = 3
    head_kind: str = "dense"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.conv_weights) != len(self.bns) or not self.conv_weights:
            raise InvalidShape("need one BN per conv block and at least one block")
        if self.head_kind not in ("dense", "pool"):
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        self.check_insertion(self.insertion_index)

    @property
    def n_blocks(self) -> int:
        return len(self.conv_weights)

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.conv_weights[0].shape[1]

    def channels_at(self, index: int) -> int:
        return self.conv_weights[index - 1].shape[0]

    def check_insertion(self, index: int) -> int:
        if not 1 <= index <= self.n_blocks:
            raise ValueError(f"insertion index {index} outside 1..{self.n_blocks}")
        return index

    def copy(self) -> "ToyModel":
        return ToyModel(
            [w.copy() for w in self.conv_weights],
            [FrozenBatchNorm(b.alpha.copy(), b.beta.copy(), b.mu_s.copy(), b.sigma_s.copy()) for b in self.bns],
            self.head_w.copy(), self.head_b.copy(), self.insertion_index, self.head_kind, dict(self.meta),
        )


def init_model(rng: np.random.Generator, in_channels=3, widths=(8, 16, 16, 16), n_classes=4,
               kernel=3, insertion_index=3, head_kind="dense") -> ToyModel:
    weights, bns = [], []
    c = in_channels
    for o in widths:
        fan_in = c * kernel * kernel
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(o, c, kernel, kernel)))
        bns.append(FrozenBatchNorm.identity(o))
        c = o
    head_w = rng.normal(0.0, np.sqrt(1.0 / c), size=(n_classes, c))
    return ToyModel(weights, bns, head_w, np.zeros(n_classes), insertion_index, head_kind)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise InvalidShape(f"expected (C, H, W) or (N, C, H, W) input, got {x.shape}")


def _normalize(z, bn: FrozenBatchNorm, mode: str, alpha=None, beta=None, eps=STD_EPS):
    alpha = bn.alpha if alpha is None else alpha
    beta = bn.beta if beta is None else beta
    if mode == "frozen":
        mu, sd = bn.mu_s[None, :, None, None], bn.sigma_s[None, :, None, None]
    elif mode == "instance":
        mu = z.mean(axis=(2, 3), keepdims=True)
        sd = np.maximum(z.std(axis=(2, 3), keepdims=True), eps)
    elif mode == "batch":
        mu = z.mean(axis=(0, 2, 3), keepdims=True)
        sd = np.maximum(z.std(axis=(0, 2, 3), keepdims=True), eps)
    else:
        raise ValueError(f"unknown BN mode {mode!r}")
    xhat = (z - mu) / sd
    y = alpha[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, {"xhat": xhat, "sd": sd, "alpha": alpha, "mode": mode}


def _normalize_backward(g, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, sd, alpha, mode = cache["xhat"], cache["sd"], cache["alpha"], cache["mode"]
    d_alpha = (g * xhat).sum(axis=(0, 2, 3))
    d_beta = g.sum(axis=(0, 2, 3))
    dxhat = g * alpha[None, :, None, None]
    if mode == "frozen":
        return dxhat / sd, d_alpha, d_beta
    axes = (2, 3) if mode == "instance" else (0, 2, 3)
    dz = (dxhat - dxhat.mean(axis=axes, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) / sd
    return dz, d_alpha, d_beta


@dataclass
class ForwardCache:
    blocks: list
    pooled: np.ndarray
    start: int
    input_shape: tuple


def _run_blocks(model, h, start, bn_mode, affines, caches, stop=None, splice=None):
    """Run blocks ``start..stop`` (1-based, inclusive), appending caches.

    ``splice(y)`` is applied to the BN output of block ``stop`` before its ReLU.
    """
    stop = model.n_blocks if stop is None else stop
    for i in range(start, stop + 1):
        w, bn = model.conv_weights[i - 1], model.bns[i - 1]
        a, b = affines[i - 1] if affines is not None else (None, None)
        z, cols = conv2d(h, w)
        y, ncache = _normalize(z, bn, bn_mode, a, b)
        if splice is not None and i == stop:
            y = splice(y)
        h = np.maximum(y, 0.0)
        caches.append({"cols": cols, "norm": ncache, "mask": y > 0, "index": i})
    return h


def _head(model, h):
    """Logits and head input: ``(N, K)``/``(N, C)`` pooled, ``(N, P, K)``/``(N, P, C)`` dense."""
    if model.head_kind == "pool":
        hin = h.mean(axis=(2, 3))
    else:
        n, c = h.shape[:2]
        hin = h.reshape(n, c, -1).transpose(0, 2, 1)
    return hin @ model.head_w.T + model.head_b, hin


def _head_backward(model, g, feat_shape):
    """Gradient w.r.t. the last feature map, given dL/d(logits) for the batch."""
    gin = g @ model.head_w
    if model.head_kind == "pool":
        hw = feat_shape[2] * feat_shape[3]
        return np.broadcast_to(gin[:, :, None, None] / hw, feat_shape)
    return gin.transpose(0, 2, 1).reshape(feat_shape)


def forward(model: ToyModel, x, bn_mode: str = "frozen", affines=None):
    """Plain forward. Returns ``(logits, cache)``; logits are ``(K,)`` for one map."""
    xb, single = _as_batch(x)
    caches: list = []
    h = _run_blocks(model, xb, 1, bn_mode, affines, caches)
    logits, pooled = _head(model, h)
    cache = ForwardCache(caches, pooled, 1, xb.shape)
    return (logits[0] if single else logits), cache


def backward(model: ToyModel, cache: ForwardCache, dlogits, param_grads: bool = False,
             input_grad: bool = True) -> dict:
    """Reverse pass from logits down through the cached blocks.

    Returns ``{"input": dL/d(input of first cached block), "alpha": [...],
    "beta": [...]}`` and, with ``param_grads``, conv/head weight gradients.
    Lists are indexed like the cached blocks.
    """
    g = np.asarray(dlogits, dtype=np.float64)
    if g.ndim == cache.pooled.ndim - 1:
        g = g[None]
    if g.shape != cache.pooled.shape[:-1] + (model.n_classes,):
        raise StaleCache(f"logit gradient {g.shape} does not match cached batch")
    out: dict = {"alpha": [], "beta": []}
    if param_grads:
        k, c = model.head_w.shape
        out["head_w"] = g.reshape(-1, k).T @ cache.pooled.reshape(-1, c)
        out["head_b"] = g.reshape(-1, k).sum(axis=0)
        out["conv"] = []
    gh = _head_backward(model, g, cache.blocks[-1]["mask"].shape)
    for bc in reversed(cache.blocks):
        gy = gh * bc["mask"]
        gz, da, db = _normalize_backward(gy, bc["norm"])
        out["alpha"].insert(0, da)
        out["beta"].insert(0, db)
        w = model.conv_weights[bc["index"] - 1]
        if param_grads:
            out["conv"].insert(0, conv2d_weight_grad(gz, bc["cols"], w.shape))
        if input_grad or bc is not cache.blocks[0]:
            gh = conv2d_input_grad(gz, w)
    out["input"] = gh if input_grad else None
    return out


# ---------------------------------------------------------------------------
# BeIN splice
# ---------------------------------------------------------------------------

@dataclass
class BeINForward:
    logits: np.ndarray
    e: np.ndarray
    e_adapted: np.ndarray
    feature: np.ndarray
    adapted: np.ndarray
    bein_cache: BeINCache
    tail: ForwardCache
    relu_mask: np.ndarray


def forward_with_bein(model: ToyModel, bein: BeINLayer, x, insertion_index: int | None = None) -> BeINForward:
    """Forward a single ``(C, H, W)`` input with BeIN spliced after block k's BN."""
    k = model.check_insertion(model.insertion_index if insertion_index is None else insertion_index)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != model.in_channels:
        raise InvalidShape(f"input of shape {x.shape} does not fit a {model.in_channels}-channel model")
    captured = {}

    def splice(y):
        adapted, bcache = bein_forward(y[0], bein)
        captured["feature"], captured["adapted"], captured["cache"] = y[0], adapted, bcache
        return adapted[None]

    head_caches: list = []
    h = _run_blocks(model, x[None], 1, "frozen", None, head_caches, stop=k, splice=splice)
    tail: list = []
    h = _run_blocks(model, h, k + 1, "frozen", None, tail)
    logits, pooled = _head(model, h)
    return BeINForward(
        logits=logits[0],
        e=global_average_pool(captured["feature"]),
        e_adapted=global_average_pool(captured["adapted"]),
        feature=captured["feature"],
        adapted=captured["adapted"],
        bein_cache=captured["cache"],
        tail=ForwardCache(tail, pooled, k + 1, h.shape),
        relu_mask=head_caches[-1]["mask"][0],
    )


def entropy_input_gradient(fwd: BeINForward, model: ToyModel, dlogits) -> np.ndarray:
    """Backpropagate dL/d(logits) through the frozen tail to the BeIN output."""
    g = np.asarray(dlogits, dtype=np.float64)
    if g.shape != fwd.logits.shape:
        raise StaleCache(f"logit gradient {g.shape} vs cached logits {fwd.logits.shape}")
    if fwd.tail.blocks:
        gh = backward(model, fwd.tail, g)["input"][0]
    else:
        gh = _head_backward(model, g[None], (1,) + fwd.relu_mask.shape)[0]
    return gh * fwd.relu_mask


def predict_logits(model: ToyModel, X, bn_mode: str = "frozen", affines=None, chunk: int = 256) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        return forward(model, X, bn_mode, affines)[0]
    parts = [forward(model, X[i:i + chunk], bn_mode, affines)[0] for i in range(0, len(X), chunk)]
    return np.concatenate(parts)


def block_features(model: ToyModel, X, index: int) -> np.ndarray:
    """BN outputs of block ``index`` under frozen statistics (pre-ReLU)."""
    X, single = _as_batch(X)
    captured = []

    def grab(y):
        captured.append(y)
        return y

    _run_blocks(model, X, 1, "frozen", None, [], stop=index, splice=grab)
    return captured[0][0] if single else captured[0]


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class ModelFixture:
    model: ToyModel
    seed: int
    source_spec: dict
    train_accuracy: float
    heldout_accuracy: float

    def to_bytes(self) -> bytes:
        return dumps_fixture(self)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelFixture":
        with open(path, "rb") as fh:
            return loads_fixture(fh.read())


def _cross_entropy(logits, y):
    k = logits.shape[-1]
    logp = log_softmax(logits.reshape(-1, k))
    y = np.asarray(y).ravel()
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, (g / n).reshape(logits.shape)


def _estimate_running_stats(model: ToyModel, X, chunk: int = 500) -> None:
    """Set every BN's running stats to the exact population stats over ``X``."""
    hs = [X[s:s + chunk] for s in range(0, len(X), chunk)]
    for i in range(model.n_blocks):
        zs = [conv2d(h, model.conv_weights[i])[0] for h in hs]
        count = sum(z.shape[0] * z.shape[2] * z.shape[3] for z in zs)
        mu = sum(z.sum(axis=(0, 2, 3)) for z in zs) / count
        var = sum(((z - mu[None, :, None, None]) ** 2).sum(axis=(0, 2, 3)) for z in zs) / count
        bn = model.bns[i]
        model.bns[i] = FrozenBatchNorm(bn.alpha, bn.beta, mu, np.maximum(np.sqrt(var), STD_EPS))
        hs = [np.maximum(_normalize(z, model.bns[i], "frozen")[0], 0.0) for z in zs]


def accuracy(model: ToyModel, X, y) -> float:
    return float(np.mean(predict_logits(model, X).argmax(axis=-1) == np.asarray(y)))


def pretrain(spec=None, seed: int = 0, epochs: int = 6, n_train: int = 1200, n_heldout: int = 400,
             lr: float = 0.1, batch_size: int = 32, target_accuracy: float = 0.9,
             widths=(8, 16, 16, 16), insertion_index: int = 3, head_kind: str = "dense") -> ModelFixture:
    """Train a toy model on procedurally generated source data and freeze it.

    Training uses mini-batch statistics and plain SGD; after the last epoch the
    running statistics are replaced by exact population statistics of the
    training set. Raises ConvergenceFailure when held-out accuracy stays below
    ``target_accuracy``.
    """
    from .simulator import SourceSpec, make_source_dataset, stack_samples

    spec = SourceSpec() if spec is None else (SourceSpec(**spec) if isinstance(spec, dict) else spec)
    if epochs < 1:
        raise ConvergenceFailure("no training epochs requested")
    dense = head_kind == "dense"
    X, y = stack_samples(make_source_dataset(seed, n_train, spec), dense)
    Xh, yh = stack_samples(make_source_dataset(seed + 1_000_003, n_heldout, spec), dense)
    rng = np.random.default_rng([seed, 17])
    model = init_model(rng, spec.channels, widths, spec.n_classes, insertion_index=insertion_index,
                       head_kind=head_kind)

    for _ in range(epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch_size):
            idx = order[s:s + batch_size]
            logits, cache = forward(model, X[idx], bn_mode="batch")
            _, g = _cross_entropy(logits, y[idx])
            grads = backward(model, cache, g, param_grads=True, input_grad=False)
            model.head_w -= lr * grads["head_w"]
            model.head_b -= lr * grads["head_b"]
            for i, bn in enumerate(model.bns):
                model.conv_weights[i] -= lr * grads["conv"][i]
                bn.alpha = bn.alpha - lr * grads["alpha"][i]
                bn.beta = bn.beta - lr * grads["beta"][i]
    _estimate_running_stats(model, X)

    train_acc = accuracy(model, X, y)
    held_acc = accuracy(model, Xh, yh)
    if held_acc < target_accuracy:
        raise ConvergenceFailure(f"held-out accuracy {held_acc:.3f} below target {target_accuracy}")
    model.meta = {"seed": seed, "epochs": epochs, "lr": lr}
    return ModelFixture(model, seed, spec.to_dict(), train_acc, held_acc)


# ---------------------------------------------------------------------------
# fixture serialization: JSON envelope, arrays as base64 little-endian float64
# ---------------------------------------------------------------------------

def _enc(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def dumps_model(model: ToyModel) -> dict:
    return {
        "insertion_index": model.insertion_index,
        "conv_weights": [_enc(w) for w in model.conv_weights],
        "bns": [{k: _enc(getattr(b, k)) for k in ("alpha", "beta", "mu_s", "sigma_s")} for b in model.bns],
        "head_w": _enc(model.head_w),
        "head_b": _enc(model.head_b),
        "head_kind": model.head_kind,
        "meta": model.meta,
    }


def loads_model(d: dict) -> ToyModel:
    return ToyModel(
        [_dec(w) for w in d["conv_weights"]],
        [FrozenBatchNorm(**{k: _dec(v) for k, v in b.items()}) for b in d["bns"]],
        _dec(d["head_w"]), _dec(d["head_b"]), int(d["insertion_index"]), d.get("head_kind", "dense"),
        dict(d.get("meta", {})),
    )


def dumps_fixture(fx: ModelFixture) -> bytes:
    doc = {
        "format": FIXTURE_FORMAT,
        "version": FIXTURE_VERSION,
        "seed": fx.seed,
        "source_spec": fx.source_spec,
        "train_accuracy": fx.train_accuracy,
        "heldout_accuracy": fx.heldout_accuracy,
        "model": dumps_model(fx.model),
    }
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


def loads_fixture(raw: bytes) -> ModelFixture:
    doc = json.loads(raw)
    if doc.get("format") != FIXTURE_FORMAT:
        raise ValueError("not a bestta fixture")
    if doc.get("version") != FIXTURE_VERSION:
        raise ValueError(f"unsupported fixture version {doc.get('version')}")
    return ModelFixture(loads_model(doc["model"]), int(doc["seed"]), doc["source_spec"],
                        float(doc["train_accuracy"]), float(doc["heldout_accuracy"]))
