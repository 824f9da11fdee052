"""Trainable scoring heads over feature vectors.

Small MLPs with hand-derived gradients, trained by SGD with momentum,
weight decay, and optional global gradient-norm clipping. Five objectives
are supported:

  bce          binary cross-entropy on a width-1 logit (normal vs OE)
  hsc          hypersphere classification: pseudo-Huber radius
               s = sqrt(|phi|^2 + 1) - 1 for normals,
               -log(1 - exp(-s)) for (auxiliary) anomalies
  deepsad      squared distance to a fixed center for normals,
               inverse squared distance for anomalies
  compactness  squared distance to a fixed center (normals only)
  autoencoder  per-dimension mean squared reconstruction error

All internal arithmetic is float64 so finite-difference checks have
headroom; feature files stay float32 at I/O boundaries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .features import FeatureMatrix, OeSamplerConfig, sample_batch

OBJECTIVES = ("bce", "hsc", "deepsad", "compactness", "autoencoder")

HSC_EPS = 1e-9
DEEPSAD_EPS = 1e-6

# stock optimizer settings: OE heads vs the clipped one-class recipe
OE_LEARNING_RATE = 5e-4
OE_MOMENTUM = 0.9
OE_WEIGHT_DECAY = 1e-4
OCC_LEARNING_RATE = 1e-2
OCC_GRAD_CLIP_NORM = 1e-3
DEFAULT_BATCH_SIZE = 32


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite during training.

    Carries the loss trace up to the failing step in ``loss_trace``.
    """

    def __init__(self, message: str, loss_trace: list[float] | None = None):
        super().__init__(message)
        self.loss_trace = loss_trace or []


@dataclass
class Layer:
    weight: np.ndarray  # (out, in) float64
    bias: np.ndarray    # (out,) float64
    activation: str = "identity"  # relu | identity

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer shapes inconsistent")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ValueError("consecutive layer dims incompatible")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                          for l in self.layers])


def init_mlp(dims: list[int], activations: list[str], rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init; weights then bias per layer."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        lim = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        b = rng.uniform(-lim, lim, size=fan_out)
        layers.append(Layer(weight=w, bias=b, activation=act))
    return MlpParams(layers)


def identity_head(dim: int) -> MlpParams:
    """Affine head initialized at the identity map (OCC stand-in for a
    pretrained embedding)."""
    return MlpParams([Layer(weight=np.eye(dim), bias=np.zeros(dim), activation="identity")])


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Apply the network to one vector or a (B, in) batch."""
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.shape[1] != params.in_dim:
        raise ValueError(f"input dim {a.shape[1]} != network input {params.in_dim}")
    for layer in params.layers:
        a = a @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            a = np.maximum(a, 0.0)
    return a[0] if single else a


def _forward_trace(params: MlpParams, x: np.ndarray):
    """Forward pass keeping pre-activations and activations for backprop."""
    a = np.asarray(x, dtype=np.float64)
    acts = [a]
    pre = []
    for layer in params.layers:
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(a)
    return acts, pre


def _backprop(params: MlpParams, acts, pre, grad_out: np.ndarray):
    """Per-layer (dW, db) for a batch given dLoss/dOutput rows."""
    grads = [None] * len(params.layers)
    d = grad_out
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "relu":
            d = d * (pre[i] > 0.0)
        grads[i] = (d.T @ acts[i], d.sum(axis=0))
        if i > 0:
            d = d @ layer.weight
    return grads


# --- loss functions ---------------------------------------------------------

def bce_loss_grad(logit: float, label: int) -> tuple[float, float]:
    """Binary cross-entropy on a logit; numerically stable at saturation.

    loss = max(z, 0) - z*y + log(1 + exp(-|z|)); gradient = sigmoid(z) - y.
    """
    z = float(logit)
    y = float(label)
    loss = max(z, 0.0) - z * y + np.log1p(np.exp(-abs(z)))
    grad = _sigmoid(z) - y
    return float(loss), float(grad)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def hsc_loss_grad(embedding: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Hypersphere classification loss and its embedding gradient.

    Radius score s = sqrt(|phi|^2 + 1) - 1. Normals pay s; anomalies pay
    -log(1 - exp(-max(s, eps))), eps = 1e-9 guarding the s = 0 singularity.
    """
    phi = np.asarray(embedding, dtype=np.float64)
    r = np.sqrt(phi @ phi + 1.0)
    s = r - 1.0
    ds_dphi = phi / r
    if label == 0:
        return float(s), ds_dphi
    s_c = max(s, HSC_EPS)
    loss = -np.log(-np.expm1(-s_c))
    if s <= HSC_EPS:
        # inside the clamp the loss is constant in s
        return float(loss), np.zeros_like(phi)
    dl_ds = -1.0 / np.expm1(s)
    return float(loss), dl_ds * ds_dphi


@dataclass
class CenterVector:
    """Fixed hypersphere center for the compactness/deepsad objectives."""

    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.c)):
            raise ValueError("center must be finite")


def deepsad_loss_grad(embedding: np.ndarray, center: CenterVector,
                      label: int) -> tuple[float, np.ndarray]:
    """Squared center distance for normals, inverse for anomalies.

    d2 = |phi - c|^2; normals pay d2 with gradient 2(phi - c); anomalies
    pay 1/max(d2, 1e-6), gradient -2(phi - c)/d2^2 outside the clamp.
    """
    phi = np.asarray(embedding, dtype=np.float64)
    if phi.shape != center.c.shape:
        raise ValueError("embedding and center dims differ")
    diff = phi - center.c
    d2 = float(diff @ diff)
    if label == 0:
        return d2, 2.0 * diff
    if d2 <= DEEPSAD_EPS:
        return 1.0 / DEEPSAD_EPS, np.zeros_like(phi)
    return 1.0 / d2, (-2.0 / (d2 * d2)) * diff


def compactness_loss_grad(embedding: np.ndarray,
                          center: CenterVector) -> tuple[float, np.ndarray]:
    """One-class compactness: |phi - c|^2 with gradient 2(phi - c)."""
    phi = np.asarray(embedding, dtype=np.float64)
    if phi.shape != center.c.shape:
        raise ValueError("embedding and center dims differ")
    diff = phi - center.c
    return float(diff @ diff), 2.0 * diff


def autoencoder_loss_grad(params: MlpParams, x: np.ndarray):
    """Reconstruction loss (1/D)|f(x) - x|^2 and parameter gradients."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expects a single vector")
    if params.out_dim != x.shape[0]:
        raise ValueError("autoencoder output width must equal input dim")
    acts, pre = _forward_trace(params, x[None, :])
    out = acts[-1]
    resid = out - x[None, :]
    d = x.shape[0]
    loss = float((resid ** 2).sum() / d)
    grads = _backprop(params, acts, pre, (2.0 / d) * resid)
    return loss, grads


# --- batch objective evaluation ---------------------------------------------

def objective_loss_grads(params: MlpParams, x: np.ndarray, y: np.ndarray | None,
                         objective: str, center: CenterVector | None = None):
    """Mean loss over a batch and the matching parameter gradients."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    b = x.shape[0]
    acts, pre = _forward_trace(params, x)
    out = acts[-1]

    if objective == "bce":
        z = out[:, 0]
        yv = np.asarray(y, dtype=np.float64)
        losses = np.maximum(z, 0.0) - z * yv + np.log1p(np.exp(-np.abs(z)))
        grad_out = ((_sigmoid(z) - yv) / b)[:, None]
    elif objective == "hsc":
        r = np.sqrt((out ** 2).sum(axis=1) + 1.0)
        s = r - 1.0
        yv = np.asarray(y)
        s_c = np.maximum(s, HSC_EPS)
        losses = np.where(yv == 0, s, -np.log(-np.expm1(-s_c)))
        dl_ds = np.where(yv == 0, 1.0,
                         np.where(s > HSC_EPS, -1.0 / np.expm1(np.maximum(s, HSC_EPS)), 0.0))
        grad_out = (dl_ds / b)[:, None] * (out / r[:, None])
    elif objective == "deepsad":
        diff = out - center.c
        d2 = (diff ** 2).sum(axis=1)
        yv = np.asarray(y)
        losses = np.where(yv == 0, d2, 1.0 / np.maximum(d2, DEEPSAD_EPS))
        dl_dd2 = np.where(yv == 0, 1.0,
                          np.where(d2 > DEEPSAD_EPS, -1.0 / (d2 * d2), 0.0))
        grad_out = (dl_dd2 / b)[:, None] * 2.0 * diff
    elif objective == "compactness":
        diff = out - center.c
        losses = (diff ** 2).sum(axis=1)
        grad_out = 2.0 * diff / b
    elif objective == "autoencoder":
        resid = out - x
        d = x.shape[1]
        losses = (resid ** 2).sum(axis=1) / d
        grad_out = (2.0 / (d * b)) * resid
    else:
        raise ValueError(f"unknown objective {objective!r}")

    grads = _backprop(params, acts, pre, grad_out)
    return float(losses.mean()), grads


# --- optimizer ----------------------------------------------------------------

@dataclass
class TrainConfig:
    objective: str = "bce"
    learning_rate: float = OE_LEARNING_RATE
    momentum: float = OE_MOMENTUM
    weight_decay: float = OE_WEIGHT_DECAY
    batch_size: int = DEFAULT_BATCH_SIZE
    steps: int = 10_000
    grad_clip_norm: float | None = None
    seed: int = 0
    hidden_width: int = 128
    embedding_dim: int = 32
    bottleneck_dim: int | None = None  # autoencoder only; defaults to D // 2

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def defaults_for(cls, objective: str, **overrides) -> "TrainConfig":
        """Stock optimizer settings per objective family.

        OE heads (bce/hsc/deepsad) and the autoencoder use lr 5e-4,
        momentum 0.9, weight decay 1e-4. The one-class compactness recipe
        uses lr 1e-2 with the gradient norm clipped to 1e-3 (momentum and
        weight decay unstated in that recipe; zero here).
        """
        if objective == "compactness":
            base = dict(objective=objective, learning_rate=OCC_LEARNING_RATE,
                        momentum=0.0, weight_decay=0.0,
                        grad_clip_norm=OCC_GRAD_CLIP_NORM)
        else:
            base = dict(objective=objective, learning_rate=OE_LEARNING_RATE,
                        momentum=OE_MOMENTUM, weight_decay=OE_WEIGHT_DECAY,
                        grad_clip_norm=None)
        base.update(overrides)
        return cls(**base)


def clip_gradients(grads, max_norm: float):
    """Scale the full gradient down to the global L2 norm bound."""
    total = 0.0
    for dw, db in grads:
        total += float((dw * dw).sum()) + float((db * db).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = [(dw * scale, db * scale) for dw, db in grads]
    return grads


def sgd_step(params: MlpParams, grads, opt_state, cfg: TrainConfig):
    """One SGD update: v <- momentum*v + g + wd*w; w <- w - lr*v.

    ``opt_state`` is the list of velocity pairs (created when None).
    Gradient clipping, when configured, rescales the full gradient before
    the velocity update. Raises TrainingDivergedError on non-finite
    gradients. Parameters are updated in place and returned.
    """
    for dw, db in grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingDivergedError("non-finite gradient")
    if cfg.grad_clip_norm is not None:
        grads = clip_gradients(grads, cfg.grad_clip_norm)
    if opt_state is None:
        opt_state = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]
    for layer, (dw, db), (vw, vb) in zip(params.layers, grads, opt_state):
        vw *= cfg.momentum
        vw += dw + cfg.weight_decay * layer.weight
        vb *= cfg.momentum
        vb += db + cfg.weight_decay * layer.bias
        layer.weight -= cfg.learning_rate * vw
        layer.bias -= cfg.learning_rate * vb
    return params, opt_state


# --- finite-difference verification -----------------------------------------

@dataclass
class FdReport:
    max_rel_error: float
    n_params: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(params: MlpParams, loss_fn, tolerance: float = 1e-4,
                      step: float = 1e-5) -> FdReport:
    """Compare analytic parameter gradients against central differences.

    ``loss_fn(params) -> (loss, grads)`` must be differentiable at
    ``params`` (callers re-sample inputs that sit on relu kinks). Relative
    error uses a 1e-6 floor in the denominator so near-zero gradients are
    compared absolutely.
    """
    _, grads = loss_fn(params)
    max_rel = 0.0
    n = 0
    for layer, (dw, db) in zip(params.layers, grads):
        for arr, g in ((layer.weight, dw), (layer.bias, db)):
            flat = arr.reshape(-1)
            gflat = np.asarray(g, dtype=np.float64).reshape(-1)
            for i in range(flat.shape[0]):
                orig = flat[i]
                flat[i] = orig + step
                lp, _ = loss_fn(params)
                flat[i] = orig - step
                lm, _ = loss_fn(params)
                flat[i] = orig
                fd = (lp - lm) / (2.0 * step)
                denom = max(abs(fd), abs(gflat[i]), 1e-6)
                max_rel = max(max_rel, abs(fd - gflat[i]) / denom)
                n += 1
    return FdReport(max_rel_error=max_rel, n_params=n, tolerance=tolerance)


# --- training loop -----------------------------------------------------------

def build_head(objective: str, in_dim: int, cfg: TrainConfig,
               rng: np.random.Generator) -> MlpParams:
    """Default architecture per objective.

    bce: in -> hidden (relu) -> 1. hsc/deepsad: in -> hidden (relu) ->
    embedding_dim. compactness: a single affine layer initialized at the
    identity, standing in for an already-trained feature extractor that
    the one-class recipe would fine-tune. autoencoder: in -> hidden (relu)
    -> bottleneck -> hidden (relu) -> in.
    """
    if objective == "bce":
        return init_mlp([in_dim, cfg.hidden_width, 1], ["relu", "identity"], rng)
    if objective in ("hsc", "deepsad"):
        return init_mlp([in_dim, cfg.hidden_width, cfg.embedding_dim],
                        ["relu", "identity"], rng)
    if objective == "compactness":
        return identity_head(in_dim)
    if objective == "autoencoder":
        bneck = cfg.bottleneck_dim if cfg.bottleneck_dim is not None else max(1, in_dim // 2)
        return init_mlp([in_dim, cfg.hidden_width, bneck, cfg.hidden_width, in_dim],
                        ["relu", "identity", "relu", "identity"], rng)
    raise ValueError(f"unknown objective {objective!r}")


@dataclass
class TrainedModel:
    params: MlpParams
    objective: str
    center: CenterVector | None
    config: TrainConfig
    loss_trace: list[float] = field(default_factory=list)


def train(normal: FeatureMatrix, near: FeatureMatrix | None, far: FeatureMatrix | None,
          cfg: TrainConfig, params: MlpParams | None = None) -> TrainedModel:
    """Run cfg.steps SGD steps over sampled batches; deterministic per seed.

    OE objectives (bce/hsc/deepsad) need all three pools and draw balanced
    batches; compactness and autoencoder sample from the normal pool only.
    Centers for compactness/deepsad are the mean embedding of the normal
    pool under the initial parameters, frozen thereafter.
    """
    gen = _rng.generator(cfg.seed)
    if params is None:
        params = build_head(cfg.objective, normal.dim, cfg, gen)

    center = None
    if cfg.objective in ("compactness", "deepsad"):
        emb = forward(params, normal.rows.astype(np.float64))
        center = CenterVector(emb.mean(axis=0))

    needs_oe = cfg.objective in ("bce", "hsc", "deepsad")
    if needs_oe:
        if near is None or far is None or near.n == 0 or far.n == 0:
            raise ValueError(f"objective {cfg.objective!r} requires near and far OE pools")
        sampler = OeSamplerConfig(batch_size=cfg.batch_size, seed=cfg.seed)
    if normal.n == 0:
        raise ValueError("normal pool is empty")

    opt_state = None
    trace = []
    for _ in range(cfg.steps):
        if needs_oe:
            batch, labels, gen = sample_batch(normal, near, far, sampler, gen)
            x, y = batch.rows, labels
        else:
            idx = gen.integers(0, normal.n, cfg.batch_size)
            x, y = normal.rows[idx], None
        loss, grads = objective_loss_grads(params, x, y, cfg.objective, center)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at step {len(trace)}", loss_trace=trace)
        try:
            params, opt_state = sgd_step(params, grads, opt_state, cfg)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                f"{exc} at step {len(trace)}", loss_trace=trace) from None
        trace.append(loss)
    return TrainedModel(params=params, objective=cfg.objective, center=center,
                        config=cfg, loss_trace=trace)


# --- checkpoint I/O -----------------------------------------------------------

def save_checkpoint(model: TrainedModel, path) -> None:
    """JSON header line + little-endian float64 blob, layer order as declared."""
    header = {
        "format": "histoanomaly-checkpoint",
        "version": 1,
        "objective": model.objective,
        "seed": model.config.seed,
        "architecture": [
            {"in": l.weight.shape[1], "out": l.weight.shape[0], "activation": l.activation}
            for l in model.params.layers
        ],
        "center": None if model.center is None else [float(v) for v in model.center.c],
        "config": {
            "learning_rate": model.config.learning_rate,
            "momentum": model.config.momentum,
            "weight_decay": model.config.weight_decay,
            "batch_size": model.config.batch_size,
            "steps": model.config.steps,
            "grad_clip_norm": model.config.grad_clip_norm,
        },
    }
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for l in model.params.layers for arr in (l.weight, l.bias)
    )
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != "histoanomaly-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    layers = []
    offset = 0
    for spec in header["architecture"]:
        n_in, n_out = spec["in"], spec["out"]
        w_count, b_count = n_out * n_in, n_out
        w = np.frombuffer(blob, dtype="<f8", count=w_count, offset=offset).reshape(n_out, n_in)
        offset += w_count * 8
        b = np.frombuffer(blob, dtype="<f8", count=b_count, offset=offset)
        offset += b_count * 8
        layers.append(Layer(weight=w.copy(), bias=b.copy(), activation=spec["activation"]))
    center = None if header["center"] is None else CenterVector(np.array(header["center"]))
    cfg = TrainConfig(objective=header["objective"], seed=header["seed"],
                      **header["config"])
    return TrainedModel(params=MlpParams(layers), objective=header["objective"],
                        center=center, config=cfg)
