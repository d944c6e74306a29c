"""Per-pixel four-head MLP with analytic gradients, EMA teacher, and checkpoints.

One shared two-layer encoder feeds three heads: a linear prediction head for
class logits, a two-layer representation head for the embedding mean, and a
two-layer probability head for the embedding log-variance. The probability
head can be trained at a reduced learning rate (soft freezing) and its output
is clamped so variances stay inside the global bounds.

Gradients are computed by hand with the chain rule; there is no autograd
framework underneath.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .prob_embed import SIGMA2_MAX, SIGMA2_MIN, ProbRep

_LOG_S2_MIN = math.log(SIGMA2_MIN)
_LOG_S2_MAX = math.log(SIGMA2_MAX)

_CHECKPOINT_MAGIC = b"PXMODEL1"


@dataclass(frozen=True)
class ModelConfig:
    d_in: int | None = None
    num_classes: int | None = None
    hidden: int = 32
    feat_dim: int = 32
    rep_hidden: int = 32
    embed_dim: int = 32
    seed: int = 0
    clamp_variance: bool = True
    # Center of the initial log-variance output. Variances must start small
    # relative to squared embedding distances or the contrastive softmax
    # saturates (the fused prototype holds a D*log2 advantage over every
    # negative) and the probability head never receives a gradient.
    sigma2_init: float = 0.1

    def __post_init__(self):
        for name in ("hidden", "feat_dim", "rep_hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("d_in", "num_classes"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive when set")
        if not SIGMA2_MIN <= self.sigma2_init <= SIGMA2_MAX:
            raise ValueError("sigma2_init must lie within the variance bounds")


@dataclass(frozen=True)
class OptimConfig:
    lr_base: float = 0.2
    lr_prob_scale: float = 0.01
    ema_decay: float = 0.99
    batch_pixels: int = 256
    steps_per_epoch: int = 8

    def __post_init__(self):
        if self.lr_base <= 0.0:
            raise ValueError("lr_base must be positive")
        if not 0.0 <= self.lr_prob_scale <= 1.0:
            raise ValueError("lr_prob_scale must lie in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_pixels < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_pixels and steps_per_epoch must be positive")


def _param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) triples; the order fixes the checkpoint layout."""
    return [
        ("enc.W1", (cfg.hidden, cfg.d_in), cfg.d_in),
        ("enc.b1", (cfg.hidden,), cfg.d_in),
        ("enc.W2", (cfg.feat_dim, cfg.hidden), cfg.hidden),
        ("enc.b2", (cfg.feat_dim,), cfg.hidden),
        ("pred.W", (cfg.num_classes, cfg.feat_dim), cfg.feat_dim),
        ("pred.b", (cfg.num_classes,), cfg.feat_dim),
        ("rep.W1", (cfg.rep_hidden, cfg.feat_dim), cfg.feat_dim),
        ("rep.b1", (cfg.rep_hidden,), cfg.feat_dim),
        ("rep.W2", (cfg.embed_dim, cfg.rep_hidden), cfg.rep_hidden),
        ("rep.b2", (cfg.embed_dim,), cfg.rep_hidden),
        ("prob.W1", (cfg.rep_hidden, cfg.feat_dim), cfg.feat_dim),
        ("prob.b1", (cfg.rep_hidden,), cfg.feat_dim),
        ("prob.W2", (cfg.embed_dim, cfg.rep_hidden), cfg.rep_hidden),
        ("prob.b2", (cfg.embed_dim,), cfg.rep_hidden),
    ]


@dataclass(eq=False)
class ForwardPass:
    """Cached activations of one batched forward, consumed by backprop."""

    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    feat: np.ndarray
    logits: np.ndarray
    r1: np.ndarray
    hr: np.ndarray
    mu: np.ndarray
    p1: np.ndarray
    hp: np.ndarray
    logvar: np.ndarray
    sigma2: np.ndarray


class ToyModel:
    """Shared encoder plus prediction, representation, and probability heads.

    Weights and biases are initialized uniformly in [-1/sqrt(fan_in),
    +1/sqrt(fan_in)] from the config seed.
    """

    def __init__(self, config: ModelConfig):
        if config.d_in is None or config.num_classes is None:
            raise ValueError("d_in and num_classes must be set to build a model")
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, np.ndarray] = {}
        for name, shape, fan_in in _param_layout(config):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[name] = rng.uniform(-bound, bound, size=shape)
        self.params["prob.b2"] = self.params["prob.b2"] + math.log(config.sigma2_init)

    def copy(self) -> "ToyModel":
        other = object.__new__(ToyModel)
        other.config = self.config
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def forward_batch(self, x: np.ndarray) -> ForwardPass:
        """Run a (n, d_in) batch through the encoder and all three heads."""
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.d_in:
            raise ValueError(f"expected (n, {self.config.d_in}) input, got shape {x.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            a1 = x @ p["enc.W1"].T + p["enc.b1"]
            h1 = np.maximum(a1, 0.0)
            feat = h1 @ p["enc.W2"].T + p["enc.b2"]
            logits = feat @ p["pred.W"].T + p["pred.b"]
            r1 = feat @ p["rep.W1"].T + p["rep.b1"]
            hr = np.maximum(r1, 0.0)
            mu = hr @ p["rep.W2"].T + p["rep.b2"]
            p1 = feat @ p["prob.W1"].T + p["prob.b1"]
            hp = np.maximum(p1, 0.0)
            logvar = hp @ p["prob.W2"].T + p["prob.b2"]
            if self.config.clamp_variance:
                sigma2 = np.clip(np.exp(np.clip(logvar, _LOG_S2_MIN, _LOG_S2_MAX)), SIGMA2_MIN, SIGMA2_MAX)
            else:
                sigma2 = np.exp(logvar)
        for name, arr in (("logits", logits), ("mu", mu), ("sigma2", sigma2)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite activations in forward pass ({name})")
        return ForwardPass(x, a1, h1, feat, logits, r1, hr, mu, p1, hp, logvar, sigma2)

    def backprop(
        self,
        fp: ForwardPass,
        dlogits: np.ndarray,
        dmu: np.ndarray,
        dsigma2: np.ndarray,
    ) -> dict[str, np.ndarray]:
        """Chain upstream gradients through the heads and the shared encoder.

        Head contributions to the encoder feature gradient are summed. The
        variance path goes through exp() and the clamp: outside the clamp
        window the gradient is zero.
        """
        p = self.params
        grads: dict[str, np.ndarray] = {}

        dfeat = dlogits @ p["pred.W"]
        grads["pred.W"] = dlogits.T @ fp.feat
        grads["pred.b"] = dlogits.sum(axis=0)

        dhr = dmu @ p["rep.W2"]
        grads["rep.W2"] = dmu.T @ fp.hr
        grads["rep.b2"] = dmu.sum(axis=0)
        dr1 = dhr * (fp.r1 > 0.0)
        grads["rep.W1"] = dr1.T @ fp.feat
        grads["rep.b1"] = dr1.sum(axis=0)
        dfeat = dfeat + dr1 @ p["rep.W1"]

        if self.config.clamp_variance:
            mask = (fp.logvar > _LOG_S2_MIN) & (fp.logvar < _LOG_S2_MAX)
            dlogvar = dsigma2 * fp.sigma2 * mask
        else:
            dlogvar = dsigma2 * fp.sigma2
        dhp = dlogvar @ p["prob.W2"]
        grads["prob.W2"] = dlogvar.T @ fp.hp
        grads["prob.b2"] = dlogvar.sum(axis=0)
        dp1 = dhp * (fp.p1 > 0.0)
        grads["prob.W1"] = dp1.T @ fp.feat
        grads["prob.b1"] = dp1.sum(axis=0)
        dfeat = dfeat + dp1 @ p["prob.W1"]

        dh1 = dfeat @ p["enc.W2"]
        grads["enc.W2"] = dfeat.T @ fp.h1
        grads["enc.b2"] = dfeat.sum(axis=0)
        da1 = dh1 * (fp.a1 > 0.0)
        grads["enc.W1"] = da1.T @ fp.x
        grads["enc.b1"] = da1.sum(axis=0)
        return grads


@dataclass(eq=False)
class TeacherStudent:
    """A trainable student and its EMA-tracked teacher copy."""

    student: ToyModel
    teacher: ToyModel

    @classmethod
    def from_student(cls, student: ToyModel) -> "TeacherStudent":
        return cls(student=student, teacher=student.copy())


def forward(model: ToyModel, x) -> tuple[np.ndarray, ProbRep]:
    """Single-pixel forward: class logits plus the probabilistic representation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D feature vector, got shape {x.shape}")
    fp = model.forward_batch(x[None, :])
    return fp.logits[0], ProbRep(fp.mu[0], fp.sigma2[0])


def backward_step(model: ToyModel, grads: dict[str, np.ndarray], cfg: OptimConfig) -> ToyModel:
    """SGD update with the probability head scaled by lr_prob_scale (soft freezing)."""
    for name, g in grads.items():
        if name not in model.params:
            raise ValueError(f"unknown parameter '{name}'")
        if g.shape != model.params[name].shape:
            raise ValueError(f"gradient shape mismatch for parameter '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'")
    for name, g in grads.items():
        lr = cfg.lr_base * (cfg.lr_prob_scale if name.startswith("prob.") else 1.0)
        model.params[name] = model.params[name] - lr * g
    return model


def ema_update(ts: TeacherStudent, m: float) -> TeacherStudent:
    """Move every teacher parameter toward the student: m * teacher + (1 - m) * student."""
    if not 0.0 <= m < 1.0:
        raise ValueError("ema decay must lie in [0, 1)")
    for name, sp in ts.student.params.items():
        ts.teacher.params[name] = m * ts.teacher.params[name] + (1.0 - m) * sp
    return ts


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_label(model: ToyModel, x) -> tuple[int, float]:
    """Argmax class and max-softmax confidence; ties go to the lowest class index."""
    logits, _ = forward(model, x)
    probs = _softmax_rows(logits)
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def pseudo_label_batch(model: ToyModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = _softmax_rows(model.forward_batch(x).logits)
    labels = np.argmax(probs, axis=1)
    return labels, probs[np.arange(len(labels)), labels]


def ce_loss(logits, target: int) -> tuple[float, np.ndarray]:
    """Cross entropy of one logit vector against a class index, with its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.size
    if not 0 <= int(target) < k or int(target) != target:
        raise ValueError(f"target {target} is not a valid class index for {k} classes")
    m = logits.max()
    logz = m + math.log(np.exp(logits - m).sum())
    loss = logz - float(logits[int(target)])
    grad = _softmax_rows(logits)
    grad[int(target)] -= 1.0
    return loss, grad


def ce_loss_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy over rows; gradient is of the mean."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    n, k = logits.shape
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValueError("targets contain an invalid class index")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - z[rows, targets]))
    grad = _softmax_rows(logits)
    grad[rows, targets] -= 1.0
    return loss, grad / n


def save_checkpoint(model: ToyModel, path) -> None:
    """Versioned binary checkpoint: magic, JSON config block, little-endian float64 params."""
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        for name, _, _ in _param_layout(model.config):
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> ToyModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig(**json.loads(fh.read(cfg_len).decode("utf-8")))
        model = ToyModel(config)
        for name, shape, _ in _param_layout(config):
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError("checkpoint truncated")
            model.params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return model
