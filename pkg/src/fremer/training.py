"""Reverse-mode gradients, ADAM, and the training loop.

Complex tensors are differentiated as pairs of reals.  A gradient with
respect to a complex tensor ``z`` is stored as ``dL/dRe(z) + 1j * dL/dIm(z)``;
under that convention a holomorphic product ``y = x @ w`` back-propagates as
``g_x = g_y @ w^H`` and ``g_w = x^H @ g_y``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import FremerParams, ForecastTask, ModelError, forward_batch, gelu_grad
from .rng import substream

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingError",
    "AdamState",
    "loss_mse",
    "backward",
    "backward_batch",
    "adam_step",
    "clip_gradients",
    "train",
    "TrainResult",
]


class TrainingError(RuntimeError):
    """Divergence, non-finite gradients, or an unusable dataset."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}" if epoch is not None else message)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    # per-epoch multiplier on the learning rate; 1.0 keeps it constant
    lr_decay: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (1-based)."""
        return self.learning_rate * self.lr_decay ** (epoch - 1)


def loss_mse(forecast, target) -> float:
    forecast = np.asarray(forecast, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if forecast.shape != target.shape:
        raise ValueError(f"length mismatch: {forecast.shape} vs {target.shape}")
    return float(np.mean((forecast - target) ** 2))


# ---------------------------------------------------------------------------
# backward pass


def _unit(z: np.ndarray, mag: np.ndarray) -> np.ndarray:
    # z/|z| with the subgradient 0 at z == 0
    out = np.zeros_like(z)
    np.divide(z, mag, out=out, where=mag > 0)
    return out


def _cnorm_back(g_n, n, u, s, sd, g_mean=0.0, g_scale=0.0):
    """Gradient through ``n = (u - mean(u)) / (std(|u|) + eps)``.

    ``g_mean``/``g_scale`` are extra gradients reaching the mean and the
    scale from elsewhere (F-RIN re-uses both on the way out).
    """
    P = u.shape[-1]
    inv_s = 1.0 / s[..., None]
    g_m = g_mean - g_n.sum(axis=-1) / s
    g_s = g_scale - np.sum((np.conj(g_n) * n).real, axis=-1) / s
    a = np.abs(u)
    dev = a - a.mean(axis=-1, keepdims=True)
    coef = np.zeros_like(sd)
    np.divide(g_s, P * sd, out=coef, where=sd > 0)
    g_a = coef[..., None] * dev
    return g_n * inv_s + g_m[..., None] / P + g_a * _unit(u, a)


def _block_back(g_y2, c: dict, blk: dict, grads: dict, prefix: str) -> np.ndarray:
    B = g_y2.shape[0]
    H, P, l = blk["wq"].shape

    grads[prefix + "ln2_gain"] = np.sum((np.conj(g_y2) * c["n2"]).real, axis=0)
    grads[prefix + "ln2_bias"] = g_y2.sum(axis=0)
    g_u2 = _cnorm_back(g_y2 * blk["ln2_gain"], c["n2"], c["u2"], c["s2"], c["sd2"])

    g_f = g_u2
    grads[prefix + "ff2"] = c["act"].conj().T @ g_f
    g_act = g_f @ blk["ff2"].conj().T
    h = c["h"]
    g_h = g_act.real * gelu_grad(h.real) + 1j * (g_act.imag * gelu_grad(h.imag))
    grads[prefix + "ff1"] = c["y1"].conj().T @ g_h
    g_y1 = g_u2 + g_h @ blk["ff1"].conj().T

    grads[prefix + "ln1_gain"] = np.sum((np.conj(g_y1) * c["n1"]).real, axis=0)
    grads[prefix + "ln1_bias"] = g_y1.sum(axis=0)
    g_u1 = _cnorm_back(g_y1 * blk["ln1_gain"], c["n1"], c["u1"], c["s1"], c["sd1"])

    g_z = g_u1.copy()
    g_att = g_u1
    grads[prefix + "wo"] = c["heads"].conj().T @ g_att
    g_o = (g_att @ blk["wo"].conj().T).reshape(B, H, l)

    q, k, v, aq, ak, A = c["q"], c["k"], c["v"], c["aq"], c["ak"], c["attn"]
    g_A = (np.conj(g_o)[..., :, None] * v[..., None, :]).real
    g_v = (A.transpose(0, 1, 3, 2) @ g_o[..., None])[..., 0]
    g_S = A * (g_A - np.sum(A * g_A, axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(l)
    g_aq = (g_S @ ak[..., None])[..., 0] * scale
    g_ak = (g_S.transpose(0, 1, 3, 2) @ aq[..., None])[..., 0] * scale
    g_q = g_aq * _unit(q, aq)
    g_k = g_ak * _unit(k, ak)

    zc = c["z"].conj().T
    for name, g in (("wq", g_q), ("wk", g_k), ("wv", g_v)):
        flat = g.reshape(B, H * l)
        grads[prefix + name] = (zc @ flat).reshape(P, H, l).transpose(1, 0, 2)
        w_flat = blk[name].transpose(1, 0, 2).reshape(P, H * l)
        g_z += flat @ w_flat.conj().T
    return g_z


def backward_batch(X, Y, params: FremerParams) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss over a (B, L) -> (B, T) batch and its gradient for every tensor."""
    task = params.task
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if not np.all(np.isfinite(Y)):
        raise TrainingError("non-finite target values")
    cache: dict = {}
    F, _ = forward_batch(X, params, cache=cache)
    if F.shape != Y.shape:
        raise ValueError(f"target shape {Y.shape} does not match forecast {F.shape}")
    B, T = F.shape
    L, N = task.lookback, task.total_len
    band = task.band
    K = task.backbone_len
    diff = F - Y
    loss = float(np.mean(diff * diff))
    grads: dict[str, np.ndarray] = {}

    # irfft adjoint: interior bins carry weight 2/N, DC and Nyquist 1/N
    g_y = np.zeros((B, N))
    g_y[:, L:] = 2.0 * diff / (B * T)
    g_rec = np.fft.rfft(g_y, axis=1) * (2.0 / N)
    g_rec[:, 0] = 0.5 * g_rec[:, 0].real
    if N % 2 == 0:
        g_rec[:, -1] = 0.5 * g_rec[:, -1].real
    g_low = g_rec[:, : band.n_low]
    g_ob = g_rec[:, band.n_low : band.n_low + K]

    s, out = cache["s"], cache["out"]
    g_out = g_ob * s[:, None]
    g_scale = np.sum((np.conj(g_ob) * out).real, axis=1)
    g_mean = g_ob.sum(axis=1)

    grads["proj_out"] = cache["z_last"].conj().T @ g_out
    g_z = g_out @ params["proj_out"].conj().T
    for i in reversed(range(task.n_blocks)):
        g_z = _block_back(g_z, cache["blocks"][i], params.block(i), grads, f"block{i}.")

    grads["proj_in"] = cache["fr"].conj().T @ g_z
    g_fr = g_z @ params["proj_in"].conj().T
    g_fb = _cnorm_back(g_fr, cache["fr"], cache["fb"], s, cache["sd"], g_mean, g_scale)

    g_spec = np.zeros((B, task.n_bins), dtype=np.complex128)
    g_spec[:, : band.n_low] = g_low
    g_spec[:, band.n_low : band.n_low + K] = g_fb
    # rfft adjoint: g_x[n] = Re sum_k g[k] exp(+2 pi i k n / N)
    coef = 0.5 * g_spec
    coef[:, 0] = g_spec[:, 0].real
    if N % 2 == 0:
        coef[:, -1] = g_spec[:, -1].real
    g_xp = N * np.fft.irfft(coef, n=N, axis=1)
    g_pad = g_xp[:, L:]
    grads["llp_weight"] = X.T @ g_pad
    grads["llp_bias"] = g_pad.sum(axis=0)

    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad or not math.isfinite(loss):
        raise TrainingError(f"non-finite loss/gradient in {bad or ['loss']}")
    return loss, {k: grads[k] for k in params}


def backward(x, target, params: FremerParams, task: ForecastTask | None = None):
    """Loss and gradients for a single window (1-D) or a batch (2-D)."""
    if task is not None and task != params.task:
        raise ValueError("parameters were built for a different task")
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if x.ndim == 1:
        x, target = x[None], target[None]
    return backward_batch(x, target, params)


# ---------------------------------------------------------------------------
# optimizer


def _real_view(a: np.ndarray) -> np.ndarray:
    return a.view(np.float64) if np.iscomplexobj(a) else a


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: FremerParams) -> "AdamState":
        m = {k: np.zeros(_real_view(a).shape) for k, a in params.items()}
        v = {k: np.zeros(_real_view(a).shape) for k, a in params.items()}
        return cls(m, v, 0)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place to a global L2 norm of at most max_norm."""
    norm = math.sqrt(sum(float(np.sum(np.abs(g) ** 2)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def adam_step(params: FremerParams, grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig, lr: float | None = None) -> None:
    """Bias-corrected ADAM update, in place, one real scalar at a time."""
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = _real_view(np.ascontiguousarray(grads[name]))
        if g.shape != state.m[name].shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom *= 1.0 / math.sqrt(c2)
        denom += cfg.adam_eps
        _real_view(p)[...] -= (lr / c1) * m / denom


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: FremerParams
    history: list[dict]
    best_epoch: int


def _eval_loss(params: FremerParams, X, Y, chunk: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(X), chunk):
        F, _ = forward_batch(X[i : i + chunk], params)
        total += float(np.sum((F - Y[i : i + chunk]) ** 2))
        count += F.size
    return total / count


def train(dataset, task: ForecastTask, cfg: TrainConfig, init: FremerParams | None = None,
          progress=None) -> TrainResult:
    """Train on ``dataset.train`` and keep the snapshot with the best validation loss.

    ``dataset`` needs ``train`` and ``val`` attributes exposing ``__len__``
    and ``batch(indices) -> (X, Y)`` (see :class:`fremer.data.WindowSet`).
    """
    from .model import init_params

    n_train, n_val = len(dataset.train), len(dataset.val)
    if n_train == 0 or n_val == 0:
        raise TrainingError(f"empty split (train={n_train}, val={n_val})")
    params = init.copy() if init is not None else init_params(task, substream(cfg.seed, "init"))
    if params.task != task:
        raise TrainingError("initial parameters were built for a different task")
    shuffle = substream(cfg.seed, "shuffle")
    state = AdamState.zeros_like(params)
    Xv, Yv = dataset.val.batch(np.arange(n_val))

    best, best_loss, best_epoch = params.copy(), math.inf, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle.permutation(n_train)
        lr = cfg.lr_at(epoch)
        total = 0.0
        for i in range(0, n_train, cfg.batch_size):
            X, Y = dataset.train.batch(order[i : i + cfg.batch_size])
            try:
                loss, grads = backward_batch(X, Y, params)
            except (TrainingError, ModelError, FloatingPointError) as exc:
                raise TrainingError(str(exc), epoch) from exc
            if cfg.grad_clip is not None:
                clip_gradients(grads, cfg.grad_clip)
            adam_step(params, grads, state, cfg, lr)
            total += loss * len(X)
        train_loss = total / n_train
        val_loss = _eval_loss(params, Xv, Yv)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingError("loss diverged to a non-finite value", epoch)
        if val_loss < best_loss:
            best, best_loss, best_epoch = params.copy(), val_loss, epoch
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "lr": lr, "wall_seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d train=%.6f val=%.6f", epoch, train_loss, val_loss)
        if progress is not None:
            progress(row)
    return TrainResult(best, history, best_epoch)
