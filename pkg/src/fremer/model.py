"""Fremer forward pipeline.

    x --LLP--> x_pad --rfft--> F --band split--> (low band, backbone)
    backbone --F-RIN--> proj_in --> encoder blocks --> proj_out --F-RIN^-1-->
    low band ++ backbone ++ zeros --irfft--> last T samples

Every instance is processed independently (channel independence).  The
batched code multiplies activations by weights with stacked matmuls
(``x[..., None, :] @ W``) rather than one GEMM so that a row's result does
not depend on which other rows share its batch.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import erf

from .spectral import BandSpec, band_counts

__all__ = [
    "EPS",
    "ForecastTask",
    "FremerParams",
    "NormState",
    "ModelError",
    "param_shapes",
    "init_params",
    "llp_pad",
    "frin_normalize",
    "frin_denormalize",
    "csa_head",
    "csa_multihead",
    "encoder_block",
    "forward",
    "forward_batch",
    "encode",
    "decode",
]

EPS = 1e-5
_SQRT2 = math.sqrt(2.0)


class ModelError(ValueError):
    """Bad shapes, bad configuration, or a failed forward stage."""

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        self.message = message
        super().__init__(f"[{stage}] {message}" if stage else message)


@dataclass(frozen=True)
class ForecastTask:
    """Shape-fixing configuration: lookback, horizon, filter ratios, L', H."""

    lookback: int
    horizon: int
    lpf_ratio: float = 0.01
    hpf_ratio: float = 0.03
    n_combinations: int | None = None
    n_heads: int = 8
    n_blocks: int = 1
    ff_expansion: int = 2

    def __post_init__(self):
        if self.n_combinations is None:
            object.__setattr__(self, "n_combinations", self.lookback // 5)
        if self.lookback < 1 or self.horizon < 1:
            raise ModelError("lookback and horizon must be >= 1", "task")
        if self.n_heads < 1 or self.n_combinations < 1:
            raise ModelError("n_heads and n_combinations must be >= 1", "task")
        if self.n_combinations % self.n_heads:
            raise ModelError(
                f"n_combinations={self.n_combinations} not divisible by n_heads={self.n_heads}",
                "task",
            )
        if self.n_blocks < 0 or self.ff_expansion < 1:
            raise ModelError("n_blocks must be >= 0 and ff_expansion >= 1", "task")
        try:
            self.band
        except ValueError as exc:
            raise ModelError(str(exc), "task") from exc

    @property
    def total_len(self) -> int:
        return self.lookback + self.horizon

    @property
    def n_bins(self) -> int:
        return self.total_len // 2 + 1

    @property
    def band(self) -> BandSpec:
        return band_counts(self.n_bins, self.hpf_ratio, self.lpf_ratio)

    @property
    def backbone_len(self) -> int:
        return self.band.backbone_len(self.n_bins)

    @property
    def head_dim(self) -> int:
        return self.n_combinations // self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.n_combinations * self.ff_expansion

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastTask":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in d.items():
            if key not in kinds:
                continue
            if key in ("lpf_ratio", "hpf_ratio"):
                out[key] = float(val)
            elif val is None or val == "None":
                out[key] = None
            else:
                out[key] = int(val)
        return cls(**out)


BLOCK_KEYS = ("wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "ff1", "ff2", "ln2_gain", "ln2_bias")


def param_shapes(task: ForecastTask) -> dict[str, tuple[tuple[int, ...], bool]]:
    """Ordered ``name -> (shape, is_complex)`` for every learnable tensor."""
    L, T = task.lookback, task.horizon
    K, P, H, l, F = task.backbone_len, task.n_combinations, task.n_heads, task.head_dim, task.ff_dim
    shapes: dict[str, tuple[tuple[int, ...], bool]] = {
        "llp_weight": ((L, T), False),
        "llp_bias": ((T,), False),
        "proj_in": ((K, P), True),
    }
    for i in range(task.n_blocks):
        p = f"block{i}."
        shapes[p + "wq"] = ((H, P, l), True)
        shapes[p + "wk"] = ((H, P, l), True)
        shapes[p + "wv"] = ((H, P, l), True)
        shapes[p + "wo"] = ((H * l, P), True)
        shapes[p + "ln1_gain"] = ((P,), False)
        shapes[p + "ln1_bias"] = ((P,), True)
        shapes[p + "ff1"] = ((P, F), True)
        shapes[p + "ff2"] = ((F, P), True)
        shapes[p + "ln2_gain"] = ((P,), False)
        shapes[p + "ln2_bias"] = ((P,), True)
    shapes["proj_out"] = ((P, K), True)
    return shapes


class FremerParams:
    """Flat, ordered set of named tensors shaped for one :class:`ForecastTask`."""

    def __init__(self, task: ForecastTask, tensors: dict[str, np.ndarray]):
        self.task = task
        expected = param_shapes(task)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ModelError(f"parameter names mismatch: missing={missing} extra={extra}", "params")
        self.tensors: dict[str, np.ndarray] = {}
        for name, (shape, is_complex) in expected.items():
            arr = np.asarray(tensors[name], dtype=np.complex128 if is_complex else np.float64)
            if arr.shape != shape:
                raise ModelError(f"{name} has shape {arr.shape}, expected {shape}", "params")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} contains non-finite entries", "params")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        cur = self.tensors[name]
        arr = np.asarray(value, dtype=cur.dtype)
        if arr.shape != cur.shape:
            raise ModelError(f"{name} has shape {arr.shape}, expected {cur.shape}", "params")
        self.tensors[name] = arr

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def block(self, i: int) -> dict[str, np.ndarray]:
        return {k: self.tensors[f"block{i}.{k}"] for k in BLOCK_KEYS}

    def copy(self) -> "FremerParams":
        return FremerParams(self.task, {k: v.copy() for k, v in self.tensors.items()})

    def n_scalars(self) -> int:
        return sum(v.size * (2 if np.iscomplexobj(v) else 1) for v in self.tensors.values())

    def equal(self, other: "FremerParams") -> bool:
        return self.task == other.task and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def _fan_in(name: str, task: ForecastTask) -> int:
    key = name.split(".")[-1]
    return {
        "llp_weight": task.lookback,
        "proj_in": task.backbone_len,
        "wq": task.n_combinations,
        "wk": task.n_combinations,
        "wv": task.n_combinations,
        "wo": task.n_heads * task.head_dim,
        "ff1": task.n_combinations,
        "ff2": task.ff_dim,
        "proj_out": task.n_combinations,
    }[key]


def init_params(task: ForecastTask, rng: np.random.Generator | int = 0) -> FremerParams:
    """Uniform(+-sqrt(1/fan_in)) on real and imaginary parts; unit gains, zero offsets."""
    rng = np.random.default_rng(rng)
    tensors = {}
    for name, (shape, is_complex) in param_shapes(task).items():
        key = name.split(".")[-1]
        if key in ("llp_bias", "ln1_bias", "ln2_bias"):
            tensors[name] = np.zeros(shape, dtype=np.complex128 if is_complex else np.float64)
        elif key in ("ln1_gain", "ln2_gain"):
            tensors[name] = np.ones(shape)
        else:
            bound = math.sqrt(1.0 / _fan_in(name, task))
            re = rng.uniform(-bound, bound, size=shape)
            if is_complex:
                tensors[name] = re + 1j * rng.uniform(-bound, bound, size=shape)
            else:
                tensors[name] = re
    return FremerParams(task, tensors)


# ---------------------------------------------------------------------------
# batched building blocks (leading axes are batch axes)


def rowmm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` over the last axis, bitwise independent of the batch size."""
    return (x[..., None, :] @ w)[..., 0, :]


def cnorm(u: np.ndarray, eps: float = EPS):
    """Centre by complex mean, divide by population std of magnitudes + eps.

    Returns ``(normed, mean, scale, sd)`` with reductions over the last axis.
    """
    m = u.mean(axis=-1)
    sd = np.abs(u).std(axis=-1)
    s = sd + eps
    return (u - m[..., None]) / s[..., None], m, s, sd


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def split_gelu(z: np.ndarray) -> np.ndarray:
    return gelu(z.real) + 1j * gelu(z.imag)


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _project_heads(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    # z (..., P), w (H, P, l) -> (..., H, l)
    return (z[..., None, None, :] @ w)[..., 0, :]


def _attention(z, wq, wk, wv, wo, cache=None, counter=None):
    q = _project_heads(z, wq)
    k = _project_heads(z, wk)
    v = _project_heads(z, wv)
    l = q.shape[-1]
    aq, ak = np.abs(q), np.abs(k)
    # |q_i conj(k_j)| == |q_i| |k_j|
    scores = aq[..., :, None] * ak[..., None, :] / math.sqrt(l)
    attn = softmax(scores)
    o = (attn @ v[..., None])[..., 0]
    heads = o.reshape(*o.shape[:-2], -1)
    out = rowmm(heads, wo)
    if counter is not None:
        n_inst = int(np.prod(z.shape[:-1]))
        counter["score_macs"] += n_inst * int(np.prod(scores.shape[-3:]))
    if cache is not None:
        cache.update(q=q, k=k, v=v, aq=aq, ak=ak, attn=attn, heads=heads)
    return out, attn


def _block(z, blk, cache=None, counter=None):
    att, attn = _attention(z, blk["wq"], blk["wk"], blk["wv"], blk["wo"], cache, counter)
    u1 = z + att
    n1, m1, s1, sd1 = cnorm(u1)
    y1 = blk["ln1_gain"] * n1 + blk["ln1_bias"]
    h = rowmm(y1, blk["ff1"])
    act = split_gelu(h)
    f = rowmm(act, blk["ff2"])
    u2 = y1 + f
    n2, m2, s2, sd2 = cnorm(u2)
    y2 = blk["ln2_gain"] * n2 + blk["ln2_bias"]
    if cache is not None:
        cache.update(z=z, u1=u1, n1=n1, s1=s1, sd1=sd1, y1=y1, h=h, act=act,
                     u2=u2, n2=n2, s2=s2, sd2=sd2)
    return y2, attn


def encode(X: np.ndarray, params: FremerParams) -> dict:
    """LLP padding, rfft, band split and F-RIN for a batch ``X`` of shape (B, L)."""
    task = params.task
    band = task.band
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != task.lookback:
        raise ModelError(f"input shape {X.shape} does not match lookback {task.lookback}", "llp")
    if not np.all(np.isfinite(X)):
        raise ModelError("input contains non-finite samples", "llp")
    pad = rowmm(X, params["llp_weight"]) + params["llp_bias"]
    xp = np.concatenate([X, pad], axis=1)
    spec = np.fft.rfft(xp, axis=1)
    spec[:, 0] = spec[:, 0].real
    if task.total_len % 2 == 0:
        spec[:, -1] = spec[:, -1].real
    low = spec[:, : band.n_low]
    fb = spec[:, band.n_low : band.n_low + task.backbone_len]
    fr, mu, s, sd = cnorm(fb)
    return {"x": X, "xp": xp, "spec": spec, "low": low, "fb": fb, "fr": fr, "mu": mu, "s": s, "sd": sd}


def decode(low: np.ndarray, backbone: np.ndarray, task: ForecastTask) -> tuple[np.ndarray, np.ndarray]:
    """Splice the raw low band and a (denormalized) backbone, irfft, keep the last T.

    Returns ``(forecast, recovered_spectrum)``.
    """
    band = task.band
    B = backbone.shape[0]
    if low.shape != (B, band.n_low) or backbone.shape != (B, task.backbone_len):
        raise ModelError("band lengths inconsistent with task", "recover")
    rec = np.concatenate([low, backbone, np.zeros((B, band.n_high), dtype=np.complex128)], axis=1)
    rec[:, 0] = rec[:, 0].real
    if task.total_len % 2 == 0:
        rec[:, -1] = rec[:, -1].real
    y = np.fft.irfft(rec, n=task.total_len, axis=1)
    return y[:, task.lookback :], rec


def forward_batch(X, params: FremerParams, *, trace: bool = False, cache: dict | None = None,
                  counter: Counter | None = None):
    """Forecast a (B, L) batch. Returns ``(forecast (B, T), trace)``.

    ``trace`` is a list (one per block) of attention arrays (B, H, l, l) when
    requested, else None.  Passing a dict as ``cache`` records intermediates
    needed for the backward pass.
    """
    task = params.task
    enc = encode(X, params)
    z = rowmm(enc["fr"], params["proj_in"])
    attn_trace = [] if trace else None
    block_caches = []
    for i in range(task.n_blocks):
        bc = {} if cache is not None else None
        z, attn = _block(z, params.block(i), bc, counter)
        if not np.all(np.isfinite(z)):
            raise ModelError("non-finite activation", f"block{i}")
        if attn_trace is not None:
            attn_trace.append(attn)
        block_caches.append(bc)
    out = rowmm(z, params["proj_out"])
    ob = out * enc["s"][:, None] + enc["mu"][:, None]
    forecast, rec = decode(enc["low"], ob, task)
    if cache is not None:
        cache.update(enc)
        cache.update(blocks=block_caches, z_last=z, out=out, rec=rec)
    return forecast, attn_trace


# ---------------------------------------------------------------------------
# single-instance operations


@dataclass(frozen=True)
class NormState:
    mean: complex
    scale: float


def llp_pad(x, params: FremerParams) -> np.ndarray:
    """``concat(x, W^T x + b)``; length L + T."""
    x = np.asarray(x, dtype=np.float64)
    W, b = params["llp_weight"], params["llp_bias"]
    if x.shape != (W.shape[0],):
        raise ModelError(f"input length {x.shape} does not match lookback {W.shape[0]}", "llp")
    if not np.all(np.isfinite(x)):
        raise ModelError("input contains non-finite samples", "llp")
    return np.concatenate([x, rowmm(x, W) + b])


def frin_normalize(f, eps: float = EPS) -> tuple[np.ndarray, NormState]:
    f = np.asarray(f, dtype=np.complex128)
    if f.size == 0:
        raise ModelError("empty spectrum", "frin")
    normed, m, s, _ = cnorm(f, eps)
    return normed, NormState(complex(m), float(s))


def frin_denormalize(f, state: NormState) -> np.ndarray:
    return np.asarray(f, dtype=np.complex128) * state.scale + state.mean


def csa_head(fc, wq, wk, wv, counter: Counter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One attention head over the l projected combinations.

    Returns ``(output (l,), attention (l, l))``.
    """
    fc = np.asarray(fc, dtype=np.complex128)
    q, k, v = rowmm(fc, wq), rowmm(fc, wk), rowmm(fc, wv)
    l = q.shape[-1]
    scores = np.abs(q)[:, None] * np.abs(k)[None, :] / math.sqrt(l)
    if not np.all(np.isfinite(scores)):
        raise ModelError("non-finite attention scores", "csa")
    attn = softmax(scores)
    if counter is not None:
        counter["score_macs"] += scores.size
    return (attn @ v[:, None])[:, 0], attn


def csa_multihead(fc, blk: dict, counter: Counter | None = None) -> np.ndarray:
    """Concat of H independent heads, times W_O."""
    fc = np.asarray(fc, dtype=np.complex128)
    out, _ = _attention(fc[None], blk["wq"], blk["wk"], blk["wv"], blk["wo"], counter=counter)
    return out[0]


def encoder_block(fc, blk: dict) -> np.ndarray:
    """``y = CLN(fc + CSA(fc)); CLN(y + CFF(y))``."""
    fc = np.asarray(fc, dtype=np.complex128)
    out, _ = _block(fc[None], blk)
    return out[0]


def forward(x, params: FremerParams, task: ForecastTask | None = None, *, trace: bool = False):
    """Forecast one lookback window. Returns ``(forecast (T,), trace or None)``."""
    if task is not None and task != params.task:
        raise ModelError("parameters were built for a different task", "forward")
    x = np.asarray(x, dtype=np.float64)
    fc, tr = forward_batch(x[None], params, trace=trace)
    if tr is not None:
        tr = [a[0] for a in tr]
    return fc[0], tr
