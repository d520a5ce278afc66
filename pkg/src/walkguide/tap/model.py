"""TAP network: 3D conv visual branch, state-embedding MLP, fusion MLP, softmax.

Everything is float64 numpy with a hand-written backward pass. Parameters
live in an ordered ``dict`` so optimizers, the gradient checker and the
model file format can walk them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..domain import Frame, TriggerState
from .config import NUM_CLASSES, TapConfig


class TapShapeError(ValueError):
    pass


def param_shapes(cfg: TapConfig) -> dict[str, tuple[int, ...]]:
    k = cfg.kernel
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for i, c_out in enumerate(cfg.conv_channels):
        shapes[f"conv{i}.weight"] = (c_out, c_in, k, k, k)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    shapes["visual.weight"] = (cfg.fv_dim, c_in)
    shapes["visual.bias"] = (cfg.fv_dim,)
    shapes["state_embed"] = (NUM_CLASSES, cfg.state_embed_dim)
    shapes["state_mlp0.weight"] = (cfg.fs_hidden, cfg.n_history * cfg.state_embed_dim)
    shapes["state_mlp0.bias"] = (cfg.fs_hidden,)
    shapes["state_mlp1.weight"] = (cfg.fs_dim, cfg.fs_hidden)
    shapes["state_mlp1.bias"] = (cfg.fs_dim,)
    shapes["fusion0.weight"] = (cfg.fusion_hidden, cfg.fv_dim + cfg.fs_dim)
    shapes["fusion0.bias"] = (cfg.fusion_hidden,)
    shapes["fusion1.weight"] = (NUM_CLASSES, cfg.fusion_hidden)
    shapes["fusion1.bias"] = (NUM_CLASSES,)
    return shapes


class TapModel:
    def __init__(self, config: TapConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise TapShapeError(f"parameter set mismatch (missing={missing}, unexpected={extra})")
        for name, shape in expected.items():
            arr = params[name]
            if arr.shape != shape:
                raise TapShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            if arr.dtype != np.float64:
                raise TapShapeError(f"{name}: parameters must be float64")
            if not np.all(np.isfinite(arr)):
                raise TapShapeError(f"{name}: non-finite parameter values")
        self.config = config
        self.params = params

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TapModel":
        return TapModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def conv_layers(self):
        for i in range(len(self.config.conv_channels)):
            yield self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"]


def init_model(cfg: TapConfig, seed: int | None = None) -> TapModel:
    """Xavier-uniform weights, fan-in scaled uniform biases, seeded."""
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 0])
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "state_embed":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".weight"):
            receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            weight_shape = param_shapes(cfg)[name.replace(".bias", ".weight")]
            fan_in = int(np.prod(weight_shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return TapModel(cfg, params)


def constant_model(cfg: TapConfig, level: TriggerState, margin: float = 20.0) -> TapModel:
    """A model that ignores its inputs and always puts its mass on ``level``."""
    params = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}
    params["fusion1.bias"][int(level)] = margin
    return TapModel(cfg, params)


# ---------------------------------------------------------------- preprocessing

def _resize_axis(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = img.shape[axis]
    if in_len == out_len:
        return img
    scale = in_len / out_len
    src = (np.arange(out_len) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = src - lo
    shape = [1] * img.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return np.take(img, lo, axis=axis) * (1.0 - frac) + np.take(img, hi, axis=axis) * frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an (H, W, C) array (no antialiasing)."""
    out = _resize_axis(np.asarray(img, dtype=np.float64), out_h, 0)
    return _resize_axis(out, out_w, 1)


def preprocess_frame(frame: Frame, cfg: TapConfig) -> np.ndarray:
    """One frame -> (3, input_hw, input_hw) float64 in [0, 1]."""
    resized = resize_bilinear(frame.pixels, cfg.input_hw, cfg.input_hw) / 255.0
    return np.ascontiguousarray(resized.transpose(2, 0, 1))


def stack_frames(per_frame: list[np.ndarray]) -> np.ndarray:
    return np.stack(per_frame, axis=1)


def preprocess_frames(frames: list[Frame], cfg: TapConfig) -> np.ndarray:
    """N frames (chronological) -> (3, N, H, W) tensor."""
    if len(frames) != cfg.n_history:
        raise TapShapeError(f"expected {cfg.n_history} frames, got {len(frames)}")
    return stack_frames([preprocess_frame(f, cfg) for f in frames])


# ---------------------------------------------------------------- conv3d

def _out_len(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def im2col3d(x: np.ndarray, k: int, st: int, ss: int, pad: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    """(..., C, T, H, W) -> (..., C*k^3, To*Ho*Wo) patch matrix."""
    lead = x.shape[:-4]
    c, t, h, w = x.shape[-4:]
    to, ho, wo = _out_len(t, k, st, pad), _out_len(h, k, ss, pad), _out_len(w, k, ss, pad)
    widths = [(0, 0)] * len(lead) + [(0, 0), (pad, pad), (pad, pad), (pad, pad)]
    xp = np.pad(x, widths) if pad else x
    win = sliding_window_view(xp, (k, k, k), axis=(-3, -2, -1))
    win = win[..., : to * st : st, : ho * ss : ss, : wo * ss : ss, :, :, :]
    # (..., C, To, Ho, Wo, kt, kh, kw) -> (..., C, kt, kh, kw, To, Ho, Wo)
    nd = win.ndim
    order = list(range(nd - 7)) + [nd - 7, nd - 3, nd - 2, nd - 1, nd - 6, nd - 5, nd - 4]
    col = np.ascontiguousarray(win.transpose(order)).reshape(*lead, c * k**3, to * ho * wo)
    return col, (to, ho, wo)


def conv3d_forward(x, weight, bias, cfg: TapConfig):
    k = cfg.kernel
    col, out_shape = im2col3d(x, k, cfg.temporal_stride, cfg.spatial_stride, cfg.padding)
    z = weight.reshape(weight.shape[0], -1) @ col + bias[:, None]
    return z.reshape(weight.shape[0], *out_shape), col


def conv3d_backward(dz, col, weight, x_shape, cfg: TapConfig, need_dx: bool = True):
    o = weight.shape[0]
    k, st, ss, pad = cfg.kernel, cfg.temporal_stride, cfg.spatial_stride, cfg.padding
    dz2 = dz.reshape(o, -1)
    dw = (dz2 @ col.T).reshape(weight.shape)
    db = dz2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    c, t, h, w = x_shape
    to, ho, wo = dz.shape[1:]
    dcol = (weight.reshape(o, -1).T @ dz2).reshape(c, k, k, k, to, ho, wo)
    dxp = np.zeros((c, t + 2 * pad, h + 2 * pad, w + 2 * pad))
    for a in range(k):
        for b in range(k):
            for e in range(k):
                dxp[:, a : a + to * st : st, b : b + ho * ss : ss, e : e + wo * ss : ss] += dcol[:, a, b, e]
    return dxp[:, pad : pad + t, pad : pad + h, pad : pad + w], dw, db


# ---------------------------------------------------------------- forward / backward

@dataclass
class TapOutput:
    f_v: np.ndarray
    f_s: np.ndarray
    probs: np.ndarray

    @property
    def level(self) -> TriggerState:
        # np.argmax returns the first maximum, so ties resolve to the lower danger level
        return TriggerState(int(np.argmax(self.probs)))


@dataclass
class ForwardCache:
    x: np.ndarray
    states: tuple[int, ...]
    cols: list
    zs: list
    acts: list
    pooled: np.ndarray
    embed: np.ndarray
    hs_pre: np.ndarray
    hs: np.ndarray
    u: np.ndarray
    hf_pre: np.ndarray
    hf: np.ndarray
    logits: np.ndarray
    output: TapOutput


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_inputs(x: np.ndarray, states, cfg: TapConfig):
    expected = (3, cfg.n_history, cfg.input_hw, cfg.input_hw)
    if x.shape != expected:
        raise TapShapeError(f"conv0 input: expected frames tensor of shape {expected}, got {x.shape}")
    if len(states) != cfg.n_history:
        raise TapShapeError(f"state_embed: expected {cfg.n_history} history states, got {len(states)}")


def head_forward(pooled: np.ndarray, embed: np.ndarray, params: dict):
    """Batched head: pooled (B, C_last) and flattened embeddings (B, N*D) -> intermediates."""
    f_v = pooled @ params["visual.weight"].T + params["visual.bias"]
    hs_pre = embed @ params["state_mlp0.weight"].T + params["state_mlp0.bias"]
    hs = np.maximum(hs_pre, 0.0)
    f_s = hs @ params["state_mlp1.weight"].T + params["state_mlp1.bias"]
    u = np.concatenate([f_v, f_s], axis=-1)
    hf_pre = u @ params["fusion0.weight"].T + params["fusion0.bias"]
    hf = np.maximum(hf_pre, 0.0)
    logits = hf @ params["fusion1.weight"].T + params["fusion1.bias"]
    return f_v, hs_pre, hs, f_s, u, hf_pre, hf, logits


def head_losses(pooled, embed, params, label: int, weight: float = 1.0) -> np.ndarray:
    logits = head_forward(pooled, embed, params)[-1]
    return -weight * log_softmax(logits)[..., label]


def embed_states(states, params) -> np.ndarray:
    return params["state_embed"][np.asarray(states, dtype=int)].reshape(-1)


def visual_forward(x: np.ndarray, model: TapModel):
    cols, zs, acts = [], [], []
    a = x
    for w, b in model.conv_layers():
        z, col = conv3d_forward(a, w, b, model.config)
        a = np.maximum(z, 0.0)
        cols.append(col)
        zs.append(z)
        acts.append(a)
    pooled = a.mean(axis=(1, 2, 3))
    return cols, zs, acts, pooled


def forward_with_cache(frames_tensor: np.ndarray, states, model: TapModel) -> ForwardCache:
    states = tuple(int(TriggerState(s)) for s in states)
    _check_inputs(frames_tensor, states, model.config)
    cols, zs, acts, pooled = visual_forward(frames_tensor, model)
    embed = embed_states(states, model.params)
    f_v, hs_pre, hs, f_s, u, hf_pre, hf, logits = head_forward(pooled, embed, model.params)
    out = TapOutput(f_v=f_v, f_s=f_s, probs=softmax(logits))
    return ForwardCache(frames_tensor, states, cols, zs, acts, pooled, embed, hs_pre, hs, u, hf_pre, hf, logits, out)


def tap_forward(frames_tensor: np.ndarray, states, model: TapModel) -> TapOutput:
    return forward_with_cache(frames_tensor, states, model).output


def class_weight(cfg: TapConfig, label: int) -> float:
    return 1.0 if cfg.class_weights is None else cfg.class_weights[label]


def tap_loss_and_grad(cache: ForwardCache, label: TriggerState, model: TapModel):
    """Cross-entropy loss of ``label`` and analytic gradients for every parameter."""
    cfg, p = model.config, model.params
    label = int(TriggerState(label))
    weight = class_weight(cfg, label)
    loss = float(-weight * log_softmax(cache.logits)[label])
    grads = {}

    dlogits = cache.output.probs.copy()
    dlogits[label] -= 1.0
    dlogits *= weight
    grads["fusion1.weight"] = np.outer(dlogits, cache.hf)
    grads["fusion1.bias"] = dlogits
    dhf_pre = (p["fusion1.weight"].T @ dlogits) * (cache.hf_pre > 0)
    grads["fusion0.weight"] = np.outer(dhf_pre, cache.u)
    grads["fusion0.bias"] = dhf_pre
    du = p["fusion0.weight"].T @ dhf_pre
    dfv, dfs = du[: cfg.fv_dim], du[cfg.fv_dim :]

    grads["state_mlp1.weight"] = np.outer(dfs, cache.hs)
    grads["state_mlp1.bias"] = dfs
    dhs_pre = (p["state_mlp1.weight"].T @ dfs) * (cache.hs_pre > 0)
    grads["state_mlp0.weight"] = np.outer(dhs_pre, cache.embed)
    grads["state_mlp0.bias"] = dhs_pre
    dembed = (p["state_mlp0.weight"].T @ dhs_pre).reshape(cfg.n_history, cfg.state_embed_dim)
    dtable = np.zeros_like(p["state_embed"])
    np.add.at(dtable, np.asarray(cache.states), dembed)
    grads["state_embed"] = dtable

    grads["visual.weight"] = np.outer(dfv, cache.pooled)
    grads["visual.bias"] = dfv
    dpooled = p["visual.weight"].T @ dfv
    last = cache.acts[-1]
    da = np.broadcast_to((dpooled / last[0].size)[:, None, None, None], last.shape)

    n_layers = len(cfg.conv_channels)
    for i in reversed(range(n_layers)):
        dz = da * (cache.zs[i] > 0)
        x_in = cache.x if i == 0 else cache.acts[i - 1]
        da, dw, db = conv3d_backward(dz, cache.cols[i], p[f"conv{i}.weight"], x_in.shape, cfg, need_dx=i > 0)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db

    return loss, {name: grads[name] for name in p}
