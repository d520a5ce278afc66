"""Central finite-difference check of the analytic TAP gradients.

For every scalar parameter θ the checker forms ``(L(θ+eps) - L(θ-eps)) / (2 eps)``
and compares it with the backward pass using the per-element relative error
``|a - n| / max(1e-12, |a| + |n|)``.

Two evaluators of the perturbed losses are provided:

``naive``
    re-runs the full forward pass for every perturbation. Simple, but the
    difference of two O(1) losses carries ~1e-11 of round-off, and with
    ~20k parameters it is far too slow for the default network.

``delta`` (default)
    pushes the *change* caused by a perturbation through the forward graph:
    a weight w[o, i, k] only moves pre-activation channel ``o`` by
    ``eps * input_patch``; ReLUs map a change exactly
    (``relu(z + d) - relu(z)``), and the loss change is
    ``log1p(sum p * expm1(d_logits)) - d_logits[label]``. The result is the
    same quantity L(θ±eps) - L(θ), but round-off stays relative to the
    perturbation instead of to the loss. Only forward operations are used.

Finite differences are meaningless when a perturbation moves a ReLU input
across zero, so ``smooth_sample`` draws inputs whose pre-activations all keep
a margin from the kink and the report counts any crossings that happen anyway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..domain import TriggerState
from .model import (
    TapModel,
    class_weight,
    embed_states,
    forward_with_cache,
    im2col3d,
    log_softmax,
    softmax,
    tap_loss_and_grad,
)


@dataclass
class GradCheckSample:
    frames: np.ndarray  # (3, N, H, W)
    states: tuple
    label: TriggerState


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    kink_crossings: int = 0
    numeric: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def max_relative_error(self) -> float:
        return max(self.per_param.values())


def random_sample(model: TapModel, seed: int) -> GradCheckSample:
    """Uniform-noise frames with random states and label."""
    cfg = model.config
    rng = np.random.default_rng([seed, 2])
    frames = rng.uniform(0.0, 1.0, size=(3, cfg.n_history, cfg.input_hw, cfg.input_hw))
    states = tuple(TriggerState(int(s)) for s in rng.integers(0, 3, size=cfg.n_history))
    return GradCheckSample(frames, states, TriggerState(int(rng.integers(0, 3))))


def preactivation_margin(model: TapModel, sample: GradCheckSample) -> float:
    cache = forward_with_cache(sample.frames, sample.states, model)
    parts = [np.abs(z).min() for z in cache.zs] + [np.abs(cache.hs_pre).min(), np.abs(cache.hf_pre).min()]
    return float(min(parts))


def smooth_sample(model: TapModel, seed: int, margin: float = 1e-4, max_draws: int = 1000) -> GradCheckSample:
    """A sample whose ReLU inputs all sit at least ``margin`` away from zero.

    Frames are flat colours (one random colour per time step), which keeps the
    number of distinct pre-activation values small enough for a margin to
    exist. Draws are deterministic in ``seed``.
    """
    cfg = model.config
    for draw in range(max_draws):
        rng = np.random.default_rng([seed, 3, draw])
        colours = rng.uniform(0.0, 1.0, size=(3, cfg.n_history))
        frames = np.broadcast_to(colours[:, :, None, None], (3, cfg.n_history, cfg.input_hw, cfg.input_hw)).copy()
        states = tuple(TriggerState(int(s)) for s in rng.integers(0, 3, size=cfg.n_history))
        sample = GradCheckSample(frames, states, TriggerState(int(rng.integers(0, 3))))
        if preactivation_margin(model, sample) >= margin:
            return sample
    raise RuntimeError(f"no sample with pre-activation margin {margin} after {max_draws} draws")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))


# ---------------------------------------------------------------- naive evaluator

def sample_loss(model: TapModel, sample: GradCheckSample) -> float:
    cache = forward_with_cache(sample.frames, sample.states, model)
    w = class_weight(model.config, int(sample.label))
    return float(-w * log_softmax(cache.logits)[int(sample.label)])


def numeric_grads_naive(model: TapModel, sample: GradCheckSample, eps: float = 1e-5) -> dict[str, np.ndarray]:
    work = model.copy()
    out = {}
    for name, param in work.params.items():
        grad = np.zeros_like(param)
        flat, gflat = param.reshape(-1), grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            plus = sample_loss(work, sample)
            flat[j] = orig - eps
            minus = sample_loss(work, sample)
            flat[j] = orig
            gflat[j] = (plus - minus) / (2 * eps)
        out[name] = grad
    return out


# ---------------------------------------------------------------- delta evaluator

class _DeltaForward:
    """Forward-mode propagation of batched perturbations (leading axis = variant)."""

    def __init__(self, model: TapModel, sample: GradCheckSample):
        self.model = model
        self.p = model.params
        self.cfg = model.config
        self.cache = forward_with_cache(sample.frames, sample.states, model)
        self.label = int(sample.label)
        self.weight = class_weight(self.cfg, self.label)
        self.probs = softmax(self.cache.logits)
        self.crossings = 0

    def relu_delta(self, z: np.ndarray, dz: np.ndarray) -> np.ndarray:
        new = z + dz
        both_on = (z > 0) & (new > 0)
        self.crossings += int(np.count_nonzero((z > 0) != (new > 0)))
        return np.where(both_on, dz, np.maximum(new, 0.0) - np.maximum(z, 0.0))

    def conv_delta(self, layer: int, d_act: np.ndarray, channel: int | None = None) -> np.ndarray:
        """Pre-activation change of ``layer`` for input changes ``d_act`` (V, C, T, H, W)."""
        cfg = self.cfg
        w = self.p[f"conv{layer}.weight"]
        col, _ = im2col3d(d_act, cfg.kernel, cfg.temporal_stride, cfg.spatial_stride, cfg.padding)
        if channel is not None:
            w = w[:, channel : channel + 1]
        return w.reshape(w.shape[0], -1) @ col

    def from_conv(self, layer: int, channel: int, dz: np.ndarray) -> np.ndarray:
        """Loss changes for pre-activation changes ``dz`` (V, P) of one channel."""
        c = self.cache
        n_layers = len(self.cfg.conv_channels)
        n_var = dz.shape[0]
        da = self.relu_delta(c.zs[layer][channel].reshape(-1), dz)
        if layer == n_layers - 1:
            d_pooled = np.zeros((n_var, c.pooled.size))
            d_pooled[:, channel] = da.mean(axis=1)
            return self.head(d_pooled=d_pooled)
        spatial = c.zs[layer].shape[1:]
        dz_next = self.conv_delta(layer + 1, da.reshape(n_var, 1, *spatial), channel=channel)
        for deeper in range(layer + 1, n_layers):
            z = c.zs[deeper].reshape(c.zs[deeper].shape[0], -1)
            da = self.relu_delta(z, dz_next)
            if deeper == n_layers - 1:
                break
            dz_next = self.conv_delta(deeper + 1, da.reshape(n_var, *c.zs[deeper].shape))
        return self.head(d_pooled=da.mean(axis=2))

    def head(self, d_pooled=None, d_embed=None, d_fv=None, d_hs_pre=None, d_fs=None, d_hf_pre=None, d_logits=None):
        """Loss change given changes injected at any stage of the head (each (V, dim) or None)."""
        c, p = self.cache, self.p
        cfg = self.cfg
        sizes = [a.shape[0] for a in (d_pooled, d_embed, d_fv, d_hs_pre, d_fs, d_hf_pre, d_logits) if a is not None]
        n_var = sizes[0]

        def add(acc, extra):
            if extra is None:
                return acc
            return extra if acc is None else acc + extra

        dfv = d_pooled @ p["visual.weight"].T if d_pooled is not None else None
        dfv = add(dfv, d_fv)
        dhs_pre = d_embed @ p["state_mlp0.weight"].T if d_embed is not None else None
        dhs_pre = add(dhs_pre, d_hs_pre)
        dfs = None
        if dhs_pre is not None:
            dhs = self.relu_delta(c.hs_pre, dhs_pre)
            dfs = dhs @ p["state_mlp1.weight"].T
        dfs = add(dfs, d_fs)
        dhf_pre = None
        if dfv is not None or dfs is not None:
            du = np.zeros((n_var, cfg.fv_dim + cfg.fs_dim))
            if dfv is not None:
                du[:, : cfg.fv_dim] = dfv
            if dfs is not None:
                du[:, cfg.fv_dim :] = dfs
            dhf_pre = du @ p["fusion0.weight"].T
        dhf_pre = add(dhf_pre, d_hf_pre)
        dlogits = None
        if dhf_pre is not None:
            dhf = self.relu_delta(c.hf_pre, dhf_pre)
            dlogits = dhf @ p["fusion1.weight"].T
        dlogits = add(dlogits, d_logits)
        # change of logsumexp, computed relative to the perturbation size
        d_lse = np.log1p(np.expm1(dlogits) @ self.probs)
        return self.weight * (d_lse - dlogits[:, self.label])


def _linear_variants(eps_sign: float, eps: float, out_dim: int, inputs: np.ndarray, with_bias: bool):
    """Injected output changes for perturbing each entry of W (out, in) and of b."""
    in_dim = inputs.size
    eye = np.eye(out_dim)
    dw = (eps_sign * eps) * (eye[:, None, :] * inputs[None, :, None])  # (out, in, out)
    rows = dw.reshape(out_dim * in_dim, out_dim)
    db = (eps_sign * eps) * eye if with_bias else None
    return rows, db


def numeric_grads_delta(model: TapModel, sample: GradCheckSample, eps: float = 1e-5):
    fwd = _DeltaForward(model, sample)
    c, p, cfg = fwd.cache, fwd.p, fwd.cfg
    out: dict[str, np.ndarray] = {}

    def central(fn):
        return (fn(+1.0) - fn(-1.0)) / (2 * eps)

    # conv layers: one pre-activation channel moves by eps * patch row (or eps for the bias)
    for layer in range(len(cfg.conv_channels)):
        w = p[f"conv{layer}.weight"]
        col = c.cols[layer]
        rows = np.vstack([col, np.ones((1, col.shape[1]))])
        gw = np.zeros((w.shape[0], col.shape[0]))
        gb = np.zeros(w.shape[0])
        for o in range(w.shape[0]):
            g = central(lambda s: fwd.from_conv(layer, o, (s * eps) * rows))
            gw[o], gb[o] = g[:-1], g[-1]
        out[f"conv{layer}.weight"] = gw.reshape(w.shape)
        out[f"conv{layer}.bias"] = gb

    def linear(name, inputs, stage):
        out_dim = p[f"{name}.weight"].shape[0]

        def run(sign, part):
            rows, db = _linear_variants(sign, eps, out_dim, inputs, with_bias=True)
            return fwd.head(**{stage: rows if part == "w" else db})

        out[f"{name}.weight"] = central(lambda s: run(s, "w")).reshape(p[f"{name}.weight"].shape)
        out[f"{name}.bias"] = central(lambda s: run(s, "b"))

    linear("visual", c.pooled, "d_fv")

    table = p["state_embed"]
    n_states, dim = table.shape

    def embed_run(sign):
        d_embed = np.zeros((n_states * dim, cfg.n_history * dim))
        for s in range(n_states):
            for d in range(dim):
                for k, st in enumerate(c.states):
                    if st == s:
                        d_embed[s * dim + d, k * dim + d] = sign * eps
        return fwd.head(d_embed=d_embed)

    out["state_embed"] = central(embed_run).reshape(table.shape)
    linear("state_mlp0", c.embed, "d_hs_pre")
    linear("state_mlp1", c.hs, "d_fs")
    linear("fusion0", c.u, "d_hf_pre")
    linear("fusion1", c.hf, "d_logits")
    return {name: out[name] for name in p}, fwd.crossings


def grad_check_report(model, sample, eps=1e-5, analytic=None, method="delta") -> GradCheckReport:
    if analytic is None:
        cache = forward_with_cache(sample.frames, sample.states, model)
        _, analytic = tap_loss_and_grad(cache, sample.label, model)
    crossings = 0
    if method == "delta":
        numeric, crossings = numeric_grads_delta(model, sample, eps)
    elif method == "naive":
        numeric = numeric_grads_naive(model, sample, eps)
    else:
        raise ValueError(f"unknown grad-check method {method!r}")
    per_param = {name: float(relative_error(analytic[name], numeric[name]).max()) for name in model.params}
    return GradCheckReport(per_param, crossings, numeric)


def grad_check(model: TapModel, sample: GradCheckSample, eps: float = 1e-5, analytic=None, method: str = "delta") -> float:
    """Max over all parameters of |a - n| / max(1e-12, |a| + |n|)."""
    return grad_check_report(model, sample, eps, analytic, method).max_relative_error
