"""Density, deformation and color networks with annealed positional encoding."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, InvalidInputError


@dataclass
class EncodingConfig:
    pos_freqs: int = 10
    dir_freqs: int = 4
    alpha: float = None

    def __post_init__(self):
        if self.pos_freqs < 0 or self.dir_freqs < 0:
            raise InvalidInputError("frequency counts must be >= 0")
        if self.alpha is None:
            self.alpha = float(self.pos_freqs)
        if not 0.0 <= self.alpha <= max(self.pos_freqs, 0):
            raise InvalidInputError(f"alpha must lie in [0, {self.pos_freqs}], got {self.alpha}")

    def with_alpha(self, alpha):
        return EncodingConfig(self.pos_freqs, self.dir_freqs, float(alpha))


def anneal_weights(alpha, count):
    """w_k = (1 - cos(pi * clamp(alpha - k, 0, 1))) / 2 for k < count."""
    k = np.arange(count, dtype=np.float64)
    return (1.0 - np.cos(math.pi * np.clip(alpha - k, 0.0, 1.0))) / 2.0


def positional_encoding(x, freqs, alpha=None):
    """[x, w_k sin(2^k pi x), w_k cos(2^k pi x)] for k < freqs, on the last axis.

    Band k's sin/cos pair sits at columns 3 + 6k .. 3 + 6k + 5.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != 3:
        raise DimensionError(f"expected (..., 3) points, got {x.shape}")
    if freqs == 0:
        return x
    alpha = float(freqs) if alpha is None else alpha
    weights = anneal_weights(alpha, freqs)
    scales = (2.0 ** np.arange(freqs)) * math.pi
    lead = x.shape[:-1]
    arg = ad.reshape(x, lead + (1, 3)) * scales.reshape(freqs, 1)
    w = weights.reshape(freqs, 1)
    bands = ad.concatenate([ad.sin(arg) * w, ad.cos(arg) * w], axis=-1)
    return ad.concatenate([x, ad.reshape(bands, lead + (6 * freqs,))], axis=-1)


def encoded_width(freqs):
    return 3 + 6 * freqs


@dataclass
class FieldConfig:
    width: int = 128
    feature_width: int = 128
    blocks: int = 4
    deform_layers: int = 3
    color_layers: int = 4
    pos_freqs: int = 10
    dir_freqs: int = 4


class FieldParams:
    """Named parameter tensors of the three networks."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def group(self, prefix):
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def load_arrays(self, arrays):
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise InvalidInputError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in self.tensors.items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64, copy=True)

    def copy(self):
        return FieldParams(self.config, {k: ad.parameter(v.data, k) for k, v in self.tensors.items()})


def _dense(rng, fan_in, fan_out, zero=False):
    if zero:
        return np.zeros((fan_in, fan_out)), np.zeros(fan_out)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)


def init_fields(config, seed=0):
    """He-uniform weights from a seeded generator.

    Rows of the first layers that read encoded frequency bands start at zero
    so that unlocking a band during annealing leaves the function unchanged;
    the last deformation layer is zero so training starts undeformed.
    """
    rng = np.random.default_rng(seed)
    w, f = config.width, config.feature_width
    tensors = {}

    def put(name, fan_in, fan_out, zero=False, raw_rows=None):
        weight, bias = _dense(rng, fan_in, fan_out, zero)
        if raw_rows is not None:
            weight[raw_rows:] = 0.0
        tensors[f"{name}.w"] = ad.parameter(weight, f"{name}.w")
        tensors[f"{name}.b"] = ad.parameter(bias, f"{name}.b")

    pos_in = encoded_width(config.pos_freqs)
    put("density.in", pos_in, w, raw_rows=3)
    for i in range(config.blocks):
        put(f"density.block{i}.fc0", w, w)
        put(f"density.block{i}.fc1", w, w)
    put("density.logit", w, 1)
    put("density.feature", w, f)
    widths = [pos_in] + [w] * (config.deform_layers - 1) + [4]
    for i in range(config.deform_layers):
        last = i == config.deform_layers - 1
        put(f"deform.fc{i}", widths[i], widths[i + 1], zero=last, raw_rows=3 if i == 0 else None)
    widths = [f + encoded_width(config.dir_freqs)] + [w] * (config.color_layers - 1) + [3]
    for i in range(config.color_layers):
        put(f"color.fc{i}", widths[i], widths[i + 1])
    return FieldParams(config, tensors)


def _linear(params, name, x):
    return ad.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def density_eval(params, x, encoding):
    """(sigma_1 in (0, 1), feature) for points ``x`` of shape (N, 3)."""
    h = _linear(params, "density.in", positional_encoding(x, encoding.pos_freqs, encoding.alpha))
    for i in range(params.config.blocks):
        dx = _linear(params, f"density.block{i}.fc0", ad.relu(h))
        h = h + _linear(params, f"density.block{i}.fc1", ad.relu(dx))
    act = ad.relu(h)
    sigma = ad.sigmoid(_linear(params, "density.logit", act))
    feature = _linear(params, "density.feature", act)
    return ad.reshape(sigma, sigma.shape[:-1]), feature


def deform_eval(params, x, encoding):
    """Offset o (N, 3) and correction c1 (N,)."""
    h = positional_encoding(x, encoding.pos_freqs, encoding.alpha)
    n = params.config.deform_layers
    for i in range(n):
        h = _linear(params, f"deform.fc{i}", h)
        if i < n - 1:
            h = ad.relu(h)
    return h[:, :3], h[:, 3]


def deformed_density(params, x, encoding, mode="learned"):
    """sigma_2 = clamp(D(x + o) + c1, 0, 1) together with (feature, o, c1).

    ``mode="zero"`` wires the deformation to constant zeros; ``"off"`` skips
    it and returns the template density unchanged.
    """
    x = ad.as_tensor(x)
    if mode == "off":
        sigma, feature = density_eval(params, x, encoding)
        return sigma, feature, None, None
    if mode == "zero":
        offset, corr = ad.Tensor(np.zeros(x.shape)), ad.Tensor(np.zeros(x.shape[0]))
    elif mode == "learned":
        offset, corr = deform_eval(params, x, encoding)
    else:
        raise InvalidInputError(f"unknown deformation mode {mode!r}")
    sigma, feature = density_eval(params, x + offset, encoding)
    return ad.clip(sigma + corr, 0.0, 1.0), feature, offset, corr


def color_eval(params, feature, directions, encoding):
    """RGB in (0, 1) from density features and unit view directions."""
    h = ad.concatenate([feature, positional_encoding(directions, encoding.dir_freqs)], axis=-1)
    n = params.config.color_layers
    for i in range(n):
        h = _linear(params, f"color.fc{i}", h)
        if i < n - 1:
            h = ad.relu(h)
    return ad.sigmoid(h)
