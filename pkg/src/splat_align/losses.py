"""Pixel-space alignment objectives with gradients for ``render_backward``.

Every loss returns a :class:`LossValue`. Single-image losses carry gradients
shaped like the image; list-valued losses stack per-view (or per-frame)
gradients along a leading axis in input order. Squared errors are averaged
over pixels rather than summed so that weights do not depend on resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .scene import ImageBuffer, VideoClip

NORM_EPS = 1e-10


@dataclass
class LossValue:
    value: float
    rgb_grad: np.ndarray
    alpha_grad: np.ndarray
    terms: dict = field(default_factory=dict)


def _same_shape(a: ImageBuffer, b: ImageBuffer):
    if a.shape != b.shape:
        raise InvalidParameterError(f"image sizes differ: {a.shape} vs {b.shape}")


def mse_loss(a: ImageBuffer, b: ImageBuffer) -> LossValue:
    _same_shape(a, b)
    diff = a.rgb - b.rgb
    return LossValue(float(np.mean(diff * diff)), 2.0 * diff / diff.size, np.zeros(a.shape))


def mask_loss(a: ImageBuffer, b: ImageBuffer) -> LossValue:
    _same_shape(a, b)
    diff = a.alpha - b.alpha
    return LossValue(float(np.mean(diff * diff)), np.zeros(a.rgb.shape), 2.0 * diff / diff.size)


class FeatureStack:
    """Frozen random convolution stack standing in for a perceptual encoder.

    Each layer is a 3x3, stride-2, zero-padded convolution followed by tanh.
    Filters and biases are drawn once from ``seed``.
    """

    def __init__(self, seed: int = 0, channels=(8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.channels = tuple(channels)
        self.filters, self.biases = [], []
        c_in = 3
        for c_out in self.channels:
            self.filters.append(rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), (c_out, c_in, 3, 3)))
            self.biases.append(rng.normal(0.0, 0.1, c_out))
            c_in = c_out
        for arr in self.filters + self.biases:
            arr.setflags(write=False)

    @property
    def min_size(self) -> int:
        return 2 ** len(self.channels)

    def check(self, height, width):
        if height < self.min_size or width < self.min_size:
            raise InvalidParameterError(f"image {height}x{width} is smaller than the feature stack's "
                                        f"{self.min_size}x{self.min_size} receptive field")

    def features(self, rgb):
        """Per-layer activations ``(C_l, H_l, W_l)`` and the inputs that produced them."""
        x = np.transpose(np.asarray(rgb, dtype=np.float64), (2, 0, 1))
        inputs, outs = [], []
        for w, b in zip(self.filters, self.biases):
            inputs.append(x)
            x = np.tanh(_conv_s2(x, w) + b[:, None, None])
            outs.append(x)
        return outs, inputs

    def backward(self, inputs, outs, grads):
        """Gradient wrt the input image, given gradients wrt each layer's output."""
        g = np.zeros_like(outs[-1])
        for i in range(len(self.filters) - 1, -1, -1):
            g = (g + grads[i]) * (1.0 - outs[i] ** 2)
            g = _conv_s2_input_grad(g, self.filters[i], inputs[i].shape)
        return np.transpose(g, (1, 2, 0))


def _conv_s2(x, w):
    c, h, wd = x.shape
    ho, wo = (h + 1) // 2, (wd + 1) // 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], ho, wo))
    for ki in range(3):
        for kj in range(3):
            out += np.einsum("oc,chw->ohw", w[:, :, ki, kj], xp[:, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2])
    return out


def _conv_s2_input_grad(g, w, in_shape):
    c, h, wd = in_shape
    ho, wo = g.shape[1:]
    gp = np.zeros((c, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            gp[:, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2] += np.einsum("oc,ohw->chw", w[:, :, ki, kj], g)
    return gp[:, 1:-1, 1:-1]


def _unit(z):
    norm = np.sqrt(np.sum(z * z, axis=0, keepdims=True))
    return z / (norm + NORM_EPS), norm


def _unit_vjp(z, norm, g):
    denom = norm + NORM_EPS
    dot = np.sum(z * g, axis=0, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return g / denom - np.where(norm > 0, z * dot / (safe * denom * denom), 0.0)


def perceptual_loss(a: ImageBuffer, b: ImageBuffer, stack: FeatureStack) -> LossValue:
    """Sum over layers of the spatial mean of squared unit-feature differences."""
    _same_shape(a, b)
    stack.check(*a.shape)
    outs_a, inputs_a = stack.features(a.rgb)
    outs_b, _ = stack.features(b.rgb)
    value = 0.0
    grads = []
    for za, zb in zip(outs_a, outs_b):
        ua, norm_a = _unit(za)
        ub, _ = _unit(zb)
        diff = ua - ub
        npix = za.shape[1] * za.shape[2]
        value += float(np.sum(diff * diff)) / npix
        grads.append(_unit_vjp(za, norm_a, 2.0 * diff / npix))
    return LossValue(value, stack.backward(inputs_a, outs_a, grads), np.zeros(a.shape))


def texture_alignment(x: ImageBuffer, anchor: ImageBuffer, lam: float = 0.1, stack: FeatureStack | None = None,
                      mse_weight: float = 1.0, mask_weight: float = 1.0) -> LossValue:
    """Color MSE + alpha-mask MSE + ``lam`` times the perceptual term."""
    _same_shape(x, anchor)
    mse = mse_loss(x, anchor)
    mask = mask_loss(x, anchor)
    if lam:
        per = perceptual_loss(x, anchor, stack if stack is not None else FeatureStack())
    else:
        per = LossValue(0.0, np.zeros(x.rgb.shape), np.zeros(x.shape))
    value = mse_weight * mse.value + mask_weight * mask.value + lam * per.value
    return LossValue(
        value,
        mse_weight * mse.rgb_grad + lam * per.rgb_grad,
        mask_weight * mask.alpha_grad,
        {"mse": mse.value, "mask": mask.value, "lpips": per.value},
    )


def geometry_alignment(gauss_renders, mesh_renders, lam: float = 0.1, stack: FeatureStack | None = None,
                       mse_weight: float = 1.0, mask_weight: float = 1.0) -> LossValue:
    """Texture alignment summed over paired views; gradients stacked per view."""
    gauss_renders, mesh_renders = list(gauss_renders), list(mesh_renders)
    if len(gauss_renders) != len(mesh_renders):
        raise InvalidParameterError(f"{len(gauss_renders)} Gaussian renders vs {len(mesh_renders)} mesh renders")
    if not gauss_renders:
        raise InvalidParameterError("geometry alignment needs at least one view")
    stack = stack if stack is not None else FeatureStack()
    parts = [texture_alignment(g, m, lam, stack, mse_weight, mask_weight)
             for g, m in zip(gauss_renders, mesh_renders)]
    terms = {k: sum(p.terms[k] for p in parts) for k in ("mse", "mask", "lpips")}
    return LossValue(sum(p.value for p in parts), np.stack([p.rgb_grad for p in parts]),
                     np.stack([p.alpha_grad for p in parts]), terms)


def motion_alignment(front_renders, video: VideoClip) -> LossValue:
    """Mean over frames of the front-view color MSE."""
    front_renders = list(front_renders)
    if len(front_renders) != len(video):
        raise InvalidParameterError(f"{len(front_renders)} renders for a {len(video)}-frame clip")
    parts = [mse_loss(x, frame) for x, frame in zip(front_renders, video.frames)]
    n = len(parts)
    return LossValue(sum(p.value for p in parts) / n, np.stack([p.rgb_grad / n for p in parts]),
                     np.zeros((n,) + video.shape), {"per_frame": [p.value for p in parts]})
