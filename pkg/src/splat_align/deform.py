"""Time-conditioned deformation MLP with a hand-written backward pass."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, NumericOverflowError
from .render import RenderGrads
from .scene import GaussianCloud, normalize_vjp


def positional_encoding(v, n_freqs: int):
    """``[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]``.

    Works on the last axis, so ``v`` of shape ``(..., d)`` maps to
    ``(..., d * (2 * n_freqs + 1))``.
    """
    if n_freqs < 0:
        raise InvalidParameterError("frequency count must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    parts = [v]
    for k in range(n_freqs):
        arg = (2.0 ** k) * np.pi * v
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def _encoding_vjp(v, n_freqs, grad):
    d = v.shape[-1]
    out = grad[..., :d].copy()
    for k in range(n_freqs):
        scale = (2.0 ** k) * np.pi
        arg = scale * v
        base = d * (1 + 2 * k)
        out += grad[..., base:base + d] * scale * np.cos(arg)
        out -= grad[..., base + d:base + 2 * d] * scale * np.sin(arg)
    return out


@dataclass
class DeformationField:
    """MLP mapping encoded ``(position, time)`` to per-point attribute deltas.

    Outputs are 3 position, 4 rotation and 3 log-scale deltas, plus one
    opacity-logit delta when ``deform_opacity`` is set.
    """

    weights: list
    biases: list
    pos_freqs: int = 6
    time_freqs: int = 4
    deform_opacity: bool = False

    @classmethod
    def create(cls, hidden=64, n_hidden=2, pos_freqs=6, time_freqs=4, deform_opacity=False, seed=0):
        rng = np.random.default_rng(seed)
        sizes = [3 * (2 * pos_freqs + 1) + (2 * time_freqs + 1)] + [hidden] * n_hidden \
            + [11 if deform_opacity else 10]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            weights.append(np.zeros((fan_in, fan_out)) if last
                           else rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, pos_freqs, time_freqs, deform_opacity)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def output_dim(self):
        return 11 if self.deform_opacity else 10

    def params(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def with_params(self, params: dict) -> "DeformationField":
        n = len(self.weights)
        return DeformationField([np.asarray(params[f"w{i}"]) for i in range(n)],
                                [np.asarray(params[f"b{i}"]) for i in range(n)],
                                self.pos_freqs, self.time_freqs, self.deform_opacity)

    def copy(self):
        return DeformationField([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                                self.pos_freqs, self.time_freqs, self.deform_opacity)

    def _inputs(self, positions, t):
        n = positions.shape[0]
        enc_t = positional_encoding(np.full((n, 1), float(t)), self.time_freqs)
        return np.concatenate([positional_encoding(positions, self.pos_freqs), enc_t], axis=1)

    def forward(self, positions, t):
        """Raw network output and the activations needed by :meth:`backward`."""
        h = self._inputs(positions, t)
        if h.shape[1] != self.weights[0].shape[0]:
            raise InvalidParameterError(f"network expects {self.weights[0].shape[0]} inputs, encoding gives {h.shape[1]}")
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            with np.errstate(over="ignore", invalid="ignore"):
                z = h @ w + b
            if not np.all(np.isfinite(z)):
                raise NumericOverflowError(f"non-finite output in deformation layer {i}")
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, positions, acts, grad_out):
        """Weight gradients and the gradient with respect to ``positions``."""
        g = grad_out
        gw, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        n_pos = 3 * (2 * self.pos_freqs + 1)
        return gw, gb, _encoding_vjp(positions, self.pos_freqs, g[:, :n_pos])


@dataclass
class FieldGrads:
    weights: list
    biases: list

    def as_dict(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


def _check_time(t):
    if not (np.isfinite(t) and 0.0 <= t <= 1.0):
        raise InvalidParameterError(f"normalized time must lie in [0, 1], got {t}")


def _apply(cloud, out, deform_opacity):
    raw_q = cloud.rotations + out[:, 3:7]
    unchanged = np.all(out[:, 3:7] == 0.0, axis=1, keepdims=True)
    rotations = np.where(unchanged, cloud.rotations, raw_q / np.linalg.norm(raw_q, axis=1, keepdims=True))
    logits = cloud.opacity_logits + out[:, 10] if deform_opacity else cloud.opacity_logits
    return GaussianCloud(cloud.positions + out[:, :3], rotations, cloud.log_scales + out[:, 7:10],
                         cloud.colors, logits)


def deform(cloud: GaussianCloud, t: float, field: DeformationField) -> GaussianCloud:
    """Cloud at normalized time ``t``; colors (and by default opacities) are untouched."""
    _check_time(t)
    if cloud.count == 0:
        return cloud
    out, _ = field.forward(cloud.positions, t)
    return _apply(cloud, out, field.deform_opacity)


def deform_backward(cloud: GaussianCloud, t: float, field: DeformationField, upstream: RenderGrads):
    """Pull gradients on the deformed cloud back to field weights and the base cloud."""
    _check_time(t)
    for name in RenderGrads.FIELDS:
        if getattr(upstream, name).shape != getattr(cloud, name).shape:
            raise InvalidParameterError(f"upstream gradient for {name} has shape "
                                        f"{getattr(upstream, name).shape}, cloud has {getattr(cloud, name).shape}")
    out, acts = field.forward(cloud.positions, t)
    raw_q = cloud.rotations + out[:, 3:7]
    g_raw_q = normalize_vjp(raw_q, upstream.rotations)
    grad_out = np.concatenate([upstream.positions, g_raw_q, upstream.log_scales], axis=1)
    if field.deform_opacity:
        grad_out = np.concatenate([grad_out, upstream.opacity_logits[:, None]], axis=1)
    gw, gb, g_pos = field.backward(cloud.positions, acts, grad_out)
    base = RenderGrads(upstream.positions + g_pos, g_raw_q, upstream.log_scales.copy(),
                       upstream.colors.copy(), upstream.opacity_logits.copy())
    return FieldGrads(gw, gb), base


def save_field(field: DeformationField, path) -> None:
    """Write weights as little-endian float32 behind a uint32 header.

    Header: number of layer sizes, the sizes, positional and time frequency
    counts, and the opacity flag. Then each layer's weight matrix
    (row-major, inputs by outputs) followed by its bias.
    """
    sizes = field.layer_sizes
    header = struct.pack(f"<{len(sizes) + 4}I", len(sizes), *sizes, field.pos_freqs,
                         field.time_freqs, int(field.deform_opacity))
    body = b"".join(np.asarray(a, dtype="<f4").tobytes()
                    for w, b in zip(field.weights, field.biases) for a in (w, b))
    Path(path).write_bytes(header + body)


def load_field(path) -> DeformationField:
    data = Path(path).read_bytes()
    try:
        (count,) = struct.unpack_from("<I", data, 0)
        values = struct.unpack_from(f"<{count + 3}I", data, 4)
    except struct.error as exc:
        raise InvalidParameterError(f"truncated field checkpoint {path}") from exc
    sizes, (pos_freqs, time_freqs, opacity) = values[:count], values[count:]
    offset = 4 * (count + 4)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        need = 4 * (fan_in * fan_out + fan_out)
        if offset + need > len(data):
            raise InvalidParameterError(f"truncated field checkpoint {path}")
        chunk = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out + fan_out, offset=offset)
        weights.append(chunk[:fan_in * fan_out].reshape(fan_in, fan_out).astype(np.float64))
        biases.append(chunk[fan_in * fan_out:].astype(np.float64))
        offset += need
    if offset != len(data):
        raise InvalidParameterError(f"field checkpoint {path} has {len(data) - offset} trailing bytes")
    return DeformationField(weights, biases, int(pos_freqs), int(time_freqs), bool(opacity))
