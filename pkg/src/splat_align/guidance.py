"""Score distillation: noising, SDS gradients, refinement losses and oracles.

Latents are pixels (identity encoder). Oracle predictions are treated as
constants when forming gradients, so every gradient returned here is a
per-pixel image to be fed into ``render_backward`` as upstream.
"""
from __future__ import annotations

import base64
import io
import json
import threading
import time
import urllib.error
import urllib.request

import numpy as np

from .errors import InvalidParameterError, OracleUnavailableError
from .losses import FeatureStack, texture_alignment
from .scene import DiffusionSchedule, ImageBuffer

KINDS = ("image", "video", "multiview")


def _pixels(x):
    return x.rgb if isinstance(x, ImageBuffer) else np.asarray(x, dtype=np.float64)


def _stack(images):
    return np.stack([_pixels(x) for x in images])


class DenoiserOracle:
    """Noise predictor ``eps_hat(z, condition, tau)``.

    ``z`` has shape ``(..., H, W, 3)``; the prediction has the same shape.
    Video oracles receive all frames of a clip at once and multiview oracles
    all views, stacked on the leading axis.
    """

    kind = "image"

    def predict(self, z, condition, tau):
        raise NotImplementedError


class MockTargetOracle(DenoiserOracle):
    """The perfect denoiser for a known clean image ``target``.

    ``eps_hat = (z - alpha_tau * target) / sigma_tau``. ``target`` broadcasts
    against ``z``, so a stacked target gives one clean image per frame/view.
    """

    def __init__(self, target, schedule: DiffusionSchedule | None = None, kind: str = "image"):
        if kind not in KINDS:
            raise InvalidParameterError(f"unknown oracle kind {kind!r}")
        self.target = _stack(target) if isinstance(target, (list, tuple)) else _pixels(target)
        self.schedule = schedule or DiffusionSchedule()
        self.kind = kind

    def predict(self, z, condition, tau):
        sigma = self.schedule.sigma(tau)
        if sigma == 0.0:
            raise InvalidParameterError("the mock oracle is undefined at zero noise level")
        return (np.asarray(z) - self.schedule.alpha(tau) * self.target) / sigma


def add_noise(x, tau, eps, schedule: DiffusionSchedule):
    """``alpha_tau * x + sigma_tau * eps``."""
    x = _pixels(x)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x.shape:
        raise InvalidParameterError(f"noise shape {eps.shape} does not match image shape {x.shape}")
    return schedule.alpha(tau) * x + schedule.sigma(tau) * eps


def _check_tau(tau, schedule):
    if not 1 <= tau <= schedule.t_max:
        raise InvalidParameterError(f"diffusion timestep {tau} outside [1, {schedule.t_max}]")


def _predict(oracle, z, condition, tau):
    try:
        out = oracle.predict(z, condition, tau)
    except (OracleUnavailableError, InvalidParameterError):
        raise
    except Exception as exc:
        raise OracleUnavailableError(f"{oracle.kind} oracle failed: {exc}", kind=oracle.kind) from exc
    out = np.asarray(out, dtype=np.float64)
    if out.shape != z.shape:
        raise OracleUnavailableError(f"{oracle.kind} oracle returned shape {out.shape}, expected {z.shape}",
                                     kind=oracle.kind)
    if not np.all(np.isfinite(out)):
        raise OracleUnavailableError(f"{oracle.kind} oracle returned non-finite values", kind=oracle.kind)
    return out


def sds_gradient(x, oracle: DenoiserOracle, condition, tau, eps, schedule: DiffusionSchedule):
    """``w(tau) * (eps_hat(z, condition, tau) - eps)`` with ``z = add_noise(x, tau, eps)``."""
    _check_tau(tau, schedule)
    z = add_noise(x, tau, eps, schedule)
    return schedule.weight(tau) * (_predict(oracle, z, condition, tau) - np.asarray(eps, dtype=np.float64))


def combined_sds(x, oracles, tau, eps, schedule: DiffusionSchedule):
    """Sum of SDS gradients from several ``(oracle, condition)`` pairs.

    With a single noise array every oracle sees the same noisy latent.
    Passing a list of noise arrays (one per oracle) draws independent
    latents instead.
    """
    oracles = list(oracles)
    if not oracles:
        raise InvalidParameterError("combined_sds needs at least one oracle")
    if isinstance(eps, (list, tuple)):
        if len(eps) != len(oracles):
            raise InvalidParameterError(f"{len(eps)} noise arrays for {len(oracles)} oracles")
        return sum(sds_gradient(x, o, c, tau, e, schedule) for (o, c), e in zip(oracles, eps))
    _check_tau(tau, schedule)
    eps = np.asarray(eps, dtype=np.float64)
    z = add_noise(x, tau, eps, schedule)
    total = sum(_predict(o, z, c, tau) for o, c in oracles)
    return schedule.weight(tau) * (total - len(oracles) * eps)


def _refine(renders, oracle, kind, condition, tau, eps, schedule):
    if oracle.kind != kind:
        raise InvalidParameterError(f"expected a {kind} oracle, got {oracle.kind}")
    _check_tau(tau, schedule)
    x = _stack(renders)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), x.shape)
    z = add_noise(x, tau, eps, schedule)
    resid = _predict(oracle, z, condition, tau) - eps
    n = x.shape[0]
    w = schedule.weight(tau)
    value = w * float(np.sum(resid * resid)) / n
    return value, w * resid / n


def time_refine_loss(front_renders, oracle: DenoiserOracle, condition, tau, eps, schedule: DiffusionSchedule):
    """Noise-residual loss of a video oracle over all frames at one view.

    Returns the scalar and per-frame gradient images, stacked.
    """
    return _refine(front_renders, oracle, "video", condition, tau, eps, schedule)


def mv_refine_loss(view_renders, oracle: DenoiserOracle, anchor, tau, eps, schedule: DiffusionSchedule):
    """Noise-residual loss of a multiview oracle over several views at one time."""
    return _refine(view_renders, oracle, "multiview", anchor, tau, eps, schedule)


def distill_image(x0, oracles, schedule: DiffusionSchedule, *, steps=300, lr=0.01, seed=0,
                  anchor: ImageBuffer | None = None, anchor_weight=1.0, lam=0.1, stack=None):
    """Plain gradient descent on an image under combined SDS guidance.

    When ``anchor`` is given, the texture-alignment gradient toward it is
    added, scaled by ``anchor_weight`` times the pixel count so that it is
    on the same per-pixel footing as the SDS residual.
    """
    rng = np.random.default_rng(seed)
    x = _pixels(x0).copy()
    scale = anchor_weight * x.size
    stack = stack if (stack is not None or anchor is None) else FeatureStack()
    for _ in range(steps):
        tau = schedule.sample_tau(rng)
        eps = rng.standard_normal(x.shape)
        grad = combined_sds(x, oracles, tau, eps, schedule)
        if anchor is not None:
            ta = texture_alignment(ImageBuffer(x, anchor.alpha), anchor, lam, stack)
            grad = grad + scale * ta.rgb_grad
        x -= lr * grad
    return x


def _encode_array(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _decode_array(s, shape):
    raw = base64.b64decode(s)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"shape mismatch: payload has {len(raw)} bytes, expected {expected} for {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def _encode_png(image: ImageBuffer):
    from PIL import Image

    rgba = np.concatenate([image.rgb, image.alpha[..., None]], axis=2)
    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(rgba, 0, 1) * 255).astype(np.uint8), "RGBA").save(buf, "PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class RemoteOracle(DenoiserOracle):
    """Client for an HTTP denoiser speaking the ``/v1/denoise`` JSON protocol."""

    def __init__(self, endpoint, kind="image", *, timeout=120.0, retries=2, max_in_flight=4,
                 guidance_scale=None, backoff=0.05):
        if kind not in KINDS:
            raise InvalidParameterError(f"unknown oracle kind {kind!r}")
        self.endpoint = endpoint.rstrip("/")
        self.kind = kind
        self.timeout = timeout
        self.retries = retries
        self.guidance_scale = guidance_scale
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)

    @property
    def url(self):
        return self.endpoint if self.endpoint.endswith("/v1/denoise") else self.endpoint + "/v1/denoise"

    def payload(self, z, condition, tau):
        z = np.asarray(z, dtype=np.float64)
        batch = z.reshape((-1,) + z.shape[-3:])
        h, w = batch.shape[1:3]
        return {
            "kind": self.kind,
            "tau": int(tau),
            "condition_text": condition if isinstance(condition, str) else None,
            "condition_image": _encode_png(condition) if isinstance(condition, ImageBuffer) else None,
            "images": [_encode_array(img) for img in batch],
            "height": int(h),
            "width": int(w),
            "guidance_scale": self.guidance_scale,
        }

    def _fail(self, message, status=None):
        return OracleUnavailableError(f"{self.kind} oracle at {self.url}: {message}", kind=self.kind,
                                      endpoint=self.url, status=status)

    def predict(self, z, condition, tau):
        z = np.asarray(z, dtype=np.float64)
        body = json.dumps(self.payload(z, condition, tau)).encode("utf-8")
        status, last = None, None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * attempt)
            req = urllib.request.Request(self.url, data=body, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    status, raw = resp.status, resp.read()
            except urllib.error.HTTPError as exc:
                status, last = exc.code, exc
                if exc.code < 500:
                    break
                continue
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                status, last = None, exc
                continue
            return self._decode(raw, z.shape)
        raise self._fail(f"request failed after {attempt + 1} attempts (status {status}): {last}", status)

    def _decode(self, raw, shape):
        try:
            reply = json.loads(raw)
            items = reply["eps_hat"]
        except (ValueError, KeyError, TypeError) as exc:
            raise self._fail(f"malformed payload: {exc}", 200) from exc
        frame_shape = shape[-3:]
        count = int(np.prod(shape[:-3], dtype=np.int64))
        if not isinstance(items, list) or len(items) != count:
            raise self._fail(f"shape mismatch: expected {count} images in eps_hat", 200)
        try:
            arrays = [_decode_array(s, frame_shape) for s in items]
        except (ValueError, TypeError) as exc:
            raise self._fail(str(exc), 200) from exc
        return np.stack(arrays).reshape(shape)


def remote_oracle(endpoint, kind="image", **kwargs) -> RemoteOracle:
    return RemoteOracle(endpoint, kind, **kwargs)
