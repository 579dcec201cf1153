import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat_align import (DiffusionSchedule, ImageBuffer, InvalidParameterError, MockTargetOracle,
                         OracleUnavailableError, remote_oracle)
from splat_align.guidance import (DenoiserOracle, add_noise, combined_sds, distill_image, mv_refine_loss,
                                  sds_gradient, time_refine_loss)

S = DiffusionSchedule()


def closed_form(x, target, tau, schedule=S):
    return schedule.weight(tau) * schedule.alpha(tau) / schedule.sigma(tau) * (x - target)


def rand(rng, shape=(6, 5, 3)):
    return rng.uniform(0, 1, shape)


def test_add_noise_cases():
    rng = np.random.default_rng(0)
    x = rand(rng)
    np.testing.assert_array_equal(add_noise(x, 300, np.zeros_like(x), S), S.alpha(300) * x)
    np.testing.assert_array_equal(add_noise(x, 0, rng.normal(size=x.shape), S), x)
    with pytest.raises(InvalidParameterError):
        add_noise(x, 10, np.zeros((2, 2, 3)), S)


def test_add_noise_moments_monte_carlo():
    rng = np.random.default_rng(1)
    x = rand(rng, (2, 2, 3))
    tau = 400
    z = np.stack([add_noise(x, tau, rng.standard_normal(x.shape), S) for _ in range(10_000)])
    se_mean = S.sigma(tau) / np.sqrt(len(z))
    assert np.all(np.abs(z.mean(axis=0) - S.alpha(tau) * x) <= 3 * se_mean + 1e-12)
    var = z.var(axis=0)
    se_var = S.sigma(tau) ** 2 * np.sqrt(2.0 / (len(z) - 1))
    assert np.all(np.abs(var - S.sigma(tau) ** 2) <= 4 * se_var)


def test_sds_zero_at_target():
    rng = np.random.default_rng(2)
    x = rand(rng)
    g = sds_gradient(x, MockTargetOracle(x, S), "", 500, rng.normal(size=x.shape), S)
    assert np.abs(g).max() <= 1e-12


def test_sds_closed_form_and_epsilon_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, target = rand(rng), rand(rng)
        tau = int(rng.integers(20, 981))
        oracle = MockTargetOracle(target, S)
        g1 = sds_gradient(ImageBuffer.from_rgb(x), oracle, "cat", tau, rng.normal(size=x.shape), S)
        g2 = sds_gradient(x, oracle, "cat", tau, rng.normal(size=x.shape), S)
        assert np.abs(g1 - closed_form(x, target, tau)).max() <= 1e-6
        assert np.abs(g1 - g2).max() <= 1e-9


def test_sds_zero_weight():
    rng = np.random.default_rng(4)
    weights = np.ones(1001)
    weights[250] = 0.0
    sched = DiffusionSchedule(weights=weights)
    x = rand(rng)
    g = sds_gradient(x, MockTargetOracle(rand(rng), sched), "", 250, rng.normal(size=x.shape), sched)
    assert not g.any()


def test_sds_rejects_tau_out_of_range():
    x = np.zeros((2, 2, 3))
    with pytest.raises(InvalidParameterError):
        sds_gradient(x, MockTargetOracle(x, S), "", 0, x, S)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 999))
def test_sds_zero_iff_at_target(seed, tau):
    rng = np.random.default_rng(seed)
    x, target = rand(rng, (3, 3, 3)), rand(rng, (3, 3, 3))
    g = sds_gradient(x, MockTargetOracle(target, S), "", tau, rng.normal(size=x.shape), S)
    np.testing.assert_allclose(g, closed_form(x, target, tau), atol=1e-6 * max(1.0, S.alpha(tau) / S.sigma(tau)))
    assert np.abs(g).max() > 0


class FailingOracle(DenoiserOracle):
    kind = "video"

    def predict(self, z, condition, tau):
        raise RuntimeError("boom")


class WrongShapeOracle(DenoiserOracle):
    def predict(self, z, condition, tau):
        return np.zeros(z.shape[:-1])


def test_oracle_failure_carries_kind():
    x = np.zeros((2, 2, 3))
    with pytest.raises(OracleUnavailableError) as info:
        sds_gradient(x, FailingOracle(), "", 10, x, S)
    assert info.value.kind == "video"
    with pytest.raises(OracleUnavailableError, match="shape"):
        sds_gradient(x, WrongShapeOracle(), "", 10, x, S)


def test_combined_mirrored_targets_cancel():
    rng = np.random.default_rng(5)
    x, d = rand(rng), rng.normal(size=(6, 5, 3))
    pair = [(MockTargetOracle(x + d, S), ""), (MockTargetOracle(x - d, S), "")]
    assert np.abs(combined_sds(x, pair, 321, rng.normal(size=x.shape), S)).max() <= 1e-9


def test_combined_single_equals_sds():
    rng = np.random.default_rng(6)
    x, t, eps = rand(rng), rand(rng), rng.normal(size=(6, 5, 3))
    o = MockTargetOracle(t, S)
    np.testing.assert_array_equal(combined_sds(x, [(o, "a")], 100, eps, S), sds_gradient(x, o, "a", 100, eps, S))


def test_combined_two_random_targets_closed_form_and_linearity():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x, t1, t2 = rand(rng), rand(rng), rand(rng)
        tau, eps = int(rng.integers(20, 981)), rng.normal(size=x.shape)
        o1, o2 = MockTargetOracle(t1, S), MockTargetOracle(t2, S)
        g = combined_sds(x, [(o1, ""), (o2, "")], tau, eps, S)
        assert np.abs(g - closed_form(x, t1, tau) - closed_form(x, t2, tau)).max() <= 1e-6
        lin = sds_gradient(x, o1, "", tau, eps, S) + sds_gradient(x, o2, "", tau, eps, S)
        assert np.abs(g - lin).max() <= 1e-9
        indep = combined_sds(x, [(o1, ""), (o2, "")], tau, [eps, rng.normal(size=x.shape)], S)
        assert np.abs(indep - g).max() <= 1e-6


def test_combined_needs_an_oracle():
    with pytest.raises(InvalidParameterError):
        combined_sds(np.zeros((1, 1, 3)), [], 10, np.zeros((1, 1, 3)), S)


def test_time_refine_loss():
    rng = np.random.default_rng(8)
    frames = [rand(rng) for _ in range(4)]
    targets = [rand(rng) for _ in range(4)]
    eps = rng.normal(size=(4, 6, 5, 3))
    value, _ = time_refine_loss(frames, MockTargetOracle(frames, S, "video"), "walk", 200, eps, S)
    assert value <= 1e-20
    value, grads = time_refine_loss(frames, MockTargetOracle(targets, S, "video"), "walk", 200, eps, S)
    coef = S.weight(200) * (S.alpha(200) / S.sigma(200)) ** 2
    expected = np.mean([coef * np.sum((f - t) ** 2) for f, t in zip(frames, targets)])
    assert value == pytest.approx(expected, rel=1e-5)
    per_frame = [time_refine_loss([f], MockTargetOracle([t], S, "video"), "walk", 200, e[None], S)[0]
                 for f, t, e in zip(frames, targets, eps)]
    assert value == pytest.approx(np.mean(per_frame), rel=1e-12)
    assert grads.shape == (4, 6, 5, 3)
    with pytest.raises(InvalidParameterError):
        time_refine_loss(frames, MockTargetOracle(targets, S, "image"), "", 200, eps, S)


def test_refine_gradient_is_stop_gradient_of_value():
    rng = np.random.default_rng(9)
    views, targets = [rand(rng) for _ in range(3)], [rand(rng) for _ in range(3)]
    eps = rng.normal(size=(3, 6, 5, 3))
    _, grads = mv_refine_loss(views, MockTargetOracle(targets, S, "multiview"), None, 600, eps, S)
    oracle = MockTargetOracle(targets, S, "multiview")
    z = np.stack([add_noise(v, 600, e, S) for v, e in zip(views, eps)])
    np.testing.assert_allclose(grads, (oracle.predict(z, None, 600) - eps) / 3, atol=1e-12)


def test_mv_refine_loss():
    rng = np.random.default_rng(10)
    views, targets = [rand(rng) for _ in range(3)], [rand(rng) for _ in range(3)]
    anchor = ImageBuffer.from_rgb(rand(rng))
    eps = rng.normal(size=(3, 6, 5, 3))
    assert mv_refine_loss(views, MockTargetOracle(views, S, "multiview"), anchor, 50, eps, S)[0] <= 1e-20
    value, _ = mv_refine_loss(views, MockTargetOracle(targets, S, "multiview"), anchor, 50, eps, S)
    coef = S.weight(50) * (S.alpha(50) / S.sigma(50)) ** 2
    assert value == pytest.approx(np.mean([coef * np.sum((v - t) ** 2) for v, t in zip(views, targets)]), rel=1e-5)
    single, _ = mv_refine_loss(views[:1], MockTargetOracle(targets[:1], S, "multiview"), anchor, 50, eps[:1], S)
    assert single == pytest.approx(coef * np.sum((views[0] - targets[0]) ** 2), rel=1e-5)
    with pytest.raises(InvalidParameterError):
        mv_refine_loss(views, MockTargetOracle(targets, S, "video"), anchor, 50, eps, S)


def test_distill_converges_to_target_average():
    rng = np.random.default_rng(11)
    t1, t2 = rand(rng, (8, 8, 3)), rand(rng, (8, 8, 3))
    oracles = [(MockTargetOracle(t1, S), ""), (MockTargetOracle(t2, S), "")]
    x = distill_image(np.full((8, 8, 3), 0.5), oracles, S, steps=300, lr=0.01, seed=0)
    assert np.abs(x - 0.5 * (t1 + t2)).max() < 1e-3


# remote oracle over a loopback stub

class StubServer:
    def __init__(self, behaviour):
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append((self.path, body))
                status, reply = behaviour(body)
                data = json.dumps(reply).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def mock_formula_server(target):
    def behaviour(body):
        h, w, tau = body["height"], body["width"], body["tau"]
        out = []
        for item in body["images"]:
            z = np.frombuffer(base64.b64decode(item), dtype="<f4").reshape(h, w, 3).astype(np.float64)
            eps_hat = (z - S.alpha(tau) * target) / S.sigma(tau)
            out.append(base64.b64encode(eps_hat.astype("<f4").tobytes()).decode())
        return 200, {"eps_hat": out}
    return behaviour


def test_remote_matches_local_mock():
    rng = np.random.default_rng(12)
    x, target = rand(rng, (8, 6, 3)), rand(rng, (8, 6, 3))
    eps = rng.normal(size=x.shape)
    with StubServer(mock_formula_server(target)) as srv:
        remote = remote_oracle(srv.url, "image", guidance_scale=7.5)
        g_remote = sds_gradient(x, remote, "a cat", 500, eps, S)
        path, body = srv.requests[0]
    g_local = sds_gradient(x, MockTargetOracle(target, S), "a cat", 500, eps, S)
    assert np.abs(g_remote - g_local).max() <= 1e-5
    assert path == "/v1/denoise"
    assert body["kind"] == "image" and body["tau"] == 500 and body["condition_text"] == "a cat"
    assert body["condition_image"] is None and body["guidance_scale"] == 7.5
    assert (body["height"], body["width"]) == (8, 6)


def test_remote_video_batch_and_image_condition():
    rng = np.random.default_rng(13)
    frames = rand(rng, (3, 8, 8, 3))
    with StubServer(mock_formula_server(np.zeros((8, 8, 3)))) as srv:
        remote = remote_oracle(srv.url, "multiview")
        anchor = ImageBuffer(rand(rng, (8, 8, 3)), np.ones((8, 8)))
        value, grads = mv_refine_loss(list(frames), remote, anchor, 300, rng.normal(size=frames.shape), S)
        _, body = srv.requests[0]
    assert len(body["images"]) == 3 and body["condition_image"] and body["condition_text"] is None
    assert grads.shape == frames.shape and value > 0


def test_remote_retries_then_fails_on_500():
    with StubServer(lambda body: (500, {"error": "overloaded"})) as srv:
        remote = remote_oracle(srv.url, "image", backoff=0.0)
        with pytest.raises(OracleUnavailableError) as info:
            remote.predict(np.zeros((4, 4, 3)), "", 100)
        assert len(srv.requests) == 3
    assert info.value.status == 500 and info.value.endpoint.endswith("/v1/denoise")


def test_remote_recovers_after_transient_failure():
    calls = []
    good = mock_formula_server(np.zeros((4, 4, 3)))

    def flaky(body):
        calls.append(1)
        return (503, {}) if len(calls) < 3 else good(body)

    with StubServer(flaky) as srv:
        out = remote_oracle(srv.url, backoff=0.0).predict(np.ones((4, 4, 3)), "", 100)
    assert out.shape == (4, 4, 3) and len(calls) == 3


def test_remote_client_error_is_not_retried():
    with StubServer(lambda body: (400, {})) as srv:
        with pytest.raises(OracleUnavailableError) as info:
            remote_oracle(srv.url, backoff=0.0).predict(np.zeros((4, 4, 3)), "", 100)
        assert len(srv.requests) == 1 and info.value.status == 400


def test_remote_shape_mismatch():
    short = base64.b64encode(np.zeros(5, dtype="<f4").tobytes()).decode()
    with StubServer(lambda body: (200, {"eps_hat": [short]})) as srv:
        with pytest.raises(OracleUnavailableError, match="shape"):
            remote_oracle(srv.url, backoff=0.0).predict(np.zeros((4, 4, 3)), "", 100)
    with StubServer(lambda body: (200, {"eps_hat": []})) as srv:
        with pytest.raises(OracleUnavailableError, match="shape"):
            remote_oracle(srv.url, backoff=0.0).predict(np.zeros((4, 4, 3)), "", 100)


def test_remote_malformed_payload():
    with StubServer(lambda body: (200, {"nope": 1})) as srv:
        with pytest.raises(OracleUnavailableError, match="malformed"):
            remote_oracle(srv.url, backoff=0.0).predict(np.zeros((2, 2, 3)), "", 100)


def test_remote_unreachable():
    with pytest.raises(OracleUnavailableError):
        remote_oracle("http://127.0.0.1:9", backoff=0.0, timeout=2.0).predict(np.zeros((2, 2, 3)), "", 100)


def test_remote_bounds_in_flight_requests():
    active, peak, lock = [0], [0], threading.Lock()
    release = threading.Event()
    good = mock_formula_server(np.zeros((2, 2, 3)))

    def slow(body):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        release.wait(2.0)
        with lock:
            active[0] -= 1
        return good(body)

    with StubServer(slow) as srv:
        remote = remote_oracle(srv.url, max_in_flight=2)
        threads = [threading.Thread(target=remote.predict, args=(np.zeros((2, 2, 3)), "", 100)) for _ in range(5)]
        for t in threads:
            t.start()
        threading.Event().wait(0.5)
        release.set()
        for t in threads:
            t.join()
    assert peak[0] == 2
