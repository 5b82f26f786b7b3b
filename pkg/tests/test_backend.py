import hashlib
import threading
import time

import numpy as np
import pytest

from didex.backend import (
    BackendConfig,
    DiffusionClient,
    GenerationRequest,
    generate,
    health_check,
    mock_generate,
)
from didex.constraints import Constraint
from didex.errors import (
    BackendProtocolError,
    BackendRejection,
    BackendTimeout,
    DomainError,
)
from didex.labels import RasterImage

from fixture_server import FixtureServer

RECORDED_FIXTURE_SHA256 = "0eeddf688957f0343ce5401da42de7eace8699c4cbbb88c5267f703bde2edf94"


def fixture_request(**overrides):
    src = RasterImage(np.arange(4 * 5 * 3, dtype=np.uint8).reshape(4, 5, 3))
    kwargs = dict(source_image=src, prompt="fixture record", seed=1234, strength=0.6, steps=5, guidance=4.0)
    kwargs.update(overrides)
    return GenerationRequest(**kwargs)


def generic_config(endpoint, **overrides):
    kwargs = dict(endpoint=endpoint, adapter="generic", timeout=5.0, max_retries=2, retry_base_s=0.01)
    kwargs.update(overrides)
    return BackendConfig(**kwargs)


class TestRequestValidation:
    def test_strength_bounds(self):
        with pytest.raises(DomainError):
            fixture_request(strength=0.0)
        with pytest.raises(DomainError):
            fixture_request(strength=1.5)

    def test_steps_positive(self):
        with pytest.raises(DomainError):
            fixture_request(steps=0)

    def test_constraint_size_must_match(self):
        payload = RasterImage(np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(DomainError, match="size"):
            fixture_request(constraint=Constraint(kind="depth", payload=payload))


class TestMockAdapter:
    def test_seeded_determinism(self):
        a = mock_generate(fixture_request(seed=7))
        b = mock_generate(fixture_request(seed=7))
        assert np.array_equal(a.data, b.data)

    def test_seed_sensitivity(self):
        a = mock_generate(fixture_request(seed=7))
        b = mock_generate(fixture_request(seed=8))
        assert not np.array_equal(a.data, b.data)

    def test_prompt_sensitivity(self):
        a = mock_generate(fixture_request(prompt="one"))
        b = mock_generate(fixture_request(prompt="two"))
        assert not np.array_equal(a.data, b.data)

    def test_constraint_sensitivity(self):
        src = fixture_request().source_image
        payload = RasterImage(np.full((4, 5, 3), 9, dtype=np.uint8))
        with_constraint = fixture_request(constraint=Constraint(kind="depth", payload=payload))
        assert not np.array_equal(mock_generate(fixture_request()).data, mock_generate(with_constraint).data)

    def test_output_size_honored(self):
        out = mock_generate(fixture_request(output_size=(9, 3)))
        assert out.data.shape == (3, 9, 3)

    def test_one_shot_helper(self):
        out = generate(fixture_request(), BackendConfig(adapter="mock"))
        assert out.data.shape == (4, 5, 3)


class TestGenericAdapter:
    def test_round_trip_matches_recorded_fixture(self):
        with FixtureServer() as server:
            client = DiffusionClient(generic_config(server.endpoint))
            image = client.generate(fixture_request())
        assert hashlib.sha256(image.data.tobytes()).hexdigest() == RECORDED_FIXTURE_SHA256
        assert np.array_equal(image.data, mock_generate(fixture_request()).data)

    def test_retries_on_5xx_then_succeeds(self):
        with FixtureServer() as server:
            server.state.status_queue = [500, 503]
            client = DiffusionClient(generic_config(server.endpoint, max_retries=3))
            image = client.generate(fixture_request())
            bodies = server.state.bodies
        assert image.data.shape == (4, 5, 3)
        assert len(bodies) == 3
        assert bodies[0] == bodies[1] == bodies[2]  # retries resend identical bytes

    def test_5xx_exhausts_retries(self):
        with FixtureServer() as server:
            server.state.status_queue = [500] * 10
            client = DiffusionClient(generic_config(server.endpoint, max_retries=2))
            with pytest.raises(BackendRejection) as excinfo:
                client.generate(fixture_request())
            assert len(server.state.bodies) == 3
        assert excinfo.value.status == 500

    def test_4xx_is_never_retried(self):
        with FixtureServer() as server:
            server.state.status_queue = [422]
            client = DiffusionClient(generic_config(server.endpoint, max_retries=5))
            with pytest.raises(BackendRejection) as excinfo:
                client.generate(fixture_request())
            assert len(server.state.bodies) == 1
        assert excinfo.value.status == 422
        assert "scripted 422" in str(excinfo.value)

    def test_timeout_after_retries(self):
        with FixtureServer() as server:
            server.state.sleep_s = 0.5
            client = DiffusionClient(
                generic_config(server.endpoint, timeout=0.05, max_retries=1, retry_base_s=0.01)
            )
            with pytest.raises(BackendTimeout):
                client.generate(fixture_request())

    def test_protocol_error_includes_body_excerpt(self):
        with FixtureServer() as server:
            server.state.mode = "bad-json"
            client = DiffusionClient(generic_config(server.endpoint))
            with pytest.raises(BackendProtocolError, match="not json"):
                client.generate(fixture_request())

    def test_missing_image_field(self):
        with FixtureServer() as server:
            server.state.mode = "missing-field"
            client = DiffusionClient(generic_config(server.endpoint))
            with pytest.raises(BackendProtocolError, match="image"):
                client.generate(fixture_request())

    def test_concurrency_limit_enforced(self):
        with FixtureServer() as server:
            server.state.sleep_s = 0.1
            client = DiffusionClient(generic_config(server.endpoint, max_concurrent=2, timeout=10.0))
            threads = [
                threading.Thread(target=lambda: client.generate(fixture_request(seed=i)))
                for i in range(6)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert server.state.max_in_flight <= 2
            assert len(server.state.bodies) == 6


class TestHealthCheck:
    def test_mock_reachable(self):
        report = health_check(BackendConfig(adapter="mock"))
        assert report.reachable
        assert report.latency_s < 0.5

    def test_unroutable_endpoint(self):
        report = health_check(generic_config("http://127.0.0.1:9/nothing", timeout=0.2))
        assert not report.reachable
        assert "Connection" in report.error or "Error" in report.error

    def test_slow_fixture_latency_measured(self):
        with FixtureServer() as server:
            server.state.sleep_s = 0.2
            report = health_check(generic_config(server.endpoint, timeout=5.0))
        assert report.reachable
        assert report.latency_s >= 0.2


class TestEnvOverrides:
    def test_env_sets_endpoint_and_token(self, monkeypatch):
        monkeypatch.setenv("DIDEX_BACKEND_URL", "http://example.invalid/gen")
        monkeypatch.setenv("DIDEX_BACKEND_TOKEN", "sekrit")
        config = BackendConfig(adapter="generic", endpoint="http://old").with_env_overrides()
        assert config.endpoint == "http://example.invalid/gen"
        assert config.token == "sekrit"
