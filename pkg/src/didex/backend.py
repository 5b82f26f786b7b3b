"""Client for an image-to-image diffusion backend behind a wire protocol.

The ``generic`` adapter speaks HTTP: POST a JSON object ``{prompt,
negative_prompt, init_image, constraint_type, constraint_image, strength,
steps, guidance, seed, width, height}`` (images are base64 PNG) and decode
``{"image": <base64 PNG>}``. Retries apply only to timeouts and 5xx
responses, with exponential backoff; 4xx responses surface immediately.

The ``mock`` adapter is a local stand-in for tests and smoke runs: a pure
function of (source image bytes, prompt, negative prompt, constraint
payload, seed, output size) that mixes a hash-derived color field into the
jittered source image by ``strength``.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import requests
from PIL import Image

from .constraints import NO_CONSTRAINT, Constraint
from .errors import BackendProtocolError, BackendRejection, BackendTimeout, DomainError
from .labels import RasterImage

ENV_ENDPOINT = "DIDEX_BACKEND_URL"
ENV_TOKEN = "DIDEX_BACKEND_TOKEN"

ADAPTERS = ("generic", "mock")


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = ""
    adapter: str = "mock"
    token: Optional[str] = None
    timeout: float = 30.0
    max_retries: int = 3
    max_concurrent: int = 4
    retry_base_s: float = 1.0
    retry_factor: float = 2.0

    def __post_init__(self):
        if self.adapter not in ADAPTERS:
            raise DomainError(f"unknown backend adapter {self.adapter!r}")
        if self.timeout <= 0:
            raise DomainError("timeout must be positive")
        if self.max_concurrent < 1:
            raise DomainError("max_concurrent must be >= 1")
        if self.max_retries < 0:
            raise DomainError("max_retries must be >= 0")

    def with_env_overrides(self) -> "BackendConfig":
        """Apply DIDEX_BACKEND_URL / DIDEX_BACKEND_TOKEN if set."""
        endpoint = os.environ.get(ENV_ENDPOINT, self.endpoint)
        token = os.environ.get(ENV_TOKEN, self.token)
        return replace(self, endpoint=endpoint, token=token)

    @property
    def backend_id(self) -> str:
        return "mock" if self.adapter == "mock" else f"generic:{self.endpoint}"

    def to_json(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "adapter": self.adapter,
            "token": self.token,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "max_concurrent": self.max_concurrent,
            "retry_base_s": self.retry_base_s,
            "retry_factor": self.retry_factor,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "BackendConfig":
        known = {
            k: doc[k]
            for k in (
                "endpoint",
                "adapter",
                "token",
                "timeout",
                "max_retries",
                "max_concurrent",
                "retry_base_s",
                "retry_factor",
            )
            if k in doc
        }
        return cls(**known)


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    """Arguments of one image-to-image generation."""

    source_image: RasterImage
    prompt: str
    seed: int
    negative_prompt: Optional[str] = None
    constraint: Constraint = NO_CONSTRAINT
    strength: float = 0.75
    steps: int = 50
    guidance: float = 7.5
    output_size: Optional[tuple[int, int]] = None  # (W, H); defaults to source size

    def __post_init__(self):
        if not 0.0 < self.strength <= 1.0:
            raise DomainError(f"strength must be in (0, 1], got {self.strength}")
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if self.guidance <= 0:
            raise DomainError("guidance must be positive")
        if self.output_size is not None and (self.output_size[0] < 1 or self.output_size[1] < 1):
            raise DomainError("output_size must be positive")
        if self.constraint.kind != "none" and self.constraint.payload.size != self.source_image.size:
            raise DomainError(
                f"constraint payload size {self.constraint.payload.size} does not match "
                f"source image size {self.source_image.size}"
            )

    @property
    def effective_size(self) -> tuple[int, int]:
        return self.output_size if self.output_size is not None else self.source_image.size


@dataclass(frozen=True)
class HealthReport:
    reachable: bool
    latency_s: Optional[float] = None
    error: Optional[str] = None


def png_bytes(image: RasterImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(raw: bytes) -> RasterImage:
    try:
        with Image.open(io.BytesIO(raw)) as im:
            return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except Exception as exc:
        raise BackendProtocolError(f"response is not a decodable PNG: {exc}") from exc


def _resize_nearest(image: RasterImage, size: tuple[int, int]) -> np.ndarray:
    if image.size == size:
        return image.data
    w, h = size
    rows = (np.arange(h) * image.height) // h
    cols = (np.arange(w) * image.width) // w
    return image.data[np.ix_(rows, cols)]


def mock_generate(request: GenerationRequest) -> RasterImage:
    """Deterministic local generation.

    The output is a pure function of (source bytes, prompt, negative
    prompt, constraint kind and payload bytes, seed, output size): those
    feed a hash that seeds both a coarse color field and per-pixel jitter.
    The field is blended over the jittered source by ``strength``.
    """
    w, h = request.effective_size
    src = _resize_nearest(request.source_image, (w, h)).astype(np.float64)

    digest = hashlib.sha256()
    digest.update(request.source_image.data.tobytes())
    digest.update(request.prompt.encode("utf-8"))
    digest.update((request.negative_prompt or "").encode("utf-8"))
    digest.update(request.constraint.kind.encode("utf-8"))
    if request.constraint.payload is not None:
        digest.update(request.constraint.payload.data.tobytes())
    digest.update(int(request.seed).to_bytes(8, "little", signed=False))
    rng = np.random.default_rng(int.from_bytes(digest.digest()[:8], "little"))

    tiles = rng.integers(0, 256, size=(4, 4, 3)).astype(np.float64)
    rows = (np.arange(h) * 4) // h
    cols = (np.arange(w) * 4) // w
    color_field = tiles[np.ix_(rows, cols)]
    jitter = rng.integers(-12, 13, size=(h, w, 3)).astype(np.float64)

    alpha = request.strength
    out = (1.0 - alpha) * (src + jitter) + alpha * color_field
    return RasterImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


class DiffusionClient:
    """Thread-safe client enforcing the configured concurrency limit.

    ``generate`` never mutates the request; retries resend identical
    payload bytes. At most ``max_concurrent`` calls are in flight at once.
    """

    def __init__(self, config: BackendConfig):
        self.config = config
        self._limiter = threading.Semaphore(config.max_concurrent)
        self._session = requests.Session()

    def generate(self, request: GenerationRequest) -> RasterImage:
        with self._limiter:
            if self.config.adapter == "mock":
                return mock_generate(request)
            return self._generate_http(request)

    def _generate_http(self, request: GenerationRequest) -> RasterImage:
        w, h = request.effective_size
        payload = {
            "prompt": request.prompt,
            "negative_prompt": request.negative_prompt,
            "init_image": base64.b64encode(png_bytes(request.source_image)).decode("ascii"),
            "constraint_type": request.constraint.kind,
            "constraint_image": (
                base64.b64encode(png_bytes(request.constraint.payload)).decode("ascii")
                if request.constraint.payload is not None
                else None
            ),
            "strength": request.strength,
            "steps": request.steps,
            "guidance": request.guidance,
            "seed": int(request.seed),
            "width": w,
            "height": h,
        }
        body = json.dumps(payload)
        headers = {"Content-Type": "application/json"}
        if self.config.token:
            headers["Authorization"] = f"Bearer {self.config.token}"

        attempts = self.config.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt > 0:
                time.sleep(self.config.retry_base_s * self.config.retry_factor ** (attempt - 1))
            try:
                response = self._session.post(
                    self.config.endpoint, data=body, headers=headers, timeout=self.config.timeout
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
                continue
            if 500 <= response.status_code < 600:
                last_error = BackendRejection(response.status_code, response.text[:200])
                continue
            if response.status_code != 200:
                raise BackendRejection(response.status_code, response.text[:200])
            return self._decode(response, (w, h))

        if isinstance(last_error, BackendRejection):
            raise last_error
        raise BackendTimeout(
            f"backend {self.config.endpoint} did not answer after {attempts} attempts: {last_error}"
        )

    def _decode(self, response: requests.Response, size: tuple[int, int]) -> RasterImage:
        excerpt = response.text[:200]
        try:
            doc = response.json()
        except ValueError as exc:
            raise BackendProtocolError(f"response body is not JSON: {excerpt!r}") from exc
        if not isinstance(doc, dict) or "image" not in doc:
            raise BackendProtocolError(f"response JSON lacks an 'image' field: {excerpt!r}")
        try:
            raw = base64.b64decode(doc["image"])
        except Exception as exc:
            raise BackendProtocolError(f"'image' field is not base64: {excerpt!r}") from exc
        image = image_from_png_bytes(raw)
        if image.size != size:
            raise BackendProtocolError(
                f"backend returned size {image.size}, requested {size}"
            )
        return image

    def health_check(self) -> HealthReport:
        """Probe reachability; failures are encoded in the report."""
        if self.config.adapter == "mock":
            start = time.perf_counter()
            mock_generate(
                GenerationRequest(
                    source_image=RasterImage(np.zeros((1, 1, 3), dtype=np.uint8)),
                    prompt="",
                    seed=0,
                )
            )
            return HealthReport(reachable=True, latency_s=time.perf_counter() - start)
        start = time.perf_counter()
        try:
            self._session.get(self.config.endpoint, timeout=self.config.timeout)
        except requests.RequestException as exc:
            return HealthReport(reachable=False, error=type(exc).__name__)
        return HealthReport(reachable=True, latency_s=time.perf_counter() - start)


def generate(request: GenerationRequest, backend: BackendConfig) -> RasterImage:
    """One-shot generation with a fresh client."""
    return DiffusionClient(backend).generate(request)


def health_check(backend: BackendConfig) -> HealthReport:
    return DiffusionClient(backend).health_check()
