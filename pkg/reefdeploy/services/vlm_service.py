import asyncio
import base64
import json
import logging
import os
import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional, Union

import boto3
import httpx
from botocore.exceptions import BotoCoreError, ClientError

from reefdeploy.exceptions import CredentialError, VlmAuthError, VlmRateLimitError, VlmTransportError
from reefdeploy.models.configs import VlmClientConfig, VlmProvider
from reefdeploy.settings import Settings

logger = logging.getLogger(__name__)

REDACTED = "***"
MAX_TOKENS = 256


class AuditLog:
    """Append-only JSONL of every VLM exchange; credentials never reach it."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, entry: Dict[str, Any]) -> None:
        entry = {"ts_ms": int(time.time() * 1000), **entry}
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry) + "\n")
            f.flush()


def redact_headers(headers: Dict[str, str]) -> Dict[str, str]:
    secret = {"authorization", "x-api-key", "api-key"}
    return {k: (REDACTED if k.lower() in secret else v) for k, v in headers.items()}


def _image_placeholder(image: bytes) -> str:
    return f"<{len(image)} image bytes>"


def _retry_after(value: Optional[str]) -> Optional[float]:
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class VlmTransport(ABC):
    """Sends one prompt plus one image and returns the model's text reply."""

    provider = "vlm"

    def __init__(self, audit: Optional[AuditLog] = None):
        self.audit = audit

    @abstractmethod
    async def complete(self, prompt: str, image: bytes, media_type: str = "image/png") -> str:
        pass

    async def aclose(self) -> None:
        pass

    def _audit(self, request: Dict[str, Any], **outcome: Any) -> None:
        if self.audit is not None:
            self.audit.record({"provider": self.provider, "request": request, **outcome})


class ChatCompletionsTransport(VlmTransport):
    """Chat-completions style HTTP endpoint with the image as a base64 data URI."""

    provider = "http"

    def __init__(
        self,
        endpoint: str,
        api_key: str,
        model: str,
        timeout_s: float = 60.0,
        client: Optional[httpx.AsyncClient] = None,
        audit: Optional[AuditLog] = None,
    ):
        super().__init__(audit)
        self.endpoint = endpoint
        self.model = model
        self._headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
        self._owns_client = client is None
        self.client = client if client is not None else httpx.AsyncClient(timeout=timeout_s)

    def _body(self, prompt: str, image_url: str) -> Dict[str, Any]:
        return {
            "model": self.model,
            "temperature": 0,
            "max_tokens": MAX_TOKENS,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": image_url}},
                    ],
                }
            ],
        }

    async def complete(self, prompt: str, image: bytes, media_type: str = "image/png") -> str:
        data_uri = f"data:{media_type};base64,{base64.b64encode(image).decode('ascii')}"
        audit_request = {
            "endpoint": self.endpoint,
            "headers": redact_headers(self._headers),
            "body": self._body(prompt, _image_placeholder(image)),
        }
        try:
            response = await self.client.post(self.endpoint, headers=self._headers, json=self._body(prompt, data_uri))
        except httpx.HTTPError as e:
            self._audit(audit_request, error=f"{type(e).__name__}: {e}")
            raise VlmTransportError(f"request to {self.endpoint} failed: {type(e).__name__}: {e}") from e

        self._audit(audit_request, status=response.status_code, response=response.text)
        status = response.status_code
        if status == 429:
            raise VlmRateLimitError(
                f"rate limited by {self.endpoint}", retry_after_s=_retry_after(response.headers.get("retry-after"))
            )
        if status in (401, 403):
            raise VlmAuthError(f"{self.endpoint} rejected the credential (HTTP {status})", status=status)
        if status >= 500:
            raise VlmTransportError(f"{self.endpoint} returned HTTP {status}", status=status)
        if status >= 400:
            raise VlmTransportError(f"{self.endpoint} returned HTTP {status}", status=status, retryable=False)

        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise VlmTransportError(f"unexpected response shape from {self.endpoint}: {e}", status=status) from e

    async def aclose(self) -> None:
        if self._owns_client:
            await self.client.aclose()


class BedrockTransport(VlmTransport):
    """Anthropic messages on Bedrock with one base64 image block."""

    provider = "bedrock"
    THROTTLE_CODES = {"ThrottlingException", "TooManyRequestsException"}
    AUTH_CODES = {"AccessDeniedException", "UnrecognizedClientException", "ExpiredTokenException"}

    def __init__(
        self,
        model_id: str,
        region: str = "us-east-1",
        client: Any = None,
        audit: Optional[AuditLog] = None,
    ):
        super().__init__(audit)
        if client is None:
            session = boto3.Session(
                aws_access_key_id=os.getenv("AWS_ACCESS_KEY_ID"),
                aws_secret_access_key=os.getenv("AWS_SECRET_ACCESS_KEY"),
                region_name=region,
            )
            client = session.client("bedrock-runtime")
        self.client = client
        self.model_id = model_id

    def _request(self, prompt: str, image_data: str, media_type: str) -> Dict[str, Any]:
        return {
            "anthropic_version": "bedrock-2023-05-31",
            "max_tokens": MAX_TOKENS,
            "temperature": 0,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "image", "source": {"type": "base64", "media_type": media_type, "data": image_data}},
                        {"type": "text", "text": prompt},
                    ],
                }
            ],
        }

    def _invoke(self, request: Dict[str, Any]) -> str:
        response = self.client.invoke_model(modelId=self.model_id, body=json.dumps(request))
        response_body = json.loads(response["body"].read())
        return response_body["content"][0]["text"]

    async def complete(self, prompt: str, image: bytes, media_type: str = "image/png") -> str:
        request = self._request(prompt, base64.b64encode(image).decode("ascii"), media_type)
        audit_request = {"model_id": self.model_id, "body": self._request(prompt, _image_placeholder(image), media_type)}
        try:
            text = await asyncio.to_thread(self._invoke, request)
        except ClientError as e:
            code = e.response.get("Error", {}).get("Code", "")
            self._audit(audit_request, error=code or str(e))
            if code in self.THROTTLE_CODES:
                raise VlmRateLimitError(f"Bedrock throttled the request ({code})") from e
            if code in self.AUTH_CODES:
                raise VlmAuthError(f"Bedrock rejected the credentials ({code})") from e
            raise VlmTransportError(f"Bedrock API error: {e}") from e
        except BotoCoreError as e:
            self._audit(audit_request, error=str(e))
            raise VlmTransportError(f"Bedrock API error: {e}") from e
        except (KeyError, IndexError, TypeError, ValueError) as e:
            self._audit(audit_request, error=f"bad response: {e}")
            raise VlmTransportError(f"unexpected Bedrock response shape: {e}", retryable=False) from e
        self._audit(audit_request, response=text)
        return text


def create_transport(
    config: VlmClientConfig,
    settings: Optional[Settings] = None,
    audit: Optional[AuditLog] = None,
) -> VlmTransport:
    settings = settings or Settings.from_env()
    if config.provider is VlmProvider.BEDROCK:
        logger.info(f"Using Bedrock model {config.model} in {settings.aws_region}")
        return BedrockTransport(config.model, region=settings.aws_region, audit=audit)

    api_key = os.getenv(config.credential)
    if not api_key:
        raise CredentialError(f"environment variable {config.credential} is not set")
    logger.info(f"Using chat-completions endpoint {config.endpoint} with model {config.model}")
    return ChatCompletionsTransport(config.endpoint, api_key, config.model, timeout_s=config.timeout_s, audit=audit)
