import logging
import os
import re
from pathlib import Path
from typing import Dict, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict

from reefdeploy.exceptions import ConfigError
from reefdeploy.models.configs import VlmClientConfig, VlmProvider

logger = logging.getLogger(__name__)

load_dotenv()

ENV_PREFIX = "REEFDEPLOY_"


class Settings(BaseModel):
    model_config = ConfigDict(frozen=True)

    log_level: str = "INFO"
    vlm_provider: VlmProvider = VlmProvider.HTTP
    vlm_endpoint: Optional[str] = None
    vlm_model: Optional[str] = None
    vlm_credential_env: str = "OPENAI_API_KEY"
    aws_region: str = "us-east-1"
    bedrock_model_id: str = "us.anthropic.claude-3-5-sonnet-20241022-v2:0"

    @classmethod
    def from_env(cls) -> "Settings":
        values = {}
        for name in cls.model_fields:
            raw = os.getenv(f"{ENV_PREFIX}{name.upper()}")
            if raw:
                values[name] = raw
        try:
            return cls(**values)
        except ValueError as e:
            raise ConfigError(f"invalid {ENV_PREFIX}* environment: {e}") from e

    def vlm_client_config(self, **overrides) -> VlmClientConfig:
        """Client config from the environment, with explicit values winning."""
        base = {"provider": self.vlm_provider, "credential": self.vlm_credential_env}
        if self.vlm_endpoint:
            base["endpoint"] = self.vlm_endpoint
        if self.vlm_model:
            base["model"] = self.vlm_model
        elif self.vlm_provider is VlmProvider.BEDROCK:
            base["model"] = self.bedrock_model_id
        base.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return VlmClientConfig(**base)
        except ValueError as e:
            raise ConfigError(f"invalid VLM client settings: {e}") from e


def normalize_key(key: str) -> str:
    return re.sub(r"[-\s]+", "_", key.strip().lower())


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat ``key=value`` file; keys come back with dashes folded to underscores."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigError(f"{path}: key {key!r} has no value")
        values[normalize_key(key)] = value
    logger.debug(f"Read {len(values)} keys from {path}")
    return values
