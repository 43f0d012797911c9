from dataclasses import replace
from typing import List, Optional, Sequence

from config.settings import MockConfig, ModelConfig, model_config
from utils.errors import ConfigError
from utils.logging import get_logger
from .base import Responder
from .judge import ExactMatchJudge, Judge, LLMJudge
from .mock import MockResponder
from .openai_compat import ChatClient

logger = get_logger(__name__)

RESPONDER_MODES = ("mock", "live")

# One live client per model name; the clients are thread-safe
_clients = {}


def get_responder(mode: str = "mock", config: Optional[ModelConfig] = None,
                  policy: Optional[MockConfig] = None) -> Responder:
    """Gets the responder for a run: the offline mock or a shared live client."""
    if mode not in RESPONDER_MODES:
        raise ConfigError(f"unknown responder mode {mode!r}")
    if mode == "mock":
        return MockResponder(policy)

    config = config or model_config
    key = (config.endpoint_url, config.model_name)
    if key not in _clients:
        logger.info(f"Connecting to {config.endpoint_url} as {config.model_name}")
        _clients[key] = ChatClient(config)
    return _clients[key]


def get_judges(judge_models: Sequence[str], mode: str = "mock",
               config: Optional[ModelConfig] = None) -> List[Judge]:
    """One judge per model name; offline runs use the exact-match judge."""
    if mode == "mock" or not judge_models:
        return [ExactMatchJudge()]
    config = config or model_config
    judges = []
    for name in judge_models:
        client = get_responder("live", replace(config, model_name=name, temperature=0.0))
        judges.append(LLMJudge(client, name=name))
    return judges
