from .base import Responder
from .judge import ExactMatchJudge, Judge, LLMJudge, judge_score
from .manager import get_judges, get_responder
from .mock import MockResponder, ScriptedKeywordResponder, mock_respond
from .openai_compat import ChatClient

__all__ = [
    'Responder',
    'ChatClient',
    'MockResponder',
    'ScriptedKeywordResponder',
    'mock_respond',
    'Judge',
    'LLMJudge',
    'ExactMatchJudge',
    'judge_score',
    'get_responder',
    'get_judges'
]
