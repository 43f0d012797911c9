"""
Smoke tests against the real outside world: a live chat endpoint and a local LoCoMo file.

They are skipped unless PAGEBOOK_API_KEY / PAGEBOOK_LOCOMO are set.
"""

import os
from pathlib import Path

import pytest

from app import EXIT_OK, main
from config.settings import app_config, model_config, validate_config
from integrations import LLMJudge, get_responder
from models.messages import ChatMessage
from services.datasets import load_locomo_corpus

live = pytest.mark.skipif(not os.getenv(model_config.api_key_env), reason="no API key for the live endpoint")
locomo = pytest.mark.skipif(not os.getenv("PAGEBOOK_LOCOMO"), reason="PAGEBOOK_LOCOMO not set")


def test_config(tmp_path, monkeypatch):
    monkeypatch.chdir(Path(__file__).parent)
    monkeypatch.setattr(app_config, "out_dir", str(tmp_path / "runs"))
    monkeypatch.setattr(app_config, "logs_dir", str(tmp_path / "logs"))
    assert validate_config()
    assert (tmp_path / "runs").is_dir()


@live
def test_chat():
    reply = get_responder("live").complete([ChatMessage("user", "Reply with the single word: ready")])
    assert reply.role == "assistant"
    assert reply.content.strip()


@live
def test_judge():
    judge = LLMJudge(get_responder("live"), name=model_config.model_name)
    score = judge.score("What is the dog called?", "Biscuit", "The dog is called Biscuit.")
    assert 1 <= score <= 5


@locomo
def test_locomo_file():
    corpus = load_locomo_corpus(os.environ["PAGEBOOK_LOCOMO"], max_per_conv=2)
    assert corpus
    assert all(conv.kind == "locomo" and conv.turns for conv in corpus)


@locomo
def test_locomo_dry_run(tmp_path):
    code = main(["locomo", "--dry-run", "--locomo", os.environ["PAGEBOOK_LOCOMO"], "--probes", "2",
                 "--out", str(tmp_path), "--set", "harness.bootstrap_samples=200"])
    assert code == EXIT_OK
