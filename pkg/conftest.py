"""
Shared pytest fixtures for pagebook.
"""

import copy
import json
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import settings  # noqa: E402
from models.bookmark import default_stopwords  # noqa: E402
from models.pager import Turn  # noqa: E402
from services.datasets import Conversation, Probe  # noqa: E402

_CONFIGS = ("pager_config", "bookmark_config", "retrieval_config", "model_config", "mock_config",
            "dataset_config", "harness_config")


@pytest.fixture(autouse=True)
def restore_settings():
    """The CLI writes run config values into the shared settings; undo that after every test."""
    saved = {name: copy.deepcopy(vars(getattr(settings, name))) for name in _CONFIGS}
    yield
    for name, values in saved.items():
        vars(getattr(settings, name)).update(values)


@pytest.fixture
def stopwords():
    return default_stopwords()


def make_turns(texts, session_tags=None, topics=None):
    turns = []
    for index, text in enumerate(texts):
        turns.append(Turn(
            index=index,
            speaker="user" if index % 2 == 0 else "assistant",
            text=text,
            session_tag=(session_tags or [""] * len(texts))[index],
            topic=(topics or [""] * len(texts))[index],
        ))
    return turns


@pytest.fixture
def travel_conversation():
    """Twenty turns, a Lisbon allergy fact at turn 2, probes after turn 15 and at the end."""
    texts = []
    for index in range(20):
        if index == 2:
            texts.append("My Allergy is peanuts, please keep that in mind for Lisbon.")
        elif index < 10:
            texts.append(f"Thinking about Lisbon trams and tiles, note {index}.")
        else:
            texts.append(f"Now the Harborview kitchen remodel needs cabinets, note {index}.")
    probes = [
        Probe(id="c1-f0-i0", question="What Allergy did I mention for Lisbon?", answer="peanuts",
              category="allergy", position="interspersed", after_turn=15, needed_turns=[2],
              fact_markers=["Allergy is peanuts"]),
        Probe(id="c1-f0-end", question="What Allergy did I mention for Lisbon?", answer="peanuts",
              category="allergy", position="end", after_turn=19, needed_turns=[2],
              fact_markers=["Allergy is peanuts"]),
    ]
    return Conversation(conv_id="c1", turns=make_turns(texts), probes=probes)


def locomo_sample():
    def session(number, lines):
        return [
            {"speaker": "Caroline" if pos % 2 == 0 else "Melanie", "dia_id": f"D{number}:{pos + 1}", "text": text}
            for pos, text in enumerate(lines)
        ]

    conversation = {"speaker_a": "Caroline", "speaker_b": "Melanie"}
    topics = [
        ["I adopted a greyhound named Biscuit last week.", "That is lovely, how is Biscuit settling in?"],
        ["I started pottery classes on Tuesdays.", "Pottery sounds relaxing."],
        ["We drove to the Sierra lakes for camping.", "Camping by the lakes must have been cold."],
        ["My sister moved to Denver in March.", "Denver is a great city."],
        ["I am painting a sunrise over the harbor.", "Send me a photo of the painting."],
    ]
    for number, lines in enumerate(topics, 1):
        conversation[f"session_{number}"] = session(number, lines)
        conversation[f"session_{number}_date_time"] = f"1:56 pm on {number + 7} May, 2023"
    return [{
        "sample_id": "conv-test",
        "conversation": conversation,
        "qa": [
            {"question": "What is the name of the greyhound Caroline adopted?", "answer": "Biscuit",
             "evidence": ["D1:1"], "category": 1},
            {"question": "When did Caroline's sister move to Denver?", "answer": "March",
             "evidence": ["D4:1"], "category": 2},
            {"question": "What instrument does Melanie play?", "answer": "",
             "evidence": ["D2:2"], "category": 5},
            {"question": "Where did they go camping?", "answer": "Sierra lakes",
             "evidence": ["D3:1"], "category": 4},
        ],
    }]


@pytest.fixture
def locomo_file(tmp_path):
    path = tmp_path / "locomo_tiny.json"
    path.write_text(json.dumps(locomo_sample()), encoding="utf-8")
    return str(path)
