"""
Evaluation corpora: a seeded synthetic long-conversation generator with planted facts
and probes, and a LoCoMo loader with stratified QA sampling.
"""

import json
import math
import random
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config.settings import FACT_CATEGORIES, LOCOMO_CATEGORIES, dataset_config
from models.pager import Turn, make_session_tag
from utils.errors import ConfigError, DatasetError, SchemaError
from utils.logging import get_logger

logger = get_logger(__name__)

TOPOLOGIES = ("forward", "revisit")
POSITIONS = ("interspersed", "end")
PLANT_GAP = 4
LOCOMO_DATE_FORMAT = "%I:%M %p on %d %B, %Y"


@dataclass(frozen=True)
class Topic:
    key: str
    label: str
    anchor: str
    vocabulary: Tuple[str, ...]


TOPICS = (
    Topic("travel", "travel plans", "Lisbon", ("flight", "hotel", "tram", "luggage", "museum", "ferry")),
    Topic("housing", "apartment search", "Harborview", ("lease", "landlord", "deposit", "balcony", "movers", "laundry")),
    Topic("garden", "garden project", "Greenfield", ("tomatoes", "compost", "seedlings", "mulch", "trellis", "watering")),
    Topic("school", "kids school", "Maplewood", ("homework", "recess", "backpack", "spelling", "tutor", "library")),
    Topic("fitness", "running training", "Riverside",
          ("intervals", "sneakers", "tempo", "mileage", "hamstring", "stopwatch")),
    Topic("work", "office project", "Northwind", ("roadmap", "standup", "sprint", "backlog", "slides", "vendor")),
    Topic("cooking", "dinner party", "Basilico", ("risotto", "appetizers", "tiramisu", "oven", "platter", "napkins")),
    Topic("car", "car repair", "Corolla", ("mechanic", "brakes", "tires", "battery", "radiator", "wipers")),
    Topic("finance", "tax paperwork", "Ledgerly",
          ("receipts", "deductions", "refund", "accountant", "payroll", "brokerage")),
    Topic("pets", "dog care", "Biscuit", ("leash", "kibble", "grooming", "kennel", "collar", "crate")),
)

# every topical turn names the anchor; sentences open on stopwords so stubs only pick up anchors and values
OPENER_TEMPLATES = (
    "Also, {a} is next on my list: the {w1}, the {w2} and the {w3}.",
    "On to {a} now, with the {w1}, the {w2} and the {w3}.",
)

USER_TEMPLATES = (
    "I think the {w1} and the {w2} for {a} are fine.",
    "So the {w1} and the {w2} for {a} come first.",
    "The {w1} and the {w2} for {a} are next.",
    "I want the {w1} and the {w2} for {a} done first.",
)

ASSISTANT_TEMPLATES = (
    "Then the {w1} and the {w2} for {a} can wait.",
    "So the {w1} and the {w2} for {a} are fine.",
    "The {w1} and the {w2} for {a} can come next.",
    "I would do the {w1} and the {w2} for {a} first.",
)

# off-topic small talk made of stopwords; each one breaks the running topic window
ASIDES = (
    "So be it.",
    "If you say so.",
    "That would be all.",
    "We can do that.",
    "No, not yet.",
    "What a week it has been.",
)

# cue word, fact phrasings, question phrasings; the cue sits inside a medium stub's snippet and the value after it
FACT_TEMPLATES = {
    "allergy": ("allergy", (
        "For {a}, please remember my allergy whenever we plan anything, it is {value}.",
        "About {a}: my allergy matters a lot there, so remember that it is {value}.")),
    "budget": ("budget", (
        "For {a}, my budget is tight and we have to stay under the limit of {value}.",
        "About {a}: the budget cannot grow past what we agreed on, which is {value}.")),
    "contact": ("contact", (
        "For {a}, my contact person can be reached any day on the line {value}.",
        "About {a}: if anything comes up, use the contact line, which is {value}.")),
    "deadline": ("deadline", (
        "For {a}, the deadline is firm and everything has to be ready by {value}.",
        "About {a}: we cannot move the deadline, it has been set for {value}.")),
    "medical": ("medication", (
        "For {a}, remember that the medication I take every morning is {value}.",
        "About {a}: the medication I am on right now, taken daily, is {value}.")),
    "number": ("code", (
        "For {a}, the door code is something we should write down, it is {value}.",
        "About {a}: the access code changed last week and now it is {value}.")),
    "preference": ("preference", (
        "For {a}, my preference is the same as always, and that means {value}.",
        "About {a}: whenever there is a choice, my preference would be {value}.")),
    "schedule": ("schedule", (
        "For {a}, the schedule is fixed and every morning it starts at {value}.",
        "About {a}: my schedule is strict, so the start each day is set to {value}.")),
}

QUESTION_TEMPLATES = (
    "What {cue} did I mention for {a}?",
    "Remind me of the {cue} for {a}.",
    "Which {cue} did I give you for {a}?",
)

MONTHS = ("January", "February", "March", "April", "June", "July", "August",
          "September", "October", "November", "December")
VALUE_POOLS = {
    "allergy": ("peanuts", "shellfish", "sesame", "penicillin", "latex", "pollen", "walnuts", "kiwi"),
    "medical": ("metformin", "lisinopril", "ibuprofen", "amoxicillin", "albuterol", "sertraline"),
    "preference": ("vegetarian meals", "aisle seats", "decaf coffee", "window tables", "oat milk",
                   "quiet rooms", "paper invoices"),
}


def _fact_value(category: str, rng: random.Random) -> str:
    if category in VALUE_POOLS:
        return rng.choice(VALUE_POOLS[category])
    if category == "budget":
        return f"${rng.randint(12, 95) * 50}"
    if category == "contact":
        return f"555-{rng.randint(100, 9999):04d}"
    if category == "deadline":
        return f"{rng.choice(MONTHS)} {rng.randint(1, 28)}"
    if category == "number":
        return str(rng.randint(1000, 9999))
    if category == "schedule":
        return f"{rng.randint(5, 11)}:{rng.choice(['00', '15', '30', '45'])}"
    raise ConfigError(f"unknown fact category {category!r}")


@dataclass(frozen=True)
class FactSpec:
    category: str
    value: str
    plant_turn: int
    phrasing: str

    def __post_init__(self):
        if not self.value:
            raise SchemaError("facts.value", "must be non-empty")
        if self.plant_turn < 0:
            raise SchemaError("facts.plant_turn", "must be >= 0")


@dataclass
class Probe:
    id: str
    question: str
    answer: str
    category: str
    position: str = "end"
    after_turn: int = 0
    needed_turns: List[int] = field(default_factory=list)
    fact_markers: List[str] = field(default_factory=list)
    evidence: List[str] = field(default_factory=list)
    abstain: bool = False

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise SchemaError("probes.position", f"unknown position {self.position!r}")

    def needed_page_ids(self, turn_to_page: Dict[int, int]) -> List[int]:
        """Pages holding any needed turn under one segmentation."""
        return sorted({turn_to_page[index] for index in self.needed_turns if index in turn_to_page})


@dataclass
class Conversation:
    conv_id: str
    turns: List[Turn]
    facts: List[FactSpec] = field(default_factory=list)
    probes: List[Probe] = field(default_factory=list)
    kind: str = "forward"

    def ordered_probes(self) -> List[Probe]:
        """Execution order: interspersed probes by position, end probes last."""
        return sorted(self.probes, key=lambda p: (p.position == "end", p.after_turn, p.id))

    def to_record(self) -> Dict[str, Any]:
        return {
            "conv_id": self.conv_id,
            "kind": self.kind,
            "turns": [turn.to_record() for turn in self.turns],
            "facts": [vars(fact).copy() for fact in self.facts],
            "probes": [vars(probe).copy() for probe in self.probes],
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Conversation":
        for key in ("conv_id", "turns", "probes"):
            if key not in record:
                raise SchemaError(key, "missing")
        return cls(
            conv_id=record["conv_id"],
            kind=record.get("kind", "forward"),
            turns=[Turn.from_record(turn) for turn in record["turns"]],
            facts=[FactSpec(**fact) for fact in record.get("facts", [])],
            probes=[Probe(**probe) for probe in record["probes"]],
        )


@dataclass
class SyntheticSpec:
    num_conversations: int = 20
    turns_range: Tuple[int, int] = (120, 200)
    facts_per_conv: Tuple[int, int] = (6, 8)
    blocks_range: Tuple[int, int] = (6, 8)
    categories: Tuple[str, ...] = tuple(FACT_CATEGORIES)
    topology: str = "forward"
    recent_horizon: int = 20
    recent_step: int = 2
    revisit_reasks: int = 8
    anchor_span: int = 20
    seed: int = 42
    name: str = "synthetic"

    def __post_init__(self):
        self.turns_range = tuple(self.turns_range)
        self.facts_per_conv = tuple(self.facts_per_conv)
        self.blocks_range = tuple(self.blocks_range)
        self.validate()

    def validate(self):
        lo, hi = self.turns_range
        if self.num_conversations < 1:
            raise ConfigError("num_conversations must be >= 1")
        if lo < 8 or hi < lo:
            raise ConfigError(f"turns_range: invalid range [{lo}, {hi}]")
        f_lo, f_hi = self.facts_per_conv
        if f_lo < 1 or f_hi < f_lo:
            raise ConfigError(f"facts_per_conv: invalid range [{f_lo}, {f_hi}]")
        if f_hi > len(self.categories):
            raise ConfigError(f"facts_per_conv: {f_hi} facts but only {len(self.categories)} categories")
        # facts go on spaced user turns in the first two thirds, at least one in the first third
        shortest = lo // 2 * 2
        slots = len(range(2, 2 * shortest // 3, PLANT_GAP))
        early_slots = len(range(2, shortest // 3, PLANT_GAP))
        if f_hi > slots or early_slots < 1:
            raise ConfigError(f"facts_per_conv: {f_hi} facts do not fit in {lo} turns")
        b_lo, b_hi = self.blocks_range
        if b_lo < 1 or b_hi < b_lo or b_hi > len(TOPICS):
            raise ConfigError(f"blocks_range: invalid range [{b_lo}, {b_hi}]")
        if lo // b_hi < 4:
            raise ConfigError(f"blocks_range: {b_hi} blocks leave fewer than 4 turns per block")
        unknown = [c for c in self.categories if c not in FACT_TEMPLATES]
        if unknown:
            raise ConfigError(f"categories: unknown {unknown}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology: unknown {self.topology!r}")
        if self.recent_horizon < 2 or self.recent_step < 1:
            raise ConfigError(f"recent_horizon/recent_step: invalid ({self.recent_horizon}, {self.recent_step})")
        if self.revisit_reasks < 1:
            raise ConfigError("revisit_reasks must be >= 1")
        if self.anchor_span < 4:
            raise ConfigError("anchor_span must be >= 4")

    @classmethod
    def from_config(cls, **overrides) -> "SyntheticSpec":
        values = dict(
            num_conversations=dataset_config.num_conversations,
            turns_range=(dataset_config.turns_min, dataset_config.turns_max),
            facts_per_conv=(dataset_config.facts_min, dataset_config.facts_max),
            seed=dataset_config.seed,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def controlled(cls, seed: int = 42) -> "SyntheticSpec":
        """Small preset: short conversations, a few facts, sparse re-asks, no `number` category."""
        return cls(
            num_conversations=10,
            turns_range=(20, 35),
            facts_per_conv=(2, 3),
            blocks_range=(2, 3),
            categories=tuple(c for c in FACT_CATEGORIES if c != "number"),
            recent_horizon=12,
            recent_step=5,
            anchor_span=5,
            seed=seed,
            name="controlled",
        )


def _stream(seed: int, conv: int, purpose: str) -> random.Random:
    """Independent RNG per (corpus seed, conversation, purpose)."""
    return random.Random(f"{seed}:{conv}:{purpose}")


def _block_sizes(n_turns: int, n_blocks: int) -> List[int]:
    pairs = n_turns // 2
    base, extra = divmod(pairs, n_blocks)
    return [2 * (base + (1 if i < extra else 0)) for i in range(n_blocks)]


def _filler(template: str, topic: Topic, rng: random.Random) -> str:
    w1, w2, w3 = rng.sample(topic.vocabulary, 3)
    return template.format(a=topic.anchor, w1=w1, w2=w2, w3=w3)


def _eligible_plants(n_turns: int, block_of: List[int], anchor_span: int) -> List[int]:
    """User turns inside a block whose topic already runs in the opening turns of their `anchor_span` stretch."""
    starts: Dict[int, int] = {}
    for index, block in enumerate(block_of):
        starts.setdefault(block, index)
    return [
        t for t in range(2, 2 * n_turns // 3, 2)
        if starts[block_of[t]] != t and starts[block_of[t]] <= t // anchor_span * anchor_span + 3
    ]


def _spaced(candidates: Sequence[int], count: int, chosen: Sequence[int] = ()) -> List[int]:
    picked = list(chosen)
    for t in candidates:
        if len(picked) == count:
            break
        if all(abs(t - other) >= PLANT_GAP for other in picked):
            picked.append(t)
    return picked


def _pick_plant_turns(n_turns: int, n_facts: int, eligible: List[int], rng: random.Random) -> List[int]:
    """Spaced plant turns, two of them in the first third when the gap allows."""
    early = [t for t in eligible if t < n_turns // 3]
    want_early = len(_spaced(early, min(2, n_facts)))
    for _ in range(100):
        chosen = _spaced(rng.sample(early, len(early)), want_early)
        if len(chosen) < want_early:
            continue
        chosen = _spaced(rng.sample(eligible, len(eligible)), n_facts, chosen)
        if len(chosen) == n_facts:
            return sorted(chosen)
    raise DatasetError(f"cannot place {n_facts} facts in {n_turns} turns")


def _aside_turns(n_turns: int, block_of: List[int], taken: Sequence[int], rng: random.Random) -> List[int]:
    """Aside positions: never in a block's first two turns, never on a fact, at least seven turns apart."""
    asides, index = [], rng.randint(5, 9)
    while index < n_turns:
        opening = block_of[index] != block_of[index - 2]
        if opening or index in taken:
            index += 1
            continue
        asides.append(index)
        index += rng.randint(7, 10)
    return asides


def _conversation(spec: SyntheticSpec, conv: int) -> Conversation:
    seed = spec.seed
    shape = _stream(seed, conv, "shape")
    n_turns = shape.randint(*spec.turns_range) // 2 * 2
    n_blocks = shape.randint(*spec.blocks_range)
    n_facts = shape.randint(*spec.facts_per_conv)

    topics = _stream(seed, conv, "topics").sample(TOPICS, n_blocks)
    if spec.topology == "revisit":
        early = max(1, n_blocks // 3)
        for block in range(math.ceil(2 * n_blocks / 3), n_blocks):
            topics[block] = topics[(block - math.ceil(2 * n_blocks / 3)) % early]

    block_of: List[int] = []
    for block, size in enumerate(_block_sizes(n_turns, n_blocks)):
        block_of.extend([block] * size)

    facts_rng = _stream(seed, conv, "facts")
    eligible = _eligible_plants(n_turns, block_of, spec.anchor_span)
    plant_turns = _pick_plant_turns(n_turns, n_facts, eligible, facts_rng)
    categories = facts_rng.sample(list(spec.categories), n_facts)
    asides = set(_aside_turns(n_turns, block_of, plant_turns, _stream(seed, conv, "asides")))

    text_rng = _stream(seed, conv, "text")
    texts = []
    for index in range(n_turns):
        topic = topics[block_of[index]]
        if index in asides:
            texts.append(text_rng.choice(ASIDES))
        elif index == 0 or block_of[index] != block_of[index - 1]:
            texts.append(_filler(text_rng.choice(OPENER_TEMPLATES), topic, text_rng))
        else:
            templates = USER_TEMPLATES if index % 2 == 0 else ASSISTANT_TEMPLATES
            texts.append(_filler(text_rng.choice(templates), topic, text_rng))

    facts = []
    for category, plant in zip(categories, plant_turns):
        cue, phrasings = FACT_TEMPLATES[category]
        topic = topics[block_of[plant]]
        for _ in range(50):
            value = _fact_value(category, facts_rng)
            clash = any(value in text for text in texts) or any(
                value in fact.value or fact.value in value for fact in facts)
            if not clash:
                break
        else:
            raise DatasetError(f"cannot find a unique {category} value for conversation {conv}")
        choice = facts_rng.randrange(len(phrasings))
        texts[plant] = phrasings[choice].format(a=topic.anchor, value=value)
        facts.append(FactSpec(category, value, plant, f"{category}_{choice}"))

    conv_id = f"{spec.name}-{spec.topology}-{conv:03d}"
    turns = [
        Turn(index=i, speaker="user" if i % 2 == 0 else "assistant", text=texts[i],
             topic=topics[block_of[i]].label)
        for i in range(n_turns)
    ]
    for fact in facts:
        holders = [t.index for t in turns if fact.value in t.text]
        if holders != [fact.plant_turn]:
            raise DatasetError(f"{conv_id}: value {fact.value!r} found in turns {holders}")

    probes = _probes(conv_id, spec, facts, topics, block_of, n_turns, _stream(seed, conv, "probes"))
    if spec.topology == "revisit":
        probes += _revisit_probes(conv_id, spec, facts, topics, block_of, n_turns, _stream(seed, conv, "revisit"))
    return Conversation(conv_id=conv_id, turns=turns, facts=facts, probes=probes, kind=spec.topology)


def _question(fact: FactSpec, topic: Topic, rng: random.Random) -> str:
    cue = FACT_TEMPLATES[fact.category][0]
    return rng.choice(QUESTION_TEMPLATES).format(cue=cue, a=topic.anchor)


def _probe(conv_id: str, suffix: str, fact: FactSpec, topic: Topic, rng: random.Random,
           position: str, after_turn: int) -> Probe:
    return Probe(
        id=f"{conv_id}-{suffix}",
        question=_question(fact, topic, rng),
        answer=fact.value,
        category=fact.category,
        position=position,
        after_turn=after_turn,
        needed_turns=[fact.plant_turn],
        fact_markers=[fact.value],
    )


def _probes(conv_id, spec, facts, topics, block_of, n_turns, rng) -> List[Probe]:
    """Each fact is re-asked every `recent_step` turns while it is recent, then once at the end."""
    probes = []
    for j, fact in enumerate(facts):
        topic = topics[block_of[fact.plant_turn]]
        delays = [d for d in range(2, spec.recent_horizon + 1, spec.recent_step) if fact.plant_turn + d <= n_turns - 2]
        for m, delay in enumerate(delays):
            probes.append(_probe(conv_id, f"f{j}-i{m}", fact, topic, rng, "interspersed", fact.plant_turn + delay))
        probes.append(_probe(conv_id, f"f{j}-end", fact, topic, rng, "end", n_turns - 1))
    return probes


def _revisit_probes(conv_id, spec, facts, topics, block_of, n_turns, rng) -> List[Probe]:
    """Extra probes on first-third facts, asked in the last third once the fact is long out of recent reach."""
    late = math.ceil(2 * n_turns / 3)
    probes = []
    for j, fact in enumerate(facts):
        if fact.plant_turn >= n_turns // 3:
            continue
        topic = topics[block_of[fact.plant_turn]]
        window = list(range(max(fact.plant_turn + 3 * spec.recent_horizon, late), n_turns - 1))
        for m, after in enumerate(sorted(rng.sample(window, min(spec.revisit_reasks, len(window))))):
            probes.append(_probe(conv_id, f"f{j}-r{m}", fact, topic, rng, "interspersed", after))
    return probes


def gen_synthetic(spec: SyntheticSpec) -> List[Conversation]:
    """Forward-topology corpus (topics visited once, in order)."""
    if spec.topology != "forward":
        spec = SyntheticSpec(**{**vars(spec), "topology": "forward"})
    return [_conversation(spec, conv) for conv in range(spec.num_conversations)]


def gen_revisit_variant(spec: SyntheticSpec) -> List[Conversation]:
    """Same shape as `gen_synthetic`, but late blocks return to early topics."""
    if spec.topology != "revisit":
        spec = SyntheticSpec(**{**vars(spec), "topology": "revisit"})
    return [_conversation(spec, conv) for conv in range(spec.num_conversations)]


def save_corpus(conversations: Sequence[Conversation], path: str) -> Path:
    """One JSON record per line."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        for conv in conversations:
            f.write(json.dumps(conv.to_record(), sort_keys=True, ensure_ascii=False) + "\n")
    logger.info(f"Wrote {len(conversations)} conversations to {target}")
    return target


def load_corpus(path: str) -> List[Conversation]:
    conversations = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    conversations.append(Conversation.from_record(json.loads(line)))
                except (ValueError, TypeError, KeyError) as e:
                    raise SchemaError(f"line {line_no}", str(e)) from e
    except OSError as e:
        raise DatasetError(f"cannot read corpus {path}: {e}") from e
    return conversations


# LoCoMo

@dataclass
class LocomoTurn:
    dia_id: str
    speaker: str
    text: str


@dataclass
class LocomoSession:
    number: int
    date: str
    turns: List[LocomoTurn]


@dataclass
class QAPair:
    question: str
    answer: str
    category: int
    evidence: List[str]


@dataclass
class LocomoConversation:
    conv_id: str
    speakers: Tuple[str, str]
    sessions: List[LocomoSession]
    qa_pairs: List[QAPair]

    def to_record(self) -> Dict[str, Any]:
        """Normalized form; `from_normalized` reads it back."""
        return {
            "conv_id": self.conv_id,
            "speakers": list(self.speakers),
            "sessions": [
                {"number": s.number, "date": s.date, "turns": [vars(t).copy() for t in s.turns]}
                for s in self.sessions
            ],
            "qa_pairs": [vars(q).copy() for q in self.qa_pairs],
        }

    @classmethod
    def from_normalized(cls, record: Dict[str, Any]) -> "LocomoConversation":
        return cls(
            conv_id=record["conv_id"],
            speakers=tuple(record["speakers"]),
            sessions=[
                LocomoSession(s["number"], s["date"], [LocomoTurn(**t) for t in s["turns"]])
                for s in record["sessions"]
            ],
            qa_pairs=[QAPair(**q) for q in record["qa_pairs"]],
        )


def parse_locomo_date(raw: str) -> str:
    """ISO date from strings like ``1:56 pm on 8 May, 2023``; the raw string when it does not parse."""
    try:
        return datetime.strptime(raw.strip(), LOCOMO_DATE_FORMAT).date().isoformat()
    except ValueError:
        return raw.strip()


def _parse_conversation(sample: Dict[str, Any], position: int) -> LocomoConversation:
    conv_id = str(sample.get("sample_id", f"locomo-{position}"))
    body = sample.get("conversation")
    if not isinstance(body, dict):
        raise SchemaError(f"{conv_id}.conversation", "missing or not an object")
    speakers = (body.get("speaker_a"), body.get("speaker_b"))
    if not all(speakers):
        raise SchemaError(f"{conv_id}.conversation.speaker_a", "both speakers are required")

    numbers = sorted(
        int(key.split("_")[1]) for key in body
        if key.startswith("session_") and key.count("_") == 1 and key.split("_")[1].isdigit()
    )
    if not numbers:
        raise SchemaError(f"{conv_id}.conversation", "no sessions")
    if numbers != list(range(1, len(numbers) + 1)):
        raise SchemaError(f"{conv_id}.conversation", f"sessions are not numbered 1..N: {numbers}")

    sessions = []
    for number in numbers:
        date_key = f"session_{number}_date_time"
        if date_key not in body:
            raise SchemaError(f"{conv_id}.conversation.{date_key}", "missing")
        turns = []
        for pos, raw in enumerate(body[f"session_{number}"]):
            for key in ("speaker", "dia_id"):
                if key not in raw:
                    raise SchemaError(f"{conv_id}.session_{number}[{pos}].{key}", "missing")
            text = (raw.get("text") or raw.get("blip_caption") or "").strip()
            if text:
                turns.append(LocomoTurn(raw["dia_id"], raw["speaker"], text))
        if turns:
            sessions.append(LocomoSession(number, parse_locomo_date(body[date_key]), turns))

    qa_pairs = []
    for pos, qa in enumerate(sample.get("qa", [])):
        if "category" not in qa:
            raise SchemaError(f"{conv_id}.qa[{pos}].category", "missing")
        if "question" not in qa:
            raise SchemaError(f"{conv_id}.qa[{pos}].question", "missing")
        category = int(qa["category"])
        if category not in LOCOMO_CATEGORIES:
            raise SchemaError(f"{conv_id}.qa[{pos}].category", f"{category} not in 1..5")
        answer = qa.get("answer", qa.get("adversarial_answer", ""))
        qa_pairs.append(QAPair(str(qa["question"]), str(answer), category, [str(e) for e in qa.get("evidence", [])]))
    return LocomoConversation(conv_id, speakers, sessions, qa_pairs)


def load_locomo(path: str) -> List[LocomoConversation]:
    """Read a locomo10-style JSON file into normalized conversations."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            samples = json.load(f)
    except OSError as e:
        raise DatasetError(f"cannot read LoCoMo file {path}: {e}") from e
    except ValueError as e:
        raise SchemaError("file", f"not valid JSON: {e}") from e
    if not isinstance(samples, list):
        raise SchemaError("file", "expected a list of conversations")
    conversations = [_parse_conversation(sample, pos) for pos, sample in enumerate(samples)]
    logger.info(f"Loaded {len(conversations)} LoCoMo conversations from {path}")
    return conversations


def sample_qa(conv: LocomoConversation, max_per_conv: Optional[int] = None, seed: int = 42) -> List[Probe]:
    """Up to `max_per_conv` QA pairs, drawn round-robin over categories."""
    max_per_conv = max_per_conv or dataset_config.max_qa_per_conv
    rng = random.Random(f"{seed}:{conv.conv_id}:qa")
    by_category: Dict[int, List[int]] = {}
    for pos, qa in enumerate(conv.qa_pairs):
        by_category.setdefault(qa.category, []).append(pos)
    for members in by_category.values():
        rng.shuffle(members)

    chosen: List[int] = []
    while len(chosen) < max_per_conv and any(by_category.values()):
        for category in sorted(by_category):
            if by_category[category] and len(chosen) < max_per_conv:
                chosen.append(by_category[category].pop(0))

    probes = []
    for pos in sorted(chosen):
        qa = conv.qa_pairs[pos]
        probes.append(Probe(
            id=f"{conv.conv_id}-q{pos}",
            question=qa.question,
            answer=qa.answer,
            category=LOCOMO_CATEGORIES[qa.category],
            position="end",
            evidence=list(qa.evidence),
            abstain=qa.category == 5,
        ))
    return probes


def locomo_stream(conv: LocomoConversation, probes: Sequence[Probe]) -> Tuple[Conversation, int]:
    """Concatenate sessions into one stream and resolve evidence to turn indices.

    Returns the conversation and the number of probes dropped for missing evidence.
    """
    names = {conv.speakers[0]: "user", conv.speakers[1]: "assistant"}
    turns: List[Turn] = []
    dia_index: Dict[str, int] = {}
    for session in conv.sessions:
        tag = make_session_tag(session.number, session.date)
        for raw in session.turns:
            dia_index[raw.dia_id] = len(turns)
            turns.append(Turn(
                index=len(turns),
                speaker=names.get(raw.speaker, "assistant"),
                text=f"{raw.speaker}: {raw.text}",
                session_tag=tag,
            ))

    last = len(turns) - 1
    resolved, dropped = [], 0
    for probe in probes:
        needed = sorted({dia_index[e] for e in probe.evidence if e in dia_index})
        if not needed:
            dropped += 1
            continue
        resolved.append(Probe(
            id=probe.id,
            question=probe.question,
            answer=probe.answer,
            category=probe.category,
            position="end",
            after_turn=last,
            needed_turns=needed,
            fact_markers=[turns[i].text for i in needed],
            evidence=list(probe.evidence),
            abstain=probe.abstain,
        ))
    if dropped:
        logger.warning(f"{conv.conv_id}: dropped {dropped} probe(s) whose evidence is not in the stream")
    return Conversation(conv_id=conv.conv_id, turns=turns, probes=resolved, kind="locomo"), dropped


def load_locomo_corpus(path: str, max_per_conv: Optional[int] = None, seed: int = 42) -> List[Conversation]:
    conversations, total_dropped = [], 0
    for conv in load_locomo(path):
        stream, dropped = locomo_stream(conv, sample_qa(conv, max_per_conv, seed))
        conversations.append(stream)
        total_dropped += dropped
    if total_dropped:
        logger.warning(f"Dropped {total_dropped} LoCoMo probe(s) in total")
    return conversations
