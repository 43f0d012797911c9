"""
Prompt templates for pagebook.
"""

from typing import Dict

# System prompt for every bookmark experiment; kept verbatim.
BOOKMARK_SYSTEM_PROMPT = (
    "You are a helpful assistant. Some earlier conversation has been compressed into bookmarks "
    "like [SN(date):keywords] or [pN:keywords]. If you need specific details from a bookmark, "
    "call recall(session_ids=[N]) first. Do NOT guess details you don't have."
)

# System prompt for the baselines that see no bookmarks
BASELINE_SYSTEM_PROMPT = (
    "You are a helpful assistant. Answer the user's question using the conversation provided. "
    "If the conversation does not contain the answer, say that it was not mentioned."
)

SEARCH_SYSTEM_PROMPT = (
    "You are a helpful assistant. Older parts of the conversation are stored in memory. "
    "If you need details that are not shown, call memory_search(query=...) before answering. "
    "Do NOT guess details you don't have."
)

STUB_SECTION_PROMPT = """Compressed memory:
{stubs}"""

EARLIER_CONTEXT_PROMPT = """Earlier conversation:
{earlier}"""

RETRIEVED_CONTEXT_PROMPT = """Retrieved sessions:
{retrieved}"""

RECENT_CONTEXT_PROMPT = """Recent conversation:
{recent}"""

QUESTION_PROMPT = """Question: {question}
Answer briefly."""

# Judge prompt; the first sentence is the scoring instruction used for every run.
JUDGE_PROMPT = """Rate how well the answer addresses the question given the ground truth. Score 1–5.

Question: {question}
Ground truth: {ground_truth}
Answer: {answer}

Reply with JSON only, in the form {{"score": n}}."""

JUDGE_REPROMPT = """Your previous reply could not be parsed. Reply with JSON only, exactly in the form {{"score": n}} where n is an integer from 1 to 5."""

KEYWORD_SYSTEM_PROMPT = (
    "You write short keyword bookmarks for archived parts of a conversation. "
    "Keywords are lowercase, specific and help decide when the archived part is needed."
)

CONTEXTUAL_KEYWORDS_PROMPT = """Page p{page_id}:
{page_text}

Other pages, one line each:
{digests}

Give at most {max_k} keywords that distinguish page p{page_id} from every other page.
Reply with the keywords only, separated by commas."""

BATCH_KEYWORDS_PROMPT = """Pages:
{pages}

For every page give at most {max_k} keywords. No keyword may appear for more than one page.
Reply with one line per page in the form p<id>: kw1, kw2, ..."""

HYBRID_KEYWORDS_PROMPT = """Pages with their current keywords:
{pages}

For every page propose exactly one additional keyword that no other page has and that
distinguishes it from the rest. Reply with one line per page in the form p<id>: keyword"""

PROMPT_TEMPLATES = {
    "bookmark_system": BOOKMARK_SYSTEM_PROMPT,
    "baseline_system": BASELINE_SYSTEM_PROMPT,
    "search_system": SEARCH_SYSTEM_PROMPT,
    "stub_section": STUB_SECTION_PROMPT,
    "earlier_context": EARLIER_CONTEXT_PROMPT,
    "retrieved_context": RETRIEVED_CONTEXT_PROMPT,
    "recent_context": RECENT_CONTEXT_PROMPT,
    "question": QUESTION_PROMPT,
    "judge": JUDGE_PROMPT,
    "judge_reprompt": JUDGE_REPROMPT,
    "keyword_system": KEYWORD_SYSTEM_PROMPT,
    "keywords_contextual": CONTEXTUAL_KEYWORDS_PROMPT,
    "keywords_batch": BATCH_KEYWORDS_PROMPT,
    "keywords_hybrid": HYBRID_KEYWORDS_PROMPT,
}

def get_prompt(template_name: str, **kwargs) -> str:
    """Get a formatted prompt template."""
    if template_name not in PROMPT_TEMPLATES:
        raise ValueError(f"Unknown prompt template: {template_name}")

    template = PROMPT_TEMPLATES[template_name]
    return template.format(**kwargs)

def recall_tool(param: str = "page_ids") -> Dict:
    """Tool definition for recall; `param` is page_ids (synthetic) or session_ids (LoCoMo)."""
    return {
        "type": "function",
        "function": {
            "name": "recall",
            "description": "Retrieve the full content of bookmarked pages.",
            "parameters": {
                "type": "object",
                "properties": {
                    param: {
                        "type": "array",
                        "items": {"type": "integer"},
                        "description": "Ids of the bookmarks to expand."
                    }
                },
                "required": [param]
            }
        }
    }

def memory_search_tool() -> Dict:
    return {
        "type": "function",
        "function": {
            "name": "memory_search",
            "description": "Search older conversation sessions stored in memory.",
            "parameters": {
                "type": "object",
                "properties": {
                    "query": {"type": "string", "description": "What to look for."}
                },
                "required": ["query"]
            }
        }
    }
