"""Answer normalization and the binary correctness utility."""
from __future__ import annotations

import re

_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    text = _WS.sub(" ", text.strip().lower())
    return text[:-1].rstrip() if text.endswith(".") else text


def utility(answer: str, gold: str) -> int:
    return int(normalize_answer(answer) == normalize_answer(gold))


def has_token(text: str, tag: str) -> bool:
    """True when ``tag`` appears as a whitespace-delimited word of ``text``.

    Comparison ignores case and punctuation wrapped around the word.
    """
    tag = tag.lower()
    return any(w.strip(".,;:!?()[]{}\"'").lower() == tag for w in text.split())
