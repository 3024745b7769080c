"""Failure-driven skill evolution: diagnose failures, then Modify or Create skills."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from typing import Literal, Protocol, Sequence

from .answers import has_token
from .llm import ChatClient
from .skill_bank import FailureRecord, Skill, SkillBank
from .tasks import Query

log = logging.getLogger(__name__)

LESSON_LIMIT = 512
PLACEHOLDER_LESSON = "diagnosis unavailable"
_LESSON_TAG = re.compile(r"missing category:\s*(\S+)")


@dataclass(frozen=True)
class EvolutionAction:
    kind: Literal["Modify", "Create"]
    trigger: str
    strategy: str
    target: int | None = None      # Modify only
    created_id: int | None = None  # filled in once a Create is applied


class DesignerBackend(Protocol):
    def propose(self, skill: Skill, failures: Sequence[FailureRecord],
                bank: SkillBank) -> EvolutionAction | None: ...

    def diagnose(self, query: Query, predicted: str, skill: Skill) -> str: ...


class MockDesigner:
    """Deterministic rule-based designer for synthetic tasks.

    Lessons read ``missing category: <tag>``. The most frequent tag (ties to
    the lexicographically smaller) is appended to this skill's trigger if some
    other skill already covers it, otherwise a new skill is created for it.
    """

    def diagnose(self, query: Query, predicted: str, skill: Skill) -> str:
        return f"missing category: {query.category}"

    def propose(self, skill, failures, bank):
        tags = Counter(m.group(1) for f in failures if (m := _LESSON_TAG.search(f.lesson)))
        if not tags:
            return None
        tag = min(tags, key=lambda t: (-tags[t], t))
        covered = any(has_token(other.trigger, tag) for other in bank if other.id != skill.id)
        if covered:
            return EvolutionAction("Modify", f"{skill.trigger} {tag}", skill.strategy, target=skill.id)
        return EvolutionAction("Create", f"handles {tag} questions",
                               f"focus on {tag}; verify against image evidence")


DESIGNER_SYSTEM = (
    "You maintain a library of visual reasoning skills. Given a skill and its recent "
    "failures, reply with only a JSON object {\"kind\": \"Modify\" or \"Create\", "
    "\"trigger\": ..., \"strategy\": ...}. Use Modify when the skill's trigger or "
    "strategy is imprecise, Create when the failures expose a sub-task no skill covers."
)


class ChatDesigner:
    def __init__(self, client: ChatClient) -> None:
        self.client = client

    def diagnose(self, query: Query, predicted: str, skill: Skill) -> str:
        return self.client.complete(
            f"Skill trigger: {skill.trigger}\nSkill strategy: {skill.strategy}\n"
            f"Question: {query.question}\nImage: {query.image_ref}\n"
            f"Predicted: {predicted}\nCorrect: {query.gold}\n"
            "In one short paragraph, explain why the skill failed.")

    def propose(self, skill, failures, bank):
        evidence = "\n".join(
            f"- question: {f.question} | predicted: {f.predicted} | gold: {f.gold} | lesson: {f.lesson}"
            for f in failures)
        reply = self.client.complete(
            f"Skill trigger: {skill.trigger}\nSkill strategy: {skill.strategy}\nFailures:\n{evidence}",
            system=DESIGNER_SYSTEM)
        return parse_action(reply, skill.id)


def parse_action(reply: str, skill_id: int) -> EvolutionAction | None:
    """Strict JSON parse of a designer reply; anything else is rejected."""
    try:
        obj = json.loads(reply)
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    kind, trigger, strategy = obj.get("kind"), obj.get("trigger"), obj.get("strategy")
    if kind not in ("Modify", "Create") or not isinstance(trigger, str) or not isinstance(strategy, str):
        return None
    if not trigger.strip() or not strategy.strip():
        return None
    return EvolutionAction(kind, trigger.strip(), strategy.strip(),
                           target=skill_id if kind == "Modify" else None)


def diagnose(query: Query, predicted: str, skill: Skill, backend: DesignerBackend) -> str:
    try:
        lesson = backend.diagnose(query, predicted, skill)
    except Exception as exc:  # noqa: BLE001 - diagnosis is best effort
        log.warning("diagnosis failed for skill %s: %s", skill.id, exc)
        return PLACEHOLDER_LESSON
    lesson = " ".join(str(lesson).split())
    return lesson[:LESSON_LIMIT] or PLACEHOLDER_LESSON


def _valid(action: EvolutionAction | None, skill: Skill, bank: SkillBank) -> bool:
    if action is None:
        return False
    if action.kind == "Modify":
        return action.target == skill.id and action.target in bank
    return bool(action.trigger) and all(s.trigger != action.trigger for s in bank)


def evolve(bank: SkillBank, tau_f: int, backend: DesignerBackend) -> list[EvolutionAction]:
    """One evolution round: one action per hard skill, applied in id order."""
    applied: list[EvolutionAction] = []
    with bank.lock:
        for sid in sorted(bank.hard_skills(tau_f)):
            skill = bank[sid]
            try:
                action = backend.propose(skill, list(skill.failures), bank)
            except Exception as exc:  # noqa: BLE001 - skip this skill, keep evolving others
                log.warning("designer failed on skill %s: %s", sid, exc)
                continue
            if not _valid(action, skill, bank):
                log.info("designer output for skill %s rejected: %r", sid, action)
                continue
            if action.kind == "Modify":
                bank.modify_skill(sid, action.trigger, action.strategy)
                applied.append(action)
            else:
                new_id = bank.add_skill(action.trigger, action.strategy)
                applied.append(EvolutionAction("Create", action.trigger, action.strategy,
                                               created_id=new_id))
    return applied
