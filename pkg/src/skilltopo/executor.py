"""Run the agent collective along a sampled communication DAG."""
from __future__ import annotations

import json
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Protocol, Sequence, TextIO

from .answers import has_token, utility
from .llm import BackendError, ChatClient
from .skill_bank import Skill
from .tasks import Query
from .topology import CommTopology, topo_order

PROMPT_TEMPLATE_VERSION = 1
PROMPT_TEMPLATE = (
    "SKILL\n"
    "trigger: {trigger}\n"
    "strategy: {strategy}\n"
    "QUESTION\n"
    "{question}\n"
    "IMAGE\n"
    "{image_ref}\n"
    "{teammates}"
    "YOUR ANSWER\n"
)
TEAMMATE_SECTION = "TEAMMATE {index} SAID ({length} chars)\n{response}\n"

MOCK_WRONG_ANSWER = "UNKNOWN"


class ExecutionError(RuntimeError):
    def __init__(self, agent_index: int, cause: Exception) -> None:
        super().__init__(f"agent {agent_index} failed: {cause}")
        self.agent_index = agent_index


@dataclass(frozen=True)
class AgentCall:
    agent_index: int
    skill: Skill
    query: Query
    prompt: str


class AgentBackend(Protocol):
    def respond(self, call: AgentCall) -> str: ...


@dataclass
class AgentMessage:
    agent_index: int
    skill_id: int
    prompt: str
    response: str


@dataclass
class Transcript:
    query_id: str
    topology: CommTopology
    messages: list[AgentMessage]
    final_answer: str
    reward: int
    invocations: list[int] = field(default_factory=list)
    failed_agent: int | None = None
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "query_id": self.query_id,
            "edges": sorted(self.topology.edges),
            "messages": [vars(m) for m in self.messages],
            "final_answer": self.final_answer,
            "reward": self.reward,
            "failed_agent": self.failed_agent,
            "error": self.error,
        }, ensure_ascii=False)


def build_prompt(skill: Skill, query: Query, predecessors: Sequence[tuple[int, str]]) -> str:
    # length prefix keeps the layout injective even if a response mimics a header
    teammates = "".join(TEAMMATE_SECTION.format(index=i, length=len(r), response=r)
                        for i, r in sorted(predecessors))
    return PROMPT_TEMPLATE.format(trigger=skill.trigger, strategy=skill.strategy,
                                  question=query.question, image_ref=query.image_ref,
                                  teammates=teammates)


class MockAgentBackend:
    """Answers correctly iff the skill's trigger names the task category."""

    def respond(self, call: AgentCall) -> str:
        q = call.query
        if q.category and q.gold is not None and has_token(call.skill.trigger, q.category):
            return q.gold
        return MOCK_WRONG_ANSWER


class ChatAgentBackend:
    def __init__(self, client: ChatClient) -> None:
        self.client = client

    def respond(self, call: AgentCall) -> str:
        return self.client.complete(call.prompt)


def execute(topology: CommTopology, query: Query, roster: Sequence[Skill],
            backend: AgentBackend, max_workers: int = 1,
            timeout: float | None = None) -> Transcript:
    """Invoke each agent after all its predecessors; the last agent in
    topological order gives the final answer.

    With ``max_workers > 1`` agents whose predecessors are all done run
    concurrently; ``timeout`` bounds each call in that mode.
    """
    if len(roster) != topology.n:
        raise ValueError(f"roster has {len(roster)} skills for {topology.n} agents")
    if len({s.id for s in roster}) != len(roster):
        raise ValueError("every agent must hold a distinct skill")
    order = topo_order(topology)
    preds = {j: topology.predecessors(j) for j in range(topology.n)}
    responses: dict[int, str] = {}
    prompts: dict[int, str] = {}
    invocations: list[int] = []
    log_lock = threading.Lock()

    def run(j: int) -> str:
        prompt = build_prompt(roster[j], query, [(i, responses[i]) for i in preds[j]])
        with log_lock:
            prompts[j] = prompt
            invocations.append(j)
        return backend.respond(AgentCall(j, roster[j], query, prompt))

    if max_workers <= 1:
        for j in order:
            try:
                responses[j] = run(j)
            except Exception as exc:  # noqa: BLE001 - any backend fault aborts the transcript
                raise ExecutionError(j, exc) from exc
    else:
        _run_concurrent(topology, preds, run, responses, max_workers, timeout)

    messages = [AgentMessage(j, roster[j].id, prompts[j], responses[j]) for j in order]
    final = responses[order[-1]]
    reward = utility(final, query.gold) if query.gold is not None else 0
    return Transcript(query.id, topology, messages, final, reward, invocations)


def _run_concurrent(topology, preds, run, responses, max_workers, timeout) -> None:
    remaining = {j: len(preds[j]) for j in range(topology.n)}
    succ: dict[int, list[int]] = {j: [] for j in range(topology.n)}
    for i, j in topology.edges:
        succ[i].append(j)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        running = {pool.submit(run, j): j for j in sorted(j for j, c in remaining.items() if c == 0)}
        while running:
            done, _ = wait(running, timeout=timeout, return_when=FIRST_COMPLETED)
            if not done:
                j = min(running.values())
                raise ExecutionError(j, TimeoutError(f"no response within {timeout}s"))
            for fut in sorted(done, key=lambda f: running[f]):
                j = running.pop(fut)
                try:
                    responses[j] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    raise ExecutionError(j, exc) from exc
                for w in sorted(succ[j]):
                    remaining[w] -= 1
                    if remaining[w] == 0:
                        running[pool.submit(run, w)] = w


def failed_transcript(query: Query, topology: CommTopology, err: ExecutionError) -> Transcript:
    return Transcript(query.id, topology, [], "", 0, failed_agent=err.agent_index, error=str(err))


def write_transcripts(transcripts: Sequence[Transcript], stream: TextIO) -> None:
    for t in transcripts:
        stream.write(t.to_json() + "\n")


__all__ = [
    "AgentBackend", "AgentCall", "AgentMessage", "BackendError", "ChatAgentBackend",
    "ExecutionError", "MockAgentBackend", "Transcript", "build_prompt", "execute",
    "failed_transcript", "utility", "write_transcripts",
]
