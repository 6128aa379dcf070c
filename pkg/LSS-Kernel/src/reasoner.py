"""
reasoner.py - The uniform reasoning engine behind every Execute step.

A reasoner answers ``respond(view_text, intent_text, history_digest)`` with
an Output, and scores (query, text) pairs for lenses and routers. Actions
are declared inside the output text:

    ACTION: <tool> <args>
    WRITE: <artifact-id>
    <new body lines>
    END WRITE
    RATIONALE: <why>
    INTENT: <next instruction> [@agent-id]
    UNCONFIDENT
"""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import requests

from config import LssSettings, load_settings
from utils import InputError, LssError, lexical_tokens, overlap_score

logger = logging.getLogger(__name__)

Scorer = Callable[[str, str], float]

WRITE_TOOL = "WRITE"
END_WRITE = "END WRITE"


class ReasonerError(LssError):
    """The reasoner could not produce an output."""
    pass


class MalformedTranscript(InputError):
    pass


@dataclass(frozen=True)
class Action:
    tool: str
    args: str = ""
    body: Optional[str] = None


@dataclass(frozen=True)
class Output:
    text: str
    environment_feedback: str = ""
    actions: Tuple[Action, ...] = ()

    @classmethod
    def from_text(cls, text: str) -> "Output":
        return cls(text=text, actions=tuple(parse_actions(text)))

    def with_feedback(self, feedback: str) -> "Output":
        return replace(self, environment_feedback=feedback)


def parse_actions(text: str) -> List[Action]:
    """ACTION and WRITE declarations in order of appearance."""
    actions: List[Action] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("ACTION:"):
            tool, _, args = line[len("ACTION:"):].strip().partition(" ")
            actions.append(Action(tool=tool, args=args.strip()))
        elif line.startswith("WRITE:"):
            target = line[len("WRITE:"):].strip()
            body: List[str] = []
            i += 1
            while i < len(lines) and lines[i] != END_WRITE:
                body.append(lines[i])
                i += 1
            actions.append(Action(tool=WRITE_TOOL, args=target, body="".join(b + "\n" for b in body)))
        i += 1
    return actions


def rationale_of(text: str) -> Optional[str]:
    for line in text.splitlines():
        if line.startswith("RATIONALE:"):
            return line[len("RATIONALE:"):].strip() or None
    return None


def is_unconfident(text: str) -> bool:
    return any(line.strip() == "UNCONFIDENT" for line in text.splitlines())


class Reasoner(ABC):
    name = "abstract"

    @abstractmethod
    def respond(self, view_text: str, intent_text: str, history_digest: str) -> Output:
        pass

    def score(self, query: str, text: str) -> float:
        return overlap_score(query, text)

    def scorer_for(self, texts: Sequence[str]) -> Scorer:
        """Scorer specialised to one candidate pool; lexical reasoners ignore the pool."""
        return self.score

    def fresh(self) -> "Reasoner":
        """A copy with replay state reset; stateless reasoners return themselves."""
        return self


class LexicalReasoner(Reasoner):
    """Extractive: answers with the view lines that best overlap the intent."""

    name = "lexical"

    def __init__(self, max_lines: int = 3):
        self.max_lines = max_lines

    def respond(self, view_text: str, intent_text: str, history_digest: str) -> Output:
        lines = [l for l in view_text.splitlines() if l.strip() and not l.startswith("### ")]
        scored = [(overlap_score(intent_text, l), i) for i, l in enumerate(lines)]
        best = sorted((s for s in scored if s[0] > 0), key=lambda s: (-s[0], s[1]))[:self.max_lines]
        if not best:
            return Output(text="no relevant context")
        return Output.from_text("\n".join(lines[i] for _, i in sorted(best, key=lambda s: s[1])))


@dataclass
class Transcript:
    responses: List[str]
    alternates: Dict[int, List[str]] = field(default_factory=dict)
    fragments: List[str] = field(default_factory=list)
    score_weights: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_json(cls, data: Any) -> "Transcript":
        if isinstance(data, list):
            data = {"responses": data}
        if not isinstance(data, dict) or not isinstance(data.get("responses"), list):
            raise MalformedTranscript("Transcript needs a 'responses' list")
        try:
            return cls(
                responses=[str(r) for r in data["responses"]],
                alternates={int(k): [str(a) for a in v] for k, v in data.get("alternates", {}).items()},
                fragments=[str(f) for f in data.get("fragments", [])],
                score_weights={str(k).lower(): float(v) for k, v in data.get("score_weights", {}).items()},
            )
        except (TypeError, ValueError, AttributeError) as e:
            raise MalformedTranscript(f"Bad transcript: {e}")

    @classmethod
    def load(cls, path: Path) -> "Transcript":
        path = Path(path)
        if not path.exists():
            raise MalformedTranscript(f"Transcript not found: {path}")
        try:
            return cls.from_json(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise MalformedTranscript(f"{path}: {e}")

    def to_json(self) -> Dict[str, Any]:
        return {
            "responses": list(self.responses),
            "alternates": {str(k): list(v) for k, v in sorted(self.alternates.items())},
            "fragments": list(self.fragments),
            "score_weights": dict(self.score_weights),
        }


class ScriptedReasoner(Reasoner):
    """Replays canned responses keyed by step index; past the end it answers empty."""

    name = "scripted"

    def __init__(self, transcript: Transcript):
        self.transcript = transcript
        self.cursor = 0

    @classmethod
    def from_responses(cls, responses: Sequence[str], **extra: Any) -> "ScriptedReasoner":
        return cls(Transcript(responses=list(responses), **extra))

    def respond(self, view_text: str, intent_text: str, history_digest: str) -> Output:
        index = self.cursor
        self.cursor += 1
        if index >= len(self.transcript.responses):
            return Output(text="")
        return Output.from_text(self.transcript.responses[index])

    def score(self, query: str, text: str) -> float:
        weights = self.transcript.score_weights
        if not weights:
            return overlap_score(query, text)
        return sum(weights.get(t, 1.0) for t in lexical_tokens(query) & lexical_tokens(text))

    def fresh(self) -> "ScriptedReasoner":
        return ScriptedReasoner(self.transcript)


class RemoteReasoner(Reasoner):
    """
    One POST per step: ``{view_text, intent_text, history_digest}`` in,
    ``{text, actions[]}`` out.
    """

    name = "remote"

    def __init__(self, url: str, api_key: Optional[str] = None, timeout: int = 120):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def _get_headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def respond(self, view_text: str, intent_text: str, history_digest: str) -> Output:
        payload = {"view_text": view_text, "intent_text": intent_text, "history_digest": history_digest}
        try:
            response = requests.post(self.url, json=payload, headers=self._get_headers(), timeout=self.timeout)
            response.raise_for_status()
            data = response.json()
        except requests.exceptions.RequestException as e:
            logger.error(f"Remote reasoner call failed: {e}")
            raise ReasonerError(f"Remote reasoner call failed: {e}")
        except ValueError as e:
            raise ReasonerError(f"Remote reasoner returned invalid JSON: {e}")

        text = str(data.get("text", ""))
        declared = [_action_from_wire(a) for a in data.get("actions", [])]
        return Output(text=text, actions=tuple(declared or parse_actions(text)))


def _action_from_wire(raw: Any) -> Action:
    if isinstance(raw, Mapping):
        return Action(tool=str(raw.get("tool", "")), args=str(raw.get("args", "")), body=raw.get("body"))
    tool, _, args = str(raw).strip().partition(" ")
    return Action(tool=tool, args=args.strip())


CHAT_PROMPT = """You are one step of an agent. Use only the context below.

{view_text}
Intent: {intent_text}

Declare side effects on their own lines:
ACTION: <tool> <args>
WRITE: <artifact-id> ... END WRITE (with a RATIONALE: line)
INTENT: <next instruction> [@agent-id]
Write UNCONFIDENT if the context is not enough.
"""


class ChatReasoner(Reasoner):
    """ChatOpenAI-backed reasoner; the client is built lazily on first use."""

    name = "chat"

    def __init__(self, model: str = "gpt-4o-mini", base_url: Optional[str] = None, api_key: Optional[str] = None, **kwargs: Any):
        self.model = model
        self.base_url = base_url
        self.api_key = api_key
        self.kwargs = kwargs
        self._client = None

    @property
    def client(self):
        if self._client is None:
            from langchain_openai import ChatOpenAI

            kwargs = dict(self.kwargs)
            if self.base_url:
                kwargs["base_url"] = self.base_url
            if self.api_key:
                kwargs["api_key"] = self.api_key
            self._client = ChatOpenAI(model=self.model, temperature=0, **kwargs)
        return self._client

    def respond(self, view_text: str, intent_text: str, history_digest: str) -> Output:
        prompt = CHAT_PROMPT.format(view_text=view_text, intent_text=intent_text)
        try:
            message = self.client.invoke(prompt)
        except Exception as e:
            raise ReasonerError(f"Chat model {self.model} failed: {e}")
        return Output.from_text(str(message.content))


class Bm25Reasoner(LexicalReasoner):
    """Extractive answers like the lexical reasoner, BM25 scoring over a pool."""

    name = "bm25"

    def scorer_for(self, texts: Sequence[str]) -> Scorer:
        from rank_bm25 import BM25Okapi

        corpus = [sorted(lexical_tokens(t)) for t in texts]
        if not any(corpus):
            return self.score
        # BM25Okapi divides by the average document length
        bm25 = BM25Okapi([doc or ["_"] for doc in corpus])
        positions: Dict[str, int] = {}
        for i, text in enumerate(texts):
            positions.setdefault(text, i)
        cache: Dict[str, List[float]] = {}

        def score(query: str, text: str) -> float:
            index = positions.get(text)
            if index is None:
                return float(overlap_score(query, text))
            if query not in cache:
                cache[query] = list(bm25.get_scores(sorted(lexical_tokens(query))))
            return float(cache[query][index])

        return score


def build_reasoner(spec: str, settings: Optional[LssSettings] = None) -> Reasoner:
    """
    ``lexical`` | ``bm25`` | ``scripted:<path>`` | ``remote:<url>`` | ``chat:<model>``

    Raises:
        InputError: unknown reasoner kind.
    """
    settings = settings or load_settings()
    kind, _, arg = spec.partition(":")
    if kind == "lexical":
        return LexicalReasoner()
    if kind == "bm25":
        return Bm25Reasoner()
    if kind == "scripted":
        return ScriptedReasoner(Transcript.load(Path(arg)))
    if kind == "remote":
        url = arg or settings.remote_url
        if not url:
            raise InputError("remote reasoner needs a URL (remote:<url> or LSS_REMOTE_URL)")
        return RemoteReasoner(url, api_key=settings.remote_api_key, timeout=settings.remote_timeout)
    if kind == "chat":
        return ChatReasoner(model=arg or settings.chat_model, api_key=settings.remote_api_key)
    raise InputError(f"Unknown reasoner: {spec}")
