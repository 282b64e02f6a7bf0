"""Shared fixtures: a scripted in-process gateway and prompt templates."""

import threading

import pytest

from datmt.core.gateway import ChatExchange, ChatGateway
from datmt.core.generation import LanguagePair
from datmt.core.templates import PromptSet


def prompt_kind(content: str) -> str:
    """Which bundled template produced a prompt."""
    if 'numbered list' in content:
        return 'source_generation'
    if 'on a single line' in content:
        return 'target_generation'
    return 'query_translation'


def prompt_subject(content: str) -> str:
    """The sentence a prompt is about (last 'English: ... ⇒' line or 'Sentence:' line)."""
    last = content.strip().splitlines()[-1]
    if last.startswith('Sentence: '):
        return last[len('Sentence: '):]
    return last.split(': ', 1)[1].rsplit(' ⇒', 1)[0]


class ScriptedGateway(ChatGateway):
    """Answers with respond(kind, subject, content); records every prompt."""

    def __init__(self, respond):
        super().__init__()
        self.respond = respond
        self.prompts = []
        self._lock = threading.Lock()

    def _complete(self, messages, params):
        content = messages[-1]['content']
        with self._lock:
            self.prompts.append(content)
        text = self.respond(prompt_kind(content), prompt_subject(content), content)
        return ChatExchange(messages=messages, response_text=text, params=params)


def default_respond(kind, subject, content):
    """Deterministic fake LLM: numbered variations, then 'sw:' translations."""
    if kind == 'source_generation':
        words = subject.split()
        lines = [f"{i}. {' '.join(words[:max(1, len(words) - i % 3)])} variant {i}"
                 for i in range(1, 11)]
        return 'Here are the sentences:\n' + '\n'.join(lines)
    return f"sw: {subject}"


@pytest.fixture
def prompts():
    return PromptSet.load()


@pytest.fixture
def langs():
    return LanguagePair(source='English', target='Swahili')


@pytest.fixture
def scripted_gateway():
    return ScriptedGateway(default_respond)
