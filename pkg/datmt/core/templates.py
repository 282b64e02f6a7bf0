"""
Prompt templates.

Templates are UTF-8 text files named <name>.txt, loaded from the package's
templates/ directory or from a user-supplied directory. Placeholders use
str.format syntax; only these names are allowed:

    {query} {m} {source_lang} {target_lang} {source} {demonstrations}

{demonstrations} expands to a numbered block of "source ⇒ target" lines,
or to nothing for zero-shot prompts.
"""

import logging
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE_DIR = Path(__file__).resolve().parent.parent / 'templates'

PLACEHOLDERS = frozenset({'query', 'm', 'source_lang', 'target_lang', 'source', 'demonstrations'})

SOURCE_GENERATION = 'source_generation'
TARGET_GENERATION = 'target_generation'
QUERY_TRANSLATION = 'query_translation'

# Template name -> placeholders it must reference
REQUIRED_PLACEHOLDERS: Dict[str, FrozenSet[str]] = {
    SOURCE_GENERATION: frozenset({'query', 'm', 'source_lang'}),
    TARGET_GENERATION: frozenset({'source', 'source_lang', 'target_lang', 'demonstrations'}),
    QUERY_TRANSLATION: frozenset({'query', 'source_lang', 'target_lang', 'demonstrations'}),
}

ARROW = '⇒'


class TemplateError(Exception):
    """Raised for missing or invalid template assets."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def placeholders(self) -> FrozenSet[str]:
        try:
            return frozenset(field for _, field, _, _ in string.Formatter().parse(self.body)
                             if field is not None)
        except ValueError as e:
            raise TemplateError(f"Template {self.name}: {e}")

    def validate(self):
        """Check placeholders are known and the role's required ones are present.

        Raises:
            TemplateError: on unknown or missing placeholders
        """
        found = self.placeholders()
        unknown = found - PLACEHOLDERS
        if unknown:
            raise TemplateError(f"Template {self.name}: unknown placeholders {sorted(unknown)}")
        missing = REQUIRED_PLACEHOLDERS.get(self.name, frozenset()) - found
        if missing:
            raise TemplateError(f"Template {self.name}: missing placeholders {sorted(missing)}")

    def render(self, **values) -> str:
        values = {key: values.get(key, '') for key in PLACEHOLDERS}
        return self.body.format(**values).rstrip()


def format_demonstrations(pairs: Sequence, source_lang: str, target_lang: str) -> str:
    """Numbered example block for a prompt; empty string when there are no pairs.

    Args:
        pairs: Objects with .source and .target
        source_lang: Source language name
        target_lang: Target language name
    """
    if not pairs:
        return ''
    lines = ['Examples:']
    for i, pair in enumerate(pairs, start=1):
        lines.append(f"{i}. {source_lang}: {pair.source} {ARROW} {target_lang}: {pair.target}")
    return '\n'.join(lines) + '\n\n'


def _user(content: str) -> List[Dict[str, str]]:
    return [{'role': 'user', 'content': content}]


class PromptSet:
    """The three templates of a run, rendered into chat messages."""

    def __init__(self, templates: Dict[str, PromptTemplate], template_dir: Optional[Path] = None):
        for name in REQUIRED_PLACEHOLDERS:
            if name not in templates:
                raise TemplateError(f"Missing template {name}")
            templates[name].validate()
        self.templates = templates
        self.template_dir = template_dir

    @classmethod
    def load(cls, template_dir: Optional[Path] = None) -> 'PromptSet':
        """Load and validate templates.

        Args:
            template_dir: Directory with <name>.txt files (default: bundled)

        Raises:
            TemplateError: if a file is missing, unreadable or invalid
        """
        directory = Path(template_dir) if template_dir else DEFAULT_TEMPLATE_DIR
        templates = {}
        for name in REQUIRED_PLACEHOLDERS:
            path = directory / f"{name}.txt"
            try:
                body = path.read_text(encoding='utf-8')
            except (OSError, UnicodeDecodeError) as e:
                raise TemplateError(f"Cannot read template {path}: {e}")
            templates[name] = PromptTemplate(name=name, body=body)
        logger.debug(f"Loaded templates from {directory}")
        return cls(templates, template_dir=directory)

    def source_generation(self, query: str, m: int, source_lang: str) -> List[Dict[str, str]]:
        return _user(self.templates[SOURCE_GENERATION].render(
            query=query, m=m, source_lang=source_lang))

    def target_generation(self, source: str, source_lang: str, target_lang: str,
                          fixed_pairs: Sequence = ()) -> List[Dict[str, str]]:
        return _user(self.templates[TARGET_GENERATION].render(
            source=source, source_lang=source_lang, target_lang=target_lang,
            demonstrations=format_demonstrations(fixed_pairs, source_lang, target_lang)))

    def query_translation(self, query: str, source_lang: str, target_lang: str,
                          demonstrations: Sequence = ()) -> List[Dict[str, str]]:
        return _user(self.templates[QUERY_TRANSLATION].render(
            query=query, source_lang=source_lang, target_lang=target_lang,
            demonstrations=format_demonstrations(demonstrations, source_lang, target_lang)))
