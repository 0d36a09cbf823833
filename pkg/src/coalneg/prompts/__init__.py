"""Prompt templates with strict ``$NAME`` placeholder substitution.

Templates live in ``templates/<language>/*.txt``; each file carries a small
front-matter header (id, language, placeholders, reconstructed) followed by
``[system]`` and ``[user]`` sections.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence, Union

logger = logging.getLogger(__name__)

CANONICAL_LANGUAGE = "en"
PLACEHOLDER_RE = re.compile(r"\$([A-Z][A-Z0-9]*(?:-[A-Z0-9]+)*)")


class TemplateError(ValueError):
    pass


class TemplateId(str, Enum):
    InitialQuery = "InitialQuery"
    FollowUp = "FollowUp"
    Refinement = "Refinement"
    CompromisePick = "CompromisePick"
    CompromiseFollowUp = "CompromiseFollowUp"
    StatementSelect = "StatementSelect"
    AnnotationLabel = "AnnotationLabel"
    ClassifierBaseline = "ClassifierBaseline"
    OpenNegTurn = "OpenNegTurn"
    OpenNegJudge = "OpenNegJudge"
    Critique = "Critique"


@dataclass(frozen=True)
class PromptTemplate:
    id: TemplateId
    language: str
    system_text: str
    user_text: str
    placeholders: frozenset[str]
    reconstructed: bool = False

    def __post_init__(self) -> None:
        used = set(PLACEHOLDER_RE.findall(self.system_text)) | set(PLACEHOLDER_RE.findall(self.user_text))
        if used != set(self.placeholders):
            extra = sorted(used - set(self.placeholders))
            unused = sorted(set(self.placeholders) - used)
            raise TemplateError(
                f"template {self.id.value}/{self.language}: placeholder mismatch "
                f"(undeclared: {extra}, declared but unused: {unused})")


ContextValue = Union[str, Sequence[tuple[str, str]]]


def format_list(items: Sequence[tuple[str, str]]) -> str:
    """Enumerated ``id: text`` lines."""
    return "\n".join(f"{i}. {key}: {text}" for i, (key, text) in enumerate(items, start=1))


def parse_template(text: str, source: str = "<string>") -> PromptTemplate:
    lines = text.split("\n")
    if not lines or lines[0].strip() != "---":
        raise TemplateError(f"{source}: missing front matter")
    try:
        end = lines.index("---", 1)
    except ValueError:
        raise TemplateError(f"{source}: unterminated front matter") from None
    meta: dict[str, str] = {}
    for line in lines[1:end]:
        key, sep, value = line.partition(":")
        if not sep:
            raise TemplateError(f"{source}: bad front matter line {line!r}")
        meta[key.strip()] = value.strip()
    body = "\n".join(lines[end + 1:])
    m = re.fullmatch(r"\[system\]\n(.*?)\n\[user\]\n(.*)", body, re.DOTALL)
    if not m:
        raise TemplateError(f"{source}: body needs [system] and [user] sections")
    try:
        tid = TemplateId(meta["id"])
    except (KeyError, ValueError):
        raise TemplateError(f"{source}: unknown or missing template id {meta.get('id')!r}") from None
    names = frozenset(p.strip() for p in meta.get("placeholders", "").split(",") if p.strip())
    return PromptTemplate(
        id=tid,
        language=meta.get("language", CANONICAL_LANGUAGE),
        system_text=m.group(1).rstrip("\n"),
        user_text=m.group(2).rstrip("\n"),
        placeholders=names,
        reconstructed=meta.get("reconstructed", "false").lower() == "true",
    )


class TemplateRegistry:
    """All templates keyed by (id, language); immutable after load."""

    def __init__(self, templates: Sequence[PromptTemplate], raw: Mapping[str, str] | None = None):
        self._templates = {(t.id, t.language): t for t in templates}
        if len(self._templates) != len(templates):
            raise TemplateError("duplicate (id, language) template")
        blob = "\n".join(f"{k}\n{v}" for k, v in sorted((raw or {}).items()))
        self.digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()
        # merged placeholder names; values that spell one of these get neutralized
        self.known_names = frozenset(n for t in templates for n in t.placeholders)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> TemplateRegistry:
        root = Path(directory) if directory is not None else Path(str(resources.files(__package__) / "templates"))
        templates, raw = [], {}
        for path in sorted(root.glob("*/*.txt")):
            text = path.read_text(encoding="utf-8")
            tpl = parse_template(text, str(path))
            if tpl.language != path.parent.name:
                raise TemplateError(f"{path}: language {tpl.language!r} does not match directory")
            templates.append(tpl)
            raw[f"{tpl.language}/{path.name}"] = text
        if not templates:
            raise TemplateError(f"no templates found under {root}")
        return cls(templates, raw)

    def get(self, template_id: TemplateId | str, language: str = CANONICAL_LANGUAGE) -> PromptTemplate:
        try:
            tid = TemplateId(template_id)
        except ValueError:
            raise TemplateError(f"unknown template id {template_id!r}") from None
        tpl = self._templates.get((tid, language))
        if tpl is None:
            tpl = self._templates.get((tid, CANONICAL_LANGUAGE))
            if tpl is None:
                raise TemplateError(f"no template {tid.value} for language {language!r}")
            logger.warning("no %s template for %r; using %r", tid.value, language, CANONICAL_LANGUAGE)
        return tpl

    def render(self, template_id: TemplateId | str, context: Mapping[str, ContextValue],
               language: str = CANONICAL_LANGUAGE) -> tuple[str, str]:
        tpl = self.get(template_id, language)
        values: dict[str, str] = {}
        for name in sorted(tpl.placeholders):
            if name not in context or context[name] is None:
                raise TemplateError(f"missing placeholder {name}")
            value = context[name]
            text = value if isinstance(value, str) else format_list(value)
            values[name] = self._neutralize(text)

        def sub(m: re.Match[str]) -> str:
            return values[m.group(1)]

        return PLACEHOLDER_RE.sub(sub, tpl.system_text), PLACEHOLDER_RE.sub(sub, tpl.user_text)

    def _neutralize(self, text: str) -> str:
        # keeps rendered output free of "$NAME" for any registry placeholder
        def fix(m: re.Match[str]) -> str:
            if m.group(1) in self.known_names or any(m.group(1).startswith(n) for n in self.known_names):
                logger.warning("placeholder-like token %r in value neutralized", m.group(0))
                return "＄" + m.group(1)
            return m.group(0)
        return PLACEHOLDER_RE.sub(fix, text)


_default: TemplateRegistry | None = None


def default_registry() -> TemplateRegistry:
    global _default
    if _default is None:
        _default = TemplateRegistry.load()
    return _default


def render(template_id: TemplateId | str, context: Mapping[str, ContextValue],
           language: str = CANONICAL_LANGUAGE) -> tuple[str, str]:
    return default_registry().render(template_id, context, language)
