"""Render role-tagged chat turns into the exact text an instruct model expects.

An instruct-finetuned model only answers well when prompted with the same
header format it was trained on, so rendering is byte-exact and golden
tested. The shipped headers use three hashes; a four-hash variant (as some
model cards print it) is available via ``OrcaMiniTemplate.four_hash()`` or
header overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

DEFAULT_SYSTEM_PROMPT = (
    "You are an AI assistant that follows instruction extremely well. "
    "Help as much as you can."
)


class PromptError(Exception):
    pass


class EmptyConversation(PromptError):
    pass


class WrongTurnOrder(PromptError):
    pass


VALID_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in VALID_ROLES:
            raise WrongTurnOrder(f"unknown role {self.role!r}")
        if self.role != "system" and not self.content.strip():
            raise WrongTurnOrder(f"{self.role} message must be non-empty")


@dataclass(frozen=True)
class OrcaMiniTemplate:
    system_header: str = "### System:"
    user_header: str = "### User:"
    response_header: str = "### Response:"
    default_system: str = DEFAULT_SYSTEM_PROMPT
    content_prefix: str = ""  # set to " " for the leading-space variant

    name = "orca-mini"

    def __post_init__(self):
        if not (self.system_header and self.user_header and self.response_header):
            raise PromptError("template headers must be non-empty")

    @classmethod
    def four_hash(cls) -> "OrcaMiniTemplate":
        return cls(
            system_header="#### System:",
            user_header="#### User:",
            response_header="#### Response:",
        )

    def with_overrides(self, **kwargs) -> "OrcaMiniTemplate":
        return replace(self, **kwargs)

    def render(self, messages: list[ChatMessage]) -> str:
        if not messages:
            raise EmptyConversation("no messages to render")
        msgs = list(messages)
        system = self.default_system
        if msgs[0].role == "system":
            head = msgs.pop(0)
            if head.content.strip():
                system = head.content
        if any(m.role == "system" for m in msgs):
            raise WrongTurnOrder("system message only allowed in first position")
        if not msgs or msgs[-1].role != "user":
            raise WrongTurnOrder("conversation must end with a user message")
        for i, m in enumerate(msgs):
            expected = "user" if i % 2 == 0 else "assistant"
            if m.role != expected:
                raise WrongTurnOrder(
                    f"message {i} must be {expected!r} in alternating order, got {m.role!r}"
                )

        p = self.content_prefix
        parts = [f"{self.system_header}\n{p}{system}"]
        for m in msgs:
            header = self.user_header if m.role == "user" else self.response_header
            parts.append(f"{header}\n{p}{m.content}")
        rendered = "\n\n".join(parts)
        return f"{rendered}\n\n{self.response_header}\n"


@dataclass(frozen=True)
class RawTemplate:
    """Passes a single message's content through verbatim."""

    name = "raw"

    def render(self, messages: list[ChatMessage]) -> str:
        if not messages:
            raise EmptyConversation("no messages to render")
        if len(messages) != 1:
            raise WrongTurnOrder("raw template takes exactly one message")
        return messages[0].content


ChatTemplate = OrcaMiniTemplate | RawTemplate

TEMPLATE_NAMES = ("orca-mini", "raw")


def template_by_name(name: str, **overrides) -> ChatTemplate:
    if name == "orca-mini":
        t = OrcaMiniTemplate()
        if overrides:
            t = t.with_overrides(**overrides)
        return t
    if name == "raw":
        if overrides:
            raise PromptError("raw template takes no header overrides")
        return RawTemplate()
    raise PromptError(f"unknown template {name!r}; expected one of {TEMPLATE_NAMES}")


def render(template: ChatTemplate, messages: list[ChatMessage]) -> str:
    return template.render(messages)
