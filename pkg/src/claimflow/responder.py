"""Template-based response generation.

Callbacks produce abstract :class:`Say` replies (template key plus
parameters); the responder turns them into chat actions using the user's
language, formality and mood. Alternative phrasings rotate with the turn
counter so the bot does not repeat itself verbatim.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .messaging import ChannelCapabilities, ChatAction, send_text, typing_on

if TYPE_CHECKING:
    from .content import ContentPack

FORMALITIES = ("informal", "formal")
MOODS = ("positive", "neutral", "negative")

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


class ResponderError(Exception):
    pass


class UnknownTemplateKey(ResponderError):
    pass


class MissingRequiredParam(ResponderError):
    pass


@dataclass
class UserProfile:
    """What response generation knows about the user.

    Formality defaults to formal address until evidence flips it.
    """

    first_name: str | None = None
    formality: str = "formal"
    mood: str = "neutral"
    language: str = "de"


@dataclass(frozen=True)
class Say:
    """An abstract reply: realized into actions by the responder."""

    key: str
    params: dict[str, str] = field(default_factory=dict)


def _cleanup(text: str) -> str:
    # Collapse the gaps an empty optional placeholder leaves behind.
    text = re.sub(r"[ \t]{2,}", " ", text)
    text = re.sub(r" +([!?.,:;])", r"\1", text)
    return text.strip()


def render_template(template: str, params: dict[str, str]) -> str:
    """Single-pass placeholder substitution.

    {first_name} collapses gracefully when absent; any other missing
    placeholder is an error. Braces inside substituted values are left
    untouched (single pass), so output never contains an unsubstituted
    template placeholder.
    """

    def substitute(match: re.Match[str]) -> str:
        name = match.group(1)
        if name in params and params[name] is not None:
            return str(params[name])
        if name == "first_name":
            return ""
        raise MissingRequiredParam(f"template needs parameter {name!r}")

    return _cleanup(_PLACEHOLDER_RE.sub(substitute, template))


class Responder:
    def __init__(self, packs: dict[str, "ContentPack"]):
        self._packs = packs

    def _variants(self, pack: "ContentPack", key: str, profile: UserProfile) -> tuple[str, ...]:
        entry = pack.templates.get(key)
        if entry is None:
            raise UnknownTemplateKey(f"no template {key!r} for language {pack.language!r}")
        if profile.mood == "negative" and entry.negative_mood:
            override = entry.negative_mood.get(profile.formality)
            if override:
                return override
        return entry.variants[profile.formality]

    def realize(
        self,
        key: str,
        profile: UserProfile,
        params: dict[str, str] | None = None,
        *,
        turn: int = 0,
        caps: ChannelCapabilities | None = None,
    ) -> list[ChatAction]:
        """Realize one template key into chat actions.

        Selects the variant list for the profile's formality (with an
        optional softer override when the mood is negative), rotates
        alternatives by turn counter, substitutes parameters, and
        prepends a typing notification when the channel supports one.
        """
        pack = self._packs[profile.language]
        variants = self._variants(pack, key, profile)
        template = variants[turn % len(variants)]
        merged = dict(params or {})
        merged.setdefault("first_name", profile.first_name or "")
        text = render_template(template, merged)
        actions = [send_text(text)] if text else []
        if caps is not None and caps.supports_typing:
            return [typing_on(), *actions]
        return actions

    def realize_reply(
        self,
        replies: list[Say | ChatAction],
        profile: UserProfile,
        *,
        turn: int,
        caps: ChannelCapabilities,
    ) -> list[ChatAction]:
        """Realize a full planned reply, in order.

        Exactly one typing notification leads the reply on channels that
        support it; ready-made actions pass through unchanged.
        """
        actions: list[ChatAction] = []
        if caps.supports_typing:
            actions.append(typing_on())
        for item in replies:
            if isinstance(item, Say):
                actions.extend(self.realize(item.key, profile, item.params, turn=turn))
            else:
                actions.append(item)
        return actions


_INFORMAL_RE = re.compile(r"\b(du|dich|dir|dein\w*)\b", re.IGNORECASE)
_FORMAL_RE = re.compile(r"\b(Sie|Ihnen|Ihr\w*)\b")
_SENTENCE_START_RE = re.compile(r"(?:^|[.!?]\s*)$")


def detect_formality(raw_text: str, language: str) -> str:
    """Classify the address form of a German utterance.

    Informal tokens (du, dich, dir, dein*) signal informal address; the
    formal pronouns count only capitalized and mid-sentence, where the
    capital S/I is grammatically meaningful. Both or neither found means
    unknown (no change).
    """
    if language != "de":
        return "unknown"
    informal = bool(_INFORMAL_RE.search(raw_text))
    formal = False
    for m in _FORMAL_RE.finditer(raw_text):
        if _SENTENCE_START_RE.search(raw_text[: m.start()]):
            continue  # sentence-initial capitalization proves nothing
        formal = True
        break
    if informal == formal:
        return "unknown"
    return "informal" if informal else "formal"
