"""Platform-independent message format and channel plumbing.

The dialog engine only ever sees :class:`ChatMessage` and emits
:class:`ChatAction`. Everything messenger-specific is reduced to a
:class:`ChannelCapabilities` record plus :func:`degrade_action`, so a new
channel is one thin adapter away and no conversation state ever lives
inside an external messaging service.
"""

from __future__ import annotations

import posixpath
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, TextIO
from urllib.parse import urlsplit

MEDIA_KINDS = ("image", "audio", "other")
ACTION_KINDS = ("send_text", "send_choices", "typing_on", "request_media", "store_claim")

_IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".gif", ".webp", ".bmp"}
_AUDIO_EXTENSIONS = {".mp3", ".ogg", ".oga", ".wav", ".m4a", ".opus", ".flac"}

CHOICE_DEGRADE_INSTRUCTION = "Reply with a number."


class MessagingError(Exception):
    """Base class for wire-level message errors."""


class MalformedPayload(MessagingError):
    """The raw payload violates the channel's wire schema."""


class EmptyMessage(MessagingError):
    """A text payload is empty after trimming whitespace."""


@dataclass(frozen=True)
class TextPayload:
    text: str


@dataclass(frozen=True)
class MediaPayload:
    kind: str
    uri: str


@dataclass(frozen=True)
class ChoicePayload:
    choice_id: str


Payload = TextPayload | MediaPayload | ChoicePayload


@dataclass(frozen=True)
class ChatMessage:
    """One inbound user message, normalized from any channel."""

    channel_id: str
    user_id: str
    message_id: str
    received_at: datetime
    payload: Payload

    def __post_init__(self) -> None:
        if not self.user_id:
            raise MalformedPayload("user_id must be non-empty")
        if not self.channel_id:
            raise MalformedPayload("channel_id must be non-empty")
        if isinstance(self.payload, TextPayload) and not self.payload.text.strip():
            raise EmptyMessage("text payload is empty after trimming")
        if isinstance(self.payload, MediaPayload) and self.payload.kind not in MEDIA_KINDS:
            raise MalformedPayload(f"unknown media kind {self.payload.kind!r}")


@dataclass(frozen=True)
class Choice:
    choice_id: str
    label: str


@dataclass(frozen=True)
class ChatAction:
    """One outbound bot action, dispatched by an adapter in list order."""

    kind: str
    text: str | None = None
    choices: tuple[Choice, ...] = ()
    claim_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind == "send_text" and not (self.text and self.text.strip()):
            raise ValueError("send_text requires non-empty text")
        if self.kind == "send_choices":
            ids = [c.choice_id for c in self.choices]
            if len(ids) < 2:
                raise ValueError("send_choices requires at least 2 choices")
            if len(set(ids)) != len(ids):
                raise ValueError("send_choices requires unique choice ids")
        if self.kind == "typing_on" and (self.text or self.choices or self.claim_id):
            raise ValueError("typing_on carries no other fields")


def send_text(text: str) -> ChatAction:
    return ChatAction(kind="send_text", text=text)


def send_choices(text: str, choices: list[Choice] | tuple[Choice, ...]) -> ChatAction:
    return ChatAction(kind="send_choices", text=text, choices=tuple(choices))


def typing_on() -> ChatAction:
    return ChatAction(kind="typing_on")


def store_claim(claim_id: str) -> ChatAction:
    return ChatAction(kind="store_claim", claim_id=claim_id)


@dataclass(frozen=True)
class ChannelCapabilities:
    supports_choices: bool
    supports_typing: bool


WEB_CAPABILITIES = ChannelCapabilities(supports_choices=True, supports_typing=True)
CONSOLE_CAPABILITIES = ChannelCapabilities(supports_choices=False, supports_typing=False)
LOOPBACK_CAPABILITIES = ChannelCapabilities(supports_choices=True, supports_typing=True)


def media_kind_from_uri(uri: str) -> str:
    ext = posixpath.splitext(urlsplit(uri).path)[1].lower()
    if ext in _IMAGE_EXTENSIONS:
        return "image"
    if ext in _AUDIO_EXTENSIONS:
        return "audio"
    return "other"


def normalize_incoming(
    raw: dict,
    channel_id: str,
    *,
    received_at: datetime,
    generated_message_id: str,
) -> ChatMessage:
    """Turn a channel wire payload into a ChatMessage.

    ``raw`` follows the web wire schema: exactly one of ``text``,
    ``choice_id`` or ``media_uri`` must be present. The channel's own
    message id is preserved when given, otherwise ``generated_message_id``
    is used (the service derives it from the per-user turn counter so
    transcripts stay deterministic).
    """
    if not isinstance(raw, dict):
        raise MalformedPayload("payload must be a mapping")
    user_id = raw.get("user_id")
    if not isinstance(user_id, str) or not user_id:
        raise MalformedPayload("user_id must be a non-empty string")
    declared_channel = raw.get("channel")
    if declared_channel is not None and declared_channel != channel_id:
        raise MalformedPayload(
            f"channel mismatch: payload says {declared_channel!r}, adapter is {channel_id!r}"
        )

    variants = [k for k in ("text", "choice_id", "media_uri") if raw.get(k) is not None]
    if len(variants) != 1:
        raise MalformedPayload(
            "exactly one of text, choice_id or media_uri must be present"
        )
    key = variants[0]
    value = raw[key]
    if not isinstance(value, str):
        raise MalformedPayload(f"{key} must be a string")

    payload: Payload
    if key == "text":
        if not value.strip():
            raise EmptyMessage("text is empty after trimming")
        payload = TextPayload(text=value)
    elif key == "choice_id":
        if not value:
            raise MalformedPayload("choice_id must be non-empty")
        payload = ChoicePayload(choice_id=value)
    else:
        if not value:
            raise MalformedPayload("media_uri must be non-empty")
        payload = MediaPayload(kind=media_kind_from_uri(value), uri=value)

    message_id = raw.get("message_id")
    if message_id is not None and not isinstance(message_id, str):
        raise MalformedPayload("message_id must be a string")
    return ChatMessage(
        channel_id=channel_id,
        user_id=user_id,
        message_id=message_id or generated_message_id,
        received_at=received_at,
        payload=payload,
    )


def message_to_wire(message: ChatMessage) -> dict:
    """Re-encode a ChatMessage to the inbound web wire schema."""
    wire: dict = {"user_id": message.user_id, "channel": message.channel_id}
    if isinstance(message.payload, TextPayload):
        wire["text"] = message.payload.text
    elif isinstance(message.payload, ChoicePayload):
        wire["choice_id"] = message.payload.choice_id
    else:
        wire["media_uri"] = message.payload.uri
    return wire


def action_to_wire(action: ChatAction) -> dict:
    wire: dict = {"kind": action.kind}
    if action.text is not None:
        wire["text"] = action.text
    if action.choices:
        wire["choices"] = [
            {"choice_id": c.choice_id, "label": c.label} for c in action.choices
        ]
    return wire


def degrade_action(action: ChatAction, caps: ChannelCapabilities) -> list[ChatAction]:
    """Map an action onto what the channel can actually render.

    Channels without choice buttons get a numbered text list plus an
    instruction to reply with the number; channels without a typing
    indicator simply drop typing_on. Everything else passes through.
    """
    if action.kind == "send_choices" and not caps.supports_choices:
        lines = [f"{i}) {c.label}" for i, c in enumerate(action.choices, start=1)]
        listing = "\n".join(lines) + "\n" + CHOICE_DEGRADE_INSTRUCTION
        if action.text:
            listing = action.text + "\n" + listing
        return [send_text(listing)]
    if action.kind == "typing_on" and not caps.supports_typing:
        return []
    return [action]


def degrade_all(actions: list[ChatAction], caps: ChannelCapabilities) -> list[ChatAction]:
    out: list[ChatAction] = []
    for action in actions:
        out.extend(degrade_action(action, caps))
    return out


@dataclass
class LoopbackChannel:
    """In-process adapter used by tests and the evaluation harness.

    Collects every dispatched action per user, in dispatch order, and
    fabricates wire payloads exactly like a remote channel would.
    """

    channel_id: str = "loopback"
    capabilities: ChannelCapabilities = LOOPBACK_CAPABILITIES
    sent: dict[str, list[ChatAction]] = field(default_factory=dict)

    def wire_text(self, user_id: str, text: str) -> dict:
        return {"user_id": user_id, "channel": self.channel_id, "text": text}

    def wire_choice(self, user_id: str, choice_id: str) -> dict:
        return {"user_id": user_id, "channel": self.channel_id, "choice_id": choice_id}

    def wire_media(self, user_id: str, uri: str) -> dict:
        return {"user_id": user_id, "channel": self.channel_id, "media_uri": uri}

    def dispatch(self, user_id: str, actions: list[ChatAction]) -> None:
        self.sent.setdefault(user_id, []).extend(actions)


def render_console_action(action: ChatAction) -> str | None:
    if action.kind == "send_text":
        return action.text
    if action.kind == "store_claim":
        return f"[claim stored: {action.claim_id}]"
    return None


def console_loop(
    process: Callable[[dict, str], list[ChatAction]],
    *,
    input_stream: TextIO,
    output_stream: TextIO,
    user_id: str = "console",
) -> None:
    """Line-oriented REPL over the message pipeline.

    Each input line becomes a text message for a fixed user; replies are
    printed in action order after degrading to console capabilities
    (no buttons, no typing indicator). Ends cleanly on EOF.
    """
    channel_id = "console"
    while True:
        try:
            output_stream.write("you> ")
            output_stream.flush()
            line = input_stream.readline()
        except KeyboardInterrupt:  # pragma: no cover - interactive only
            break
        if line == "":
            break
        if not line.strip():
            continue
        raw = {"user_id": user_id, "channel": channel_id, "text": line.strip()}
        actions = process(raw, channel_id)
        for action in degrade_all(actions, CONSOLE_CAPABILITIES):
            rendered = render_console_action(action)
            if rendered is not None:
                output_stream.write(f"bot> {rendered}\n")
        output_stream.flush()
    output_stream.write("bye.\n")
    output_stream.flush()
