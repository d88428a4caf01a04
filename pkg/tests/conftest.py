from __future__ import annotations

import copy
from pathlib import Path

import pytest
import yaml

from claimflow.content import bundled_pack_dir, load_packs
from claimflow.harness import DEFAULT_REFERENCE_TIME
from claimflow.messaging import LOOPBACK_CAPABILITIES
from claimflow.service import ChatService, ServiceConfig

REFERENCE_TIME = DEFAULT_REFERENCE_TIME


@pytest.fixture(scope="session")
def packs():
    return load_packs(bundled_pack_dir())


@pytest.fixture()
def make_service(tmp_path):
    """Factory for services over the bundled packs with the frozen clock."""

    def factory(default_language="en", storage=None, pack_path=None, threshold=None):
        return ChatService(
            ServiceConfig(
                pack_path=pack_path or bundled_pack_dir(),
                storage_path=storage,
                default_language=default_language,
                fallback_threshold=threshold,
                reference_time=REFERENCE_TIME,
            )
        )

    return factory


class Conversation:
    """Drives one user's conversation through a service over loopback."""

    def __init__(self, service: ChatService, user_id: str = "u1", language: str = "en"):
        self.service = service
        self.user_id = user_id
        self.language = language

    def say(self, text: str):
        return self._send({"text": text})

    def choose(self, choice_id: str):
        return self._send({"choice_id": choice_id})

    def media(self, uri: str):
        return self._send({"media_uri": uri})

    def _send(self, payload: dict):
        raw = {"user_id": self.user_id, "channel": "loopback", **payload}
        return self.service.process_wire(
            raw, "loopback", LOOPBACK_CAPABILITIES, language_hint=self.language
        )

    def context(self):
        return self.service.store.load_context(self.user_id)


@pytest.fixture()
def converse(make_service):
    def factory(language="en", user_id="u1", service=None):
        return Conversation(service or make_service(language), user_id=user_id, language=language)

    return factory


def texts_of(actions) -> str:
    return " | ".join([a.text for a in actions if a.text] + [c.label for a in actions for c in a.choices])


@pytest.fixture(scope="session")
def marker_pack_dir(tmp_path_factory) -> Path:
    """A German pack whose template strings carry disjoint formality markers.

    Required placeholders are preserved so realization still works; every
    realized string then proves which formality variant it came from.
    """
    raw = yaml.safe_load((bundled_pack_dir() / "de.yaml").read_text(encoding="utf-8"))
    templates = raw["templates"]
    for key, entry in templates.items():
        params = entry.get("params", [])
        suffix = "".join(" {" + p + "}" for p in params)
        new_entry = {
            "formal": [f"MARKER_FORMAL {key}{suffix}"],
            "informal": [f"MARKER_INFORMAL {key}{suffix}"],
        }
        if params:
            new_entry["params"] = params
        templates[key] = new_entry
    out_dir = tmp_path_factory.mktemp("marker_pack")
    (out_dir / "de.yaml").write_text(
        yaml.safe_dump(copy.deepcopy(raw), allow_unicode=True), encoding="utf-8"
    )
    return out_dir
