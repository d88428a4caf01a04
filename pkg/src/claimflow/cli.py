"""Command line entry points.

The CLI is a thin client over the service: ``serve`` starts the HTTP
endpoint, ``chat`` is a console REPL (in-process, or against a running
server with ``--server``), ``simulate`` runs the scripted evaluation
suite, ``validate-content`` checks a content pack.
"""

from __future__ import annotations

import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import click

from . import claims
from .content import PackError, bundled_pack_dir, load_packs, validate_pack
from .harness import DEFAULT_REFERENCE_TIME, load_scripts, run_suite
from .messaging import CONSOLE_CAPABILITIES, ChatAction, Choice, console_loop
from .service import ChatService, ServiceConfig, create_app

logger = logging.getLogger(__name__)


def _service_config(pack: str | None, storage: str | None, lang: str, threshold: float | None) -> ServiceConfig:
    return ServiceConfig(
        pack_path=Path(pack) if pack else bundled_pack_dir(),
        storage_path=Path(storage) if storage else None,
        default_language=lang,
        fallback_threshold=threshold,
    )


def _build_service(config: ServiceConfig) -> ChatService:
    try:
        return ChatService(config)
    except Exception as exc:
        click.echo(f"startup failed: {exc}", err=True)
        sys.exit(1)


@click.group()
def main() -> None:
    """Smartphone damage-claim chatbot."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


pack_option = click.option("--pack", envvar="CLAIMFLOW_PACK", default=None, help="Content pack file or directory (default: bundled packs).")
storage_option = click.option("--storage", envvar="CLAIMFLOW_STORAGE", default=None, help="Storage directory (default: in-memory).")
lang_option = click.option("--lang", envvar="CLAIMFLOW_LANG", default="de", show_default=True, help="Default language for new users.")
threshold_option = click.option("--threshold", envvar="CLAIMFLOW_THRESHOLD", type=float, default=None, help="Override the NLU fallback threshold.")


@main.command()
@click.option("--port", envvar="CLAIMFLOW_PORT", type=int, default=8000, show_default=True)
@click.option("--host", envvar="CLAIMFLOW_HOST", default="127.0.0.1", show_default=True)
@pack_option
@storage_option
@lang_option
@threshold_option
@click.option("--frontend", envvar="CLAIMFLOW_FRONTEND", default=None, help="Directory with the built web chat client to serve at /.")
def serve(port: int, host: str, pack: str | None, storage: str | None, lang: str, threshold: float | None, frontend: str | None) -> None:
    """Run the HTTP service."""
    import uvicorn

    config = _service_config(pack, storage, lang, threshold)
    config.port = port
    service = _build_service(config)
    app = create_app(service, frontend_dir=frontend)
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@pack_option
@storage_option
@lang_option
@threshold_option
@click.option("--user", default="console", show_default=True, help="User id for this session.")
@click.option("--server", default=None, help="Talk to a running server (URL) instead of in-process.")
def chat(pack: str | None, storage: str | None, lang: str, threshold: float | None, user: str, server: str | None) -> None:
    """Interactive console chat (REPL)."""
    if server:
        import httpx

        def process(raw: dict, channel_id: str) -> list[ChatAction]:
            raw = {k: v for k, v in raw.items() if k != "channel"}
            raw["channel"] = "web"
            response = httpx.post(f"{server.rstrip('/')}/api/v1/messages", json=raw, timeout=30.0)
            response.raise_for_status()
            actions = []
            for wire in response.json()["actions"]:
                choices = tuple(
                    Choice(c["choice_id"], c["label"]) for c in wire.get("choices") or ()
                )
                actions.append(ChatAction(kind=wire["kind"], text=wire.get("text"), choices=choices))
            return actions

    else:
        service = _build_service(_service_config(pack, storage, lang, threshold))

        def process(raw: dict, channel_id: str) -> list[ChatAction]:
            return service.process_wire(raw, channel_id, CONSOLE_CAPABILITIES, language_hint=lang)

    console_loop(process, input_stream=sys.stdin, output_stream=sys.stdout, user_id=user)


@main.command()
@click.option("--scripts", default=None, help="Script file or directory (default: bundled suite).")
@pack_option
@lang_option
@threshold_option
@click.option("--report", default=None, help="Write the machine-readable JSON report here.")
@click.option("--parallel", is_flag=True, help="Run scripts concurrently (distinct users).")
@click.option("--reference-time", default=None, help="Fixed ISO reference time (default: frozen harness clock).")
def simulate(scripts: str | None, pack: str | None, lang: str, threshold: float | None, report: str | None, parallel: bool, reference_time: str | None) -> None:
    """Run the scripted evaluation suite and report task completion."""
    if reference_time:
        ref = datetime.fromisoformat(reference_time)
        if ref.tzinfo is None:
            ref = ref.replace(tzinfo=timezone.utc)
    else:
        ref = DEFAULT_REFERENCE_TIME
    config = _service_config(pack, None, lang, threshold)
    config.reference_time = ref
    service = _build_service(config)
    suite = run_suite(load_scripts(scripts), service, parallel=parallel)
    click.echo(suite.to_text_table())
    if report:
        Path(report).write_text(suite.to_machine_json() + "\n", encoding="utf-8")
        click.echo(f"report written to {report}")
    sys.exit(0 if suite.ok() else 1)


@main.command("validate-content")
@click.option("--pack", "pack_path", default=None, help="Content pack file or directory (default: bundled packs).")
def validate_content(pack_path: str | None) -> None:
    """Validate a content pack; exits nonzero on any violation."""
    path = Path(pack_path) if pack_path else bundled_pack_dir()
    try:
        packs = load_packs(path)
    except PackError as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(1)
    any_problems = False
    for lang, pack in sorted(packs.items()):
        problems = validate_pack(pack, set(claims.CALLBACKS), claims.REQUIRED_STATES)
        if problems:
            any_problems = True
            for problem in problems:
                click.echo(f"{lang}: {problem}", err=True)
        else:
            click.echo(f"{lang}: ok")
    sys.exit(1 if any_problems else 0)


if __name__ == "__main__":
    main()
