"""Three-stage planning chain against a chat-style HTTP endpoint.

Stages run in order: decompose (prompt -> objects), expand (objects + prompt
-> description), extract (description -> JSON plan in a fenced block). Each
stage is one POST whose body is ``{"model": ..., "messages": [...]}``. In
replay mode responses come from files named by the sha256 of the canonical
payload, and no socket is ever opened.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .plan import PlanDocument, PlanError, ValidationReport, parse_plan, validate_plan

STAGES = ("decompose", "expand", "extract")
TEMPLATE_SHA256 = {
    "decompose": "91b0ab7524ba0175077e8439ef4b19f3d70fb94d251b005407be5bf5450d5d5a",
    "expand": "59a76a1d81f9bdb522e939ee20a5c29ffaf9ba44f74f3a19f77f90bfc9b0f5b2",
    "extract": "9c8c92d9ef4012a8b9ee703dc5b5d0936bbb90135ef96d18de2285ecf84900d2",
}
FIXTURE_SUFFIX = ".response"
_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)


class PlannerError(RuntimeError):
    """``code``: planner.transport, planner.no-data, planner.fixture-miss or planner.invalid."""

    def __init__(self, code: str, message: str, report: ValidationReport | None = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.report = report


def template(stage: str) -> str:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return resources.files("morph4d").joinpath("templates", f"{stage}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class PromptPayload:
    stage: str
    system: str
    user: str
    images: tuple = ()

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system}, {"role": "user", "content": self.user}]

    def canonical(self) -> bytes:
        body = {"stage": self.stage, "messages": self.messages(), "images": list(self.images)}
        return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()


@dataclass
class PlannerConfig:
    endpoint: str | None = None
    model: str = "default"
    timeout: float = 60.0
    replay_dir: str | None = None
    retries: int = 2
    api_key: str | None = field(default=None, repr=False)

    @classmethod
    def from_env(cls, **overrides) -> "PlannerConfig":
        cfg = cls(endpoint=os.environ.get("PLANNER_ENDPOINT"),
                  model=os.environ.get("PLANNER_MODEL", "default"),
                  api_key=os.environ.get("PLANNER_API_KEY"))
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg


def build_stage_prompt(stage: str, context: str, prompt: str | None = None) -> PromptPayload:
    """Payload for one stage. ``expand`` also takes the original ``prompt``."""
    if not context or not context.strip():
        raise ValueError(f"stage {stage!r} needs a nonempty context")
    system = template(stage)
    if stage == "decompose":
        user = f"Prompt: {context.strip()}"
    elif stage == "expand":
        user = (f"Prompt: {prompt.strip()}\n\n" if prompt else "") + f"Objects:\n{context.strip()}"
    else:
        user = f"Scene description:\n{context.strip()}"
    return PromptPayload(stage, system, user)


def extract_block(text: str) -> str:
    m = _FENCE.search(text)
    if not m:
        raise PlannerError("planner.no-data", "response has no fenced code block")
    return m.group(1)


def _response_text(raw: bytes) -> str:
    """Content of a chat reply; plain text bodies pass through."""
    text = raw.decode("utf-8")
    try:
        body = json.loads(text)
    except json.JSONDecodeError:
        return text
    if isinstance(body, dict):
        if body.get("choices"):
            return body["choices"][0]["message"]["content"]
        if isinstance(body.get("content"), str):
            return body["content"]
    return text


class PlannerClient:
    """One in-flight request at a time; create several clients for parallelism."""

    def __init__(self, config: PlannerConfig):
        self.config = config

    def _post(self, payload: PromptPayload) -> bytes:
        cfg = self.config
        if not cfg.endpoint:
            raise PlannerError("planner.transport", "no endpoint configured (set PLANNER_ENDPOINT)")
        body = json.dumps({"model": cfg.model, "messages": payload.messages()}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        last = None
        for _ in range(cfg.retries + 1):
            req = urllib.request.Request(cfg.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
                    return resp.read()
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last = exc
        raise PlannerError("planner.transport", f"{cfg.endpoint}: {last}")

    def raw(self, payload: PromptPayload) -> bytes:
        if self.config.replay_dir is not None:
            path = Path(self.config.replay_dir) / (payload.digest() + FIXTURE_SUFFIX)
            if not path.is_file():
                raise PlannerError("planner.fixture-miss", f"no recorded response {path.name} ({payload.stage})")
            return path.read_bytes()
        return self._post(payload)

    def ask(self, payload: PromptPayload) -> str:
        return _response_text(self.raw(payload))

    def run(self, user_prompt: str, on_payload=None) -> PlanDocument:
        ask = self.ask if on_payload is None else (lambda p: on_payload(p, self.raw(p)))
        objects = ask(build_stage_prompt("decompose", user_prompt))
        description = ask(build_stage_prompt("expand", objects, prompt=user_prompt))
        extract = build_stage_prompt("extract", description)
        report = None
        for attempt in range(self.config.retries + 1):
            payload = extract
            if report is not None:
                payload = PromptPayload("extract", extract.system,
                                        extract.user + "\n\nYour previous data failed validation:\n"
                                        + report.render() + "\nReturn corrected data.")
            text = ask(payload)
            try:
                doc = parse_plan(extract_block(text))
            except PlanError as exc:
                report = ValidationReport()
                report.error(exc.code, -1, str(exc))
                continue
            report = validate_plan(doc)
            if report.ok:
                return doc
        raise PlannerError("planner.invalid", f"plan still invalid after {self.config.retries} retries", report)


def request_plan(config: PlannerConfig, user_prompt: str) -> PlanDocument:
    return PlannerClient(config).run(user_prompt)


def record_fixture(config: PlannerConfig, user_prompt: str, directory) -> list[Path]:
    """Run the chain live and store each response under its payload digest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    live = PlannerConfig(config.endpoint, config.model, config.timeout, None, config.retries, config.api_key)
    written: list[Path] = []

    def keep(payload: PromptPayload, raw: bytes) -> str:
        path = out / (payload.digest() + FIXTURE_SUFFIX)
        path.write_bytes(raw)
        written.append(path)
        return _response_text(raw)

    PlannerClient(live).run(user_prompt, on_payload=keep)
    return written
