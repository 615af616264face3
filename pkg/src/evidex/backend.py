"""Model backend abstraction: structured queries, tool-calling turns, usage ledger.

Every model invocation flows through :func:`invoke`, which enforces the
structured-output contract at the boundary (payloads validate against the
request schema, tool calls must match a declared tool) and appends exactly
one usage record per call. Backends are selected by name from a registry so
core logic never names a vendor.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import jsonschema
import requests

from .docmodel import ParsedDocument, render_markdown
from .errors import HardFailure, OutputValidationError, TransportError

MODES = ("document_query", "tool_loop", "judge")
AGENTS = ("agent_a", "agent_b", "reconciler", "judge")


# --- request parts ---------------------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class DocumentPart:
    """The full document handed to a document_query call.

    ``rendering`` records what a text-only backend actually receives
    ("markdown") versus a native-document upload ("native"); the run manifest
    keeps this flag so comparisons stay honest.
    """

    doc: ParsedDocument
    rendering: str = "native"  # "native" | "markdown"


@dataclass(frozen=True)
class ImagePart:
    ref: str


Part = TextPart | DocumentPart | ImagePart


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: dict  # JSON Schema for the arguments


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict


@dataclass(frozen=True)
class ModelRequest:
    mode: str
    system_prompt: str
    user_content: tuple[Part, ...]
    tools: tuple[ToolSpec, ...] = ()
    output_schema: dict | None = None
    temperature: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode != "document_query" and any(
            isinstance(p, DocumentPart) for p in self.user_content
        ):
            raise ValueError("document parts are only allowed in document_query mode")
        if self.mode in ("document_query", "tool_loop") and self.temperature != 0.0:
            raise ValueError("extraction and reconciliation calls must run at temperature 0")
        names = [t.name for t in self.tools]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate tool names: {names}")


@dataclass
class Message:
    """One conversation turn. Assistant turns keep the raw model output."""

    role: str  # "user" | "assistant" | "tool"
    parts: tuple[Part, ...] = ()
    output: dict | None = None
    tool_name: str | None = None


# --- usage accounting ------------------------------------------------------


@dataclass(frozen=True)
class UsageRecord:
    call_id: str
    agent: str
    input_tokens: int
    output_tokens: int
    wall_time: float

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


class UsageLedger:
    """Append-only record of every model call; totals are folds over records."""

    def __init__(self):
        self._records: list[UsageRecord] = []
        self._lock = threading.Lock()

    def append(self, agent: str, input_tokens: int, output_tokens: int,
               wall_time: float) -> UsageRecord:
        if agent not in AGENTS:
            raise ValueError(f"unknown agent {agent!r}")
        if input_tokens < 0 or output_tokens < 0:
            raise ValueError("token counts must be >= 0")
        with self._lock:
            record = UsageRecord(
                call_id=f"c{len(self._records) + 1:04d}",
                agent=agent,
                input_tokens=input_tokens,
                output_tokens=output_tokens,
                wall_time=wall_time,
            )
            self._records.append(record)
            return record

    def merge(self, other: "UsageLedger") -> None:
        """Re-append *other*'s records here in order (call_ids are reassigned).

        Lets concurrent agent runs stage their records locally and merge in a
        deterministic order, keeping ledgers reproducible under threading.
        """
        for rec in other.records:
            self.append(rec.agent, rec.input_tokens, rec.output_tokens, rec.wall_time)

    @property
    def records(self) -> tuple[UsageRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def to_dicts(self) -> list[dict]:
        return [
            {
                "call_id": r.call_id,
                "agent": r.agent,
                "input_tokens": r.input_tokens,
                "output_tokens": r.output_tokens,
                "total_tokens": r.total_tokens,
                "wall_time": r.wall_time,
            }
            for r in self.records
        ]


def ledger_report(ledger: UsageLedger) -> dict:
    """Per-agent and total (input, output, total tokens, api_calls) rollup."""
    rows: dict[str, dict] = {}
    for agent in AGENTS:
        recs = [r for r in ledger.records if r.agent == agent]
        rows[agent] = {
            "input_tokens": sum(r.input_tokens for r in recs),
            "output_tokens": sum(r.output_tokens for r in recs),
            "total_tokens": sum(r.total_tokens for r in recs),
            "api_calls": len(recs),
        }
    all_recs = ledger.records
    rows["total"] = {
        "input_tokens": sum(r.input_tokens for r in all_recs),
        "output_tokens": sum(r.output_tokens for r in all_recs),
        "total_tokens": sum(r.total_tokens for r in all_recs),
        "api_calls": len(all_recs),
    }
    return rows


def format_ledger_table(report: dict) -> str:
    """Delimited text table: one row per agent plus totals."""
    header = ["Agent", "In Tok.", "Out Tok.", "Total Tok.", "API Calls"]
    lines = ["\t".join(header)]
    for agent in (*AGENTS, "total"):
        row = report[agent]
        lines.append(
            "\t".join(
                [agent, str(row["input_tokens"]), str(row["output_tokens"]),
                 str(row["total_tokens"]), str(row["api_calls"])]
            )
        )
    return "\n".join(lines)


# --- invocation boundary ---------------------------------------------------


@dataclass(frozen=True)
class BackendTurn:
    """Raw backend response: output dict plus provider-reported token counts."""

    output: dict
    input_tokens: int
    output_tokens: int


class ModelBackend(Protocol):
    name: str

    def complete(self, request: ModelRequest, messages: Sequence[Message]) -> BackendTurn: ...


@dataclass(frozen=True)
class InvokeResult:
    kind: str  # "payload" | "tool_call"
    payload: dict | None
    tool_call: ToolCall | None
    usage: UsageRecord


def invoke(request: ModelRequest, backend: ModelBackend, ledger: UsageLedger,
           agent: str, messages: Sequence[Message] | None = None,
           clock: Callable[[], float] = time.monotonic) -> InvokeResult:
    """One model call, validated at the boundary.

    The usage record is appended even when the output fails validation (the
    tokens were spent); transport failures append nothing because no model
    response exists to account for.

    Raises:
        OutputValidationError: output violates the schema or tool contract.
        TransportError: the call never produced a response.
    """
    if messages is None:
        messages = [Message(role="user", parts=request.user_content)]
    t0 = clock()
    turn = backend.complete(request, list(messages))
    usage = ledger.append(agent, turn.input_tokens, turn.output_tokens, clock() - t0)

    output = turn.output
    if not isinstance(output, dict) or "type" not in output:
        raise OutputValidationError(
            f"backend returned unrecognizable output: {output!r}", raw_output=output
        )

    if output["type"] == "tool_call":
        name = output.get("name")
        spec = next((t for t in request.tools if t.name == name), None)
        if spec is None:
            raise OutputValidationError(
                f"model called undeclared tool {name!r}; declared: "
                f"{[t.name for t in request.tools]}",
                raw_output=output,
            )
        arguments = output.get("arguments")
        try:
            jsonschema.validate(arguments, spec.parameters)
        except jsonschema.ValidationError as exc:
            raise OutputValidationError(
                f"arguments for tool {name!r} failed validation: {exc.message}",
                raw_output=output,
            ) from exc
        return InvokeResult(
            kind="tool_call", payload=None,
            tool_call=ToolCall(name=name, arguments=arguments), usage=usage,
        )

    if output["type"] == "payload":
        data = output.get("data")
        if request.output_schema is not None:
            try:
                jsonschema.validate(data, request.output_schema)
            except jsonschema.ValidationError as exc:
                raise OutputValidationError(
                    f"payload failed schema validation: {exc.message}", raw_output=output
                ) from exc
        return InvokeResult(kind="payload", payload=data, tool_call=None, usage=usage)

    raise OutputValidationError(
        f"backend output has unknown type {output['type']!r}", raw_output=output
    )


def invoke_with_retry(request: ModelRequest, backend: ModelBackend, ledger: UsageLedger,
                      agent: str, *, validator: Callable[[dict], None] | None = None,
                      retry_limit: int = 2,
                      clock: Callable[[], float] = time.monotonic) -> InvokeResult:
    """Invoke with the standard retry policy for single-shot (non-loop) calls.

    Schema-invalid output is re-sent with the validation error appended, up to
    *retry_limit* retries; each attempt logs its own usage record. Transport
    failures share the same budget. Exhaustion raises :class:`HardFailure`,
    which callers surface as column-level extraction failure.

    *validator* runs semantic checks beyond JSON Schema (e.g. one entry per
    batch column); it must raise OutputValidationError to trigger a retry.
    """
    messages: list[Message] = [Message(role="user", parts=request.user_content)]
    attempts = 0
    while True:
        try:
            result = invoke(request, backend, ledger, agent, messages, clock=clock)
            if result.kind == "payload" and validator is not None:
                validator(result.payload)
            return result
        except OutputValidationError as exc:
            attempts += 1
            if attempts > retry_limit:
                raise HardFailure(
                    f"output still invalid after {retry_limit} retries: {exc}"
                ) from exc
            messages.append(Message(role="assistant", output=exc.raw_output))
            messages.append(
                Message(role="user", parts=(TextPart(
                    f"Your previous output was rejected: {exc}. "
                    "Re-emit a response that satisfies the declared schema."
                ),))
            )
        except TransportError as exc:
            attempts += 1
            if attempts > retry_limit:
                raise HardFailure(
                    f"transport failed after {retry_limit} retries: {exc}"
                ) from exc


# --- backends --------------------------------------------------------------


def count_text_tokens(text: str) -> int:
    """Whitespace-delimited token count (offline accounting convention)."""
    return len(text.split())


def request_token_count(request: ModelRequest, messages: Sequence[Message]) -> int:
    """Deterministic input-token count for offline backends.

    Document parts count their full markdown rendering, so re-uploading the
    document on every call shows up in the ledger just like a live upload.
    """
    total = count_text_tokens(request.system_prompt)
    for message in messages:
        for part in message.parts:
            if isinstance(part, TextPart):
                total += count_text_tokens(part.text)
            elif isinstance(part, DocumentPart):
                total += count_text_tokens(render_markdown(part.doc))
            elif isinstance(part, ImagePart):
                total += 1
        if message.output is not None:
            total += count_text_tokens(json.dumps(message.output))
    for tool in request.tools:
        total += count_text_tokens(tool.description) + count_text_tokens(json.dumps(tool.parameters))
    return total


class ScriptedBackend:
    """Replays a fixed list of outputs; the workhorse for protocol tests.

    Script entries are raw output dicts (``{"type": "tool_call", ...}`` /
    ``{"type": "payload", ...}``), or ``{"transport_error": msg}`` to raise.
    Every call is recorded in ``calls`` for instrumentation.
    """

    name = "scripted"

    def __init__(self, script: Sequence[dict]):
        self._script = list(script)
        self._pos = 0
        self._lock = threading.Lock()
        self.calls: list[tuple[ModelRequest, list[Message]]] = []

    def complete(self, request: ModelRequest, messages: Sequence[Message]) -> BackendTurn:
        with self._lock:
            self.calls.append((request, list(messages)))
            if self._pos >= len(self._script):
                raise AssertionError("scripted backend exhausted")
            output = self._script[self._pos]
            self._pos += 1
        if "transport_error" in output:
            raise TransportError(output["transport_error"])
        return BackendTurn(
            output=output,
            input_tokens=request_token_count(request, messages),
            output_tokens=count_text_tokens(json.dumps(output)),
        )


class HttpBackend:
    """Generic HTTP model client.

    Wire shape: POST ``{model, temperature, system, messages, tools?,
    output_schema?}`` and expect ``{"output": {...}, "usage": {"input_tokens",
    "output_tokens"}}`` back. Vendor-specific adapters can subclass and
    override the two ``_encode``/``_decode`` hooks. API keys come from an
    environment variable only.
    """

    def __init__(self, endpoint: str, model: str, api_key_env: str = "MODEL_API_KEY",
                 timeout: float = 120.0, max_in_flight: int = 4, name: str = "http"):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.name = name
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, request: ModelRequest, messages: Sequence[Message]) -> BackendTurn:
        body = self._encode(request, messages)
        key = os.environ.get(self.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        with self._slots:
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers,
                                     timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()
            except Exception as exc:
                raise TransportError(f"backend call failed: {exc}") from exc
        return self._decode(data)

    def _encode(self, request: ModelRequest, messages: Sequence[Message]) -> dict:
        def encode_part(part: Part) -> dict:
            if isinstance(part, TextPart):
                return {"kind": "text", "text": part.text}
            if isinstance(part, DocumentPart):
                return {"kind": "document", "rendering": part.rendering,
                        "markdown": render_markdown(part.doc)}
            return {"kind": "image", "ref": part.ref}

        return {
            "model": self.model,
            "temperature": request.temperature,
            "system": request.system_prompt,
            "messages": [
                {
                    "role": m.role,
                    "parts": [encode_part(p) for p in m.parts],
                    "output": m.output,
                    "tool_name": m.tool_name,
                }
                for m in messages
            ],
            "tools": [
                {"name": t.name, "description": t.description, "parameters": t.parameters}
                for t in request.tools
            ],
            "output_schema": request.output_schema,
        }

    def _decode(self, data: dict) -> BackendTurn:
        usage = data.get("usage", {})
        return BackendTurn(
            output=data.get("output", {}),
            input_tokens=int(usage.get("input_tokens", 0)),
            output_tokens=int(usage.get("output_tokens", 0)),
        )


_REGISTRY: dict[str, Callable[..., ModelBackend]] = {}


def register_backend(name: str, factory: Callable[..., ModelBackend]) -> None:
    _REGISTRY[name] = factory


def create_backend(name: str, **config) -> ModelBackend:
    if name not in _REGISTRY:
        raise KeyError(f"unknown backend {name!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**config)


register_backend("http", HttpBackend)
