"""OpenAI-compatible REST surface over one engine worker.

Two completion routes plus health/model listing. Generation requests
serialize through a FIFO queue owned by a single worker thread; when the
queue is full the server answers 503 immediately rather than queueing
without bound. Streaming responses are server-sent events, one frame per
decoded token span:

    data: {chunk json}\n\n ... data: [DONE]\n\n

A client that disconnects mid-stream cancels its generation at the next
token boundary.
"""

from __future__ import annotations

import json
import queue
import secrets
import threading
import time
from dataclasses import dataclass, field

import anyio.to_thread
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .model import ContextOverflow, Model, StopConditions
from .prompt import ChatMessage, PromptError, template_by_name
from .sampler import DEFAULTS, SamplerError, SamplerParams
from .tokenizer import encode

DEFAULT_QUEUE_SIZE = 8
DEFAULT_MAX_TOKENS = 16  # OpenAI-compatible default when the field is absent

FINISH_MAP = {
    "eos": "stop",
    "stop_text": "stop",
    "length": "length",
    "context_full": "length",
    "cancelled": "stop",
}


class ApiError(Exception):
    def __init__(self, status: int, message: str, err_type: str = "invalid_request_error"):
        super().__init__(message)
        self.status = status
        self.message = message
        self.err_type = err_type

    def response(self) -> JSONResponse:
        return JSONResponse(
            status_code=self.status,
            content={"error": {"message": self.message, "type": self.err_type}},
        )


class EngineBusy(Exception):
    pass


@dataclass
class GenerationJob:
    prompt_tokens: list[int]
    params: SamplerParams
    stops: StopConditions
    spans: "queue.Queue[str | None]" = field(default_factory=queue.Queue)
    done: threading.Event = field(default_factory=threading.Event)
    cancel: threading.Event = field(default_factory=threading.Event)
    result: object = None
    error: Exception | None = None


class EngineServer:
    """Single worker thread; FIFO queue with hard capacity."""

    def __init__(self, model: Model, queue_size: int = DEFAULT_QUEUE_SIZE, step_delay: float = 0.0):
        self.model = model
        self.step_delay = step_delay  # test/bench hook: simulate slow hardware
        self._queue: "queue.Queue[GenerationJob]" = queue.Queue(maxsize=queue_size)
        self._worker = threading.Thread(target=self._run, daemon=True, name="engine-worker")
        self._worker.start()

    def submit(self, job: GenerationJob) -> None:
        try:
            self._queue.put_nowait(job)
        except queue.Full:
            raise EngineBusy(f"engine queue of {self._queue.maxsize} requests is full")

    def _run(self) -> None:
        while True:
            job = self._queue.get()

            def on_token(token_id: int, text: str) -> bool:
                if text:
                    job.spans.put(text)
                if self.step_delay:
                    time.sleep(self.step_delay)
                return not job.cancel.is_set()

            try:
                session = self.model.new_session()
                job.result = self.model.generate(
                    session, job.prompt_tokens, job.params, job.stops, on_token=on_token
                )
            except Exception as e:  # surfaced to the waiting handler
                job.error = e
            finally:
                job.done.set()
                job.spans.put(None)


@dataclass
class ServerState:
    model: Model | None = None
    engine: EngineServer | None = None
    prompt_overrides: dict = field(default_factory=dict)

    @property
    def ready(self) -> bool:
        return self.engine is not None


# ---------------------------------------------------------------------------
# request parsing (manual: exact status codes, unknown fields ignored)
# ---------------------------------------------------------------------------


def _parse_params(body: dict) -> SamplerParams:
    fields = {}
    for key in ("temperature", "top_k", "top_p", "repeat_penalty", "repeat_window", "seed"):
        if key in body and body[key] is not None:
            fields[key] = body[key]
    try:
        return SamplerParams(**fields)
    except (SamplerError, TypeError) as e:
        raise ApiError(422, f"invalid sampling parameter: {e}")


def _parse_common(body: dict) -> tuple[SamplerParams, int, tuple[str, ...], bool]:
    params = _parse_params(body)
    max_tokens = body.get("max_tokens", DEFAULT_MAX_TOKENS)
    if not isinstance(max_tokens, int) or max_tokens < 0:
        raise ApiError(422, "max_tokens must be a non-negative integer")
    stop = body.get("stop", [])
    if isinstance(stop, str):
        stop = [stop]
    if not isinstance(stop, list) or not all(isinstance(s, str) for s in stop):
        raise ApiError(400, "stop must be a string or list of strings")
    stream = bool(body.get("stream", False))
    return params, max_tokens, tuple(stop), stream


def _parse_messages(raw: object) -> list[ChatMessage]:
    if not isinstance(raw, list) or not raw:
        raise ApiError(400, "messages must be a non-empty array")
    out = []
    for i, m in enumerate(raw):
        if not isinstance(m, dict) or "role" not in m or "content" not in m:
            raise ApiError(400, f"messages[{i}] must carry role and content")
        try:
            out.append(ChatMessage(str(m["role"]), str(m["content"])))
        except PromptError as e:
            raise ApiError(400, f"messages[{i}]: {e}")
    return out


async def _read_json(request: Request) -> dict:
    try:
        raw = await request.body()
        body = json.loads(raw)
    except Exception:
        raise ApiError(400, "request body is not valid JSON")
    if not isinstance(body, dict):
        raise ApiError(400, "request body must be a JSON object")
    return body


# ---------------------------------------------------------------------------
# response shaping
# ---------------------------------------------------------------------------


def _usage(prompt_tokens: int, completion_tokens: int) -> dict:
    return {
        "prompt_tokens": prompt_tokens,
        "completion_tokens": completion_tokens,
        "total_tokens": prompt_tokens + completion_tokens,
    }


def _sse(payload: dict) -> str:
    return f"data: {json.dumps(payload, separators=(',', ':'))}\n\n"


async def _run_generation(state: ServerState, prompt_text: str, body: dict, chat: bool):
    model = state.model
    params, max_tokens, stop, stream = _parse_common(body)
    ids = encode(model.vocab, prompt_text, add_bos=True)
    if len(ids) > model.config.ctx_max:
        raise ApiError(
            409,
            f"prompt of {len(ids)} tokens exceeds the {model.config.ctx_max}-token context",
        )
    job = GenerationJob(ids, params, StopConditions(max_tokens=max_tokens, stop_texts=stop))
    try:
        state.engine.submit(job)
    except EngineBusy as e:
        raise ApiError(503, str(e), "overloaded_error")
    rid = ("chatcmpl-" if chat else "cmpl-") + secrets.token_hex(12)
    created = int(time.time())
    if stream:
        return _stream_response(state, job, rid, created, chat)
    # block a worker thread, never the event loop
    await anyio.to_thread.run_sync(job.done.wait)
    if job.error is not None:
        if isinstance(job.error, ContextOverflow):
            raise ApiError(409, str(job.error))
        raise ApiError(500, f"generation failed: {job.error}", "server_error")
    result = job.result
    finish = FINISH_MAP[result.finish_reason]
    if chat:
        choice = {
            "index": 0,
            "message": {"role": "assistant", "content": result.text},
            "finish_reason": finish,
        }
        obj = "chat.completion"
    else:
        choice = {"index": 0, "text": result.text, "finish_reason": finish}
        obj = "text_completion"
    return JSONResponse(
        {
            "id": rid,
            "object": obj,
            "created": created,
            "model": state.model.name,
            "choices": [choice],
            "usage": _usage(len(ids), len(result.tokens)),
        }
    )


def _stream_response(state: ServerState, job: GenerationJob, rid: str, created: int, chat: bool):
    obj = "chat.completion.chunk" if chat else "text_completion.chunk"
    name = state.model.name

    def chunk(delta_or_text, finish=None) -> str:
        if chat:
            choice = {"index": 0, "delta": delta_or_text, "finish_reason": finish}
        else:
            choice = {"index": 0, "text": delta_or_text, "finish_reason": finish}
        return _sse(
            {"id": rid, "object": obj, "created": created, "model": name, "choices": [choice]}
        )

    def events():
        try:
            if chat:
                yield chunk({"role": "assistant"})
            while True:
                span = job.spans.get()
                if span is None:
                    break
                yield chunk({"content": span} if chat else span)
            if job.error is not None:
                # too late for an HTTP error; close the stream
                return
            finish = FINISH_MAP[job.result.finish_reason]
            yield chunk({} if chat else "", finish=finish)
            yield "data: [DONE]\n\n"
        finally:
            if not job.done.is_set():
                job.cancel.set()

    return StreamingResponse(events(), media_type="text/event-stream")


# ---------------------------------------------------------------------------
# app factory
# ---------------------------------------------------------------------------


def create_app(state: ServerState, cors_origins: list[str] | None = None) -> FastAPI:
    app = FastAPI(title="pocketlm", docs_url=None, redoc_url=None)
    app.state.engine_state = state
    if cors_origins:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=cors_origins,
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(ApiError)
    async def handle_api_error(request, exc: ApiError):
        return exc.response()

    def require_ready() -> None:
        if not state.ready:
            raise ApiError(503, "model is still loading", "unavailable_error")

    @app.get("/health")
    async def health():
        if not state.ready:
            return JSONResponse(status_code=503, content={"status": "loading"})
        return {"status": "ok"}

    @app.get("/v1/models")
    async def models():
        require_ready()
        m = state.model
        return {
            "object": "list",
            "data": [
                {
                    "id": m.name,
                    "object": "model",
                    "owned_by": "pocketlm",
                    "dtypes": m.dtype_mix,
                    "bits_per_weight": round(m.effective_bits_per_weight, 3),
                }
            ],
        }

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        require_ready()
        body = await _read_json(request)
        if "prompt" in body:
            raise ApiError(400, "chat completions take messages, not prompt")
        messages = _parse_messages(body.get("messages"))
        tname = str(body.get("template", "orca-mini"))
        overrides = state.prompt_overrides if tname == "orca-mini" else {}
        try:
            template = template_by_name(tname, **overrides)
            prompt_text = template.render(messages)
        except PromptError as e:
            raise ApiError(400, str(e))
        return await _run_generation(state, prompt_text, body, chat=True)

    @app.post("/v1/completions")
    async def completions(request: Request):
        require_ready()
        body = await _read_json(request)
        if "messages" in body:
            raise ApiError(400, "completions take prompt, not messages")
        prompt = body.get("prompt")
        if not isinstance(prompt, str):
            raise ApiError(400, "prompt must be a string")
        return await _run_generation(state, prompt, body, chat=False)

    return app


def serve(
    model: Model,
    host: str = "127.0.0.1",
    port: int = 8080,
    queue_size: int = DEFAULT_QUEUE_SIZE,
    cors_origins: list[str] | None = None,
    prompt_overrides: dict | None = None,
) -> None:
    """Blocking entry point used by the CLI."""
    import uvicorn

    state = ServerState(
        model=model,
        engine=EngineServer(model, queue_size=queue_size),
        prompt_overrides=prompt_overrides or {},
    )
    app = create_app(state, cors_origins=cors_origins)
    uvicorn.run(app, host=host, port=port, log_level="warning")
