"""Terminal entry point: chat REPL, one-shot runs, serving, and model tools.

Subcommands: chat, run, serve, quantize, inspect, bench.
Exit codes: 0 success, 1 usage error, 2 model load error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import time

from . import kernels
from .container import ContainerBuilder, ContainerError, load_file, save_file
from .model import ContextOverflow, Model, ModelError, StopConditions, load_model
from .prompt import ChatMessage, PromptError, RawTemplate, template_by_name
from .quant import DType, QuantError, dequantize, quantize
from .sampler import DEFAULTS, SamplerError, SamplerParams
from .tokenizer import encode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_LOAD = 2
EXIT_RUNTIME = 3

BANNER = """== Running in interactive mode. ==
- Press Ctrl+C to interject at any time.
- To return control without starting a new line, end your input with '/'.
- If you want to submit another line, end your input with '\\'.
"""

# flag name -> SamplerParams field; defaults come from the sampler table
SAMPLER_FLAGS = {
    "--temp": "temperature",
    "--top-k": "top_k",
    "--top-p": "top_p",
    "--repeat-penalty": "repeat_penalty",
    "--repeat-window": "repeat_window",
    "--seed": "seed",
}

PROMPT_OVERRIDE_KEYS = ("prompt.system_header", "prompt.user_header", "prompt.response_header")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pocketlm", description="CPU inference engine for quantized chat models")
    sub = p.add_subparsers(dest="command", required=True)

    def add_shared(sp, sampler=True):
        sp.add_argument("--model", required=True, help="model container path")
        sp.add_argument("--ctx", type=int, default=None, help="context override (<= model max)")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--template", default="orca-mini", help="orca-mini or raw")
        sp.add_argument("--config", default=None, help="JSON config file (dotted keys)")
        if sampler:
            sp.add_argument("--temp", dest="temperature", type=float, default=DEFAULTS["temperature"])
            sp.add_argument("--top-k", dest="top_k", type=int, default=DEFAULTS["top_k"])
            sp.add_argument("--top-p", dest="top_p", type=float, default=DEFAULTS["top_p"])
            sp.add_argument("--repeat-penalty", dest="repeat_penalty", type=float,
                            default=DEFAULTS["repeat_penalty"])
            sp.add_argument("--repeat-window", dest="repeat_window", type=int,
                            default=DEFAULTS["repeat_window"])
            sp.add_argument("--seed", type=int, default=DEFAULTS["seed"])
            sp.add_argument("--max-tokens", type=int, default=256)

    chat = sub.add_parser("chat", help="interactive chat")
    add_shared(chat)
    chat.add_argument("--system", default=None, help="system prompt override")

    run = sub.add_parser("run", help="one-shot prompt")
    add_shared(run)
    run.add_argument("prompt", help="prompt text")

    serve = sub.add_parser("serve", help="start the REST server")
    add_shared(serve, sampler=False)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--queue", type=int, default=8, help="request queue capacity")
    serve.add_argument("--cors-origin", action="append", default=[],
                       help="allowed CORS origin (repeatable; off by default)")

    q = sub.add_parser("quantize", help="re-encode a container's weights")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--dtype", required=True, choices=[d.name for d in DType])

    ins = sub.add_parser("inspect", help="dump metadata and tensor table")
    ins.add_argument("path")

    bench = sub.add_parser("bench", help="prefill/decode throughput")
    add_shared(bench, sampler=False)
    bench.add_argument("--json", action="store_true", dest="as_json")

    return p


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _prompt_overrides(config: dict) -> dict:
    mapping = {
        "prompt.system_header": "system_header",
        "prompt.user_header": "user_header",
        "prompt.response_header": "response_header",
    }
    return {mapping[k]: v for k, v in config.items() if k in mapping}


def _sampler_from_args(args) -> SamplerParams:
    return SamplerParams(
        temperature=args.temperature,
        top_k=args.top_k,
        top_p=args.top_p,
        repeat_penalty=args.repeat_penalty,
        repeat_window=args.repeat_window,
        seed=args.seed,
    )


def _load(args) -> Model:
    container = load_file(args.model)
    model = load_model(container)
    if args.ctx is not None and not 1 <= args.ctx <= model.config.ctx_max:
        raise UsageError(f"--ctx must be in 1..{model.config.ctx_max}")
    kernels.set_threads(args.threads)
    return model


# ---------------------------------------------------------------------------
# console abstraction (tests drive a scripted console)
# ---------------------------------------------------------------------------


class TerminalConsole:
    def __init__(self):
        self._interrupted = False

    def readline(self, prompt: str) -> str | None:
        try:
            return input(prompt)
        except EOFError:
            return None
        except KeyboardInterrupt:
            return None

    def write(self, text: str) -> None:
        sys.stdout.write(text)
        sys.stdout.flush()

    def interrupted(self) -> bool:
        hit, self._interrupted = self._interrupted, False
        return hit

    def install_sigint(self):
        def handler(signum, frame):
            self._interrupted = True

        return signal.signal(signal.SIGINT, handler)

    def restore_sigint(self, previous):
        signal.signal(signal.SIGINT, previous)


def read_turn(console) -> str | None:
    """Assemble one user turn: '\\' continues on the next line, '/' submits."""
    line = console.readline("> ")
    if line is None:
        return None
    parts = []
    while True:
        if line.endswith("\\"):
            parts.append(line[:-1])
            line = console.readline("")
            if line is None:
                break
            continue
        if line.endswith("/"):
            parts.append(line[:-1])
        else:
            parts.append(line)
        break
    return "\n".join(parts)


CTX_HEADROOM = 8  # tokens kept free so a turn can at least start generating


def cmd_chat(args, console=None) -> int:
    console = console or TerminalConsole()
    model = _load(args)
    params = _sampler_from_args(args)
    config = _load_config(args.config)
    overrides = _prompt_overrides(config)
    template = template_by_name(args.template, **(overrides if args.template == "orca-mini" else {}))
    if isinstance(template, RawTemplate):
        raise UsageError("chat needs a conversational template, not raw")
    if args.system:
        template = template.with_overrides(default_system=args.system)
    ctx = args.ctx or model.config.ctx_max
    session = model.new_session(ctx)
    console.write(BANNER)

    messages: list[ChatMessage] = []
    while True:
        text = read_turn(console)
        if text is None:
            console.write("\n")
            return EXIT_OK
        if not text.strip():
            continue
        messages.append(ChatMessage("user", text))

        # drop oldest completed turns until the rendered prompt fits
        while True:
            prompt = template.render(messages)
            ids = encode(model.vocab, prompt, add_bos=True)
            if len(ids) <= ctx - CTX_HEADROOM:
                break
            if len(messages) <= 1:
                console.write("[input too long for this context]\n")
                messages.pop()
                ids = None
                break
            console.write("[context full: dropping oldest turn]\n")
            del messages[0:2]  # oldest (user, assistant) pair
        if ids is None:
            continue

        # reuse the longest shared prefix of the session's consumed tokens
        k = 0
        hist = session.token_history
        while k < len(hist) and k < len(ids) - 1 and hist[k] == ids[k]:
            k += 1
        session.truncate(k)

        previous = console.install_sigint() if hasattr(console, "install_sigint") else None

        def on_token(token_id, piece):
            console.write(piece)
            return not console.interrupted()

        try:
            result = model.generate(
                session,
                ids[k:],
                params,
                StopConditions(max_tokens=args.max_tokens),
                on_token=on_token,
            )
        finally:
            if previous is not None:
                console.restore_sigint(previous)
        console.write("\n")
        if result.finish_reason == "cancelled":
            console.write("[interrupted]\n")
        reply = result.text if result.text.strip() else "(no output)"
        messages.append(ChatMessage("assistant", reply))


def cmd_run(args) -> int:
    model = _load(args)
    params = _sampler_from_args(args)
    config = _load_config(args.config)
    overrides = _prompt_overrides(config)
    template = template_by_name(args.template, **(overrides if args.template == "orca-mini" else {}))
    prompt = template.render([ChatMessage("user", args.prompt)])
    ids = encode(model.vocab, prompt, add_bos=True)
    session = model.new_session(args.ctx)

    def on_token(token_id, piece):
        sys.stdout.write(piece)
        sys.stdout.flush()
        return True

    model.generate(session, ids, params, StopConditions(max_tokens=args.max_tokens), on_token)
    sys.stdout.write("\n")
    sys.stdout.flush()
    return EXIT_OK


def cmd_serve(args) -> int:
    from .server import serve

    model = _load(args)
    config = _load_config(args.config)
    serve(
        model,
        host=args.host,
        port=args.port,
        queue_size=args.queue,
        cors_origins=args.cors_origin or None,
        prompt_overrides=_prompt_overrides(config),
    )
    return EXIT_OK


def cmd_quantize(args) -> int:
    target = DType[args.dtype]
    container = load_file(args.input)
    bad = [t.name for t in container.tensors if t.dtype not in (DType.F32, DType.F16)]
    if bad:
        raise ModelError(
            f"input already quantized ({bad[0]} is {container.tensor(bad[0])[0].dtype.name}); "
            "quantize takes F32/F16 containers only"
        )
    out = ContainerBuilder(alignment=container.alignment)
    out.metadata = dict(container.metadata)
    before = len(container.payload)
    skipped = []
    for desc in container.tensors:
        _, raw = container.tensor(desc.name)
        if len(desc.dims) >= 2 and desc.dims[-1] % (256 if target == DType.BQ5S else 32) == 0:
            if desc.dtype == target:
                out.add_tensor(desc.name, desc.dims, desc.dtype, bytes(raw))
            else:
                values = dequantize(raw, desc.dtype)
                out.add_tensor(desc.name, desc.dims, target, quantize(values, target))
        else:
            # 1-D norms stay F32; block-incompatible widths keep their dtype
            if len(desc.dims) >= 2:
                skipped.append(desc.name)
            out.add_tensor(desc.name, desc.dims, desc.dtype, bytes(raw))
    result = out.finish()
    save_file(result, args.output)
    after = len(result.payload)
    model = load_model(result) if _is_model(result) else None
    print(f"payload: {before} -> {after} bytes ({after / before:.3f}x)")
    if model is not None:
        print(f"effective bits/weight: {model.effective_bits_per_weight:.3f}")
    for name in skipped:
        print(f"note: {name} kept as-is (dims not a {target.name} block multiple)")
    return EXIT_OK


def _is_model(container) -> bool:
    return "model.arch" in container.metadata


def _format_value(tv) -> str:
    if isinstance(tv.value, list):
        shown = tv.value[:4]
        body = ", ".join(repr(v) for v in shown)
        more = f", ... ({len(tv.value)} items)" if len(tv.value) > 4 else ""
        return f"[{body}{more}]"
    return repr(tv.value)


def cmd_inspect(args) -> int:
    container = load_file(args.path)
    print(f"version {container.version}, alignment {container.alignment}")
    print(f"metadata ({len(container.metadata)}):")
    for key, tv in container.metadata.items():
        print(f"  {key} = {_format_value(tv)}  [{tv.type.name}]")
    print(f"tensors ({len(container.tensors)}):")
    total = 0
    total_elems = 0
    for t in container.tensors:
        total += t.nbytes
        total_elems += t.n_elements
        dims = "x".join(str(d) for d in t.dims)
        print(f"  {t.name}  {dims}  {t.dtype.name}  {t.nbytes} B")
    bpw = 8 * total / total_elems if total_elems else 0.0
    print(f"totals: {total} tensor bytes, {len(container.payload)} payload bytes, {bpw:.3f} bpw")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _load(args)
    ctx = args.ctx or model.config.ctx_max
    session = model.new_session(ctx)
    vocab_size = model.config.vocab_size

    prefill_n = min(64, ctx - 2)
    prompt = [i % vocab_size for i in range(prefill_n)]
    t0 = time.perf_counter()
    model.prefill(session, prompt)
    prefill_s = time.perf_counter() - t0

    decode_n = min(128, ctx - session.pos - 1)
    greedy = SamplerParams(temperature=0.0, seed=0)
    t0 = time.perf_counter()
    result = model.generate(
        session, [prompt[-1]], greedy, StopConditions(max_tokens=decode_n)
    )
    decode_s = time.perf_counter() - t0
    decoded = max(len(result.tokens), 1)

    report = {
        "prefill_tps": prefill_n / prefill_s if prefill_s else 0.0,
        "decode_tps": decoded / decode_s if decode_s else 0.0,
        "weight_bytes": model.weight_bytes,
        "kv_bytes": session.kv_bytes,
        "prefill_tokens": prefill_n,
        "decode_tokens": decoded,
        "prefill_s": prefill_s,
        "decode_s": decode_s,
    }
    if args.as_json:
        print(json.dumps(report))
    else:
        print(f"{'prefill':>10}: {report['prefill_tps']:.1f} tok/s ({prefill_n} tokens)")
        print(f"{'decode':>10}: {report['decode_tps']:.1f} tok/s ({decoded} tokens)")
        print(f"{'weights':>10}: {report['weight_bytes']} bytes")
        print(f"{'kv cache':>10}: {report['kv_bytes']} bytes")
    return EXIT_OK


COMMANDS = {
    "chat": cmd_chat,
    "run": cmd_run,
    "serve": cmd_serve,
    "quantize": cmd_quantize,
    "inspect": cmd_inspect,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContextOverflow, QuantError, SamplerError, PromptError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ContainerError, ModelError, FileNotFoundError) as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_LOAD
    except OSError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
