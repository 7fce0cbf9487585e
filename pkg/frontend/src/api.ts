/**
 * HTTP/SSE client for the completion server. Pure wire-contract coupling:
 * POST /v1/chat/completions with stream:true, parse `data: {json}`
 * frames until `data: [DONE]`.
 */

import type { Role } from "./state.js";
import type { Settings } from "./settings.js";

export interface WireMessage {
  role: Role;
  content: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class MalformedStream extends Error {}

export interface StreamCallbacks {
  onDelta(text: string): void;
  onDone(finishReason: string | null): void;
}

function requestBody(messages: WireMessage[], settings: Settings): string {
  return JSON.stringify({
    messages,
    temperature: settings.temperature,
    top_k: settings.top_k,
    top_p: settings.top_p,
    max_tokens: settings.max_tokens,
    stream: true,
  });
}

async function errorMessage(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { error?: { message?: string } };
    if (body.error?.message) return body.error.message;
  } catch {
    /* non-JSON error body */
  }
  return `server returned ${response.status}`;
}

/**
 * Streams one chat completion. Resolves after [DONE]; rejects with
 * ApiError on non-200, MalformedStream on an unparseable frame, and the
 * abort reason if `signal` fires.
 */
export async function streamChatCompletion(
  messages: WireMessage[],
  settings: Settings,
  callbacks: StreamCallbacks,
  signal?: AbortSignal,
): Promise<void> {
  const response = await fetch(`${settings.server_origin}/v1/chat/completions`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: requestBody(messages, settings),
    signal,
  });
  if (!response.ok) {
    throw new ApiError(response.status, await errorMessage(response));
  }
  if (!response.body) {
    throw new MalformedStream("response has no body to stream");
  }

  const reader = response.body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  let finish: string | null = null;
  try {
    for (;;) {
      const { value, done } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      const frames = buffer.split("\n\n");
      buffer = frames.pop() ?? "";
      for (const frame of frames) {
        const line = frame.trim();
        if (!line) continue;
        if (!line.startsWith("data: ")) {
          throw new MalformedStream(`unexpected SSE frame: ${line.slice(0, 80)}`);
        }
        const payload = line.slice("data: ".length);
        if (payload === "[DONE]") {
          callbacks.onDone(finish);
          return;
        }
        let parsed: {
          choices?: { delta?: { content?: string }; finish_reason?: string | null }[];
        };
        try {
          parsed = JSON.parse(payload);
        } catch {
          throw new MalformedStream(`frame is not JSON: ${payload.slice(0, 80)}`);
        }
        const choice = parsed.choices?.[0];
        if (choice?.delta?.content) {
          callbacks.onDelta(choice.delta.content);
        }
        if (choice?.finish_reason) {
          finish = choice.finish_reason;
        }
      }
    }
  } finally {
    reader.cancel().catch(() => {});
  }
  // the stream closed without a [DONE] terminator
  throw new MalformedStream("stream ended before [DONE]");
}

export async function fetchHealth(origin: string): Promise<boolean> {
  try {
    const r = await fetch(`${origin}/health`);
    return r.ok;
  } catch {
    return false;
  }
}
