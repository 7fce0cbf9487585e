/** Conversation state machine invariants. */

import { describe, expect, it } from "vitest";

import {
  appendDelta,
  beginRequest,
  cancelStream,
  clearError,
  commitAssistant,
  failStream,
  newConversation,
  wireMessages,
} from "../src/state.js";

describe("state machine", () => {
  it("starts idle and empty", () => {
    const c = newConversation();
    expect(c).toEqual({ messages: [], pending: "", state: "idle", error: null });
  });

  it("beginRequest appends the user turn and streams", () => {
    const c = beginRequest(newConversation(), "hello")!;
    expect(c.state).toBe("streaming");
    expect(c.messages).toEqual([{ role: "user", content: "hello" }]);
  });

  it("never allows a second in-flight request", () => {
    const streaming = beginRequest(newConversation(), "a")!;
    expect(beginRequest(streaming, "b")).toBeNull();
  });

  it("deltas only append while streaming", () => {
    const idle = newConversation();
    expect(appendDelta(idle, "x")).toBe(idle);
    const streaming = beginRequest(idle, "q")!;
    expect(appendDelta(streaming, "x").pending).toBe("x");
  });

  it("commit moves pending into an assistant message in arrival order", () => {
    let c = beginRequest(newConversation(), "q")!;
    for (const d of ["to", "ken", "s"]) {
      c = appendDelta(c, d);
    }
    c = commitAssistant(c);
    expect(c.state).toBe("idle");
    expect(c.messages.at(-1)).toEqual({ role: "assistant", content: "tokens" });
  });

  it("failStream rolls back the unanswered user turn", () => {
    let c = beginRequest(newConversation(), "q")!;
    c = appendDelta(c, "partial");
    c = failStream(c, "boom");
    expect(c.state).toBe("error");
    expect(c.error).toBe("boom");
    expect(c.messages).toHaveLength(0);
    expect(c.pending).toBe("");
  });

  it("clearError returns to idle", () => {
    let c = failStream(beginRequest(newConversation(), "q")!, "boom");
    c = clearError(c);
    expect(c.state).toBe("idle");
    expect(c.error).toBeNull();
  });

  it("wireMessages prefixes the system prompt only when non-blank", () => {
    const c = commitAssistant(appendDelta(beginRequest(newConversation(), "q")!, "a"));
    expect(wireMessages(c, " ").map((m) => m.role)).toEqual(["user", "assistant"]);
    expect(wireMessages(c, "sys").map((m) => m.role)).toEqual(["system", "user", "assistant"]);
  });
});
