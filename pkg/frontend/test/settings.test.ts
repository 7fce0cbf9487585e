/** Settings defaults (recorded from the server's table) and validation. */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import {
  DEFAULT_SETTINGS,
  DEFAULT_SYSTEM_PROMPT,
  KeyValueStore,
  loadSettings,
  saveSettings,
  validateSetting,
} from "../src/settings.js";

const here = dirname(fileURLToPath(import.meta.url));
const SERVER_DEFAULTS = JSON.parse(
  readFileSync(join(here, "fixtures", "server_defaults.json"), "utf-8"),
) as Record<string, unknown>;

class MemoryStore implements KeyValueStore {
  private map = new Map<string, string>();
  getItem(k: string): string | null {
    return this.map.get(k) ?? null;
  }
  setItem(k: string, v: string): void {
    this.map.set(k, v);
  }
}

describe("defaults", () => {
  it("match the recorded server defaults table", () => {
    expect(DEFAULT_SETTINGS.temperature).toBe(SERVER_DEFAULTS.temperature);
    expect(DEFAULT_SETTINGS.top_k).toBe(SERVER_DEFAULTS.top_k);
    expect(DEFAULT_SETTINGS.top_p).toBe(SERVER_DEFAULTS.top_p);
    expect(DEFAULT_SETTINGS.max_tokens).toBe(SERVER_DEFAULTS.max_tokens);
  });

  it("ship the assistant system prompt verbatim", () => {
    expect(DEFAULT_SYSTEM_PROMPT).toBe(
      "You are an AI assistant that follows instruction extremely well. Help as much as you can.",
    );
    expect(DEFAULT_SETTINGS.system_prompt).toBe(SERVER_DEFAULTS.system_prompt);
  });
});

describe("validation", () => {
  it("rejects negative temperature inline", () => {
    expect(validateSetting("temperature", "-1")).toMatch(/temperature/);
    expect(validateSetting("temperature", "0")).toBeNull();
    expect(validateSetting("temperature", "0.8")).toBeNull();
  });

  it("bounds top_p to (0, 1]", () => {
    expect(validateSetting("top_p", "0")).not.toBeNull();
    expect(validateSetting("top_p", "1.5")).not.toBeNull();
    expect(validateSetting("top_p", "1")).toBeNull();
  });

  it("requires integer top_k and max_tokens", () => {
    expect(validateSetting("top_k", "2.5")).not.toBeNull();
    expect(validateSetting("top_k", "-1")).not.toBeNull();
    expect(validateSetting("top_k", "0")).toBeNull();
    expect(validateSetting("max_tokens", "-3")).not.toBeNull();
    expect(validateSetting("max_tokens", "128")).toBeNull();
  });

  it("requires an http(s) server origin", () => {
    expect(validateSetting("server_origin", "ftp://x")).not.toBeNull();
    expect(validateSetting("server_origin", "http://127.0.0.1:8080")).toBeNull();
  });
});

describe("persistence", () => {
  it("round-trips through the store", () => {
    const store = new MemoryStore();
    const edited = { ...DEFAULT_SETTINGS, temperature: 0.3, top_k: 7 };
    saveSettings(store, edited);
    expect(loadSettings(store)).toEqual(edited);
  });

  it("falls back to defaults on corrupt storage", () => {
    const store = new MemoryStore();
    store.setItem("pocketlm.settings", "{corrupt");
    expect(loadSettings(store)).toEqual(DEFAULT_SETTINGS);
  });

  it("drops stored values that fail validation", () => {
    const store = new MemoryStore();
    store.setItem(
      "pocketlm.settings",
      JSON.stringify({ ...DEFAULT_SETTINGS, top_p: 9 }),
    );
    expect(loadSettings(store).top_p).toBe(DEFAULT_SETTINGS.top_p);
  });
});
