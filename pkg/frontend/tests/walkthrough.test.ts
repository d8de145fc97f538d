/**
 * Headless end-to-end walkthrough against the real session service.
 *
 * Spawns the Python service on a scratch directory, drives a full
 * perception session (population 20, top-5 choices, 3 rounds) with the
 * scripted participant, and checks the protocol guarantees: no
 * unselectable index is ever submitted, the session lands on finished,
 * and the stored result re-classifies as adversarial. A second case
 * kills and restarts the service mid-session to exercise recovery.
 */

import { type ChildProcess, spawn } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { SessionApi } from "../src/api.js";
import { SelectionController, scriptedSelection } from "../src/session.js";

const PORT = 8743;
const BASE = `http://127.0.0.1:${PORT}`;
const SESSIONS_DIR = mkdtempSync(join(tmpdir(), "percepta-sessions-"));
const GOLDEN_REQUEST = JSON.parse(
  readFileSync(join(__dirname, "../../tests/golden/session_create_request.json"), "utf-8"),
);

let service: ChildProcess | null = null;

function startService(): ChildProcess {
  const child = spawn(
    "python3",
    ["-m", "percepta.cli", "serve", "--port", String(PORT), "--sessions-dir", SESSIONS_DIR],
    { stdio: "ignore" },
  );
  return child;
}

async function waitForHealth(api: SessionApi, attempts = 60): Promise<void> {
  for (let i = 0; i < attempts; i++) {
    if (await api.health()) return;
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
  throw new Error("session service never came up");
}

beforeAll(async () => {
  service = startService();
  await waitForHealth(new SessionApi(BASE));
}, 45_000);

afterAll(() => {
  service?.kill();
});

async function driveToCompletion(
  api: SessionApi,
  sessionId: string,
  options: { restartAfterRound?: number } = {},
): Promise<number> {
  let rounds = 0;
  for (;;) {
    const state = await api.waitForNextState(sessionId, { maxAttempts: 120 });
    if (state === "finished") return rounds;
    const view = await api.getGeneration(sessionId);
    expect(view.candidates).toHaveLength(20);
    expect(view.k_required).toBe(5);

    const controller = new SelectionController(view);
    scriptedSelection(controller);
    const body = controller.submission();
    expect(body).not.toBeNull();
    const selectable = new Set(
      view.candidates.filter((c) => c.selectable).map((c) => c.index),
    );
    for (const index of body!.chosen) {
      expect(selectable.has(index)).toBe(true); // never submit a black square
    }
    await api.submitSelection(sessionId, body!);
    rounds += 1;

    if (options.restartAfterRound === rounds) {
      service?.kill();
      await new Promise((resolve) => setTimeout(resolve, 500));
      service = startService();
      await waitForHealth(api);
    }
  }
}

describe("perception session walkthrough", () => {
  it(
    "completes a 3-round session whose result re-classifies as adversarial",
    async () => {
      const api = new SessionApi(BASE);
      const created = await api.createSession(GOLDEN_REQUEST);
      expect(created.status).toBe("awaiting_selection");

      const rounds = await driveToCompletion(api, created.session_id);
      expect(rounds).toBeGreaterThan(0);
      expect(rounds).toBeLessThanOrEqual(3);

      const result = await api.getResult(created.session_id);
      expect(result.success).toBe(true);
      expect(result.generations_used).toBe(3);
      // the stored PNG, re-ingested and re-classified by the service,
      // must land on a different class than the reference
      expect(result.png_label).toBe(result.adversarial_label);
      expect(result.png_label).not.toBe(result.reference_label);
      expect(result.adversarial_png.length).toBeGreaterThan(0);
    },
    90_000,
  );

  it(
    "survives a service restart mid-session and resumes the same run",
    async () => {
      const api = new SessionApi(BASE);
      const created = await api.createSession({ ...GOLDEN_REQUEST, seed: 2213 });
      const rounds = await driveToCompletion(api, created.session_id, {
        restartAfterRound: 1,
      });
      expect(rounds).toBeLessThanOrEqual(3);
      const result = await api.getResult(created.session_id);
      expect(result.generations_used).toBe(3);
      expect(result.success).toBe(true);
    },
    120_000,
  );
});
