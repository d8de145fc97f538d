/** Entry point: join an existing session or create one from a pasted document. */

import { SessionApi } from "./api.js";
import { SessionScreen } from "./ui.js";

function query(name: string): string | null {
  return new URLSearchParams(window.location.search).get(name);
}

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  const api = new SessionApi(query("service") ?? "http://127.0.0.1:8431");

  const sessionId = query("session");
  if (sessionId) {
    await new SessionScreen(api, sessionId, root).run();
    return;
  }

  // no session in the URL: offer a create form for a pasted problem document
  const form = document.createElement("div");
  form.className = "create-form";
  form.innerHTML = `
    <h2>Start a selection session</h2>
    <p>Paste a session request document (problem, seed, fitness) and submit.</p>
    <textarea rows="12" cols="80" placeholder='{"problem": {...}, "seed": 0}'></textarea>
    <button>Create session</button>
    <div class="banner" hidden></div>
  `;
  root.appendChild(form);
  const textarea = form.querySelector("textarea")!;
  const banner = form.querySelector<HTMLElement>(".banner")!;
  form.querySelector("button")!.addEventListener("click", async () => {
    try {
      const body = JSON.parse(textarea.value);
      const created = await api.createSession(body);
      window.location.search = `?session=${created.session_id}`;
    } catch (error) {
      banner.hidden = false;
      banner.textContent = String(error instanceof Error ? error.message : error);
    }
  });
}

boot().catch((error) => {
  const root = document.getElementById("app");
  if (root) root.textContent = String(error);
});
