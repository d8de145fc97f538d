/**
 * DOM layer: one screen per generation, then the result screen.
 *
 * Small images are upscaled with nearest-neighbor (CSS pixelated
 * rendering) so low-resolution inputs stay inspectable without the
 * smoothing artifacts that would bias similarity judgments. There is no
 * countdown or time pressure anywhere.
 */

import { ApiError, SessionApi } from "./api.js";
import type { GenerationView, SessionResult } from "./api.js";
import { SelectionController } from "./session.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  parent?: HTMLElement,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  parent?.appendChild(node);
  return node;
}

function pngImage(base64: string, className: string): HTMLImageElement {
  const img = document.createElement("img");
  img.src = `data:image/png;base64,${base64}`;
  img.className = className;
  img.draggable = false;
  return img;
}

export class SessionScreen {
  private controller: SelectionController | null = null;

  constructor(
    private readonly api: SessionApi,
    private readonly sessionId: string,
    private readonly root: HTMLElement,
  ) {}

  async run(): Promise<void> {
    for (;;) {
      const state = await this.api.waitForNextState(this.sessionId);
      if (state === "finished") {
        this.renderResult(await this.api.getResult(this.sessionId));
        return;
      }
      let view: GenerationView;
      try {
        view = await this.api.getGeneration(this.sessionId);
      } catch (error) {
        if (error instanceof ApiError && error.status === 409) continue;
        this.renderRetryBanner(error);
        await new Promise((resolve) => setTimeout(resolve, 1000));
        continue;
      }
      await this.renderGenerationAndAwaitSubmit(view);
    }
  }

  private renderGenerationAndAwaitSubmit(view: GenerationView): Promise<void> {
    const controller = new SelectionController(view);
    this.controller = controller;
    this.root.replaceChildren();

    const header = el("div", "header", this.root);
    el("h2", undefined, header).textContent =
      controller.phase === "pick_final"
        ? "Last round: pick the single closest image"
        : `Round ${view.generation} of ${view.total_generations}`;
    const instructions = el("p", "instructions", header);
    instructions.textContent =
      controller.phase === "pick_final"
        ? "Choose the one candidate most similar to the reference. Take your time."
        : `Choose the ${controller.required} candidates most similar to the reference. Take your time.`;

    const layout = el("div", "layout", this.root);
    const referencePane = el("div", "reference-pane", layout);
    el("h3", undefined, referencePane).textContent = "Reference";
    referencePane.appendChild(pngImage(view.reference_png, "reference pixelated"));

    const grid = el("div", "grid", layout);
    const counter = el("div", "counter", this.root);
    const submit = el("button", "submit", this.root);
    submit.textContent = "Submit selection";

    const refresh = () => {
      counter.textContent = `selected ${controller.selectedCount()} / ${controller.required}`;
      submit.disabled = !controller.canSubmit();
      grid.querySelectorAll<HTMLElement>(".tile").forEach((tile) => {
        const index = Number(tile.dataset.index);
        tile.classList.toggle("chosen", controller.isChosen(index));
      });
    };

    for (const candidate of controller.displayedCandidates()) {
      const tile = el("div", "tile", grid);
      tile.dataset.index = String(candidate.index);
      tile.appendChild(pngImage(candidate.png, "candidate pixelated"));
      if (!controller.isSelectable(candidate.index)) {
        tile.classList.add("inert"); // black square, not clickable
      } else {
        tile.addEventListener("click", () => {
          controller.toggle(candidate.index);
          refresh();
        });
      }
    }
    refresh();

    return new Promise((resolve) => {
      submit.addEventListener("click", async () => {
        const body = controller.submission();
        if (body === null) return;
        submit.disabled = true;
        try {
          await this.api.submitSelection(this.sessionId, body);
        } catch (error) {
          if (!(error instanceof ApiError && error.status === 400)) {
            // duplicate submissions reconcile silently; transport errors retry
            resolve();
            return;
          }
          // validation rejection: restore the tiles and let the user retry
          submit.disabled = !controller.canSubmit();
          this.renderRetryBanner(error);
          return;
        }
        resolve();
      });
    });
  }

  private renderResult(result: SessionResult): void {
    this.root.replaceChildren();
    el("h2", undefined, this.root).textContent = result.success
      ? "Adversarial example found"
      : "No adversarial example found";
    const layout = el("div", "layout", this.root);
    const adversarialPane = el("div", "reference-pane", layout);
    el("h3", undefined, adversarialPane).textContent =
      `Final pick (classified as ${result.adversarial_label})`;
    adversarialPane.appendChild(pngImage(result.adversarial_png, "reference pixelated"));

    const stats = el("ul", "stats", this.root);
    const rows: Array<[string, string]> = [
      ["reference label", String(result.reference_label)],
      ["adversarial label", String(result.adversarial_label)],
      ["average perturbation", `${(result.average_perturbation * 100).toFixed(2)}%`],
      ["L1 / L2 / Linf", `${result.l1.toFixed(3)} / ${result.l2.toFixed(3)} / ${result.linf.toFixed(3)}`],
      ["rounds", String(result.generations_used)],
      ["classifier queries", String(result.queries_used)],
    ];
    for (const [label, value] of rows) {
      el("li", undefined, stats).textContent = `${label}: ${value}`;
    }

    const download = el("a", "download", this.root);
    download.textContent = "Download adversarial PNG";
    download.href = `data:image/png;base64,${result.adversarial_png}`;
    download.setAttribute("download", `${result.session_id}.png`);
  }

  private renderRetryBanner(error: unknown): void {
    let banner = this.root.querySelector<HTMLElement>(".banner");
    if (!banner) {
      banner = el("div", "banner");
      this.root.prepend(banner);
    }
    banner.textContent = `Request failed (${String(
      error instanceof Error ? error.message : error,
    )}); retrying keeps the session intact.`;
  }

  /** Exposed for tests and demos. */
  currentController(): SelectionController | null {
    return this.controller;
  }
}
