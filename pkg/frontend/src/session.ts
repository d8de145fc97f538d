/**
 * Selection state for one generation screen.
 *
 * Encodes the protocol rules the server will enforce anyway, so the UI
 * can never build an invalid submission: black-square tiles are inert,
 * the choice count is pinned to min(K, selectable), and the final
 * generation switches to single-pick mode. Tiles are displayed in a
 * per-generation shuffled order so screen position cannot bias choices;
 * submissions always carry the server's indices plus the display order
 * for the server-side log.
 */

import type { CandidateTile, GenerationView } from "./api.js";

export type SessionPhase = "pick_top_k" | "pick_final";

/** Deterministic xorshift PRNG so display shuffles are reproducible. */
function shuffled<T>(items: T[], seedText: string): T[] {
  let seed = 2166136261;
  for (const ch of seedText) {
    seed = Math.imul(seed ^ ch.charCodeAt(0), 16777619) >>> 0;
  }
  const out = items.slice();
  for (let i = out.length - 1; i > 0; i--) {
    seed ^= seed << 13;
    seed ^= seed >>> 17;
    seed ^= seed << 5;
    seed >>>= 0;
    const j = seed % (i + 1);
    [out[i], out[j]] = [out[j], out[i]];
  }
  return out;
}

export class SelectionController {
  readonly phase: SessionPhase;
  readonly required: number;
  readonly displayOrder: number[];
  private readonly selectable: Set<number>;
  private chosen: number[] = [];
  private finalPick: number | null = null;

  constructor(readonly view: GenerationView) {
    this.phase =
      view.generation === view.total_generations ? "pick_final" : "pick_top_k";
    this.selectable = new Set(
      view.candidates.filter((c) => c.selectable).map((c) => c.index),
    );
    this.required =
      this.phase === "pick_final"
        ? Math.min(1, this.selectable.size)
        : Math.min(view.k_required, this.selectable.size);
    this.displayOrder = shuffled(
      view.candidates.map((c) => c.index),
      `${view.session_id}:${view.generation}`,
    );
  }

  displayedCandidates(): CandidateTile[] {
    const byIndex = new Map(this.view.candidates.map((c) => [c.index, c]));
    return this.displayOrder.map((index) => byIndex.get(index)!);
  }

  isSelectable(index: number): boolean {
    return this.selectable.has(index);
  }

  isChosen(index: number): boolean {
    return this.phase === "pick_final"
      ? this.finalPick === index
      : this.chosen.includes(index);
  }

  /** Toggle a tile; inert tiles and over-full selections are no-ops. */
  toggle(index: number): boolean {
    if (!this.selectable.has(index)) return false;
    if (this.phase === "pick_final") {
      this.finalPick = this.finalPick === index ? null : index;
      return true;
    }
    const position = this.chosen.indexOf(index);
    if (position >= 0) {
      this.chosen.splice(position, 1);
      return true;
    }
    if (this.chosen.length >= this.required) return false;
    this.chosen.push(index);
    return true;
  }

  selectedCount(): number {
    return this.phase === "pick_final" ? (this.finalPick === null ? 0 : 1) : this.chosen.length;
  }

  canSubmit(): boolean {
    return this.selectedCount() === this.required && this.required > 0;
  }

  /** The submission body; null until the selection is complete. */
  submission(): {
    generation: number;
    chosen: number[];
    final_pick: number | null;
    display_order: number[];
  } | null {
    if (!this.canSubmit()) return null;
    const chosen = this.phase === "pick_final" ? [this.finalPick!] : this.chosen.slice();
    return {
      generation: this.view.generation,
      chosen,
      final_pick: this.phase === "pick_final" ? this.finalPick : null,
      display_order: this.displayOrder.slice(),
    };
  }
}

/**
 * Scripted stand-in for a participant: picks the lowest-index selectable
 * tiles. Used by the headless walkthrough and handy for demos.
 */
export function scriptedSelection(controller: SelectionController): void {
  for (const tile of controller.view.candidates) {
    if (controller.canSubmit()) break;
    if (tile.selectable) controller.toggle(tile.index);
  }
}
