import { describe, expect, it } from "vitest";

import type { GenerationView } from "../src/api.js";
import { SelectionController, scriptedSelection } from "../src/session.js";

function view(params: {
  total: number;
  generation?: number;
  k?: number;
  selectable: boolean[];
}): GenerationView {
  return {
    session_id: "abc123",
    generation: params.generation ?? 1,
    total_generations: params.total,
    k_required: params.k ?? 5,
    reference_png: "",
    candidates: params.selectable.map((flag, index) => ({
      index,
      selectable: flag,
      png: "",
    })),
  };
}

function mask(selectableCount: number, total: number): boolean[] {
  return Array.from({ length: total }, (_, i) => i < selectableCount);
}

describe("top-K selection rules", () => {
  it("keeps submit disabled until exactly K tiles are chosen", () => {
    const controller = new SelectionController(
      view({ total: 3, selectable: mask(13, 20) }),
    );
    expect(controller.required).toBe(5);
    for (let i = 0; i < 5; i++) {
      expect(controller.canSubmit()).toBe(false);
      expect(controller.toggle(i)).toBe(true);
    }
    expect(controller.canSubmit()).toBe(true);
    expect(controller.submission()!.chosen).toEqual([0, 1, 2, 3, 4]);
  });

  it("treats unselectable tiles as inert", () => {
    const controller = new SelectionController(
      view({ total: 3, selectable: mask(13, 20) }),
    );
    expect(controller.isSelectable(15)).toBe(false);
    expect(controller.toggle(15)).toBe(false);
    expect(controller.selectedCount()).toBe(0);
  });

  it("caps the requirement at the selectable count for short screens", () => {
    const controller = new SelectionController(
      view({ total: 3, selectable: mask(3, 20) }),
    );
    expect(controller.required).toBe(3);
    [0, 1, 2].forEach((i) => controller.toggle(i));
    expect(controller.canSubmit()).toBe(true);
  });

  it("rejects a sixth choice instead of dropping one silently", () => {
    const controller = new SelectionController(
      view({ total: 3, selectable: mask(13, 20) }),
    );
    [0, 1, 2, 3, 4].forEach((i) => controller.toggle(i));
    expect(controller.toggle(5)).toBe(false);
    expect(controller.submission()!.chosen).toHaveLength(5);
  });

  it("toggling again deselects", () => {
    const controller = new SelectionController(
      view({ total: 3, selectable: mask(13, 20) }),
    );
    controller.toggle(4);
    expect(controller.selectedCount()).toBe(1);
    controller.toggle(4);
    expect(controller.selectedCount()).toBe(0);
  });
});

describe("final generation", () => {
  it("switches to single-pick mode", () => {
    const controller = new SelectionController(
      view({ total: 3, generation: 3, selectable: mask(13, 20) }),
    );
    expect(controller.phase).toBe("pick_final");
    expect(controller.required).toBe(1);
    controller.toggle(7);
    const body = controller.submission()!;
    expect(body.chosen).toEqual([7]);
    expect(body.final_pick).toBe(7);
  });

  it("a second pick replaces nothing until the first is cleared", () => {
    const controller = new SelectionController(
      view({ total: 2, generation: 2, selectable: mask(4, 6) }),
    );
    controller.toggle(1);
    controller.toggle(1); // clear
    controller.toggle(2);
    expect(controller.submission()!.final_pick).toBe(2);
  });
});

describe("display shuffling", () => {
  it("is a permutation of the server indices and deterministic per screen", () => {
    const a = new SelectionController(view({ total: 3, selectable: mask(13, 20) }));
    const b = new SelectionController(view({ total: 3, selectable: mask(13, 20) }));
    expect([...a.displayOrder].sort((x, y) => x - y)).toEqual(
      Array.from({ length: 20 }, (_, i) => i),
    );
    expect(a.displayOrder).toEqual(b.displayOrder);
    expect(a.displayOrder).not.toEqual(Array.from({ length: 20 }, (_, i) => i));
  });

  it("varies across generations and rides along in the submission", () => {
    const g1 = new SelectionController(view({ total: 3, generation: 1, selectable: mask(13, 20) }));
    const g2 = new SelectionController(
      view({ total: 3, generation: 2, selectable: mask(13, 20) }),
    );
    expect(g1.displayOrder).not.toEqual(g2.displayOrder);
    [0, 1, 2, 3, 4].forEach((i) => g1.toggle(i));
    expect(g1.submission()!.display_order).toEqual(g1.displayOrder);
  });
});

describe("scripted participant", () => {
  it("never touches unselectable tiles and fills the requirement", () => {
    const controller = new SelectionController(
      view({ total: 3, selectable: [false, true, false, true, true, true, true, false] }),
    );
    scriptedSelection(controller);
    const body = controller.submission()!;
    expect(body.chosen).toHaveLength(controller.required);
    for (const index of body.chosen) {
      expect(controller.isSelectable(index)).toBe(true);
    }
  });
});
