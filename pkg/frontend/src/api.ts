/**
 * Typed client for the session service.
 *
 * All imagery travels as base64 PNG inside JSON. The client never talks
 * to the attack engine directly; the HTTP API is the only surface.
 */

export interface CandidateTile {
  index: number;
  selectable: boolean;
  png: string;
}

export interface GenerationView {
  session_id: string;
  generation: number;
  total_generations: number;
  k_required: number;
  reference_png: string;
  candidates: CandidateTile[];
}

export interface SelectionAck {
  session_id: string;
  status: string;
  generation: number;
}

export interface SessionResult {
  session_id: string;
  success: boolean;
  adversarial_label: number;
  reference_label: number;
  png_label: number;
  l1: number;
  l2: number;
  linf: number;
  average_perturbation: number;
  generations_used: number;
  queries_used: number;
  bisection_applied: boolean;
  adversarial_png: string;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseError(response: Response): Promise<never> {
  let detail = response.statusText;
  try {
    const body = (await response.json()) as { detail?: string };
    if (body.detail) detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(response.status, detail);
}

export class SessionApi {
  constructor(private readonly baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async health(): Promise<boolean> {
    try {
      const response = await fetch(this.url("/healthz"));
      return response.ok;
    } catch {
      return false;
    }
  }

  async createSession(body: unknown): Promise<{ session_id: string; status: string }> {
    const response = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) await parseError(response);
    return (await response.json()) as { session_id: string; status: string };
  }

  async getGeneration(sessionId: string): Promise<GenerationView> {
    const response = await fetch(this.url(`/sessions/${sessionId}/generation`));
    if (!response.ok) await parseError(response);
    return (await response.json()) as GenerationView;
  }

  async submitSelection(
    sessionId: string,
    body: {
      generation: number;
      chosen: number[];
      final_pick?: number | null;
      display_order?: number[];
    },
  ): Promise<SelectionAck> {
    const response = await fetch(this.url(`/sessions/${sessionId}/selection`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) await parseError(response);
    return (await response.json()) as SelectionAck;
  }

  async getResult(sessionId: string): Promise<SessionResult> {
    const response = await fetch(this.url(`/sessions/${sessionId}/result`));
    if (!response.ok) await parseError(response);
    return (await response.json()) as SessionResult;
  }

  /**
   * Poll until the session is ready for the next choice or finished.
   * The service answers submissions synchronously, but a restart in the
   * middle of a long run must not kill the session on the client side.
   */
  async waitForNextState(
    sessionId: string,
    options: { intervalMs?: number; maxAttempts?: number } = {},
  ): Promise<"awaiting_selection" | "finished"> {
    const interval = options.intervalMs ?? 500;
    const attempts = options.maxAttempts ?? 60;
    for (let attempt = 0; attempt < attempts; attempt++) {
      try {
        const response = await fetch(this.url(`/sessions/${sessionId}/generation`));
        if (response.ok) return "awaiting_selection";
        if (response.status === 409) {
          const body = (await response.json()) as { detail?: string };
          if (body.detail?.includes("finished")) return "finished";
          if (body.detail?.includes("aborted")) {
            throw new ApiError(409, body.detail);
          }
        }
      } catch (error) {
        if (error instanceof ApiError) throw error;
        // transport hiccup (service restarting): retry
      }
      await new Promise((resolve) => setTimeout(resolve, interval));
    }
    throw new ApiError(0, "session never became ready");
  }
}
