// Sequential rating flow: one task on screen at a time, exactly one
// score submitted per displayed task.

import { ConflictError, RatingTask } from "./api.js";

/** The slice of the API client the flow needs (ApiClient satisfies it). */
export interface RatingApi {
  createSession(name: string): Promise<string>;
  nextTask(sessionId: string): Promise<RatingTask | null>;
  submitScore(sessionId: string, taskId: string, score: number): Promise<void>;
}

export interface UiSessionState {
  sessionId: string;
  task: RatingTask | null;
  remaining: number;
  lastStatus: string;
  submitted: number;
}

export interface SessionView {
  /** Show the pair and resolve with the rater's slider value. */
  presentTask(task: RatingTask, state: UiSessionState): Promise<number>;
  showDone(state: UiSessionState): void;
}

export const SLIDER_DEFAULT = 5.0;

/** Keep a score inside the 0..10 scale; anything unreadable becomes the
 * slider default rather than an accidental extreme. */
export function clampScore(value: number): number {
  if (!Number.isFinite(value)) return SLIDER_DEFAULT;
  return Math.min(10, Math.max(0, value));
}

export async function runSession(
  client: RatingApi,
  name: string,
  view: SessionView,
): Promise<UiSessionState> {
  const sessionId = await client.createSession(name);
  const state: UiSessionState = {
    sessionId,
    task: null,
    remaining: 0,
    lastStatus: "",
    submitted: 0,
  };
  for (;;) {
    const task = await client.nextTask(sessionId);
    if (task === null) break;
    state.task = task;
    state.remaining = task.remaining;
    const score = clampScore(await view.presentTask(task, state));
    try {
      await client.submitScore(sessionId, task.taskId, score);
      state.submitted += 1;
      state.lastStatus = `scored ${score.toFixed(1)}`;
    } catch (err) {
      if (err instanceof ConflictError) {
        // already recorded for this session (or the study closed):
        // surface it and move on, the server holds the truth
        state.lastStatus = "submission refused as duplicate, moving on";
      } else {
        throw err;
      }
    }
  }
  state.task = null;
  state.remaining = 0;
  view.showDone(state);
  return state;
}
