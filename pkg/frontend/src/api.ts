// Client for the rating service HTTP API.
//
// Network failures and 5xx responses retry with capped exponential
// backoff and never give up, so an entered score survives a flaky
// connection. 4xx responses are real answers and throw immediately;
// 409 gets its own error type because the session flow treats a
// duplicate submission as "skip forward", not as a failure.

export interface RatingTask {
  taskId: string;
  refUrl: string;
  testUrl: string;
  remaining: number;
}

export interface ProgressInfo {
  subjects: number;
  finalized: boolean;
  expectedSubjects?: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

export class ConflictError extends ApiError {
  constructor(message: string) {
    super(409, message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;
export type SleepFn = (ms: number) => Promise<void>;

const BACKOFF_MS = [500, 1000, 2000, 4000, 8000];

const realSleep: SleepFn = (ms) => new Promise((r) => setTimeout(r, ms));

export class ApiClient {
  private fetchFn: FetchLike;
  private sleep: SleepFn;

  constructor(
    private baseUrl = "",
    deps: { fetchFn?: FetchLike; sleep?: SleepFn } = {},
  ) {
    this.fetchFn = deps.fetchFn ?? ((url, init) => fetch(url, init));
    this.sleep = deps.sleep ?? realSleep;
  }

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    for (let attempt = 0; ; attempt++) {
      let res: Response;
      try {
        res = await this.fetchFn(this.baseUrl + path, init);
      } catch {
        await this.sleep(BACKOFF_MS[Math.min(attempt, BACKOFF_MS.length - 1)]);
        continue;
      }
      if (res.status >= 500) {
        await this.sleep(BACKOFF_MS[Math.min(attempt, BACKOFF_MS.length - 1)]);
        continue;
      }
      if (!res.ok) {
        const detail = await res.text().catch(() => "");
        if (res.status === 409) throw new ConflictError(detail);
        throw new ApiError(res.status, detail || `request failed (${res.status})`);
      }
      return res.json();
    }
  }

  private post(path: string, body: object): Promise<unknown> {
    return this.request(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async createSession(name: string): Promise<string> {
    const out = (await this.post("/api/session", { name })) as { session_id: string };
    return out.session_id;
  }

  /** Next pending task for the session, or null when it is complete. */
  async nextTask(sessionId: string): Promise<RatingTask | null> {
    const out = (await this.request(
      `/api/task?session_id=${encodeURIComponent(sessionId)}`,
    )) as {
      done?: boolean;
      task_id?: string;
      ref_url?: string;
      test_url?: string;
      remaining?: number;
    };
    if (out.done) return null;
    return {
      taskId: out.task_id!,
      refUrl: out.ref_url!,
      testUrl: out.test_url!,
      remaining: out.remaining!,
    };
  }

  async submitScore(sessionId: string, taskId: string, score: number): Promise<void> {
    await this.post("/api/score", {
      session_id: sessionId,
      task_id: taskId,
      score,
    });
  }

  async progress(): Promise<ProgressInfo> {
    const out = (await this.request("/api/progress")) as {
      subjects: number;
      finalized: boolean;
      expected_subjects?: number;
    };
    return {
      subjects: out.subjects,
      finalized: out.finalized,
      expectedSubjects: out.expected_subjects,
    };
  }
}
