// Review client: solutions, anchored comments, and thread building for the
// marker panel. Pure fetch + data shaping; rendering lives in the globe/UI.

import type { GeoAnchor } from "./protocol";

export interface SolutionSummary {
  solution_id: string;
  latest_version: number;
  title: string;
  published_at: number;
  source_session: string;
}

export interface Comment {
  comment_id: string;
  solution_id: string;
  version: number;
  author: string;
  text: string;
  anchor: GeoAnchor;
  created_at: number;
  status: "open" | "addressed";
  parent_id?: string;
}

export interface CommentThread {
  root: Comment;
  replies: Comment[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    detail: string,
  ) {
    super(`${code}: ${detail}`);
  }
}

async function expect<T>(response: Response): Promise<T> {
  const body = (await response.json().catch(() => ({}))) as Record<string, unknown>;
  if (!response.ok) {
    throw new ApiError(response.status, String(body.error ?? "error"), String(body.detail ?? response.statusText));
  }
  return body as T;
}

export class ReviewClient {
  constructor(
    private apiBase: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  async listSolutions(): Promise<SolutionSummary[]> {
    const response = await this.fetchImpl(`${this.apiBase}/api/solutions`);
    const body = await response.json();
    if (!response.ok) throw new ApiError(response.status, "error", "cannot list solutions");
    return body as SolutionSummary[];
  }

  async listComments(
    solutionId: string,
    version: number,
    opts: { bbox?: [number, number, number, number]; since?: number; status?: string } = {},
  ): Promise<Comment[]> {
    const params = new URLSearchParams();
    if (opts.bbox) params.set("bbox", opts.bbox.join(","));
    if (opts.since !== undefined) params.set("since", String(opts.since));
    if (opts.status) params.set("status", opts.status);
    const qs = params.toString() ? `?${params.toString()}` : "";
    const body = await expect<{ comments: Comment[] }>(
      await this.fetchImpl(`${this.apiBase}/api/solutions/${solutionId}/${version}/comments${qs}`),
    );
    return body.comments;
  }

  async postComment(
    solutionId: string,
    version: number,
    comment: { author: string; text: string; anchor: GeoAnchor; parent_id?: string },
  ): Promise<string> {
    const body = await expect<{ comment_id: string }>(
      await this.fetchImpl(`${this.apiBase}/api/solutions/${solutionId}/${version}/comments`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(comment),
      }),
    );
    return body.comment_id;
  }

  async setStatus(commentId: string, status: "open" | "addressed"): Promise<Comment> {
    return expect<Comment>(
      await this.fetchImpl(`${this.apiBase}/api/comments/${commentId}`, {
        method: "PATCH",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ status }),
      }),
    );
  }

  async getSolutionScene(solutionId: string, version: number): Promise<unknown> {
    const body = await expect<{ scene: unknown }>(
      await this.fetchImpl(`${this.apiBase}/api/solutions/${solutionId}/${version}`),
    );
    return body.scene;
  }
}

/** Group comments into threads: top-level roots with replies in time order. */
export function buildThreads(comments: Comment[]): CommentThread[] {
  const byId = new Map(comments.map((c) => [c.comment_id, c]));
  const threads = new Map<string, CommentThread>();
  const rootOf = (comment: Comment): Comment => {
    let current = comment;
    while (current.parent_id && byId.has(current.parent_id)) {
      current = byId.get(current.parent_id)!;
    }
    return current;
  };
  for (const comment of comments) {
    if (!comment.parent_id) threads.set(comment.comment_id, { root: comment, replies: [] });
  }
  for (const comment of comments) {
    if (!comment.parent_id) continue;
    const root = rootOf(comment);
    const thread = threads.get(root.comment_id);
    if (thread) thread.replies.push(comment);
    else threads.set(comment.comment_id, { root: comment, replies: [] }); // orphan: show standalone
  }
  for (const thread of threads.values()) {
    thread.replies.sort((a, b) => a.created_at - b.created_at);
  }
  return [...threads.values()].sort((a, b) => a.root.created_at - b.root.created_at);
}
