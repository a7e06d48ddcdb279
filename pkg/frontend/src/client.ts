/** Typed client for the review service's four JSON endpoints. */

import type {
  BatchResponse,
  CalibrationStatus,
  LabelResponse,
  LabelSubmission,
  SurveyExportResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = new.target.name;
  }
}

/** 409 from /batches/next: the current batch still has unlabeled tasks. */
export class BatchIncompleteError extends ApiError {}

/** 409 from /labels: someone labeled this task first. */
export class AlreadyLabeledError extends ApiError {}

/** 404 from /labels: no such reviewable task. */
export class UnknownTaskError extends ApiError {}

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

async function detailOf(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return response.statusText || `status ${response.status}`;
  }
}

export class ReviewClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    private readonly baseUrl: string = "",
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    return this.fetchImpl(this.url(path), init);
  }

  async nextBatch(resume = false): Promise<BatchResponse> {
    const path = resume ? "/batches/next?resume=1" : "/batches/next";
    const response = await this.request(path);
    if (response.status === 409) {
      throw new BatchIncompleteError(409, await detailOf(response));
    }
    if (!response.ok) {
      throw new ApiError(response.status, await detailOf(response));
    }
    return (await response.json()) as BatchResponse;
  }

  async submitLabel(submission: LabelSubmission): Promise<LabelResponse> {
    const response = await this.request("/labels", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(submission),
    });
    if (response.status === 404) {
      throw new UnknownTaskError(404, await detailOf(response));
    }
    if (response.status === 409) {
      throw new AlreadyLabeledError(409, await detailOf(response));
    }
    if (!response.ok) {
      throw new ApiError(response.status, await detailOf(response));
    }
    return (await response.json()) as LabelResponse;
  }

  async calibrationStatus(): Promise<CalibrationStatus> {
    const response = await this.request("/calibration/status");
    if (!response.ok) {
      throw new ApiError(response.status, await detailOf(response));
    }
    return (await response.json()) as CalibrationStatus;
  }

  async exportSurvey(seed: number): Promise<SurveyExportResponse> {
    const response = await this.request("/survey/export", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ seed }),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await detailOf(response));
    }
    return (await response.json()) as SurveyExportResponse;
  }
}
