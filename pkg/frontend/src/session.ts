/** Batch-walk state machine driving the labeling screen.
 *
 * One session labels misclassified negatives batch by batch until the
 * stopping rule fires (a fully clean batch) or every task is labeled.
 * The session owns no rendering; the app layer observes its state.
 */

import {
  AlreadyLabeledError,
  BatchIncompleteError,
  ReviewClient,
} from "./client.js";
import type { CalibrationStatus, Label, ReviewTask } from "./types.js";

export type SessionPhase = "idle" | "labeling" | "complete";

export interface SessionState {
  phase: SessionPhase;
  batchIndex: number | null;
  tasks: ReviewTask[];
  /** Index into tasks of the task being judged; null between batches. */
  cursor: number | null;
  status: CalibrationStatus | null;
  /** Threshold frozen by the reviewer (copied from status.theta). */
  frozenTheta: number | null;
}

export class LabelingSession {
  private state_: SessionState = {
    phase: "idle",
    batchIndex: null,
    tasks: [],
    cursor: null,
    status: null,
    frozenTheta: null,
  };

  /** Tasks judged this batch, including conflicts lost to another reviewer. */
  private handled = new Set<string>();

  constructor(
    private readonly client: ReviewClient,
    readonly reviewerId: string,
  ) {}

  get state(): SessionState {
    return this.state_;
  }

  get currentTask(): ReviewTask | null {
    const { tasks, cursor } = this.state_;
    return cursor === null ? null : (tasks[cursor] ?? null);
  }

  private firstUnlabeled(tasks: ReviewTask[]): number | null {
    const index = tasks.findIndex(
      (task) => task.label === null && !this.handled.has(task.result_id),
    );
    return index === -1 ? null : index;
  }

  /** Fetch the next batch, resuming a half-labeled one if necessary. */
  async start(): Promise<SessionState> {
    let batch;
    try {
      batch = await this.client.nextBatch();
    } catch (err) {
      if (!(err instanceof BatchIncompleteError)) throw err;
      batch = await this.client.nextBatch(true);
    }
    this.handled.clear();
    if (batch.tasks.length === 0) {
      this.state_ = {
        ...this.state_,
        phase: "complete",
        batchIndex: null,
        tasks: [],
        cursor: null,
        status: batch.status,
      };
      return this.state_;
    }
    this.state_ = {
      ...this.state_,
      phase: "labeling",
      batchIndex: batch.batch_index,
      tasks: batch.tasks,
      cursor: this.firstUnlabeled(batch.tasks),
      status: batch.status,
    };
    if (this.state_.cursor === null) {
      // resumed a batch someone else finished; move on
      return this.start();
    }
    return this.state_;
  }

  /**
   * Label the task under the cursor and advance. Losing a labeling race
   * (another reviewer got there first) advances without complaint; the
   * next batch fetch reconciles.
   */
  async submit(label: Label): Promise<SessionState> {
    const task = this.currentTask;
    if (task === null) {
      throw new Error("no task under review; call start() first");
    }
    let status: CalibrationStatus | null = null;
    try {
      const reply = await this.client.submitLabel({
        result_id: task.result_id,
        label,
        reviewer_id: this.reviewerId,
      });
      status = reply.status;
      task.label = label;
    } catch (err) {
      if (!(err instanceof AlreadyLabeledError)) throw err;
    }
    this.handled.add(task.result_id);
    const cursor = this.firstUnlabeled(this.state_.tasks);
    this.state_ = {
      ...this.state_,
      cursor,
      status: status ?? this.state_.status,
    };
    if (cursor === null) {
      return this.start();
    }
    return this.state_;
  }

  /** Adopt the calibrated threshold; the walk can stop here. */
  freeze(): number {
    const theta = this.state_.status?.theta;
    if (theta === null || theta === undefined) {
      throw new Error("no calibrated threshold to freeze yet");
    }
    this.state_ = { ...this.state_, frozenTheta: theta };
    return theta;
  }

  /** Labeled-task progress over the whole calibration run. */
  progress(): { labeled: number; total: number } {
    const status = this.state_.status;
    if (status === null) return { labeled: 0, total: 0 };
    return { labeled: status.labeled, total: status.total_misclassified };
  }
}

/** Human-readable stopping-rule summary for the status panel. */
export function stoppingRuleSummary(status: CalibrationStatus): string {
  if (status.theta !== null) {
    const boundary = status.batches.find((b) => b.complete && b.clean);
    const where =
      boundary === undefined
        ? "all batches labeled"
        : `batch ${boundary.batch_index + 1} came back clean`;
    return `Stopping rule met (${where}): candidate θ = ${status.theta.toFixed(4)} nats.`;
  }
  if (status.complete) {
    return "All batches labeled; no clean batch found — θ defaults to the highest observed entropy.";
  }
  const judged = status.batches.filter((b) => b.complete).length;
  return `${judged} batch${judged === 1 ? "" : "es"} judged, none clean yet — keep labeling.`;
}
