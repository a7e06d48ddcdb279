/** Payload shapes of the review service's JSON API. */

export const LABEL_VALID = "valid_negative";
export const LABEL_PRESENT = "present_in_image";

export type Label = typeof LABEL_VALID | typeof LABEL_PRESENT;

/** One misclassified negative awaiting (or holding) a human verdict. */
export interface ReviewTask {
  result_id: string;
  image_uri: string;
  /** The entity actually in the image. */
  positive: string;
  /** The candidate negative the discriminator mistook for it. */
  candidate: string;
  entropy_nats: number;
  batch_index: number;
  label: Label | null;
  reviewer_id: string;
  timestamp: string;
}

export interface BatchSummary {
  batch_index: number;
  size: number;
  labeled: number;
  complete: boolean;
  /** Every label in the batch is valid_negative. */
  clean: boolean;
}

export interface CalibrationStatus {
  total_misclassified: number;
  labeled: number;
  remaining: number;
  batch_size: number;
  batches: BatchSummary[];
  /** Calibrated entropy threshold once the stopping rule is met. */
  theta: number | null;
  complete: boolean;
}

export interface BatchResponse {
  batch_index: number | null;
  tasks: ReviewTask[];
  complete: boolean;
  status: CalibrationStatus;
}

export interface LabelSubmission {
  result_id: string;
  label: Label;
  reviewer_id: string;
  override?: boolean;
}

export interface StoredLabel {
  schema: "labels.v1";
  result_id: string;
  label: Label;
  reviewer_id: string;
  timestamp: string;
}

export interface LabelResponse {
  label: StoredLabel;
  status: CalibrationStatus;
}

export interface SurveyExportResponse {
  files: {
    version_a: string;
    version_b: string;
    answer_key: string;
  };
  questions_per_version: number;
}
