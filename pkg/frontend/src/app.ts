/** DOM wiring: batch labeling screen, calibration panel, survey export. */

import { ApiError, ReviewClient } from "./client.js";
import { LabelingSession, stoppingRuleSummary } from "./session.js";
import {
  LABEL_PRESENT,
  LABEL_VALID,
  type CalibrationStatus,
  type Label,
} from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function renderStatusPanel(
  panel: HTMLElement,
  status: CalibrationStatus | null,
  frozenTheta: number | null,
): void {
  panel.replaceChildren();
  panel.append(el("h2", "", "Calibration"));
  if (status === null) {
    panel.append(el("p", "muted", "Loading…"));
    return;
  }
  panel.append(
    el(
      "p",
      "",
      `${status.labeled} / ${status.total_misclassified} misclassifications labeled ` +
        `(batches of ${status.batch_size}).`,
    ),
  );
  const table = el("table", "batches");
  const head = el("tr");
  for (const title of ["Batch", "Labeled", "Verdict"]) {
    head.append(el("th", "", title));
  }
  table.append(head);
  for (const batch of status.batches) {
    const row = el("tr");
    row.append(el("td", "", String(batch.batch_index + 1)));
    row.append(el("td", "", `${batch.labeled} / ${batch.size}`));
    const verdict = !batch.complete
      ? "in progress"
      : batch.clean
        ? "clean"
        : "has real errors";
    row.append(el("td", batch.complete && batch.clean ? "clean" : "", verdict));
    table.append(row);
  }
  panel.append(table);
  panel.append(el("p", "rule", stoppingRuleSummary(status)));
  if (frozenTheta !== null) {
    panel.append(
      el("p", "frozen", `Threshold frozen at θ = ${frozenTheta.toFixed(4)} nats.`),
    );
  }
}

function renderTaskCard(
  card: HTMLElement,
  session: LabelingSession,
  onLabel: (label: Label) => void,
  onFreeze: () => void,
): void {
  card.replaceChildren();
  const { phase, batchIndex, tasks, cursor, status } = session.state;
  if (phase === "idle") {
    card.append(el("p", "muted", "Loading the first batch…"));
    return;
  }
  if (phase === "complete") {
    card.append(el("h2", "", "All batches labeled"));
    const theta = status?.theta;
    if (theta !== null && theta !== undefined) {
      card.append(el("p", "", `Calibrated threshold: θ = ${theta.toFixed(4)} nats.`));
    }
    return;
  }
  const task = session.currentTask;
  if (task === null || cursor === null) return;
  card.append(
    el(
      "h2",
      "",
      `Batch ${(batchIndex ?? 0) + 1}, task ${cursor + 1} of ${tasks.length}`,
    ),
  );
  const img = el("img", "preview");
  img.src = task.image_uri;
  img.alt = "image under review";
  card.append(img);

  const facts = el("dl", "facts");
  const fact = (term: string, value: string, cls = "") => {
    facts.append(el("dt", "", term));
    facts.append(el("dd", cls, value));
  };
  fact("In the image", task.positive, "positive");
  fact("Candidate negative", task.candidate, "candidate");
  fact("Discriminator entropy", `${task.entropy_nats.toFixed(4)} nats`);
  card.append(facts);

  card.append(
    el(
      "p",
      "question",
      `Does “${task.candidate}” actually appear in this image?`,
    ),
  );
  const buttons = el("div", "buttons");
  const noButton = el("button", "valid", "No — valid negative");
  noButton.onclick = () => onLabel(LABEL_VALID);
  const yesButton = el("button", "present", "Yes — present in image");
  yesButton.onclick = () => onLabel(LABEL_PRESENT);
  buttons.append(noButton, yesButton);
  card.append(buttons);

  if (status?.theta !== null && status?.theta !== undefined) {
    const freeze = el("button", "freeze", "Freeze threshold here");
    freeze.onclick = onFreeze;
    card.append(freeze);
  }
}

function renderSurveyPanel(panel: HTMLElement, client: ReviewClient): void {
  panel.replaceChildren();
  panel.append(el("h2", "", "Human-study survey"));
  panel.append(
    el(
      "p",
      "muted",
      "Split every question pair across two versions so no annotator sees both halves.",
    ),
  );
  const form = el("div", "survey-form");
  const seedInput = el("input");
  seedInput.type = "number";
  seedInput.value = "0";
  const exportButton = el("button", "", "Export A/B survey");
  const result = el("p", "survey-result");
  exportButton.onclick = async () => {
    result.textContent = "Exporting…";
    try {
      const reply = await client.exportSurvey(Number(seedInput.value));
      result.textContent =
        `${reply.questions_per_version} questions per version → ` +
        `${reply.files.version_a}, ${reply.files.version_b} ` +
        `(answer key: ${reply.files.answer_key})`;
    } catch (err) {
      result.textContent =
        err instanceof ApiError ? err.message : "Export failed.";
    }
  };
  form.append(el("label", "", "Seed "), seedInput, exportButton);
  panel.append(form, result);
}

export async function bootstrap(
  root: HTMLElement,
  client: ReviewClient = new ReviewClient(),
  reviewerId = "web",
): Promise<void> {
  root.replaceChildren();
  const taskCard = el("section", "card task-card");
  const statusPanel = el("section", "card status-panel");
  const surveyPanel = el("section", "card survey-panel");
  const errorBar = el("p", "error-bar");
  root.append(errorBar, taskCard, statusPanel, surveyPanel);

  const session = new LabelingSession(client, reviewerId);

  const refresh = () => {
    renderTaskCard(taskCard, session, onLabel, onFreeze);
    renderStatusPanel(statusPanel, session.state.status, session.state.frozenTheta);
  };
  const showError = (err: unknown) => {
    errorBar.textContent =
      err instanceof ApiError ? err.message : String(err);
  };
  const onLabel = (label: Label) => {
    errorBar.textContent = "";
    session.submit(label).then(refresh, showError);
  };
  const onFreeze = () => {
    try {
      session.freeze();
    } catch (err) {
      showError(err);
    }
    refresh();
  };

  renderSurveyPanel(surveyPanel, client);
  refresh();
  try {
    await session.start();
  } catch (err) {
    showError(err);
  }
  refresh();
}

const mount = typeof document === "undefined" ? null : document.getElementById("app");
if (mount !== null) {
  void bootstrap(mount);
}
