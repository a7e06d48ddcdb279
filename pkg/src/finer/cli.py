"""Command-line entry point wiring all pipelines.

Every pipeline subcommand shares the same plumbing: a structured config
file names the endpoints (API keys come from the environment, never the
config), --seed pins determinism, --replay answers every request from the
response cache (zero misses or the run fails), and each run drops exactly
one run_manifest.json beside its outputs recording config hash, input and
output digests, endpoints, and cache counters.

Exit codes: 2 configuration problems, 3 bad input data, 4 runtime
pipeline failures.
"""

from __future__ import annotations

import functools
import json
import time
from pathlib import Path

import click

from . import __version__
from .client import (
    MODE_RECORD,
    MODE_REPLAY,
    AppConfig,
    ChatClient,
    ResponseCache,
    load_config,
    parse_config,
)
from .core import (
    ConfigError,
    FinerError,
    InputError,
    Seed,
    load_jsonl,
    save_jsonl,
)
from .dpo import build_preference_dataset, write_trainer_export
from .evaluate import (
    evaluate_mcqs,
    paired_accuracy,
    positional_bias_report,
    random_baselines,
    report_curves,
    write_report_csv,
    write_report_json,
)
from .manifest import RunManifest
from .mcq_build import (
    LlmWhQuestionSource,
    build_benchmark,
    build_manifest,
    negsets_by_key,
    template_wh_question,
)
from .neg_gen import FilterPolicy, generate_negative_sets
from .plots import render_report_figures
from .sg_extract import extract_scene_graph, import_structured


class RunContext:
    """Per-invocation wiring: config, cache, client, and the manifest."""

    def __init__(
        self,
        subcommand: str,
        config_path: str | None,
        seed: int,
        replay: bool,
        cache_dir: str | None,
        out_dir: str,
    ) -> None:
        if config_path is not None:
            self.config = load_config(config_path)
        else:
            self.config = parse_config({"version": 1, "endpoints": []}, "<default>")
        self.cache_dir = cache_dir if cache_dir is not None else self.config.cache_dir
        self.seed = Seed(seed)
        self.replay = replay
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._client: ChatClient | None = None
        self._started = time.monotonic()
        self.manifest = RunManifest(
            subcommand=subcommand,
            config_hash=self.config.hash(),
            seed=seed,
            replay=replay,
        )

    def client(self) -> ChatClient:
        if self._client is None:
            self._client = ChatClient(
                endpoints=self.config.endpoints,
                cache=ResponseCache(self.cache_dir),
                mode=MODE_REPLAY if self.replay else MODE_RECORD,
                parallelism=self.config.parallelism,
            )
        return self._client

    def require_endpoint(self, endpoint_id: str) -> str:
        if endpoint_id not in self.config.endpoints:
            raise ConfigError(
                f"endpoint {endpoint_id!r} is not declared in the config"
            )
        if endpoint_id not in self.manifest.endpoints:
            self.manifest.endpoints.append(endpoint_id)
        return endpoint_id

    def read_input(self, path: str, schema: str) -> list:
        if not Path(path).exists():
            raise InputError(f"input file does not exist: {path}")
        self.manifest.add_input(path)
        return load_jsonl(path, schema)

    def write_jsonl(self, name: str, values: list, schema: str) -> Path:
        path = self.out_dir / name
        save_jsonl(path, values, schema)
        self.manifest.add_output(path)
        return path

    def write_json(self, name: str, payload) -> Path:
        path = self.out_dir / name
        tmp = Path(f"{path}.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")
        tmp.replace(path)
        self.manifest.add_output(path)
        return path

    def finish(self) -> Path:
        if self._client is not None:
            self.manifest.cache = self._client.cache.stats.as_dict()
            if self.replay and self.manifest.cache.get("misses", 0) > 0:
                raise ConfigError(
                    "replay run hit cache misses: "
                    f"{self.manifest.cache['misses']}"
                )
        self.manifest.wall_time_s = round(time.monotonic() - self._started, 3)
        path = self.manifest.write(self.out_dir)
        click.echo(f"manifest: {path}")
        return path


def common_options(f):
    f = click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="Structured config file declaring endpoints and policies.",
    )(f)
    f = click.option(
        "--seed", type=int, default=0, show_default=True, help="Run seed."
    )(f)
    f = click.option(
        "--replay",
        is_flag=True,
        help="Serve every request from the response cache; fail on any miss.",
    )(f)
    f = click.option(
        "--cache-dir",
        type=click.Path(file_okay=False),
        default=None,
        help="Override the config's response-cache directory.",
    )(f)
    f = click.option(
        "--out",
        "out_dir",
        type=click.Path(file_okay=False),
        default=".",
        show_default=True,
        help="Output directory.",
    )(f)
    return f


def pipeline_command(f):
    """Translate toolkit errors into their documented exit codes."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except FinerError as err:
            click.echo(f"error: {err}", err=True)
            raise SystemExit(getattr(err, "exit_code", 1))

    return wrapper


@click.group()
@click.version_option(version=__version__, prog_name="finer")
def main() -> None:
    """Fine-grained negative-query benchmark and preference-data toolkit.

    Exit codes: 2 = configuration error, 3 = input error, 4 = pipeline
    error.
    """


@main.command("extract-sg")
@click.option("--captions", type=click.Path(dir_okay=False), default=None,
              help="captions.v1 JSONL to run endpoint extraction over.")
@click.option("--structured", type=click.Path(dir_okay=False), default=None,
              help="Pre-structured annotation JSON to import directly.")
@click.option("--endpoint", "llm_endpoint", default=None,
              help="Text endpoint for extraction stages.")
@click.option("--image-endpoint", "mllm_endpoint", default=None,
              help="Multimodal endpoint for relation validation "
                   "(defaults to --endpoint).")
@click.option("--audit-sample", type=int, default=0, show_default=True,
              help="Kept relations sampled for human review, per image.")
@common_options
@pipeline_command
def extract_sg(captions, structured, llm_endpoint, mllm_endpoint,
               audit_sample, config_path, seed, replay, cache_dir, out_dir):
    """Build scene graphs from captions (or import structured annotations)."""
    ctx = RunContext("extract-sg", config_path, seed, replay, cache_dir, out_dir)
    if (captions is None) == (structured is None):
        raise InputError("pass exactly one of --captions or --structured")

    graphs = []
    audits = []
    if structured is not None:
        if not Path(structured).exists():
            raise InputError(f"input file does not exist: {structured}")
        ctx.manifest.add_input(structured)
        with open(structured, "r", encoding="utf-8") as fh:
            records = json.load(fh)
        graphs = import_structured(records)
    else:
        if llm_endpoint is None:
            raise ConfigError("--endpoint is required with --captions")
        llm = ctx.require_endpoint(llm_endpoint)
        mllm = ctx.require_endpoint(mllm_endpoint or llm_endpoint)
        caption_records = ctx.read_input(captions, "captions.v1")
        for caption in caption_records:
            sg, cands = extract_scene_graph(
                ctx.client(), llm, mllm, caption,
                audit_sample=audit_sample, seed=ctx.seed,
            )
            graphs.append(sg)
            audits.extend(cands)

    ctx.write_jsonl("scene_graphs.jsonl", graphs, "scene_graph.v1")
    if captions is not None:
        ctx.write_jsonl("relation_audit.jsonl", audits, "relation_audit.v1")
    ctx.finish()
    click.echo(f"scene graphs: {len(graphs)}")


@main.command("neg-gen")
@click.option("--sg", "sg_path", type=click.Path(dir_okay=False), required=True,
              help="scene_graph.v1 JSONL input.")
@click.option("--endpoint", "discriminator_endpoint", required=True,
              help="Multimodal endpoint answering the discriminator question.")
@click.option("--proposal-endpoint", default=None,
              help="Text endpoint proposing negatives (defaults to --endpoint).")
@click.option("--policy", "policy_path", type=click.Path(dir_okay=False),
              default=None,
              help="JSON filter-policy file overriding the config's policy.")
@common_options
@pipeline_command
def neg_gen(sg_path, discriminator_endpoint, proposal_endpoint, policy_path,
            config_path, seed, replay, cache_dir, out_dir):
    """Propose negative counterparts and filter them by answer entropy."""
    ctx = RunContext("neg-gen", config_path, seed, replay, cache_dir, out_dir)
    discriminator = ctx.require_endpoint(discriminator_endpoint)
    proposer = ctx.require_endpoint(proposal_endpoint or discriminator_endpoint)
    if policy_path is not None:
        if not Path(policy_path).exists():
            raise InputError(f"input file does not exist: {policy_path}")
        ctx.manifest.add_input(policy_path)
        with open(policy_path, "r", encoding="utf-8") as fh:
            policy = FilterPolicy.from_config(json.load(fh))
    else:
        policy = FilterPolicy.from_config(ctx.config.policy)
    sgs = ctx.read_input(sg_path, "scene_graph.v1")

    negsets, audit, summary = generate_negative_sets(
        ctx.client(), proposer, discriminator, sgs, policy, ctx.seed
    )
    ctx.write_jsonl("negative_sets.jsonl", negsets, "negative_set.v1")
    ctx.write_jsonl("discriminator_audit.jsonl", audit, "discriminator_audit.v1")
    ctx.write_json("neg_gen_summary.json", summary)
    ctx.finish()
    click.echo(
        f"negative sets: {len(negsets)} "
        f"(needs human: {len(summary['needs_human'])})"
    )


@main.command("build-mcq")
@click.option("--sg", "sg_path", type=click.Path(dir_okay=False), required=True,
              help="scene_graph.v1 JSONL input.")
@click.option("--negatives", "neg_path", type=click.Path(dir_okay=False),
              required=True, help="negative_set.v1 JSONL input.")
@click.option("--k", "ks_text", default="2,3", show_default=True,
              help="Comma-separated entity counts for the multi settings.")
@click.option("--per-image", type=int, default=1, show_default=True,
              help="Pairs per image per (setting, k) combination.")
@click.option("--wh-endpoint", default=None,
              help="Endpoint that drafts wh-question templates "
                   "(offline template used when omitted).")
@click.option("--no-wh", is_flag=True, help="Skip the wh setting.")
@click.option("--granularity", is_flag=True,
              help="Emit the seven-level granularity ladder per image.")
@click.option("--rotations", is_flag=True,
              help="Emit three-position rotation sets per image.")
@common_options
@pipeline_command
def build_mcq(sg_path, neg_path, ks_text, per_image, wh_endpoint, no_wh,
              granularity, rotations, config_path, seed, replay, cache_dir,
              out_dir):
    """Render scene graphs and negatives into paired five-option questions."""
    ctx = RunContext("build-mcq", config_path, seed, replay, cache_dir, out_dir)
    try:
        ks = tuple(int(part) for part in ks_text.split(",") if part.strip())
    except ValueError:
        raise InputError(f"--k must be comma-separated integers, got {ks_text!r}")
    if not ks or any(k < 1 for k in ks):
        raise InputError(f"--k needs positive integers, got {ks_text!r}")

    sgs = ctx.read_input(sg_path, "scene_graph.v1")
    negsets = negsets_by_key(ctx.read_input(neg_path, "negative_set.v1"))
    if wh_endpoint is not None:
        wh_source = LlmWhQuestionSource(
            ctx.client(), ctx.require_endpoint(wh_endpoint)
        )
    else:
        wh_source = template_wh_question

    mcqs = build_benchmark(
        sgs,
        negsets,
        ctx.seed,
        ks=ks,
        per_image=per_image,
        include_wh=not no_wh,
        wh_source=wh_source,
        include_granularity=granularity,
        include_rotations=rotations,
    )
    ctx.write_jsonl("mcqs.jsonl", mcqs, "mcq.v1")
    ctx.write_json("benchmark_manifest.json", build_manifest(mcqs, ctx.seed))
    ctx.finish()
    click.echo(f"questions: {len(mcqs)} ({len(mcqs) // 2} pairs)")


@main.command("build-dpo")
@click.option("--captions", type=click.Path(dir_okay=False), required=True,
              help="captions.v1 JSONL input.")
@click.option("--endpoint", "llm_endpoint", required=True,
              help="Text endpoint extracting and corrupting phrases.")
@click.option("--cap", type=int, default=160_000, show_default=True,
              help="Maximum tuples kept (uniform reservoir subsample).")
@click.option("--classify", is_flag=True,
              help="Label image categories from captions (fail-open).")
@click.option("--category", "categories", multiple=True,
              help="With --classify: keep only these categories "
                   "(unlabeled images always pass).")
@common_options
@pipeline_command
def build_dpo(captions, llm_endpoint, cap, classify, categories, config_path,
              seed, replay, cache_dir, out_dir):
    """Build preference tuples (query, accepted, rejected) from captions."""
    ctx = RunContext("build-dpo", config_path, seed, replay, cache_dir, out_dir)
    llm = ctx.require_endpoint(llm_endpoint)
    caption_records = ctx.read_input(captions, "captions.v1")
    tuples, stats = build_preference_dataset(
        ctx.client(),
        llm,
        caption_records,
        ctx.seed,
        cap=cap,
        parallelism=1,
        classify=classify,
        allowed_categories=list(categories) or None,
    )
    ctx.write_jsonl("preference.jsonl", tuples, "preference.v1")
    export_path = ctx.out_dir / "trainer_export.json"
    write_trainer_export(export_path, tuples)
    ctx.manifest.add_output(export_path)
    ctx.write_json("dpo_summary.json", stats)
    ctx.finish()
    click.echo(f"preference tuples: {len(tuples)}")


@main.command("evaluate")
@click.option("--mcq", "mcq_path", type=click.Path(dir_okay=False), required=True,
              help="mcq.v1 JSONL benchmark file.")
@click.option("--endpoint", "endpoint_id", required=True,
              help="Multimodal endpoint under evaluation.")
@common_options
@pipeline_command
def evaluate(mcq_path, endpoint_id, config_path, seed, replay, cache_dir,
             out_dir):
    """Ask every question and record the answers."""
    ctx = RunContext("evaluate", config_path, seed, replay, cache_dir, out_dir)
    endpoint = ctx.require_endpoint(endpoint_id)
    mcqs = ctx.read_input(mcq_path, "mcq.v1")
    records = evaluate_mcqs(ctx.client(), endpoint, mcqs)
    ctx.write_jsonl("eval_records.jsonl", records, "eval_records.v1")
    ctx.finish()
    answered = sum(1 for r in records if r.parsed_letter is not None)
    click.echo(f"records: {len(records)} (parseable answers: {answered})")


@main.command("report")
@click.option("--records", "records_path", type=click.Path(dir_okay=False),
              required=True, help="eval_records.v1 JSONL input.")
@click.option("--mcq", "mcq_path", type=click.Path(dir_okay=False), required=True,
              help="mcq.v1 JSONL the records were answered against.")
@click.option("--baselines", is_flag=True,
              help="Include analytic random-guess baselines.")
@click.option("--trials", type=int, default=0, show_default=True,
              help="With --baselines: Monte-Carlo trials (0 = analytic only).")
@click.option("--positional-bias", is_flag=True,
              help="Require rotation sets and report per-position accuracy.")
@click.option("--no-figures", is_flag=True, help="Skip figure rendering.")
@common_options
@pipeline_command
def report(records_path, mcq_path, baselines, trials, positional_bias,
           no_figures, config_path, seed, replay, cache_dir, out_dir):
    """Score paired accuracy and render the report tables and figures."""
    ctx = RunContext("report", config_path, seed, replay, cache_dir, out_dir)
    records = ctx.read_input(records_path, "eval_records.v1")
    mcqs = ctx.read_input(mcq_path, "mcq.v1")
    result = paired_accuracy(records, mcqs)
    if baselines:
        result["baselines"] = random_baselines(trials=trials, seed=seed)
    if positional_bias:
        result["positional_bias"] = positional_bias_report(records, mcqs)

    json_path = ctx.out_dir / "report.json"
    write_report_json(result, json_path)
    ctx.manifest.add_output(json_path)
    csv_path = ctx.out_dir / "report.csv"
    write_report_csv(result, csv_path)
    ctx.manifest.add_output(csv_path)
    if not no_figures:
        for figure in render_report_figures(result, ctx.out_dir / "figures"):
            ctx.manifest.add_output(figure)
    ctx.finish()
    overall = result["overall"]["paired_accuracy"]
    click.echo(f"paired accuracy: {overall:.4f} over {result['n_pairs']} pairs")


@main.command("serve-review")
@click.option("--audit", "audit_path", type=click.Path(dir_okay=False),
              required=True, help="discriminator_audit.v1 JSONL to review.")
@click.option("--labels", "labels_path", type=click.Path(dir_okay=False),
              required=True, help="labels.v1 JSONL to append verdicts to.")
@click.option("--mcq", "mcq_path", type=click.Path(dir_okay=False), default=None,
              help="mcq.v1 JSONL enabling survey export.")
@click.option("--survey-dir", type=click.Path(file_okay=False), default=None,
              help="Directory for exported survey files.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8620, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Config file (unused beyond validation).")
@pipeline_command
def serve_review(audit_path, labels_path, mcq_path, survey_dir, host, port,
                 config_path):
    """Serve the label-review HTTP API for a calibration run."""
    import uvicorn

    from .review import ReviewStore, create_app

    if not Path(audit_path).exists():
        raise InputError(f"input file does not exist: {audit_path}")
    results = load_jsonl(audit_path, "discriminator_audit.v1")
    mcqs = None
    if mcq_path is not None:
        if not Path(mcq_path).exists():
            raise InputError(f"input file does not exist: {mcq_path}")
        mcqs = load_jsonl(mcq_path, "mcq.v1")
    store = ReviewStore(results, Path(labels_path))
    app = create_app(
        store,
        mcqs=mcqs,
        survey_dir=Path(survey_dir) if survey_dir else None,
    )
    click.echo(
        f"review API on http://{host}:{port} "
        f"({store.calibration_status()['total_misclassified']} tasks)"
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
