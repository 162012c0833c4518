"""Stage-by-stage pipeline driver.

Each stage reads the previous stage's line-record artifacts from the working
directory, writes its own atomically (temp file + rename), and records
config/input/artifact hashes in ``manifest.json``.  Re-running a stage whose
config, inputs, and artifacts all hash the same is a no-op.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

from . import dpo, filtering, prompts, reports
from .config import PipelineConfig, SCORER_ROLE, build_backend, build_scorer
from .corpus import chunk_document, get_tokenizer, ingest_corpus, EVAL_SPLIT, TRAIN_SPLIT, SourceDocument
from .errors import ForgeError, PrerequisiteError
from .filtering import FilterThresholds
from .gateway import GenerationRequest, GREEDY, generate_map, response_cache
from .instructions import InstructionRecord, generate_instructions
from .judge import JudgeItem, judge_all
from .preferences import AblationCandidate, PreferenceCandidate, build_ablation_candidates, build_candidates
from .records import (
    build_stamp,
    canonical_json,
    file_sha256,
    read_jsonl,
    sha256_hex,
    write_json_atomic,
    write_jsonl_atomic,
    write_text_atomic,
)
from .sft import RECOMMENDED_HPARAMS, self_annotate, split_for_rc, teacher_rc_annotate

logger = logging.getLogger(__name__)

STAGE_NAMES = (
    "ingest",
    "gen-instructions",
    "build-sft",
    "build-preferences",
    "filter",
    "sweep",
    "dpo-verify",
    "judge",
)


@dataclass
class StageResult:
    name: str
    artifacts: list[str]
    skipped: bool = False


class PipelineRunner:
    """Binds the configured backends and drives the stages over a workdir."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.workdir = Path(cfg.workdir)
        self._backends: dict[str, object] = {}
        self._scorer = None
        self._response_cache = None

    # -- lazy shared resources ------------------------------------------------

    def backend(self, role: str):
        if role not in self._backends:
            self._backends[role] = build_backend(role, self.cfg.backends[role])
        return self._backends[role]

    @property
    def scorer(self):
        if self._scorer is None:
            self._scorer = build_scorer(
                self.cfg.backends[SCORER_ROLE],
                sentence_split=self.cfg.sentence_split,
                cache_path=self.workdir / "cache" / "scores.jsonl",
            )
        return self._scorer

    @property
    def gen_cache(self):
        if self._response_cache is None:
            self._response_cache = response_cache(self.workdir / "cache" / "responses.jsonl")
        return self._response_cache

    # -- artifact bookkeeping ---------------------------------------------------

    def path(self, name: str) -> Path:
        return self.workdir / name

    def _require(self, *names: str) -> list[Path]:
        paths = []
        for name in names:
            p = self.path(name)
            if not p.exists():
                producer = {
                    "documents.jsonl": "ingest",
                    "chunks.jsonl": "ingest",
                    "instructions.jsonl": "gen-instructions",
                    "eval_instructions.jsonl": "gen-instructions",
                    "preference_candidates.jsonl": "build-preferences",
                    "ablation_candidates.jsonl": "build-preferences (with preferences.ablation)",
                    "dpo_pairs.jsonl": "filter",
                }.get(name)
                hint = f"; run '{producer}' first" if producer else ""
                raise PrerequisiteError(f"missing required artifact '{name}'{hint}")
            paths.append(p)
        return paths

    def _config_hash(self) -> str:
        return sha256_hex(canonical_json(self.cfg.canonical_dict()))

    def _manifest_path(self) -> Path:
        return self.workdir / "manifest.json"

    def _load_manifest(self) -> dict:
        path = self._manifest_path()
        if path.exists():
            import json

            return json.loads(path.read_text(encoding="utf-8"))
        return {}

    def _file_key(self, p: Path) -> str:
        try:
            return p.resolve().relative_to(self.workdir.resolve()).as_posix()
        except ValueError:
            return str(p)

    def _hash_files(self, paths: list[Path]) -> dict[str, str]:
        return {self._file_key(p): file_sha256(p) for p in paths if p.exists()}

    def _up_to_date(self, stage: str, input_paths: list[Path], artifact_names: list[str]) -> bool:
        entry = self._load_manifest().get(stage)
        if not entry or entry.get("config_hash") != self._config_hash():
            return False
        if entry.get("inputs") != self._hash_files(input_paths):
            return False
        artifact_paths = [self.path(n) for n in artifact_names]
        if not all(p.exists() for p in artifact_paths):
            return False
        return entry.get("artifacts") == self._hash_files(artifact_paths)

    def _record(self, stage: str, input_paths: list[Path], artifact_names: list[str]) -> None:
        manifest = self._load_manifest()
        manifest[stage] = {
            "config_hash": self._config_hash(),
            "inputs": self._hash_files(input_paths),
            "artifacts": self._hash_files([self.path(n) for n in artifact_names]),
            "stamp": build_stamp(),
        }
        write_json_atomic(self._manifest_path(), manifest)

    # -- stage dispatch -----------------------------------------------------------

    def run_stage(self, stage: str, force: bool = False) -> StageResult:
        try:
            runner = getattr(self, "_stage_" + stage.replace("-", "_"))
        except AttributeError:
            raise ForgeError(f"unknown stage '{stage}' (stages: {', '.join(STAGE_NAMES)})") from None
        self.workdir.mkdir(parents=True, exist_ok=True)
        input_paths, artifact_names = runner(dry=True)
        if not force and self._up_to_date(stage, input_paths, artifact_names):
            logger.info("stage %s is up to date; skipping", stage)
            return StageResult(stage, [str(self.path(n)) for n in artifact_names], skipped=True)
        runner(dry=False)
        self._record(stage, input_paths, artifact_names)
        logger.info("stage %s complete", stage)
        return StageResult(stage, [str(self.path(n)) for n in artifact_names])

    def run_all(self, force: bool = False) -> list[StageResult]:
        return [self.run_stage(stage, force=force) for stage in STAGE_NAMES]

    # -- stages -----------------------------------------------------------------

    def _corpus_input_paths(self) -> list[Path]:
        if not self.cfg.corpus_source:
            return []
        source = Path(self.cfg.corpus_source)
        paths = []
        for topic in self.cfg.topics:
            jsonl = source / f"{topic}.jsonl"
            if jsonl.exists():
                paths.append(jsonl)
            elif (source / topic).is_dir():
                paths.extend(sorted((source / topic).glob("*.txt")))
        return paths

    def _stage_ingest(self, dry: bool):
        artifacts = ["documents.jsonl", "chunks.jsonl", "ingest_stats.json"]
        inputs = self._corpus_input_paths()
        if dry:
            return inputs, artifacts
        if not self.cfg.corpus_source:
            raise PrerequisiteError("no corpus source configured (set corpus.source in the config or pass --corpus-source)")
        result = ingest_corpus(
            self.cfg.corpus_source,
            self.cfg.topics,
            self.cfg.train_per_topic,
            self.cfg.eval_per_topic,
            self.cfg.seed,
        )
        tokenizer = get_tokenizer(self.cfg.tokenizer)
        docs = sorted(result.documents, key=lambda d: (d.topic, d.doc_id))
        chunks = []
        for doc in docs:
            chunks.extend(chunk_document(doc, self.cfg.chunk_length, tokenizer))
        write_jsonl_atomic(
            self.path("documents.jsonl"),
            [
                {"doc_id": d.doc_id, "topic": d.topic, "title": d.title, "body": d.body, "split": d.split}
                for d in docs
            ],
        )
        write_jsonl_atomic(self.path("chunks.jsonl"), [c.to_record() for c in chunks])
        write_json_atomic(
            self.path("ingest_stats.json"),
            {
                "documents": len(docs),
                "train_documents": sum(1 for d in docs if d.split == TRAIN_SPLIT),
                "eval_documents": sum(1 for d in docs if d.split == EVAL_SPLIT),
                "chunks": len(chunks),
                "skipped_empty": result.skipped_empty,
                "chunk_length": self.cfg.chunk_length,
                "tokenizer": self.cfg.tokenizer,
            },
        )

    def _load_documents(self) -> list[SourceDocument]:
        rows = read_jsonl(self.path("documents.jsonl"))
        return [SourceDocument(r["doc_id"], r["topic"], r["title"], r["body"], r["split"]) for r in rows]

    def _load_chunks(self):
        from .corpus import DocumentChunk

        return [DocumentChunk.from_record(r) for r in read_jsonl(self.path("chunks.jsonl"))]

    def _instruction_few_shot(self):
        if self.cfg.instruction_few_shot:
            return tuple(read_jsonl(self.cfg.instruction_few_shot))
        return prompts.DEFAULT_INSTRUCTION_EXAMPLES

    def _answer_few_shot(self):
        if self.cfg.answer_few_shot:
            return tuple(read_jsonl(self.cfg.answer_few_shot))
        return prompts.DEFAULT_ANSWER_EXAMPLES

    def _stage_gen_instructions(self, dry: bool):
        artifacts = ["instructions.jsonl", "eval_instructions.jsonl", "instruction_stats.json"]
        if dry:
            inputs = [self.path("documents.jsonl"), self.path("chunks.jsonl")]
            if self.cfg.instruction_few_shot:
                inputs.append(Path(self.cfg.instruction_few_shot))
            return inputs, artifacts
        self._require("documents.jsonl", "chunks.jsonl")
        documents = self._load_documents()
        chunks = self._load_chunks()
        backend = self.backend("instruction_generator")
        few_shot = self._instruction_few_shot()
        train_docs = [d for d in documents if d.split == TRAIN_SPLIT]
        eval_docs = [d for d in documents if d.split == EVAL_SPLIT]
        train_records, train_stats = generate_instructions(
            train_docs,
            chunks,
            backend,
            self.cfg.n_per_doc,
            max_attempts=self.cfg.max_attempts,
            few_shot=few_shot,
            temperature=self.cfg.temperature,
            cache=self.gen_cache,
        )
        eval_records: list[InstructionRecord] = []
        eval_stats = None
        if eval_docs:
            eval_records, eval_stats = generate_instructions(
                eval_docs,
                chunks,
                backend,
                self.cfg.eval_questions_per_doc,
                max_attempts=self.cfg.max_attempts,
                few_shot=few_shot,
                temperature=self.cfg.temperature,
                cache=self.gen_cache,
            )
        write_jsonl_atomic(self.path("instructions.jsonl"), [r.to_record() for r in train_records])
        write_jsonl_atomic(self.path("eval_instructions.jsonl"), [r.to_record() for r in eval_records])
        write_json_atomic(
            self.path("instruction_stats.json"),
            {
                "train": train_stats.to_record(),
                "eval": eval_stats.to_record() if eval_stats else None,
                "backend_id": backend.backend_id,
            },
        )

    def _stage_build_sft(self, dry: bool):
        artifacts = ["sft_dataset.jsonl", "sft_metadata.json"]
        if dry:
            inputs = [self.path("instructions.jsonl"), self.path("chunks.jsonl")]
            if self.cfg.answer_few_shot:
                inputs.append(Path(self.cfg.answer_few_shot))
            return inputs, artifacts
        self._require("instructions.jsonl", "chunks.jsonl")
        instructions = [InstructionRecord.from_record(r) for r in read_jsonl(self.path("instructions.jsonl"))]
        chunks = self._load_chunks()
        rc_set, sft_set = split_for_rc(instructions, self.cfg.rc_fraction, self.cfg.seed)
        self_examples, self_stats = self_annotate(
            sft_set,
            self.backend("target_model"),
            self._answer_few_shot(),
            max_tokens=self.cfg.max_tokens,
            cache=self.gen_cache,
        )
        rc_examples, rc_stats = teacher_rc_annotate(
            rc_set,
            self.backend("rc_teacher"),
            chunks,
            max_tokens=self.cfg.max_tokens,
            cache=self.gen_cache,
        )
        mixture = sorted(self_examples + rc_examples, key=lambda ex: ex.instr_id)
        write_jsonl_atomic(self.path("sft_dataset.jsonl"), [ex.to_record() for ex in mixture])
        write_json_atomic(
            self.path("sft_metadata.json"),
            {
                "created_at": build_stamp(),
                "backends": {
                    "target_model": self.backend("target_model").backend_id,
                    "rc_teacher": self.backend("rc_teacher").backend_id,
                },
                "template_hashes": prompts.template_fingerprints(),
                "recommended_hparams": RECOMMENDED_HPARAMS,
                "rc_fraction": self.cfg.rc_fraction,
                "counts": {
                    "total": len(mixture),
                    "self_annotated": len(self_examples),
                    "teacher_rc": len(rc_examples),
                },
                "stats": {"self_annotated": self_stats.to_record(), "teacher_rc": rc_stats.to_record()},
            },
        )

    def _stage_build_preferences(self, dry: bool):
        artifacts = ["preference_candidates.jsonl", "preference_stats.json"]
        if self.cfg.ablation:
            artifacts.append("ablation_candidates.jsonl")
        if dry:
            return [self.path("instructions.jsonl"), self.path("chunks.jsonl")], artifacts
        self._require("instructions.jsonl", "chunks.jsonl")
        instructions = [InstructionRecord.from_record(r) for r in read_jsonl(self.path("instructions.jsonl"))]
        chunks = self._load_chunks()
        backend = self.backend("target_model")
        candidates, stats = build_candidates(
            instructions,
            chunks,
            backend,
            k=self.cfg.k,
            temperature=self.cfg.temperature,
            max_tokens=self.cfg.max_tokens,
            cache=self.gen_cache,
        )
        write_jsonl_atomic(self.path("preference_candidates.jsonl"), [c.to_record() for c in candidates])
        all_stats = {"main": stats, "k": self.cfg.k, "backend_id": backend.backend_id}
        if self.cfg.ablation:
            ablation, ab_stats = build_ablation_candidates(
                instructions,
                backend,
                k=self.cfg.k,
                temperature=self.cfg.temperature,
                max_tokens=self.cfg.max_tokens,
                cache=self.gen_cache,
            )
            write_jsonl_atomic(self.path("ablation_candidates.jsonl"), [c.to_record() for c in ablation])
            all_stats["ablation"] = ab_stats
        write_json_atomic(self.path("preference_stats.json"), all_stats)

    def _load_candidates(self) -> list[PreferenceCandidate]:
        return [PreferenceCandidate.from_record(r) for r in read_jsonl(self.path("preference_candidates.jsonl"))]

    def _stage_filter(self, dry: bool):
        artifacts = ["dpo_pairs.jsonl", "filter_stats.json", "known_split.jsonl"]
        inputs = ["preference_candidates.jsonl"]
        if self.cfg.ablation:
            artifacts.append("ablation_pairs.jsonl")
            inputs.append("ablation_candidates.jsonl")
        if dry:
            return [self.path(n) for n in inputs], artifacts
        self._require(*inputs)
        candidates = self._load_candidates()
        thresholds = FilterThresholds(tau_l=self.cfg.tau_l, tau_k=self.cfg.tau_k)
        pairs, stats = filtering.filter_candidates(candidates, self.scorer, thresholds)
        write_jsonl_atomic(self.path("dpo_pairs.jsonl"), [p.to_record() for p in pairs])
        known = filtering.extract_known_split(
            candidates, self.scorer, thresholds, self.cfg.known_sample_n, self.cfg.seed
        )
        write_jsonl_atomic(
            self.path("known_split.jsonl"),
            [{"instr_id": c.instr_id, "instruction": c.instruction} for c in known],
        )
        stats_doc = {"main": stats.to_record(), "known_split_size": len(known), "candidates": len(candidates)}
        if self.cfg.ablation:
            ablation = [AblationCandidate.from_record(r) for r in read_jsonl(self.path("ablation_candidates.jsonl"))]
            ab_pairs, ab_stats = filtering.select_ablation_pairs(ablation, self.scorer)
            write_jsonl_atomic(self.path("ablation_pairs.jsonl"), ab_pairs)
            stats_doc["ablation"] = ab_stats
        write_json_atomic(self.path("filter_stats.json"), stats_doc)

    def _sweep_pair_file(self, tau_k: float) -> str:
        return f"sweep/dpo_pairs_tau_k_{tau_k:g}.jsonl"

    def _stage_sweep(self, dry: bool):
        artifacts = ["sweep.csv", "sweep_sizes.png"]
        artifacts.extend(self._sweep_pair_file(v) for v in self.cfg.sweep)
        if dry:
            return [self.path("preference_candidates.jsonl")], artifacts
        self._require("preference_candidates.jsonl")
        candidates = self._load_candidates()
        points = filtering.sweep_tau_k(candidates, self.scorer, self.cfg.tau_l, self.cfg.sweep)
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["tau_K", "size", "path"])
        for point in points:
            rel = self._sweep_pair_file(point.tau_k)
            write_jsonl_atomic(self.path(rel), [p.to_record() for p in point.pairs])
            writer.writerow([f"{point.tau_k:g}", point.size, rel])
        write_text_atomic(self.path("sweep.csv"), buf.getvalue())
        reports.render_sweep_figure(points, self.path("sweep_sizes.png"))

    def _stage_dpo_verify(self, dry: bool):
        artifacts = ["margin_trajectory.csv", "dpo_report.json", "margin_trajectory.png"]
        if dry:
            return [self.path("dpo_pairs.jsonl")], artifacts
        self._require("dpo_pairs.jsonl")
        records = read_jsonl(self.path("dpo_pairs.jsonl"))
        if not records:
            raise ForgeError("dpo_pairs.jsonl is empty; nothing to verify (thresholds may be too strict)")
        items, tokenizer = dpo.load_preference_items(records)
        vocab = tokenizer.vocab_size
        ref = dpo.ToyPolicy.uniform(vocab, vocab)
        config = dpo.DpoConfig(beta=self.cfg.beta, steps=self.cfg.steps, learning_rate=self.cfg.learning_rate)
        result = dpo.train_toy(ref.copy(), ref, items, config)
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["step", "loss", "mean_margin", "accuracy"])
        for row in result.history:
            writer.writerow([row["step"], f"{row['loss']:.10f}", f"{row['mean_margin']:.10f}", f"{row['accuracy']:.6f}"])
        write_text_atomic(self.path("margin_trajectory.csv"), buf.getvalue())
        write_json_atomic(
            self.path("dpo_report.json"),
            {
                "items": len(items),
                "vocab_size": vocab,
                "beta": config.beta,
                "steps": config.steps,
                "learning_rate": config.learning_rate,
                "initial_loss": result.history[0]["loss"],
                "final_loss": result.history[-1]["loss"],
                "initial_margin": result.initial_margin,
                "final_margin": result.final_margin,
                "final_accuracy": result.final_accuracy,
            },
        )
        reports.render_margin_figure(result.history, self.path("margin_trajectory.png"))

    def _judge_response_inputs(self) -> list[Path]:
        paths = []
        for value in (self.cfg.judge_response_a, self.cfg.judge_response_b):
            if value:
                paths.append(Path(value))
        return paths

    def _stage_judge(self, dry: bool):
        artifacts = ["verdicts.jsonl", "judge_summary.json", "judge_wtl.png"]
        generated_responses = not (self.cfg.judge_response_a and self.cfg.judge_response_b)
        if generated_responses:
            artifacts = ["judge_responses_a.jsonl", "judge_responses_b.jsonl"] + artifacts
        if dry:
            inputs = [self.path("eval_instructions.jsonl"), self.path("chunks.jsonl")]
            inputs.extend(self._judge_response_inputs())
            return inputs, artifacts
        self._require("eval_instructions.jsonl", "chunks.jsonl")
        eval_instructions = [
            InstructionRecord.from_record(r) for r in read_jsonl(self.path("eval_instructions.jsonl"))
        ]
        if not eval_instructions:
            raise PrerequisiteError("eval_instructions.jsonl is empty; nothing to judge")
        chunks = {(c.doc_id, c.chunk_index): c for c in self._load_chunks()}

        if generated_responses:
            responses_a, responses_b = self._generate_judge_responses(eval_instructions, chunks)
            write_jsonl_atomic(
                self.path("judge_responses_a.jsonl"),
                [{"instr_id": i, "text": t} for i, t in sorted(responses_a.items())],
            )
            write_jsonl_atomic(
                self.path("judge_responses_b.jsonl"),
                [{"instr_id": i, "text": t} for i, t in sorted(responses_b.items())],
            )
        else:
            responses_a = {r["instr_id"]: r["text"] for r in read_jsonl(self.cfg.judge_response_a)}
            responses_b = {r["instr_id"]: r["text"] for r in read_jsonl(self.cfg.judge_response_b)}

        items = []
        for rec in eval_instructions:
            if rec.instr_id not in responses_a or rec.instr_id not in responses_b:
                logger.warning("no responses for %s; skipping", rec.instr_id)
                continue
            chunk = chunks.get((rec.doc_id, rec.chunk_index))
            if chunk is None:
                raise ForgeError(f"instruction {rec.instr_id}: source chunk not found")
            items.append(
                JudgeItem(
                    instr_id=rec.instr_id,
                    instruction=rec.text,
                    document=chunk.text,
                    response_a=responses_a[rec.instr_id],
                    response_b=responses_b[rec.instr_id],
                )
            )
        verdicts, summary = judge_all(items, self.backend("judge"), cache=self.gen_cache)
        write_jsonl_atomic(self.path("verdicts.jsonl"), [v.to_record() for v in verdicts])
        write_json_atomic(
            self.path("judge_summary.json"),
            {
                **summary.to_record(),
                "parse_failures": sum(1 for v in verdicts if v.parse_failed),
                "backend_id": self.backend("judge").backend_id,
            },
        )
        reports.render_wtl_figure(summary, self.path("judge_wtl.png"))

    def _generate_judge_responses(self, eval_instructions, chunks):
        """Default judge inputs: grounded vs ungrounded greedy answers from the
        tuned model, so the comparison probes what the document context adds."""
        backend = self.backend("target_model")
        reqs = {}
        for rec in eval_instructions:
            chunk = chunks.get((rec.doc_id, rec.chunk_index))
            if chunk is None:
                raise ForgeError(f"instruction {rec.instr_id}: source chunk not found")
            g_system, g_user = prompts.grounded_answer_prompt(chunk.text, rec.text)
            p_system, p_user = prompts.plain_answer_prompt(rec.text)
            reqs[(rec.instr_id, "a")] = GenerationRequest(
                system_prompt=g_system,
                user_prompt=g_user,
                max_tokens=self.cfg.max_tokens,
                decoding=GREEDY,
                request_tag=f"judge-resp:{rec.instr_id}:grounded",
            )
            reqs[(rec.instr_id, "b")] = GenerationRequest(
                system_prompt=p_system,
                user_prompt=p_user,
                max_tokens=self.cfg.max_tokens,
                decoding=GREEDY,
                request_tag=f"judge-resp:{rec.instr_id}:ungrounded",
            )
        results = generate_map(backend, reqs, self.gen_cache)
        responses_a = {}
        responses_b = {}
        for (instr_id, side), result in results.items():
            target = responses_a if side == "a" else responses_b
            target[instr_id] = result.texts[0].strip()
        return responses_a, responses_b
