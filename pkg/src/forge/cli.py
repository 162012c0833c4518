"""Command-line driver: one subcommand per pipeline stage plus run-all.

Backend bindings can be overridden per role with dotted flags, e.g.
``--backend.scorer.kind=lexical`` or ``--backend.judge.base_url <url>``.
Errors exit nonzero with a machine-readable JSON summary on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .config import validate_config
from .errors import ConfigError, ForgeError
from .pipeline import PipelineRunner, STAGE_NAMES

logger = logging.getLogger(__name__)

_BACKEND_FLAG_PREFIX = "--backend."


def _parse_backend_overrides(extra: list[str]) -> dict[str, object]:
    """Turn leftover ``--backend.<role>.<key>[=value]`` tokens into overrides."""
    overrides: dict[str, object] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith(_BACKEND_FLAG_PREFIX):
            raise ConfigError([f"unrecognized argument '{token}'"])
        body = token[2:]
        if "=" in body:
            dotted, value = body.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError([f"flag '{token}' needs a value"])
            dotted, value = body, extra[i + 1]
            i += 1
        parts = dotted.split(".")
        if len(parts) != 3:
            raise ConfigError([f"backend flags look like --backend.<role>.<key>, got '{token}'"])
        overrides["backends." + ".".join(parts[1:])] = yaml.safe_load(value)
        i += 1
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Self-training data curation pipeline: build, filter, verify, and judge preference data.",
    )
    parser.add_argument("stage", choices=STAGE_NAMES + ("run-all",), help="pipeline stage to run")
    parser.add_argument("--config", help="YAML config file (omit for defaults)")
    parser.add_argument("--seed", type=int, help="override the pipeline seed")
    parser.add_argument("--tau-k", type=float, help="override the knowledge-filter threshold")
    parser.add_argument("--tau-l", type=float, help="override the consistency-filter threshold")
    parser.add_argument("--k", type=int, help="override the per-instruction sample count")
    parser.add_argument("--workdir", help="override the artifact directory")
    parser.add_argument("--corpus-source", help="override the corpus source path")
    parser.add_argument("--ablation", action="store_true", help="also build/filter the no-context bundles")
    parser.add_argument("--force", action="store_true", help="re-run even when the manifest says up to date")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = _parse_backend_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.tau_k is not None:
            overrides["filter.tau_K"] = args.tau_k
        if args.tau_l is not None:
            overrides["filter.tau_L"] = args.tau_l
        if args.k is not None:
            overrides["preferences.k"] = args.k
        if args.workdir is not None:
            overrides["workdir"] = args.workdir
        if args.corpus_source is not None:
            overrides["corpus.source"] = args.corpus_source
        if args.ablation:
            overrides["preferences.ablation"] = True
        cfg = validate_config(args.config, overrides=overrides)
        runner = PipelineRunner(cfg)
        if args.stage == "run-all":
            results = runner.run_all(force=args.force)
        else:
            results = [runner.run_stage(args.stage, force=args.force)]
    except ForgeError as exc:
        summary = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            summary["problems"] = exc.problems
        print(json.dumps(summary), file=sys.stderr)
        return 1
    for result in results:
        status = "up-to-date" if result.skipped else "done"
        print(f"{result.name}: {status}")
        for artifact in result.artifacts:
            print(f"  {artifact}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
