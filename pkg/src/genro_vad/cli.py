# Copyright (c) 2025 Softwell Srl, Milano, Italy
# SPDX-License-Identifier: Apache-2.0
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Command line interface: one subcommand per pipeline stage.

Configuration resolution order: ``--config`` file, else the run
directory's stored ``config.yaml``, else the defaults; then every
``--set dotted.key=value``; then the dedicated flags.

Examples::

    genro-vad run-all --run-dir runs/demo
    genro-vad score --run-dir runs/demo --weights 0.1,10
    genro-vad eval --run-dir runs/demo
    genro-vad schema
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from . import __version__
from .config import (
    BOX_SOURCES,
    ConditionConfig,
    RunConfig,
    config_schema,
    load_config,
    parse_config_text,
    run_root,
)
from .exceptions import VadConfigError, VadError
from .pipeline import STAGES, Pipeline, adhoc_condition, with_overrides
from .scoring import ScoreWeights
from .storage import RunStorage

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genro-vad",
        description="Object-centric video anomaly detection on synthetic driving clips",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--run-dir",
        default=None,
        help="Run directory (default: $GENRO_VAD_RUN_ROOT/default)",
    )
    common.add_argument("--config", default=None, help="YAML or JSON configuration file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a configuration value (repeatable)",
    )
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=None, help="Worker processes")
    common.add_argument("--precision", choices=("float32", "float64"), default=None)
    common.add_argument("--no-finetune", action="store_true", help="Skip joint fine-tuning")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
    )

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument(
        "--condition",
        dest="conditions",
        action="append",
        default=[],
        metavar="NAME",
        help="Score only this configured condition (repeatable)",
    )
    scoring.add_argument("--weights", default=None, help="w_r,w_p[,w_rp,w_pp]")
    scoring.add_argument("--boxes", choices=BOX_SOURCES, default=None)
    scoring.add_argument("--flow-only", action="store_true", help="Zero the prediction weights")

    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES + ("run-all",):
        parents = [common, scoring] if stage in ("calibrate", "score", "run-all") else [common]
        sub.add_parser(stage, parents=parents, help=f"Run the {stage} stage")
    dump = sub.add_parser("dump-cubes", parents=[common], help="Write a scenario's cubes")
    dump.add_argument("--scenario", required=True, help="Scenario id, e.g. test_000")
    dump.add_argument("--boxes", choices=BOX_SOURCES, default="gt")
    sub.add_parser("schema", help="Print the configuration JSON schema")
    return parser


def resolve_config(args: argparse.Namespace, storage: RunStorage) -> RunConfig:
    if args.config:
        config = load_config(args.config, args.overrides)
    elif storage.exists("config.yaml"):
        base = parse_config_text(storage.read_text("config.yaml"))
        config = load_config(None, args.overrides, base=base)
    else:
        config = load_config(None, args.overrides)
    return with_overrides(
        config,
        seed=args.seed,
        jobs=args.jobs,
        precision=args.precision,
        no_finetune=args.no_finetune,
    )


def resolve_conditions(args: argparse.Namespace, config: RunConfig) -> list[ConditionConfig]:
    """Conditions selected by ``--condition`` plus one built from scoring flags."""
    selected: list[ConditionConfig] = []
    if not hasattr(args, "conditions"):
        return selected
    known = {c.name: c for c in config.active_conditions()}
    for name in args.conditions:
        if name not in known:
            raise VadConfigError(
                f"Unknown condition '{name}'. Configured: {', '.join(known) or 'none'}"
            )
        selected.append(known[name])
    weights_text, boxes, flow_only = args.weights, args.boxes, args.flow_only
    if weights_text or boxes or flow_only:
        weights = ScoreWeights.parse(weights_text) if weights_text else config.weights
        selected.append(adhoc_condition(boxes or "gt", weights, flow_only))
    return selected


def run(args: argparse.Namespace) -> None:
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return
    run_dir = args.run_dir or os.path.join(run_root(), "default")
    storage = RunStorage(os.path.abspath(run_dir))
    config = resolve_config(args, storage)
    pipeline = Pipeline(storage, config, resolve_conditions(args, config))
    if args.command == "run-all":
        pipeline.run_all()
    elif args.command == "dump-cubes":
        pipeline.dump_cubes(args.scenario, args.boxes)
    else:
        pipeline.run(args.command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(args, "log_level", "INFO"), format=LOG_FORMAT)
    try:
        run(args)
    except VadError as e:
        logger.error("%s failed: %s", args.command, e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
