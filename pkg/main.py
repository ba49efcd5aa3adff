import argparse
import logging
import sys

import cv2
import yaml

from common import make_rng, setup_logging
from descriptors import draw_matches, locate_keypoints
from harness import (
    ConfigError,
    StageError,
    emit_plots,
    eval_generalization,
    load_config,
    load_descriptor_stage,
    load_policy_stage,
    run_experiment,
    run_paths,
    run_root,
    stage_gen_data,
    stage_learn_keypoints,
    stage_train_descriptors,
    stage_train_policy,
    write_eval_report,
)
from render import render_view, sample_cameras, scene_focus
from rl import EVAL_SEED_RANGE
from sim import TaskEnv

logger = logging.getLogger("main")

COMMANDS = (
    "gen-data",
    "train-descriptors",
    "match-keypoints",
    "train-policy",
    "eval",
    "learn-keypoints",
    "emit-plots",
    "run",
)


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Task-axes controller learning experiments.")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run.")
    parser.add_argument("--config", required=True, help="Experiment YAML file.")
    parser.add_argument("--seed", type=int, default=None, help="Run a single seed instead of the config's seed list.")
    parser.add_argument("--out", default="runs", help="Root directory for run outputs.")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config entry, e.g. ppo.lr=1e-4 (repeatable).",
    )
    parser.add_argument(
        "--variation-seed",
        type=int,
        default=EVAL_SEED_RANGE[0],
        help="Scene variation used by match-keypoints.",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser.parse_args(argv)


def match_keypoints_command(config, paths, variation_seed: int) -> None:
    model, annotation = load_descriptor_stage(config, paths)
    env = TaskEnv(config.family, config.sim)
    env.reset(variation_seed)
    cam = sample_cameras(scene_focus(env.scene), 1, make_rng(variation_seed, "keypoint_camera"), config.render)[0]
    view = render_view(env.scene, cam)
    keypoints = locate_keypoints(model, annotation, view)
    stem = paths.plots / f"match_{variation_seed}"
    cv2.imwrite(str(stem.with_suffix(".png")), draw_matches(view.features, keypoints, annotation.labels))
    record = {
        "variation_seed": variation_seed,
        "keypoints": [
            {
                "label": label,
                "pixel": [int(p[0]), int(p[1])],
                "distance": float(d),
                "low_confidence": bool(low),
                "target": None if not ok else [float(v) for v in t],
            }
            for label, p, d, low, ok, t in zip(
                annotation.labels, keypoints.pixels, keypoints.distances, keypoints.low_confidence, keypoints.valid, keypoints.targets
            )
        ],
    }
    with open(stem.with_suffix(".yaml"), "w") as f:
        yaml.safe_dump(record, f, sort_keys=False)
    logger.info("wrote %s", stem.with_suffix(".png"))


def main(argv=None):
    args = parse_args(argv)
    setup_logging(args.log_level)
    try:
        config = load_config(args.config, args.override)
        seeds = [args.seed] if args.seed is not None else list(config.seeds)

        if args.command == "run":
            run_experiment(config, args.out, seeds)
            return
        if args.command == "emit-plots":
            path = emit_plots(run_root(config, args.out))
            if path is not None:
                logger.info("wrote %s", path)
            return

        for seed in seeds:
            paths = run_paths(config, args.out, seed)
            if args.command == "gen-data":
                stage_gen_data(config, paths)
            elif args.command == "train-descriptors":
                stage_train_descriptors(config, paths)
            elif args.command == "match-keypoints":
                match_keypoints_command(config, paths, args.variation_seed)
            elif args.command == "train-policy":
                stage_train_policy(config, paths)
            elif args.command == "eval":
                report = eval_generalization(load_policy_stage(config, paths), config, seeds=[seed], paths=paths)
                write_eval_report(report, paths.metrics)
            elif args.command == "learn-keypoints":
                stage_learn_keypoints(config, paths)
    except (StageError, ConfigError) as e:
        logger.error("%s", e)
        sys.exit(1)


if __name__ == "__main__":
    main()
