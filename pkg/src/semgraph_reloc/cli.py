"""Command-line entry point: ``semgraph-reloc <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from semgraph_reloc.config import ABLATIONS, RunConfig
from semgraph_reloc.errors import ArtifactError, ConfigError

log = logging.getLogger("semgraph_reloc")

SNAPSHOT = "resolved_config.yaml"
CHECKPOINT = "model.ckpt"

# dedicated flags and the config keys they set
_FLAG_KEYS = {
    "data_root": "data_root",
    "output_dir": "output_dir",
    "seed": "rng_seed",
    "learning_rate": "train.learning_rate",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "ablation": "train.ablation",
    "n_worlds": "synth.n_worlds",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # report bad usage through main() so the error line and exit status stay uniform
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value, e.g. --set model.k=8 (repeatable)")
    p.add_argument("--data-root")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="semgraph-reloc",
        description="Semantic-graph LiDAR/camera place matching: data, training and evaluation.")
    parser.add_argument("--print-config", action="store_true",
                        help="print the default configuration as YAML and exit")
    sub = parser.add_subparsers(dest="command", metavar="{nodes,pairs,synth,train,eval,ablate}",
                                parser_class=_Parser)

    p = sub.add_parser("nodes", help="extract semantic graphs for scenes as JSON lines")
    _common(p)
    p.add_argument("--scene", action="append", default=[], metavar="SEQ:FRAME",
                   help="scene to process (repeatable); default every frame of every sequence")
    p.add_argument("--modality", choices=("lidar", "image", "both"), default="both")

    p = sub.add_parser("pairs", help="label image/cloud pairs from poses")
    _common(p)

    p = sub.add_parser("synth", help="write a synthetic dataset in KITTI layout")
    _common(p)
    p.add_argument("--n-worlds", type=int)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _common(p)
    p.add_argument("--holdout", metavar="SEQ",
                   help="validation sequence (default: the last one; 'none' trains on all)")

    p = sub.add_parser("eval", help="per-sequence F1 table, P-R curve and plot")
    _common(p)
    p.add_argument("--checkpoint", type=Path,
                   help="score this model on every sequence instead of leave-one-out training")
    p.add_argument("--no-train", action="store_true", help="fail instead of training when no checkpoint")

    p = sub.add_parser("ablate", help="leave-one-out F1 for every ablation row")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="training seeds averaged per row")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.override(key.strip(), value)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.override(key, json.dumps(value) if not isinstance(value, str) else value)
    cfg.train.validate()
    return cfg


def _prepare_output(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    cfg.save(out / SNAPSHOT)
    return out


def _root(cfg: RunConfig):
    from semgraph_reloc.ingest import KittiRoot

    root = Path(cfg.data_root)
    if not root.is_dir():
        raise ConfigError(f"data root {root} does not exist (run `synth` first?)")
    return KittiRoot(root)


def _pairs(cfg: RunConfig, root):
    p = cfg.pairs
    return root.pairs(p.pos_threshold, p.neg_threshold, p.neg_per_pos, cfg.rng_seed)


def cmd_nodes(cfg, args):
    from semgraph_reloc.graph import build_graph
    from semgraph_reloc.model import scene_seed
    from semgraph_reloc.nodes import cluster_cloud, image_nodes
    from semgraph_reloc.training import cluster_configs

    root, out = _root(cfg), _prepare_output(cfg)
    if args.scene:
        scenes = []
        for s in args.scene:
            seq, _, frame = s.partition(":")
            if not frame.isdigit():
                raise ConfigError(f"--scene expects SEQ:FRAME, got {s!r}")
            scenes.append((seq, int(frame)))
    else:
        scenes = [p.scene_id for seq in root.sequences() for p in root.poses(seq)]
    lidar_cfg, image_cfg = cluster_configs(cfg)
    m = cfg.model
    path = out / "nodes.jsonl"
    with path.open("w") as fh:
        for scene in scenes:
            seed = scene_seed(cfg.rng_seed, scene)
            if args.modality in ("lidar", "both"):
                g = build_graph(cluster_cloud(root.cloud(scene), lidar_cfg), m.capacity, seed,
                                "lidar", m.size_weighted_sampling)
                fh.write(json.dumps({"scene": list(scene), **g.to_record()}) + "\n")
            if args.modality in ("image", "both"):
                g = build_graph(image_nodes(root.image(scene), image_cfg), m.capacity, seed,
                                "image", m.size_weighted_sampling)
                fh.write(json.dumps({"scene": list(scene), **g.to_record()}) + "\n")
    log.info("wrote graphs for %d scenes to %s", len(scenes), path)


def cmd_pairs(cfg, args):
    from semgraph_reloc.ingest import generate_pairs, write_pairs

    root, out = _root(cfg), _prepare_output(cfg)
    p = cfg.pairs
    pairs = []
    for k, seq in enumerate(root.sequences()):
        pairs += generate_pairs(root.poses(seq), p.pos_threshold, p.neg_threshold, p.neg_per_pos,
                                cfg.rng_seed + k)
    write_pairs(out / "pairs.tsv", pairs)
    n_pos = sum(x.label for x in pairs)
    log.info("%d positive and %d negative pairs -> %s", n_pos, len(pairs) - n_pos, out / "pairs.tsv")


def cmd_synth(cfg, args):
    from semgraph_reloc.synth import SceneSpec, make_dataset

    s = cfg.synth
    data = make_dataset(SceneSpec(rng_seed=s.rng_seed), s.n_worlds, s.pos_offset, s.neg_offset,
                        s.negatives, s.sequences)
    root = data.write(cfg.data_root)
    cfg.save(root.root / SNAPSHOT)
    _prepare_output(cfg)
    log.info("wrote %d scenes and %d pairs under %s", len(data.scenes), len(data.pairs), root.root)


def cmd_train(cfg, args):
    from semgraph_reloc.training import save_checkpoint, train

    root, out = _root(cfg), _prepare_output(cfg)
    pairs = _pairs(cfg, root)
    seqs = sorted({p.cloud_scene[0] for p in pairs})
    holdout = args.holdout if args.holdout is not None else (seqs[-1] if len(seqs) > 1 else "none")
    if holdout != "none" and holdout not in seqs:
        raise ConfigError(f"holdout sequence {holdout!r} not among {seqs}")
    train_pairs = [p for p in pairs if p.cloud_scene[0] != holdout]
    val_pairs = [p for p in pairs if p.cloud_scene[0] == holdout]
    metrics = (out / "metrics.jsonl").open("w")

    def record(entry):
        metrics.write(json.dumps(entry) + "\n")
        metrics.flush()

    try:
        model, history = train(train_pairs, root, cfg, val_pairs=val_pairs or None, progress=record)
    finally:
        metrics.close()
    save_checkpoint(model, out / CHECKPOINT, cfg)
    _plot_history(history, out / "training_curve.png")
    log.info("checkpoint -> %s", out / CHECKPOINT)


def _plot_history(history, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [h["train_loss"] for h in history], label="train loss")
    if any(h["val_f1"] is not None for h in history):
        ax.plot(ep, [h["val_f1"] for h in history], label="held-out F1")
    ax.set_xlabel("epoch")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _experiment(cfg, ablations, seeds, checkpoint, train_enabled, ablation_report):
    from semgraph_reloc.evaluation import run_experiment, write_reports

    root, out = _root(cfg), _prepare_output(cfg)

    def note(rep):
        md = rep.metadata
        log.info("%s seed %s sequence %s: F1 %.3f", md["ablation"], md["seed"], md["split"], rep.f1)

    result = run_experiment(cfg, _pairs(cfg, root), root, ablations, seeds, checkpoint,
                            train_enabled, progress=note)
    for path in write_reports(result, out, ablation_report=ablation_report):
        log.info("wrote %s", path)
    sys.stdout.write((out / "f1_table.tsv").read_text())
    return result


def cmd_eval(cfg, args):
    ckpt = args.checkpoint
    if ckpt is None and args.no_train:
        default = Path(cfg.output_dir) / CHECKPOINT
        ckpt = default if default.exists() else None
    _experiment(cfg, None, None, ckpt, not args.no_train, False)


def cmd_ablate(cfg, args):
    _experiment(cfg, ABLATIONS, args.seeds, None, True, True)


COMMANDS = {"nodes": cmd_nodes, "pairs": cmd_pairs, "synth": cmd_synth, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"error: usage: {exc}\n")
        return 2
    if args.print_config:
        sys.stdout.write(RunConfig().to_yaml())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("error: usage: a subcommand is required\n")
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except ArtifactError as exc:
        sys.stderr.write(f"error: {exc.category}: {exc}\n")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
