"""Command-line entry point.

Exit codes:
  0  success
  1  unexpected internal error
  2  bad command-line usage
  3  missing input file
  4  malformed configuration
  5  shape or dimension mismatch
  6  malformed data or checkpoint file
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, PointCloud, load_mnist, mnist_dataset, synth_shapes
from .errors import ConfigError, FormatError, ShapeMismatchError, SonetError
from .model import AutoEncoder, Classifier, DecoderConfig, EncoderConfig, Segmenter, retrieve
from .som import SomGrid, SomTrainConfig, build_som
from .training import (
    TrainConfig,
    evaluate_autoencoder,
    evaluate_classifier,
    evaluate_segmenter,
    fit_autoencoder,
    fit_classifier,
    fit_segmenter,
    predict_scores,
    reconstruct,
    robustness_sweep,
)

log = logging.getLogger("sonet")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_SHAPE, EXIT_FORMAT = range(7)
LOG_HEADER = ("epoch", "lr", "train_loss", "eval_metric")


# --- datasets and SOMs ------------------------------------------------------------------


def _load_dir(path: str, dim: int | None = None) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix in (".pcb", ".xyz"))
    clouds = [io.read_cloud(p, dim) for p in files]
    labels_path = root / "labels.txt"
    if labels_path.exists():
        labels = io.read_labels(labels_path)
        if len(labels) != len(clouds):
            raise ShapeMismatchError(f"{labels_path}: {len(labels)} labels for {len(clouds)} clouds")
        for c, lab in zip(clouds, labels):
            c.class_id = int(lab)
    n_classes = max((c.class_id or 0 for c in clouds), default=0) + 1
    return Dataset(clouds, [str(i) for i in range(n_classes)])


def load_split(cfg: RunConfig, split: str) -> Dataset:
    if cfg.dataset == "synth":
        n = cfg.n_per_class if split == "train" else cfg.test_per_class
        seed = cfg.seed * 2 + (0 if split == "train" else 1)
        return synth_shapes(list(cfg.shapes), n, cfg.points, cfg.with_parts, seed)
    if cfg.dataset == "mnist":
        images, labels = load_mnist(cfg.mnist_path or None)
        perm = np.random.default_rng(cfg.seed).permutation(len(images))
        sel = perm[: cfg.mnist_train] if split == "train" else perm[cfg.mnist_train : cfg.mnist_train + cfg.mnist_test]
        return mnist_dataset(images[sel], labels[sel], cfg.points, 0.01, cfg.seed * 2 + (split != "train"))
    return _load_dir(cfg.data_dir if split == "train" else (cfg.test_dir or cfg.data_dir))


def som_dir(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.out) / "soms" / split


def get_soms(cfg: RunConfig, data: Dataset, split: str) -> list:
    """SOMs from ``<out>/soms/<split>`` when present (written by ``som``), otherwise computed."""
    folder = som_dir(cfg, split)
    files = sorted(folder.glob("*.pcb")) if folder.is_dir() else []
    if len(files) == len(data) and files:
        grids = [SomGrid(cfg.som_size, io.read_pcb(p).points) for p in files]
        if all(g.dim == c.dim for g, c in zip(grids, data.clouds)):
            return grids
        log.warning("stored SOMs in %s do not match the dataset; recomputing", folder)
    som_cfg = SomTrainConfig(max_iter=cfg.som_iters, workers=cfg.workers)
    return [build_som(c, cfg.som_size, som_cfg) for c in data.clouds]


# --- model construction -------------------------------------------------------------------


def encoder_config(cfg: RunConfig, dim: int) -> EncoderConfig:
    return EncoderConfig(
        som_size=cfg.som_size,
        k=cfg.k,
        dim=dim,
        use_normals=cfg.use_normals,
        point_widths=cfg.point_widths,
        node_widths=cfg.node_widths,
        global_dim=cfg.global_dim,
        hierarchical=cfg.hierarchical,
        k_prime=cfg.k_prime,
        hier_widths=cfg.hier_widths,
    )


def decoder_config(cfg: RunConfig, dim: int) -> DecoderConfig:
    return DecoderConfig(
        code_dim=cfg.global_dim,
        fc_points=cfg.fc_points,
        grid=cfg.grid,
        stages=cfg.stages,
        channels=cfg.channels,
        out_dim=dim,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        base_lr=cfg.lr,
        decay_every=cfg.decay_every or None,
        augment=cfg.augment,
        seed=cfg.seed,
        keep=cfg.keep,
        coarse_supervision=cfg.coarse_supervision,
    )


def n_labels(data: Dataset, task: str) -> int:
    if task == "seg":
        return int(max(c.labels.max() for c in data.clouds)) + 1
    return len(data.class_names)


def build_model(cfg: RunConfig, task: str, dim: int, n_out: int):
    rng = np.random.default_rng(cfg.seed)
    enc = encoder_config(cfg, dim)
    if task == "cls":
        return Classifier(enc, n_out, rng, cfg.head_hidden, cfg.keep)
    if task == "seg":
        return Segmenter(enc, n_out, rng, cfg.seg_pre, cfg.seg_post)
    return AutoEncoder(enc, decoder_config(cfg, dim), rng)


def load_model(cfg: RunConfig, task: str, ckpt_path: str, data: Dataset):
    model = build_model(cfg, task, data.clouds[0].dim, n_labels(data, task))
    load_into(model, load_checkpoint(ckpt_path))
    return model.eval()


# --- subcommands ---------------------------------------------------------------------------


def cmd_som(cfg: RunConfig, args) -> int:
    splits = ["train", "test"] if cfg.dataset != "dir" or cfg.test_dir else ["train"]
    for split in splits:
        data = load_split(cfg, split)
        folder = som_dir(cfg, split)
        folder.mkdir(parents=True, exist_ok=True)
        som_cfg = SomTrainConfig(max_iter=cfg.som_iters, workers=cfg.workers)
        ext = "pcb" if args.format in (None, "pcb") else "xyz"
        for i, cloud in enumerate(data.clouds):
            grid = build_som(cloud, cfg.som_size, som_cfg)
            io.write_cloud(folder / f"{i:05d}.{ext}", PointCloud(grid.nodes))
        print(f"{split}: wrote {len(data)} SOM node files to {folder}")
    return EXIT_OK


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_HEADER)
        w.writeheader()
        w.writerows(rows)


def cmd_train(cfg: RunConfig, args, task: str) -> int:
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    soms, test_soms = get_soms(cfg, train, "train"), get_soms(cfg, test, "test")
    pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
    tcfg = train_config(cfg)
    enc = encoder_config(cfg, train.clouds[0].dim)
    if task == "cls":
        res = fit_classifier(train, soms, enc, tcfg, len(train.class_names), pretrained, (test, test_soms), cfg.head_hidden)
    elif task == "seg":
        res = fit_segmenter(train, soms, enc, tcfg, n_labels(train, "seg"), pretrained, (test, test_soms), cfg.seg_pre, cfg.seg_post)
    else:
        if pretrained is not None:
            log.warning("--pretrained is ignored for train-ae")
        res = fit_autoencoder(train, soms, enc, decoder_config(cfg, train.clouds[0].dim), tcfg, (test, test_soms))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / f"{task}.ckpt", res.checkpoint)
    _write_log(out / f"{task}_log.csv", res.log)
    last = res.log[-1]["eval_metric"] if res.log else float("nan")
    print(f"wrote {out / (task + '.ckpt')}; final eval_metric {last:.4f}")
    return EXIT_OK


def _require_ckpt(args):
    if not args.pretrained:
        raise ConfigError("this command needs --pretrained <checkpoint>")
    return args.pretrained


def cmd_eval(cfg: RunConfig, args) -> int:
    data = load_split(cfg, args.split)
    soms = get_soms(cfg, data, args.split)
    model = load_model(cfg, args.task, _require_ckpt(args), data)
    if args.task == "cls":
        print(f"accuracy {evaluate_classifier(model, data, soms):.6f}")
    elif args.task == "seg":
        overall, per_cat = evaluate_segmenter(model, data, soms)
        print(f"mean_iou {overall:.6f}")
        for cat, v in sorted(per_cat.items()):
            print(f"class {cat} iou {v:.6f}")
    else:
        print(f"chamfer {evaluate_autoencoder(model, data, soms):.6f}")
    return EXIT_OK


def cmd_retrieve(cfg: RunConfig, args) -> int:
    if not args.query:
        raise ConfigError("retrieve needs --query <cloud file>")
    library = load_split(cfg, args.split)
    lib_soms = get_soms(cfg, library, args.split)
    model = load_model(cfg, "cls", _require_ckpt(args), library)
    query = io.read_cloud(args.query, library.clouds[0].dim)
    q_som = build_som(query, cfg.som_size, SomTrainConfig(max_iter=cfg.som_iters))
    q_scores = predict_scores(model, Dataset([query]), [q_som])[0]
    ranking = retrieve(q_scores, predict_scores(model, library, lib_soms))
    print("rank,index,distance")
    for rank, (idx, dist) in enumerate(ranking[: args.top], 1):
        print(f"{rank},{idx},{dist:.6f}")
    return EXIT_OK


def cmd_robustness(cfg: RunConfig, args) -> int:
    data = load_split(cfg, args.split)
    soms = get_soms(cfg, data, args.split)
    model = load_model(cfg, "cls", _require_ckpt(args), data)
    fracs = args.dropout_frac if args.dropout_frac is not None else [0.0, 0.25, 0.5]
    sigmas = args.noise if args.noise is not None else [0.0, 0.05, 0.1, 0.2]
    rows = robustness_sweep(model, data, soms, fracs, sigmas, SomTrainConfig(max_iter=cfg.som_iters), cfg.seed)
    w = csv.DictWriter(sys.stdout, fieldnames=("corruption", "level", "accuracy"), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return EXIT_OK


def cmd_export_fig(cfg: RunConfig, args) -> int:
    data = load_split(cfg, args.split)
    if not 0 <= args.index < len(data):
        raise ConfigError(f"--index {args.index} outside dataset of {len(data)} clouds")
    cloud = data.clouds[args.index]
    layers = {"cloud": cloud.points}
    if args.what in ("som", "recon"):
        som = get_soms(cfg, Dataset([cloud]), "__none__")[0]
        layers["som"] = som.nodes
        if args.what == "recon":
            model = load_model(cfg, "ae", _require_ckpt(args), data)
            layers["recon"] = reconstruct(model, Dataset([cloud]), [som])[0]
    target = Path(args.fig_out or Path(cfg.out) / f"{args.what}_{args.index}.svg")
    target.parent.mkdir(parents=True, exist_ok=True)
    if target.suffix == ".csv":
        with open(target, "w") as f:
            f.write("layer,x,y\n")
            for name, pts in layers.items():
                for p in pts:
                    f.write(f"{name},{p[0]:.6f},{p[1]:.6f}\n")
    else:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        style = {"cloud": dict(s=2, c="0.5"), "som": dict(s=18, c="tab:red"), "recon": dict(s=3, c="tab:blue")}
        for name, pts in layers.items():
            ax.scatter(pts[:, 0], pts[:, 1], label=name, **style[name])
        ax.set_aspect("equal")
        ax.legend(loc="upper right", fontsize=6)
        fig.savefig(target, format=target.suffix.lstrip(".") or "svg")
        plt.close(fig)
    print(f"wrote {target}")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonet",
        description="SOM-guided point-cloud networks: SOM preprocessing, training, evaluation, retrieval.",
        epilog=__doc__.split("\n", 2)[2],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="key = value run configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="worker threads for SOM training")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--som-size", type=int, help="override the SOM grid size m")
        p.add_argument("--k", type=int, help="override the point-to-node neighbour count")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = add("som", "train one SOM per cloud and write node files")
    p.add_argument("--format", choices=("xyz", "pcb"), help="node file format (default pcb)")
    for name, task in (("train-ae", "autoencoder"), ("train-cls", "classifier"), ("train-seg", "segmenter")):
        p = add(name, f"train the {task}; writes a checkpoint and a CSV metric log")
        p.add_argument("--pretrained", help="encoder checkpoint to warm-start from")
        p.add_argument("--epochs", type=int, help="override the number of epochs")
    p = add("eval", "report accuracy, Chamfer distance or mean IoU on a split")
    p.add_argument("--pretrained", help="checkpoint to evaluate")
    p.add_argument("--task", choices=("cls", "seg", "ae"), default="cls", help="model type (default cls)")
    p.add_argument("--split", choices=("train", "test"), default="test", help="dataset split (default test)")
    p = add("retrieve", "rank a library by classification-score distance to a query cloud")
    p.add_argument("--pretrained", help="classifier checkpoint")
    p.add_argument("--query", help="query cloud file (.xyz or .pcb)")
    p.add_argument("--format", choices=("xyz", "pcb"), help="query file format (default from extension)")
    p.add_argument("--split", choices=("train", "test"), default="test", help="library split (default test)")
    p.add_argument("--top", type=int, default=10, help="number of results to print")
    p = add("robustness", "accuracy under point dropout and SOM node noise, as CSV")
    p.add_argument("--pretrained", help="classifier checkpoint")
    p.add_argument("--noise", type=float, nargs="+", help="SOM noise sigmas (default 0 0.05 0.1 0.2)")
    p.add_argument("--dropout-frac", type=float, nargs="+", help="point dropout fractions (default 0 0.25 0.5)")
    p.add_argument("--split", choices=("train", "test"), default="test", help="dataset split (default test)")
    p = add("export-fig", "write a 2-D scatter (SVG or CSV) of a cloud, its SOM, or a reconstruction")
    p.add_argument("--what", choices=("cloud", "som", "recon"), default="cloud", help="layers to draw")
    p.add_argument("--index", type=int, default=0, help="cloud index in the split")
    p.add_argument("--split", choices=("train", "test"), default="test", help="dataset split (default test)")
    p.add_argument("--pretrained", help="autoencoder checkpoint (for --what recon)")
    p.add_argument("--fig-out", help="output file, .svg or .csv")
    p.add_argument("--format", choices=("xyz", "pcb"), help="unused; accepted for symmetry with other commands")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for flag, key in (("seed", "seed"), ("workers", "workers"), ("out", "out"), ("som_size", "som_size"), ("k", "k"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(load_config(args.config, args.command), args)
        if args.command == "som":
            return cmd_som(cfg, args)
        if args.command.startswith("train-"):
            return cmd_train(cfg, args, args.command.split("-")[1])
        return {"eval": cmd_eval, "retrieve": cmd_retrieve, "robustness": cmd_robustness, "export-fig": cmd_export_fig}[args.command](cfg, args)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, f"missing file: {exc.filename or exc}"
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except ShapeMismatchError as exc:
        code, msg = EXIT_SHAPE, f"shape mismatch: {exc}"
    except FormatError as exc:
        code, msg = EXIT_FORMAT, f"bad file: {exc}"
    except SonetError as exc:
        code, msg = EXIT_INTERNAL, f"error: {exc}"
    print(f"sonet: {msg}".replace("\n", " "), file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
