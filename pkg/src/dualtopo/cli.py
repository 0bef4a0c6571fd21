"""Command-line entry point: synth, train, eval, infer and plot.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys are
flag names with or without the leading dashes, ``-`` or ``_``); explicit flags
win over the file. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("dualtopo")

PALETTE = {0: (0, 0, 0), 1: (255, 0, 0), 2: (255, 255, 255)}
SKELETON_COLOR = (0, 255, 0)
BOUNDARY_COLOR = (255, 200, 0)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = val
    return values


def _apply_config(parser, args, argv):
    """Fill options not given on the command line from ``args.config``."""
    if not getattr(args, "config", None):
        return args
    given = set()
    for tok in argv:
        if tok.startswith("--"):
            given.add(tok[2:].split("=", 1)[0])
    actions = {a.dest: a for a in parser._actions if a.option_strings}
    for key, val in read_config(args.config).items():
        if key not in actions or key == "config":
            raise UsageError(f"unknown config key {key!r}")
        action = actions[key]
        if any(s[2:] in given for s in action.option_strings if s.startswith("--")):
            continue
        if isinstance(action, argparse.BooleanOptionalAction):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key}: expected a boolean, got {val!r}")
            setattr(args, key, low in ("true", "1", "yes"))
        elif action.nargs in ("+", "*") or isinstance(action.nargs, int):
            conv = action.type or str
            try:
                setattr(args, key, [conv(v) for v in val.replace(",", " ").split()])
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
        else:
            conv = action.type or str
            try:
                setattr(args, key, conv(val))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
    return args


def _echo_config(args, out, name="config.txt"):
    lines = []
    for k, v in sorted(vars(args).items()):
        if k in ("func", "config", "command"):
            continue
        if isinstance(v, (list, tuple)):
            v = " ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    (Path(out) / name).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    from .data import GeneratorConfig, generate_sequences, write_dataset

    try:
        cfg = GeneratorConfig(
            size=args.size,
            n_sequences=args.n_sequences,
            length=args.length,
            drift=args.drift,
            noise=args.noise,
            plaque_prob=args.plaque_prob,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    digest = write_dataset(out, generate_sequences(cfg), cfg, spacing=tuple(args.spacing))
    _echo_config(args, out)
    print(digest)
    return 0


def _load_pairs(root):
    from .data import load_dataset

    if not Path(root).is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    return load_dataset(root, return_spacing=True)


def cmd_train(args):
    import torch

    from .data import SplitSpec, reattach_labels, split_dataset
    from .losses import LossWeights
    from .model import NetConfig
    from .train import TrainConfig, run_training

    try:
        weights = LossWeights(rampup_steps=args.rampup_steps)
        net = NetConfig(base_width=args.base_width, depth=args.depth, seed=args.seed)
        cfg = TrainConfig(
            steps=args.steps,
            n_labeled=args.n_labeled,
            n_unlabeled=args.n_unlabeled,
            learning_rate=args.lr,
            weights=weights,
            eval_every=args.eval_every,
            seed=args.seed,
            use_reg=args.reg,
            use_itc=args.itc,
            use_ctc=args.ctc,
            use_ps=args.ps,
            ps_on_labeled=args.ps_on_labeled,
            net=net,
        )
        spec = SplitSpec(args.labeled_fraction, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    torch.set_num_threads(max(1, args.threads))
    pairs, spacing = _load_pairs(args.data)
    if not pairs:
        raise RuntimeError(f"no frame pairs found under {args.data}")
    if any(not p.labeled for p in pairs):
        raise RuntimeError("training data must carry masks (they are stripped from the unlabeled split)")
    num_classes = int(max(max(p.mask_t.max(), p.mask_t1.max()) for p in pairs)) + 1
    if num_classes > cfg.net.num_classes:
        raise RuntimeError(f"dataset has {num_classes} classes, network is configured for {cfg.net.num_classes}")
    try:
        labeled, unlabeled = split_dataset(pairs, spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"N_l={len(labeled)} N_u={len(unlabeled)}")
    if args.eval_data:
        eval_pairs, spacing = _load_pairs(args.eval_data)
    else:
        # masks of the unlabeled pool are never seen by the loss; they serve as validation
        eval_pairs = reattach_labels(unlabeled, pairs) or labeled
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(args, out)
    (out / "split.json").write_text(
        json.dumps({"labeled": [p.id for p in labeled], "unlabeled": [p.id for p in unlabeled]}, indent=2)
    )

    def progress(row):
        if row["step"] % max(1, args.log_every) == 0:
            log.info("step %d  L_total %.4f", row["step"], row["L_total"])

    result = run_training(cfg, labeled, unlabeled, eval_pairs, out_dir=out, spacing=spacing, progress=progress)
    dice = result.final_report.macro["dice"] if result.final_report is not None else float("nan")
    print(f"final macro Dice {dice:.4f} (best {result.best_dice:.4f} at step {result.best_step})")
    return 0


def _load_model(path):
    from .train import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        state, cfg, _ = load_checkpoint(path)
    except ValueError as exc:
        raise RuntimeError(str(exc)) from exc
    return state, cfg


def cmd_eval(args):
    from .train import evaluate_model, pair_tensors

    state, cfg = _load_model(args.checkpoint)
    pairs, spacing = _load_pairs(args.data)
    if args.split:
        ids = set(json.loads(Path(args.split).read_text())[args.subset])
        pairs = [p for p in pairs if p.id in ids]
    pairs = [p for p in pairs if p.labeled]
    if not pairs:
        raise RuntimeError("no labeled pairs to evaluate")
    h, w = pairs[0].image_t.shape
    try:
        cfg.net.check_size(h, w)
    except ValueError as exc:
        raise RuntimeError(f"checkpoint does not fit the data: {exc}") from exc
    top = max(int(max(p.mask_t.max(), p.mask_t1.max())) for p in pairs)
    if top >= cfg.net.num_classes:
        raise RuntimeError(f"data has class index {top}, checkpoint predicts {cfg.net.num_classes} classes")
    report = evaluate_model(state.model, [pair_tensors(p) for p in pairs], cfg.net.num_classes, spacing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    report.append_csv(out / "metrics.csv", checkpoint=str(args.checkpoint), n_pairs=len(pairs))
    print(f"macro Dice {report.macro['dice']:.4f} over {len(pairs)} pairs")
    return 0


def _colorize(mask):
    rgb = np.zeros(mask.shape + (3,), dtype=np.uint8)
    for c, color in PALETTE.items():
        rgb[mask == c] = color
    return rgb


def _overlay(image, sdt, tau_boundary, tau_skeleton):
    gray = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[(sdt > 0) & (sdt <= tau_boundary)] = BOUNDARY_COLOR
    rgb[sdt >= tau_skeleton] = SKELETON_COLOR
    return rgb


def cmd_infer(args):
    import torch
    from PIL import Image

    from .data import _read_png, save_field
    from .flow import flow_to_color
    from .model import forward

    state, cfg = _load_model(args.checkpoint)
    frames = [_read_png(p).astype(np.float64) / 255.0 for p in args.image_pair]
    if frames[0].shape != frames[1].shape:
        raise RuntimeError(f"frame shapes differ: {frames[0].shape} vs {frames[1].shape}")
    try:
        cfg.net.check_size(*frames[0].shape)
    except ValueError as exc:
        raise RuntimeError(f"checkpoint does not fit the images: {exc}") from exc
    imgs = [f.astype(np.float32) for f in frames]
    bundle = forward(state.model, imgs[0], imgs[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tag, seg, sdt, img in (("t", bundle.seg_t, bundle.sdt_t, imgs[0]), ("t1", bundle.seg_t1, bundle.sdt_t1, imgs[1])):
        mask = seg[0].argmax(0).numpy()
        values = sdt[0].numpy()
        Image.fromarray(_colorize(mask), mode="RGB").save(out / f"mask_{tag}.png")
        save_field(out / f"sdt_{tag}.npy", values)
        Image.fromarray(_overlay(img, values, cfg.tau_boundary, cfg.tau_skeleton), mode="RGB").save(out / f"overlay_{tag}.png")
    state.estimator.eval()
    with torch.no_grad():
        flows = state.estimator(bundle.sdt_t, bundle.sdt_t1)
    Image.fromarray(flow_to_color(flows[0][0].numpy()), mode="RGB").save(out / "flow.png")
    print(f"wrote predictions to {out}")
    return 0


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .train import HISTORY_COLUMNS

    if not Path(args.history).is_file():
        raise UsageError(f"history file {args.history} does not exist")
    rows = _read_csv(args.history)
    if not rows:
        raise RuntimeError(f"{args.history} has no rows to plot")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in HISTORY_COLUMNS[1:-1]:
        if col in rows[0]:
            ys = [float(r[col]) for r in rows]
            if any(ys):
                ax.plot(steps, ys, label=col, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    written = ["loss_curves.png"]
    metrics = Path(args.metrics) if args.metrics else Path(args.history).with_name("metrics.csv")
    if metrics.is_file():
        mrows = _read_csv(metrics)
        if mrows:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot([int(r["step"]) for r in mrows], [float(r["macro_dice"]) for r in mrows], marker="o")
            ax.set_xlabel("step")
            ax.set_ylabel("macro Dice")
            fig.tight_layout()
            fig.savefig(out / "dice_curve.png", dpi=100, metadata={"Software": None})
            plt.close(fig)
            written.append("dice_curve.png")
    print("wrote " + ", ".join(written))
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    parser = argparse.ArgumentParser(prog="dualtopo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file with defaults for any flag of this command")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic frame-sequence dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--n-sequences", type=int, default=5, help="number of sequences (default 5)")
    p.add_argument("--length", type=int, default=11, help="frames per sequence (default 11)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels, divisible by 4 (default 64)")
    p.add_argument("--drift", type=float, default=2.0, help="max centre drift per frame in pixels (default 2)")
    p.add_argument("--noise", type=float, default=0.08, help="Gaussian noise sigma (default 0.08)")
    p.add_argument("--plaque-prob", type=float, default=0.7, help="probability a sequence has plaque (default 0.7)")
    p.add_argument("--spacing", type=float, nargs=2, default=[1.0, 1.0], metavar=("ROW", "COL"),
                   help="pixel spacing written to the manifests (default 1 1)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    p = add("train", cmd_train, "train the dual-task network on a dataset")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory for checkpoints, CSVs and config echo")
    p.add_argument("--eval-data", help="held-out dataset root; default: the unlabeled pool with its masks")
    p.add_argument("--labeled-fraction", type=float, default=0.1, help="fraction of pairs kept labeled (default 0.1)")
    p.add_argument("--steps", type=int, default=300, help="optimisation steps (default 300)")
    p.add_argument("--seed", type=int, default=0, help="seed for split, init and batches (default 0)")
    p.add_argument("--n-labeled", type=int, default=2, help="labeled pairs per batch (default 2)")
    p.add_argument("--n-unlabeled", type=int, default=2, help="unlabeled pairs per batch (default 2)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--rampup-steps", type=int, default=100, help="steps of the unsupervised ramp-up (default 100)")
    p.add_argument("--eval-every", type=int, default=100, help="evaluate every N steps (default 100)")
    p.add_argument("--base-width", type=int, default=8, help="channels of the first encoder level (default 8)")
    p.add_argument("--depth", type=int, default=3, help="encoder levels (default 3)")
    p.add_argument("--reg", action=argparse.BooleanOptionalAction, default=True, help="SDT regression loss")
    p.add_argument("--itc", action=argparse.BooleanOptionalAction, default=True, help="intra-frame consistency losses")
    p.add_argument("--ctc", action=argparse.BooleanOptionalAction, default=True, help="cross-frame consistency losses")
    p.add_argument("--ps", action=argparse.BooleanOptionalAction, default=True, help="pseudo-label loss")
    p.add_argument("--ps-on-labeled", action=argparse.BooleanOptionalAction, default=True,
                   help="apply the pseudo-label loss to labeled pairs too")
    p.add_argument("--threads", type=int, default=1, help="torch CPU threads (default 1)")
    p.add_argument("--log-every", type=int, default=50, help="log the loss every N steps with -v (default 50)")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a labeled dataset")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--out", required=True, help="directory for metrics.json and metrics.csv")
    p.add_argument("--split", help="split.json from a training run; restricts evaluation to one subset")
    p.add_argument("--subset", choices=("labeled", "unlabeled"), default="labeled",
                   help="subset of --split to evaluate (default labeled)")

    p = add("infer", cmd_infer, "predict masks, SDT fields and overlays for one frame pair")
    p.add_argument("--image-pair", nargs=2, required=True, metavar=("FRAME_T", "FRAME_T1"),
                   help="two 8-bit grayscale PNG frames")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--out", required=True, help="output directory")

    p = add("plot", cmd_plot, "plot loss and Dice curves of a training run")
    p.add_argument("--history", required=True, help="history.csv written by train")
    p.add_argument("--metrics", help="metrics.csv; default: next to --history")
    p.add_argument("--out", required=True, help="output directory for the PNGs")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    try:
        args = _apply_config(subparser, args, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"dualtopo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"dualtopo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
