"""Command-line interface: ``hcnn {train,infer,eval,augment,synth,gradcheck}``.

Exit status is 0 on success, 1 for runtime or data errors and 2 for usage
errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import HCNNError
from .training import DEFAULT_EPOCHS, DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY

logger = logging.getLogger("hcnn")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def _network_config(channel_scale: float):
    from .network import NetworkConfig

    return NetworkConfig(channel_scale=channel_scale)


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_pairs
    from .network import build_network
    from .training import OptimizerState, TrainingLog, train

    out = Path(args.out)
    samples = load_pairs(args.images, args.masks)
    init_seq, order_seq = np.random.SeedSequence(args.seed).spawn(2)
    net = build_network(_network_config(args.channel_scale), rng=np.random.default_rng(init_seq))
    log = TrainingLog(out / "train.log")
    log.header(seed=args.seed, lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
               epochs=args.epochs, batch_size=args.batch_size, channel_scale=args.channel_scale,
               samples=len(samples))
    state = OptimizerState(args.lr, args.momentum, args.weight_decay)
    records = train(net, samples, epochs=args.epochs, batch_size=args.batch_size,
                    rng=np.random.default_rng(order_seq), checkpoint_dir=out / "checkpoints",
                    state=state, log=log, seed=args.seed)
    save_checkpoint(net, out / "model.hcnn",
                    {"epoch": args.epochs, "step": len(records), "seed": args.seed})
    print(f"trained {len(records)} steps; checkpoint {out / 'model.hcnn'}")
    return EXIT_OK


def probability_to_uint8(prob: np.ndarray) -> np.ndarray:
    """``P * 255`` rounded half up."""
    return np.floor(np.asarray(prob, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import list_images, read_image, write_png

    config = _network_config(args.channel_scale) if args.channel_scale is not None else None
    net = load_checkpoint(args.checkpoint, config)
    out = Path(args.out)
    images = list_images(args.images)
    for stem, path in images.items():
        image = read_image(path)
        prob = net.predict_proba(image)[0, 0]
        write_png(out / "prob" / f"{stem}.png", probability_to_uint8(prob))
        write_png(out / "mask" / f"{stem}.png", (prob > args.threshold).astype(np.uint8) * 255)
    print(f"wrote {len(images)} probability maps and masks to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_dir, write_eval_csv

    results, overall = evaluate_dir(args.pred, args.gt, args.original)
    write_eval_csv(args.out, results, overall)
    print(f"aggregate precision={overall.precision:.6f} recall={overall.recall:.6f} "
          f"f={overall.f_score:.6f} q={overall.q_value:.6g}")
    return EXIT_OK


def cmd_augment(args) -> int:
    from .data import AugmentConfig, expand, load_pairs, write_sample

    samples = load_pairs(args.images, args.masks)
    crop = None if args.crop == 0 else (args.crop, args.crop)
    config = AugmentConfig(crop_size=crop, expansion_factor=args.factor)
    out = Path(args.out)
    count = 0
    for i, j, aug in expand(samples, config, args.seed):
        name = f"{samples[i].stem}_{j}.png"
        write_sample(aug, out / "images" / name, out / "masks" / name)
        count += 1
    print(f"wrote {count} augmented pairs to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import synth_crack, write_sample

    out = Path(args.out)
    width = len(str(max(args.count - 1, 0)))
    for i in range(args.count):
        sample = synth_crack([args.seed, i], args.size, args.noise)
        name = f"synth_{i:0{width}d}.png"
        write_sample(sample, out / "images" / name, out / "masks" / name)
    print(f"wrote {args.count} synthetic pairs to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .data import synth_crack
    from .network import build_network
    from .training import grad_check_report, jitter_biases

    init_seq, bias_seq, pick_seq = np.random.SeedSequence(args.seed).spawn(3)
    net = build_network(_network_config(args.channel_scale), rng=np.random.default_rng(init_seq),
                        dtype=np.float64)
    net = jitter_biases(net, 0.1, np.random.default_rng(bias_seq))
    sample = synth_crack([args.seed, 0], args.size, 0.05)
    report = grad_check_report(net, sample, args.params, args.epsilon, np.random.default_rng(pick_seq))
    print(f"max relative error {report.max_error:.3e} over {report.n_checked} parameters "
          f"({report.n_skipped} skipped at kinks)")
    return EXIT_OK if report.max_error < args.tolerance else EXIT_ERROR


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcnn", description="Crack segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network on image/mask directories")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--channel-scale", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--momentum", type=float, default=DEFAULT_MOMENTUM)
    p.add_argument("--weight-decay", type=float, default=DEFAULT_WEIGHT_DECAY)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write probability maps and masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--channel-scale", type=float, default=None,
                   help="expected network width; defaults to the checkpoint's")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks (F-score, Q-measure)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--original", default=None)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="expand a dataset by random rotation, flips and crops")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--factor", type=int, default=100)
    p.add_argument("--crop", type=int, default=256, help="square crop size; 0 disables cropping")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", help="generate synthetic crack images")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--params", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channel-scale", type=float, default=1 / 16)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HCNNError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
