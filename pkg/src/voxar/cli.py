"""Command-line interface for the full pipeline.

Subcommands: synth, train, eval, reconstruct, uncertainty, segment,
sample, verify, features. Metrics go to stdout as key=value lines, logs
to stderr as one-line records. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure; verify exits 0 on PASS and 4 on FAIL.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bayes, volume_io
from .errors import DataError, NumericError, UsageError
from .model import (
    Dropout,
    ModelConfig,
    ModelParams,
    load_checkpoint,
    model_forward,
    nll,
    sample,
    save_checkpoint,
)
from .stacks import LayerSpec, LayerWiring, MaskVariant, StackSpec, paper_wiring, verify_causality
from .train import TrainConfig, evaluate_ll, split_dataset, train, write_history_csv


def _log(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()), file=sys.stderr)


def _metric(key, value):
    print(f"{key}={value}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text: str) -> tuple:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"bad dims {text!r}, expected H,W,D")
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise UsageError(f"bad dims {text!r}, expected three positive integers")
    return parts


def _pair(text: str) -> tuple:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"bad range {text!r}, expected lo,hi")
    if len(parts) != 2:
        raise UsageError(f"bad range {text!r}, expected lo,hi")
    return parts


def _triple(text: str) -> tuple:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"bad split {text!r}, expected train,val,test")
    if len(parts) != 3:
        raise UsageError(f"bad split {text!r}, expected three fractions")
    return parts


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--hidden", type=int, default=20)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.15)


def _normalized_items(items):
    out = []
    for item in items:
        vol, norm = volume_io.normalize(item.volume, item.roi)
        out.append(
            volume_io.DatasetItem(
                id=item.id, volume=vol, roi=item.roi,
                lesion_mask=item.lesion_mask, has_lesion=item.has_lesion,
            )
        )
    return out


def _load_input_volume(path, roi_path):
    volume = volume_io.read_volume3d(path)
    if roi_path:
        roi = volume_io.read_volume3d(roi_path) > 0.5
    else:
        roi = np.ones(volume.shape, dtype=bool)
    normalized, norm = volume_io.normalize(volume, roi)
    return normalized, roi, norm


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    cfg = volume_io.SynthConfig(
        n_volumes=args.n,
        dims=args.dims,
        blob_count=(int(args.blob_count[0]), int(args.blob_count[1])),
        blob_sigma=args.blob_sigma,
        blob_amplitude=args.blob_amp,
        lesion_probability=args.lesion_prob,
        lesion_radius=args.lesion_radius,
        lesion_delta=args.lesion_delta,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    items = volume_io.synth_dataset(cfg)
    manifest = volume_io.save_dataset(items, args.out)
    _log(event="synth", n=len(items), lesioned=sum(i.has_lesion for i in items))
    _metric("manifest", manifest)
    return 0


def _cmd_train(args) -> int:
    items = _normalized_items(volume_io.load_dataset(args.manifest))
    train_cfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        patience=args.patience, split=args.split, seed=args.seed,
    )
    model_cfg = ModelConfig(
        layers=args.layers, hidden_channels=args.hidden,
        kernel=args.kernel, dropout_rate=args.dropout,
    )
    train_items, val_items, _ = split_dataset(items, train_cfg.split, train_cfg.seed)
    _log(event="train_start", n_train=len(train_items), n_val=len(val_items),
         epochs=train_cfg.epochs, lr=train_cfg.lr)

    def log_epoch(rec):
        _log(event="epoch", epoch=rec.epoch, train_nll=f"{rec.train_nll:.6f}",
             val_nll=f"{rec.val_nll:.6f}", seconds=f"{rec.seconds:.2f}")

    result = train(train_items, val_items, model_cfg, train_cfg, log=log_epoch)
    save_checkpoint(args.out, result.params)
    if args.history:
        write_history_csv(args.history, result.history)
    _metric("best_epoch", result.best_epoch)
    _metric("best_val_nll", repr(result.best_val_nll))
    _metric("val_ll", repr(-result.best_val_nll))
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    items = _normalized_items(volume_io.load_dataset(args.manifest))
    if args.part == "all":
        part = items
    else:
        train_part, val_part, test_part = split_dataset(items, args.split, args.seed)
        part = {"train": train_part, "val": val_part, "test": test_part}[args.part]
    dims = part[0].volume.shape if part else None
    if params.train_dims and dims and tuple(dims) != tuple(params.train_dims):
        _log(event="dims_mismatch", checkpoint=params.train_dims, data=dims)
    _metric("ll", repr(evaluate_ll(params, part)))
    return 0


def _cmd_reconstruct(args) -> int:
    params = load_checkpoint(args.checkpoint)
    volume, roi, norm = _load_input_volume(args.volume, args.roi)
    out = model_forward(volume, params)
    loss = nll(out.emission, volume, mask=roi)
    volume_io.write_volume(args.out, out.emission.mean.data[0])
    _metric("nll", repr(float(loss.data)))
    _metric("ll", repr(-float(loss.data)))
    _metric("norm_min", norm[0])
    _metric("norm_max", norm[1])
    return 0


def _cmd_uncertainty(args) -> int:
    params = load_checkpoint(args.checkpoint)
    volume, roi, norm = _load_input_volume(args.volume, args.roi)
    rng = np.random.default_rng(args.seed)
    emissions, _ = bayes.mc_passes(params, volume, args.passes, rng)
    maps = bayes.moments(emissions)
    volume_io.write_volume(args.out_mu, maps.mu)
    volume_io.write_volume(args.out_sigma, maps.sigma)
    _log(event="uncertainty", passes=maps.passes)
    _metric("sigma_max", repr(float(maps.sigma.max())))
    _metric("norm_min", norm[0])
    _metric("norm_max", norm[1])
    return 0


def _cmd_segment(args) -> int:
    volume = volume_io.read_volume3d(args.volume)
    roi = volume_io.read_volume3d(args.roi) > 0.5 if args.roi else None
    mask = bayes.tau_segment(volume, roi)
    volume_io.write_volume(args.out, mask.astype(np.float64))
    _metric("n_selected", int(mask.sum()))
    if args.truth:
        truth = volume_io.read_volume3d(args.truth) > 0.5
        _metric("dice", repr(bayes.dice(mask, truth)))
    return 0


def _cmd_sample(args) -> int:
    params = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    vol = sample(params, args.dims, rng, temperature=args.temperature)
    volume_io.write_volume(args.out, vol)
    _log(event="sample", dims=args.dims, temperature=args.temperature)
    return 0


def _cmd_verify(args) -> int:
    cfg = ModelConfig(layers=args.layers, hidden_channels=args.hidden,
                      kernel=args.kernel, dropout_rate=args.dropout)
    rng = np.random.default_rng(args.seed)
    wiring = paper_wiring(cfg.layers, cfg.kernel)
    if args.mutate_horizontal_center:
        # deliberately acausal first layer: the horizontal mask keeps its
        # own center tap, so every voxel sees itself
        first = wiring.layers[0]
        layers = (
            LayerSpec(
                vertical=first.vertical,
                depth=first.depth,
                horizontal=StackSpec(MaskVariant.B, cfg.kernel),
                residual=first.residual,
            ),
        ) + wiring.layers[1:]
        wiring = LayerWiring(layers)
    params = ModelParams(cfg, rng=rng, wiring=wiring)
    trials = args.trials if args.trials > 0 else None
    report = verify_causality(params, args.dims, trials=trials, rng=rng)
    print(report.render())
    _log(event="verify", checked=report.checked, violations=len(report.violations))
    return 0 if report.passed else 4


def _cmd_features(args) -> int:
    params = load_checkpoint(args.checkpoint)
    volume, roi, norm = _load_input_volume(args.volume, args.roi)
    rng = np.random.default_rng(args.seed)
    feats = bayes.export_features(params, volume, args.variant, passes=args.passes, rng=rng)
    volume_io.write_volume(args.out, feats.channels)
    _metric("variant", feats.variant)
    _metric("channels", feats.channels.shape[0])
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="voxar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--dims", type=_dims, default=(8, 8, 8))
    p.add_argument("--lesion-prob", dest="lesion_prob", type=float, default=0.0)
    p.add_argument("--blob-count", dest="blob_count", type=_pair, default=(2, 4))
    p.add_argument("--blob-sigma", dest="blob_sigma", type=_pair, default=(1.0, 2.2))
    p.add_argument("--blob-amp", dest="blob_amp", type=_pair, default=(0.35, 0.75))
    p.add_argument("--lesion-radius", dest="lesion_radius", type=_pair, default=(1.2, 1.9))
    p.add_argument("--lesion-delta", dest="lesion_delta", type=float, default=0.5)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fit a model on a dataset manifest")
    p.add_argument("manifest")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=1)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--split", type=_triple, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="log likelihood of a dataset part")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--part", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--split", type=_triple, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("reconstruct", help="write the predicted-mean volume")
    p.add_argument("checkpoint")
    p.add_argument("volume")
    p.add_argument("--roi", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("uncertainty", help="Monte-Carlo dropout mu/sigma maps")
    p.add_argument("checkpoint")
    p.add_argument("volume")
    p.add_argument("--roi", default=None)
    p.add_argument("--passes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-mu", dest="out_mu", required=True)
    p.add_argument("--out-sigma", dest="out_sigma", required=True)
    p.set_defaults(func=_cmd_uncertainty)

    p = sub.add_parser("segment", help="threshold a volume at its mean intensity")
    p.add_argument("volume")
    p.add_argument("--roi", default=None)
    p.add_argument("--truth", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("sample", help="ancestral sampling from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dims", type=_dims, default=(8, 8, 8))
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("verify", help="exhaustive causality check")
    p.add_argument("--dims", type=_dims, default=(6, 6, 6))
    p.add_argument("--trials", type=int, default=0, help="0 = exhaustive")
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)
    p.add_argument("--mutate-horizontal-center", action="store_true",
                   help="sabotage the first-layer horizontal mask (should FAIL)")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("features", help="export chi/xi/psi feature volumes")
    p.add_argument("checkpoint")
    p.add_argument("volume")
    p.add_argument("--roi", default=None)
    p.add_argument("--variant", choices=["chi", "xi", "psi"], default="xi")
    p.add_argument("--passes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_features)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
