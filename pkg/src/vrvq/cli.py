"""Command-line front door.

Subcommands cover the whole pipeline: audio mixing and feature extraction,
synthetic dataset generation, codebook and scorer training, denoiser
fine-tuning, stream encode/decode, rate sweeps, BD-rate reports, and
importance-map export. Diagnostics go to standard error. Exit codes:
0 success, 1 runtime/data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bitstream, evaluation, vbr
from .denoiser import (
    DenoiseTrainConfig,
    FeatureMasker,
    denoise_forward,
    finetune_denoiser,
    load_masker,
    save_masker,
)
from .features import (
    AudioClip,
    FeatureConfig,
    FeatureSequence,
    SynthSpec,
    extract_features,
    load_features,
    load_wav,
    mix_at_snr,
    save_wav,
    synth_feature_dataset,
)
from .importance import ImportanceNet, ScaleRange, load_importance_net, save_importance_net
from .rvq import load_model, rvq_decode, train_codebooks
from .vbr import TrainConfig, cbr_encode, sweep_curves, train_importance, vrvq_encode, write_trace_csv

DEFAULT_SCALES = (1.6, 2.6, 4.2, 6.9, 11.1, 18.1, 29.6, 48.0)


class UsageError(Exception):
    """Flag combinations or values the parser alone cannot reject."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _finite_float(text: str) -> float:
    value = float(text)
    if not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {text}")
    return value


def _fraction_01(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in [0, 1], got {text}")
    return value


def _float_list(text: str):
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}")


def _int_list(text: str):
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}")


def _log(args, message: str) -> None:
    if getattr(args, "verbose", False):
        print(message, file=sys.stderr)


def _load_pairs(directory):
    """(clean, noisy) feature pairs from clean_*.vfea / noisy_*.vfea files."""
    root = Path(directory)
    if not root.is_dir():
        raise ValueError(f"{directory}: not a directory")
    pairs = []
    for clean_path in sorted(root.glob("clean_*.vfea")):
        noisy_path = root / clean_path.name.replace("clean_", "noisy_", 1)
        if not noisy_path.exists():
            raise ValueError(f"{noisy_path}: missing noisy partner for {clean_path.name}")
        pairs.append((load_features(clean_path), load_features(noisy_path)))
    if not pairs:
        raise ValueError(f"{directory}: no clean_*.vfea files found")
    return pairs


def _select_split(pairs, use: str):
    if use == "clean":
        return [clean for clean, _ in pairs]
    if use == "noisy":
        return [noisy for _, noisy in pairs]
    raise UsageError(f"--use must be clean or noisy, got {use}")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lambda_rate=args.lambda_rate,
        full_depth_fraction=args.full_depth_fraction,
        scales=ScaleRange(args.lmin, args.lmax),
        alpha=args.alpha,
        step_size=args.lr,
        momentum=args.momentum,
        iterations=args.iters,
        batch_size=args.batch,
        seed=args.seed,
    )


def cmd_mix(args) -> None:
    clean = load_wav(args.clean)
    noise = load_wav(args.noise)
    mixed = mix_at_snr(clean, noise, args.snr, seed=args.seed)
    save_wav(mixed, args.out)
    _log(args, f"wrote {args.out}: {mixed.samples.size} samples at {mixed.sample_rate} Hz")


def cmd_features(args) -> None:
    clip = load_wav(args.infile)
    mean = scale = None
    if args.stats:
        with open(args.stats) as f:
            stats = json.load(f)
        mean = np.asarray(stats["mean"], dtype=np.float64)
        scale = np.asarray(stats["scale"], dtype=np.float64)
    cfg = FeatureConfig(
        window_size=args.window,
        hop=args.hop,
        mel_bins=args.mel,
        out_dim=args.dim,
        mean=mean,
        scale=scale,
    )
    seq = extract_features(clip, cfg)
    seq.save(args.out)
    _log(args, f"wrote {args.out}: dim={seq.dim} frames={seq.frames} rate={seq.frame_rate}")


def cmd_synth(args) -> None:
    spec = SynthSpec(
        num_pairs=args.pairs,
        frames=args.frames,
        dim=args.dim,
        proportions=(("silence", args.silence), ("tonal", args.tonal), ("burst", args.burst)),
        noise_level=args.noise,
        burst_scale=args.burst_scale,
        frame_rate=(args.sample_rate, args.hop),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (clean, noisy) in enumerate(synth_feature_dataset(spec, seed=args.seed)):
        clean.save(out / f"clean_{i:04d}.vfea")
        noisy.save(out / f"noisy_{i:04d}.vfea")
    _log(args, f"wrote {args.pairs} feature pairs under {out}")


def cmd_train_codebooks(args) -> None:
    pairs = _load_pairs(args.data)
    split = _select_split(pairs, args.use)
    model = train_codebooks(
        split,
        n_stages=args.stages,
        codebook_size=1 << args.bits,
        seed=args.seed,
        max_iters=args.max_iters,
    )
    model.save(args.out)
    _log(
        args,
        f"wrote {args.out}: {model.n_stages} stages x {model.codebook_size} entries, "
        f"fingerprint {model.fingerprint:016x}",
    )


def cmd_train_importance(args) -> None:
    pairs = _load_pairs(args.data)
    model = load_model(args.model)
    if args.mapping == "clean":
        dataset = [(clean, clean) for clean, _ in pairs]
    else:
        dataset = [(noisy, clean) for clean, noisy in pairs]
    net = ImportanceNet.random_init(model.dim, hidden=args.hidden, seed=args.seed)
    net, trace = train_importance(model, net, dataset, _train_config(args))
    save_importance_net(net, args.out)
    if args.trace:
        write_trace_csv(trace, args.trace)
    final = trace[-1] if trace else (0, float("nan"), float("nan"), float("nan"), float("nan"))
    _log(args, f"wrote {args.out}; final loss {final[1]:.6g} after {len(trace)} iterations")


def cmd_finetune_denoiser(args) -> None:
    pairs = _load_pairs(args.data)
    model = load_model(args.model)
    net = load_importance_net(args.net)
    masker = FeatureMasker.random_init(model.dim, hidden=args.hidden, seed=args.seed)
    cfg = DenoiseTrainConfig(
        lambda_feature=args.lambda_feature,
        lambda_rate=args.lambda_rate,
        full_depth_fraction=args.full_depth_fraction,
        scales=ScaleRange(args.lmin, args.lmax),
        alpha=args.alpha,
        step_size=args.lr,
        momentum=args.momentum,
        iterations=args.iters,
        batch_size=args.batch,
        seed=args.seed,
    )
    net, masker, trace = finetune_denoiser(model, net, masker, pairs, cfg)
    save_importance_net(net, args.out_net)
    save_masker(masker, args.out_masker)
    if args.trace:
        write_trace_csv(trace, args.trace, fields=("iteration", "loss", "distortion", "rate", "guidance", "mean_depth"))
    _log(args, f"wrote {args.out_net} and {args.out_masker}")


def cmd_encode(args) -> None:
    if args.mode == "vbr":
        if not args.net:
            raise UsageError("--mode vbr requires --net")
        if args.scale is None:
            raise UsageError("--mode vbr requires --scale")
    elif args.nq is None:
        raise UsageError("--mode cbr requires --nq")
    model = load_model(args.model)
    seq = load_features(args.infile)
    if args.masker:
        masker = load_masker(args.masker)
        denoised, _ = denoise_forward(masker, seq)
        seq = FeatureSequence(denoised, seq.frame_rate_num, seq.frame_rate_den)
    if args.mode == "vbr":
        net = load_importance_net(args.net)
        encoding = vrvq_encode(model, net, seq, args.scale)
    else:
        encoding = cbr_encode(model, seq, args.nq)
    stream = bitstream.pack(encoding)
    with open(args.out, "wb") as f:
        f.write(stream.to_bytes())
    total, side = bitstream.measure_bitrate(stream)
    _log(args, f"wrote {args.out}: {total:.5g} kbps total, {side:.5g} kbps side info")


def cmd_decode(args) -> None:
    model = load_model(args.model)
    with open(args.infile, "rb") as f:
        blob = f.read()
    header, codes, depths = bitstream.unpack(blob)
    if header.model_fingerprint != model.fingerprint:
        raise ValueError(
            f"{args.infile}: stream fingerprint {header.model_fingerprint:016x} does not "
            f"match model {model.fingerprint:016x}"
        )
    if header.dim != model.dim or header.n_stages != model.n_stages:
        raise ValueError(f"{args.infile}: stream geometry does not match the model")
    recon = rvq_decode(model, codes, depths)
    FeatureSequence(recon, header.frame_rate_num, header.frame_rate_den).save(args.out)
    _log(args, f"wrote {args.out}: dim={header.dim} frames={header.frames}")


def cmd_sweep(args) -> None:
    model = load_model(args.model)
    net = load_importance_net(args.net) if args.net else None
    masker = load_masker(args.masker) if args.masker else None
    pairs = _load_pairs(args.data)
    if args.noisy_input:
        inputs = [noisy for _, noisy in pairs]
        targets = [clean for clean, _ in pairs]
    else:
        inputs = [clean for clean, _ in pairs]
        targets = None
    scales = args.scales if net is not None else ()
    depths = args.depths if args.depths else tuple(range(1, model.n_stages + 1))
    points = sweep_curves(
        model, net, inputs, scale_values=scales, depth_values=depths, targets=targets, masker=masker
    )
    evaluation.write_rd_csv(points, args.label, args.out)
    _log(args, f"wrote {args.out}: {len(points)} operating points")


def cmd_bdrate(args) -> None:
    ref = evaluation.read_rd_curve(args.ref, args.metric, args.ref_label)
    test = evaluation.read_rd_curve(args.test, args.metric, args.test_label)
    report = evaluation.bd_rate(ref, test, metric=args.metric)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    _log(args, f"bd_rate_percent={report.bd_rate_percent:.6g}")


def cmd_impmap(args) -> None:
    model = load_model(args.model)
    net = load_importance_net(args.net)
    seq = load_features(args.infile)
    encoding = vrvq_encode(model, net, seq, args.scale)
    evaluation.export_importance_csv(encoding, args.out)
    _log(args, f"wrote {args.out}: {encoding.frames} frames at scale {args.scale}")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    sub.add_argument("--threads", type=_positive_int, default=1, help="worker thread bound (default 1)")
    sub.add_argument("--config", default=None, help="key=value defaults file; explicit flags win")
    sub.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--iters", type=_positive_int, default=500)
    sub.add_argument("--batch", type=_positive_int, default=8)
    sub.add_argument("--lr", type=_positive_float, default=0.05)
    sub.add_argument("--momentum", type=_fraction_01, default=0.9)
    sub.add_argument("--lambda-rate", type=_positive_float, default=3.0)
    sub.add_argument("--alpha", type=_positive_float, default=2.0)
    sub.add_argument("--full-depth-fraction", type=_fraction_01, default=0.25)
    sub.add_argument("--lmin", type=_positive_float, default=0.8)
    sub.add_argument("--lmax", type=_positive_float, default=48.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vrvq",
        description="Variable-bitrate residual vector quantization toolkit",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("mix", help="mix noise into clean speech at a target SNR")
    p.add_argument("--clean", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--snr", type=_finite_float, required=True, help="target SNR in dB")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_mix)

    p = subs.add_parser("features", help="extract a feature matrix from a wav file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=_positive_int, default=1024)
    p.add_argument("--hop", type=_positive_int, default=512)
    p.add_argument("--mel", type=_positive_int, default=64)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--stats", default=None, help="json file with mean/scale arrays")
    _add_common(p)
    p.set_defaults(handler=cmd_features)

    p = subs.add_parser("synth", help="generate a synthetic paired feature dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=_positive_int, default=8)
    p.add_argument("--frames", type=_positive_int, default=32)
    p.add_argument("--dim", type=_positive_int, default=16)
    p.add_argument("--silence", type=_fraction_01, default=0.5)
    p.add_argument("--tonal", type=_fraction_01, default=0.0)
    p.add_argument("--burst", type=_fraction_01, default=0.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--burst-scale", type=_positive_float, default=1.5)
    p.add_argument("--sample-rate", type=_positive_int, default=16000)
    p.add_argument("--hop", type=_positive_int, default=512)
    _add_common(p)
    p.set_defaults(handler=cmd_synth)

    p = subs.add_parser("train-codebooks", help="fit the residual quantizer codebooks")
    p.add_argument("--data", required=True)
    p.add_argument("--use", choices=("clean", "noisy"), default="clean")
    p.add_argument("--stages", type=_positive_int, default=8)
    p.add_argument("--bits", type=_positive_int, default=10)
    p.add_argument("--max-iters", type=_positive_int, default=100)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_train_codebooks)

    p = subs.add_parser("train-importance", help="train the importance scorer")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mapping", choices=("clean", "noisy-to-clean"), default="clean")
    p.add_argument("--hidden", type=_positive_int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None, help="write per-iteration loss rows as csv")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(handler=cmd_train_importance)

    p = subs.add_parser("finetune-denoiser", help="fine-tune the feature masker on pairs")
    p.add_argument("--model", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=_positive_int, default=32)
    p.add_argument("--lambda-feature", type=_positive_float, default=0.1)
    p.add_argument("--out-net", required=True)
    p.add_argument("--out-masker", required=True)
    p.add_argument("--trace", default=None)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(handler=cmd_finetune_denoiser)

    p = subs.add_parser("encode", help="encode a feature file into a bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--net", default=None)
    p.add_argument("--masker", default=None, help="denoise features before encoding")
    p.add_argument("--mode", choices=("cbr", "vbr"), required=True)
    p.add_argument("--scale", type=_positive_float, default=None, help="allocation scale (vbr)")
    p.add_argument("--nq", type=_positive_int, default=None, help="fixed depth (cbr)")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_encode)

    p = subs.add_parser("decode", help="decode a bitstream back into features")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_decode)

    p = subs.add_parser("sweep", help="measure rate-distortion operating points")
    p.add_argument("--model", required=True)
    p.add_argument("--net", default=None)
    p.add_argument("--masker", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--noisy-input", action="store_true", help="encode noisy, score against clean")
    p.add_argument("--scales", type=_float_list, default=DEFAULT_SCALES)
    p.add_argument("--depths", type=_int_list, default=())
    p.add_argument("--label", default="sweep")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_sweep)

    p = subs.add_parser("bdrate", help="compare two rate-distortion csv curves")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", default="si_sdr")
    p.add_argument("--ref-label", default=None)
    p.add_argument("--test-label", default=None)
    p.add_argument("--out", default=None, help="json report path (default: stdout)")
    _add_common(p)
    p.set_defaults(handler=cmd_bdrate)

    p = subs.add_parser("impmap", help="export the per-frame importance map as csv")
    p.add_argument("--model", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--scale", type=_positive_float, required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_impmap)

    return parser


def _apply_config(argv: list) -> list:
    """Splice key=value defaults from a --config file in after the subcommand.

    Injected flags come before the user's own, so explicit flags win under
    argparse's last-one-wins rule for store actions.
    """
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    if at + 1 >= len(argv):
        return argv  # parser reports the missing value
    path = argv[at + 1]
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    injected = []
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise UsageError(f"{path}:{line_no}: expected key=value, got {text!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key == "config":
            raise UsageError(f"{path}:{line_no}: config files cannot nest")
        flag = "--" + key.replace("_", "-")
        if value.lower() == "true":
            injected.append(flag)
        elif value.lower() == "false":
            continue
        else:
            injected.extend([flag, value])
    if not argv:
        return argv
    return argv[:1] + injected + argv[1:]


def dispatch(argv) -> int:
    """Run one invocation; returns the process exit code."""
    try:
        argv = _apply_config(list(argv))
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
