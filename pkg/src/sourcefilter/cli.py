"""Command-line entry point: ``sourcefilter <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import io, pipeline
from .dsp import snr_db
from .errors import NumericalError, SourceFilterError, UsageError
from .features import extract_features, normalize
from .gradient import LOSS_KINDS, GradientTape, certify, fit_envelope, lsd_loss, random_point

log = logging.getLogger("sourcefilter")


def _load_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.from_dict(io.read_json(args.config)) if args.config \
        else pipeline.PipelineConfig()
    if args.allow_any_rate:
        cfg = pipeline.PipelineConfig(stft=cfg.stft, order=cfg.order, sample_rate=None)
    return cfg


def _formant_pairs(items, name):
    out = [None] * 4
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or key.upper() not in ("F1", "F2", "F3", "F4"):
            raise UsageError(f"--{name} expects F<n>=<value>, got {item!r}")
        try:
            out[int(key[1]) - 1] = float(value)
        except ValueError as exc:
            raise UsageError(f"--{name}: {value!r} is not a number") from exc
    return out


def cmd_analyze(args):
    cfg = _load_config(args)
    audio = io.read_wav(args.input, cfg.sample_rate)
    track = extract_features(audio, cfg.stft, order=cfg.order)
    spec = io.read_normalization(args.norm) if args.norm else None
    if spec is not None:
        track = normalize(track, spec)
    io.write_features_csv(args.csv, track)
    if args.json:
        io.write_json(args.json, io.features_document(track, spec))
    log.info("%d frames written to %s", track.num_frames, args.csv)


def cmd_copy_synth(args):
    cfg = _load_config(args)
    audio = io.read_wav(args.input, cfg.sample_rate)
    out = pipeline.copy_synthesis(audio, cfg)
    io.write_wav(args.output, out)
    log.info("SNR %.1f dB", snr_db(audio.samples, out.samples))


def cmd_manipulate(args):
    cfg = _load_config(args)
    scales = [1.0 if s is None else s for s in _formant_pairs(args.scale, "scale")]
    spec = pipeline.ManipulationSpec(scales=tuple(scales),
                                     targets=tuple(_formant_pairs(args.target, "target")),
                                     f0_scale=args.f0_scale)
    audio = io.read_wav(args.input, cfg.sample_rate)
    io.write_wav(args.output, pipeline.manipulate(audio, spec, cfg))


def cmd_eval(args):
    cfg = _load_config(args)
    report = pipeline.eval_manipulation(args.corpus, args.scales, args.formants, cfg, args.jobs)
    io.write_json(args.out, report)
    if args.csv:
        pipeline.write_eval_csv(args.csv, report)
    for c in report["cells"]:
        med = "n/a" if c["median_hz"] is None else f"{c['median_hz']:.1f}"
        print(f"F{c['formant']} x{c['scale']:.2f}: median {med} Hz over {c['n_frames']} frames")
    if report["failures"]:
        log.warning("%d manipulation(s) failed and were skipped", report["failures"])


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    report = certify(seed=args.seed, points=args.points, coords=args.coords, order=args.order,
                     num_frames=args.frames, losses=tuple(args.loss or LOSS_KINDS))
    report["passed"] = report["max_rel_error"] < args.tol
    if args.out:
        io.write_json(args.out, report)
    for kind, entry in report["losses"].items():
        print(f"{kind}: max relative error {entry['max_rel_error']:.3e} "
              f"({entry['checked']} coordinates, {entry['skipped_kinks']} kinks skipped)")
    log.info("gradient check took %.1f s", time.perf_counter() - t0)
    if not report["passed"]:
        raise NumericalError(f"max relative error {report['max_rel_error']:.3e} >= {args.tol}")


def cmd_fit_envelope(args):
    rng = np.random.default_rng(args.seed)
    theta, log_gain = random_point(rng, args.order, args.frames)
    target = np.abs(GradientTape(theta, log_gain).envelope())
    result = fit_envelope(target, args.order, iters=args.iters)
    fitted = np.abs(GradientTape(result.theta, result.log_gain).envelope())
    db = np.abs(20 * np.log10(fitted / target))
    doc = {**result.to_dict(), "seed": args.seed, "order": args.order, "frames": args.frames,
           "mean_lsd": lsd_loss(fitted, target), "median_bin_error_db": float(np.median(db))}
    if args.out:
        io.write_json(args.out, doc)
    print(f"mean LSD {doc['mean_lsd']:.4g}, median per-bin error {doc['median_bin_error_db']:.3g} dB"
          f" after {result.iterations} iterations")


def cmd_scan_norm(args):
    cfg = _load_config(args)
    spec = pipeline.scan_normalization(args.corpus, cfg)
    io.write_normalization(args.out, spec)


def cmd_make_corpus(args):
    paths = pipeline.make_test_corpus(args.out, args.n, args.seed)
    print(f"{len(paths)} files written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sourcefilter",
                                description="All-pole source-filter analysis, formant "
                                            "manipulation and resynthesis.")
    p.add_argument("--config", help="JSON pipeline config (stft, order, sample_rate)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--allow-any-rate", action="store_true",
                   help="accept WAVs at any sample rate")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("analyze", help="extract the nine feature tracks")
    s.add_argument("input")
    s.add_argument("--csv", required=True)
    s.add_argument("--json")
    s.add_argument("--norm", help="normalisation spec JSON from scan-norm")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("copy-synth", help="analysis/resynthesis with unchanged envelopes")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_copy_synth)

    s = sub.add_parser("manipulate", help="scale or retarget formants")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--scale", action="append", metavar="Fn=FACTOR")
    s.add_argument("--target", action="append", metavar="Fn=HZ")
    s.add_argument("--f0-scale", type=float, default=1.0)
    s.set_defaults(func=cmd_manipulate)

    s = sub.add_parser("eval", help="formant manipulation accuracy over a corpus")
    s.add_argument("corpus")
    s.add_argument("--out", required=True, help="report JSON")
    s.add_argument("--csv", help="report CSV")
    s.add_argument("--scales", type=float, nargs="+", default=list(pipeline.DEFAULT_SCALES))
    s.add_argument("--formants", type=int, nargs="+", default=list(pipeline.DEFAULT_FORMANTS))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference certification of the gradients")
    s.add_argument("--out")
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--coords", type=int, default=100)
    s.add_argument("--order", type=int, default=30)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--loss", action="append", choices=LOSS_KINDS)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("fit-envelope", help="descent demo on a random target envelope")
    s.add_argument("--out")
    s.add_argument("--order", type=int, default=10)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--iters", type=int, default=500)
    s.set_defaults(func=cmd_fit_envelope)

    s = sub.add_parser("scan-norm", help="robust per-feature min/max over a corpus")
    s.add_argument("corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scan_norm)

    s = sub.add_parser("make-corpus", help="synthetic vowel corpus with ground truth")
    s.add_argument("out")
    s.add_argument("-n", type=int, default=50)
    s.set_defaults(func=cmd_make_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else UsageError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return UsageError.exit_code
    try:
        args.func(args)
    except SourceFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
