"""Command-line entry point: ``ilpcnet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import dsp, evaluation, io, trainer
from . import grad as G
from .dsp import FrameConfig
from .model import ModelConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ilpcnet")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ------------------------------------------------------------------ config

_SECTIONS = {"model": ModelConfig, "train": trainer.TrainConfig, "frame": FrameConfig}


def _field_types():
    out = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            out.setdefault(f.name, []).append((section, f.type))
    return out


def parse_config_text(text, source="<config>"):
    """``key = value`` lines (``#`` comments) -> {section: {field: value}}.

    Keys are field names of ModelConfig, TrainConfig or FrameConfig; a name
    shared by several (``frame_shift``, ``lp_order``, ``sample_rate``) sets all
    of them.  Unknown keys are an error.
    """
    known = _field_types()
    out = {s: {} for s in _SECTIONS}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value, got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{source}:{n}: unknown config key {key!r}")
        for section, typ in known[key]:
            try:
                out[section][key] = float(val) if typ == "float" else int(val)
            except ValueError:
                raise UsageError(f"{source}:{n}: {key} expects a {typ}, got {val!r}") from None
    return out


def load_config(path):
    if path is None:
        return {s: {} for s in _SECTIONS}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} not found")
    return parse_config_text(p.read_text(), str(path))


def _build(cls, overrides):
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def frame_config(conf):
    return _build(FrameConfig, conf["frame"])


def model_config(conf, frame):
    kw = {"lp_order": frame.lp_order, "frame_shift": frame.frame_shift,
          "feature_dim": frame.lp_order + 3}
    kw.update(conf["model"])
    return _build(ModelConfig, kw)


# ---------------------------------------------------------------- commands

def cmd_features(wav_in, feat_out, conf):
    cfg = frame_config(conf)
    try:
        audio = io.wav_read(wav_in)
    except (io.FormatError, OSError) as exc:
        raise DataError(str(exc)) from None
    if audio.sample_rate != cfg.sample_rate:
        raise DataError(f"{wav_in}: sample rate {audio.sample_rate} != configured {cfg.sample_rate}")
    try:
        track = dsp.extract_features(audio, cfg)
    except ValueError as exc:
        raise DataError(f"{wav_in}: {exc}") from None
    io.feature_write(feat_out, track)
    print(f"{feat_out}: {track.n_frames} frames x {track.feature_dim}")


def _load_corpus(directory):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"corpus directory {directory} not found")
    try:
        pairs = io.read_corpus(d)
    except io.FormatError as exc:
        raise DataError(str(exc)) from None
    if not pairs:
        raise DataError(f"{directory}: empty corpus (no paired .wav/.feat files)")
    return pairs


def cmd_train(corpus_dir, ckpt_out, conf, log_path=None, resume=None, heldout_dir=None):
    frame = frame_config(conf)
    mcfg = model_config(conf, frame)
    tcfg = _build(trainer.TrainConfig, {"frame_shift": frame.frame_shift, **conf["train"]})
    corpus = _load_corpus(corpus_dir)
    for name, _, track in corpus:
        if track.lp_order != mcfg.lp_order:
            raise DataError(f"{name}: feature lp_order {track.lp_order} != model lp_order {mcfg.lp_order}")
    heldout = _load_corpus(heldout_dir) if heldout_dir else None
    if resume is not None and not Path(resume).exists():
        raise DataError(f"resume checkpoint {resume} not found")
    log_path = log_path or str(Path(ckpt_out).with_suffix(".csv"))
    try:
        res = trainer.train(corpus, tcfg, mcfg, heldout=heldout, log_path=log_path,
                            ckpt_path=ckpt_out, resume=resume)
    except io.FormatError as exc:
        raise DataError(str(exc)) from None
    last = res.losses[-1] if res.losses else None
    print(f"{ckpt_out}: step {res.step}" + (f", final total {last[3]:.6f}" if last else ""))
    for step, v in res.evals:
        print(f"held-out nll @ {step}: {v:.6f}")


def cmd_synth(ckpt, feat_in, wav_out, sharpen=0.7, seed=0):
    try:
        model, _, _, _ = trainer.load_checkpoint(ckpt)
        track = io.feature_read(feat_in)
    except (io.FormatError, OSError) as exc:
        raise DataError(str(exc)) from None
    if track.feature_dim != model.cfg.feature_dim:
        raise DataError(f"feature dim {track.feature_dim} in {feat_in} != model feature_dim "
                        f"{model.cfg.feature_dim} in {ckpt}")
    if track.frame_shift != model.cfg.frame_shift:
        raise DataError(f"frame shift {track.frame_shift} in {feat_in} != model frame_shift "
                        f"{model.cfg.frame_shift} in {ckpt}")
    if not sharpen > 0:
        raise UsageError("--sharpen must be > 0")
    audio = model.synthesize(track, seed=seed, sharpen_factor=sharpen)
    io.wav_write(wav_out, audio)
    print(f"{wav_out}: {audio.samples.size} samples")


def cmd_eval(ref_wav, syn_wav, conf=None):
    cfg = frame_config(conf or load_config(None))
    try:
        ref, syn = io.wav_read(ref_wav), io.wav_read(syn_wav)
        result = evaluation.compare_audio(ref, syn, cfg)
    except (io.FormatError, OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    sys.stdout.write(result.report())
    return result


def cmd_gradcheck(trials=10, seed=0, corrupt=None):
    if corrupt is not None and corrupt not in evaluation.COMPONENTS:
        raise UsageError(f"--corrupt: unknown component {corrupt!r}")
    rows = evaluation.gradcheck_suite(trials, seed, corrupt)
    print(evaluation.format_table(rows))
    return all(r.passed for r in rows)


def cmd_corpus(out_dir, n, seconds, seed, conf):
    cfg = frame_config(conf)
    utts = io.synth_corpus(n, seconds, seed, cfg)
    io.write_corpus(out_dir, utts)
    print(f"{out_dir}: {len(utts)} utterances")


# -------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="ilpcnet", description="LP-MDN neural vocoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("features", help="extract a feature file from a WAV")
    s.add_argument("wav_in")
    s.add_argument("feat_out")
    s.add_argument("--config")

    s = sub.add_parser("train", help="train on a directory of paired .wav/.feat files")
    s.add_argument("corpus_dir")
    s.add_argument("ckpt_out")
    s.add_argument("--config")
    s.add_argument("--log", help="CSV loss log (default: checkpoint path with .csv)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--heldout", help="directory evaluated for NLL every eval_every steps")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override total_steps")

    s = sub.add_parser("synth", help="generate a WAV from a feature file")
    s.add_argument("ckpt")
    s.add_argument("feat_in")
    s.add_argument("wav_out")
    s.add_argument("--sharpen", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="compare a synthesized WAV with its reference")
    s.add_argument("ref_wav")
    s.add_argument("syn_wav")
    s.add_argument("--config")

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corrupt", help=argparse.SUPPRESS)

    s = sub.add_parser("corpus", help="write a synthetic harmonic corpus")
    s.add_argument("out_dir")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seconds", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "features":
        cmd_features(args.wav_in, args.feat_out, load_config(args.config))
    elif args.command == "train":
        conf = load_config(args.config)
        if args.seed is not None:
            conf["train"]["seed"] = args.seed
        if args.steps is not None:
            conf["train"]["total_steps"] = args.steps
        cmd_train(args.corpus_dir, args.ckpt_out, conf, args.log, args.resume, args.heldout)
    elif args.command == "synth":
        cmd_synth(args.ckpt, args.feat_in, args.wav_out, args.sharpen, args.seed)
    elif args.command == "eval":
        cmd_eval(args.ref_wav, args.syn_wav, load_config(args.config))
    elif args.command == "gradcheck":
        if args.trials < 1:
            raise UsageError("--trials must be >= 1")
        if not cmd_gradcheck(args.trials, args.seed, args.corrupt):
            return EXIT_NUMERIC
    elif args.command == "corpus":
        if args.n < 1 or not args.seconds > 0:
            raise UsageError("--n must be >= 1 and --seconds > 0")
        cmd_corpus(args.out_dir, args.n, args.seconds, args.seed, load_config(args.config))
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except UsageError as exc:
        print(f"ilpcnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"ilpcnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (G.NonFiniteError, FloatingPointError) as exc:
        print(f"ilpcnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except G.ShapeError as exc:
        print(f"ilpcnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
