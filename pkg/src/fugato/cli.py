"""Command-line entry point wiring the pipeline together.

Subcommands: ingest, vocab, encode, stats, train, eval, generate, synth.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
failure. Every command that writes into an output directory also drops a
``run_manifest.json`` recording its inputs, config digest, seed, and
library versions, which is enough to re-execute the run.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__, encoding, evaluation, generation, midi, synthetic
from . import training as training_mod
from .errors import ConfigError, DataError
from .model import CompoundModel, ModelConfig
from .vocab import FeatureConfig, FeatureVocab, build_vocab


def _write_manifest(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "versions": {
            "fugato": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    manifest.update(payload)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2), encoding="utf-8"
    )


def _load_split(path: Path) -> midi.CorpusSplit:
    return midi.CorpusSplit.from_json(path.read_text(encoding="utf-8"))


def _pieces_for_split(corpus_dir: Path, split: midi.CorpusSplit,
                      part: str) -> list[midi.Piece]:
    wanted = set(getattr(split, part))
    pieces = [p for p in midi.load_corpus(corpus_dir) if p.source_id in wanted]
    if not pieces:
        raise DataError(f"split part {part!r} matches no pieces in {corpus_dir}")
    return pieces


# ---------------------------------------------------------------------------
# ingest


def cmd_ingest(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    paths = sorted(
        p for p in in_dir.rglob("*") if p.suffix.lower() in (".mid", ".midi")
    )
    if not paths:
        raise DataError(f"no MIDI files under {in_dir}")

    parsed: list[midi.Piece] = []
    parse_failures = 0
    for path in paths:
        try:
            piece = midi.parse_midi(path.read_bytes(), source_id=path.stem)
            parsed.append(piece)
        except DataError as exc:
            parse_failures += 1
            print(f"skipping {path.name}: {exc}", file=sys.stderr)

    criteria = midi.FilterCriteria(
        min_notes=args.min_notes,
        max_notes=args.max_notes,
        min_instruments=args.min_instruments,
    )
    result = midi.filter_corpus(parsed, criteria)
    quantized = [midi.quantize(p, args.resolution) for p in result.pieces]
    if len(quantized) >= 10:
        split = midi.split_corpus(quantized, args.seed)
        (out_dir / "split.json").write_text(split.to_json(), encoding="utf-8")
    else:
        print("fewer than 10 pieces; skipping train/valid/test split",
              file=sys.stderr)
    midi.save_corpus(quantized, out_dir)

    _write_manifest(out_dir, "ingest", {
        "input_dir": str(in_dir),
        "resolution": args.resolution,
        "seed": args.seed,
        "files_seen": len(paths),
        "parse_failures": parse_failures,
        "rejections": result.rejections,
        "pieces": len(quantized),
    })
    print(f"ingested {len(quantized)} pieces "
          f"({parse_failures} unparseable, rejections: {result.rejections})")
    return 0


# ---------------------------------------------------------------------------
# vocab / encode / stats


def cmd_vocab(args) -> int:
    pieces = midi.load_corpus(Path(args.in_dir))
    config = FeatureConfig(
        instrument=not args.no_instrument,
        chord=not args.no_chord,
        tempo=not args.no_tempo,
        velocity=not args.no_velocity,
    )
    vocab = build_vocab(pieces, config)
    Path(args.out).write_text(vocab.to_json(), encoding="utf-8")
    sizes = {name: vocab[name].size for name in vocab.features}
    print(f"vocabulary written to {args.out}: {sizes}")
    return 0


def cmd_encode(args) -> int:
    vocab = FeatureVocab.from_json(Path(args.vocab).read_text(encoding="utf-8"))
    pieces = midi.load_corpus(Path(args.in_dir))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lengths = []
    clamps: dict[str, int] = {}
    for piece in pieces:
        seq = encoding.encode(piece, vocab, args.scheme)
        (out_dir / f"{piece.source_id}.tokens.txt").write_text(
            encoding.dump_tokens(seq), encoding="utf-8"
        )
        lengths.append(len(seq))
        for key, value in seq.clamp_counts.items():
            clamps[key] = clamps.get(key, 0) + value
    summary = {
        "scheme": args.scheme,
        "pieces": len(pieces),
        "mean_tokens": float(np.mean(lengths)),
        "std_tokens": float(np.std(lengths)),
        "clamps": clamps,
    }
    (out_dir / "encode_summary.json").write_text(
        json.dumps(summary, indent=2), encoding="utf-8"
    )
    _write_manifest(out_dir, "encode", {
        "vocab": str(args.vocab), "scheme": args.scheme, "summary": summary,
    })
    print(json.dumps(summary, indent=2))
    return 0


def cmd_stats(args) -> int:
    pieces = midi.load_corpus(Path(args.in_dir))
    if args.vocab:
        vocab = FeatureVocab.from_json(Path(args.vocab).read_text(encoding="utf-8"))
    else:
        vocab = build_vocab(pieces)
    rows = []
    for scheme in encoding.SCHEME_NAMES:
        lengths = [len(encoding.encode(p, vocab, scheme)) for p in pieces]
        rows.append((scheme, float(np.mean(lengths)), float(np.std(lengths))))
    print(f"{'scheme':8s} {'mean':>10s} {'std':>10s}   ({len(pieces)} pieces)")
    for scheme, mean_len, std_len in rows:
        print(f"{scheme:8s} {mean_len:10.1f} {std_len:10.1f}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {s: {"mean": m, "std": d} for s, m, d in rows}, indent=2
        ), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_run_config(path: Path) -> dict:
    config = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(config, dict):
        raise ConfigError(f"run config {path} is not a mapping")
    return config


def _build_sources(config: dict):
    """Returns (train_source, valid_source, scheme, vocab-or-None)."""
    data = config.get("data", {})
    kind = data.get("kind", "corpus")
    if kind == "synth":
        corpus = synthetic.synth_corpus(
            n_features=data.get("features", 4),
            vocab_size=data.get("vocab_size", 16),
            mode=data.get("mode", "intra"),
            length=data.get("length", 64),
            n_sequences=data.get("sequences", 256),
            seed=config.get("seed", 0),
        )
        n_valid = max(1, len(corpus.sequences) // 10)
        train_src = training_mod.TokenSegmentSource(
            corpus.sequences[n_valid:], corpus.scheme
        )
        valid_src = training_mod.TokenSegmentSource(
            corpus.sequences[:n_valid], corpus.scheme
        )
        return train_src, valid_src, corpus.scheme, None, corpus
    if kind != "corpus":
        raise ConfigError(f"unknown data kind {kind!r}")

    corpus_dir = Path(data["corpus_dir"])
    vocab = FeatureVocab.from_json(
        Path(data["vocab"]).read_text(encoding="utf-8")
    )
    split = _load_split(Path(data.get("split", corpus_dir / "split.json")))
    scheme_name = config.get("scheme", "nb-pf")
    train_pieces = _pieces_for_split(corpus_dir, split, "train")
    valid_pieces = _pieces_for_split(corpus_dir, split, "valid")
    augment = bool(data.get("augment", True))
    train_src = training_mod.PieceSegmentSource(
        train_pieces, vocab, scheme_name, augment=augment
    )
    valid_src = training_mod.PieceSegmentSource(
        valid_pieces, vocab, scheme_name, augment=False
    )
    return train_src, valid_src, train_src.scheme, vocab, None


def cmd_train(args) -> int:
    config = _load_run_config(Path(args.config))
    if args.scheme:
        config["scheme"] = args.scheme
    if args.subdecoder:
        config.setdefault("model", {})["subdecoder_kind"] = args.subdecoder
    out_dir = Path(args.out or config.get("out_dir", "runs/latest"))

    train_src, valid_src, scheme, vocab, _ = _build_sources(config)
    model_kw = dict(config.get("model", {}))
    train_kw = dict(config.get("train", {}))
    train_kw.setdefault("seed", config.get("seed", 0))
    train_config = training_mod.TrainConfig(**train_kw)
    model_kw.setdefault("dropout", train_config.dropout)
    model_kw.setdefault(
        "max_sequence_length",
        train_config.segment_length
        or training_mod.segment_length_default(scheme.name),
    )
    model_config = ModelConfig.for_scheme(scheme, **model_kw)
    model = CompoundModel(model_config, seed=train_config.seed)

    breakdown = model.parameter_breakdown()
    print(f"model parameters: {breakdown['total']:,} "
          f"(subdecoder={model_config.subdecoder_kind}, scheme={scheme.name})")

    result = training_mod.train(
        model, train_config, train_src, valid_src, out_dir,
        log=lambda msg: print(msg),
    )
    _write_manifest(out_dir, "train", {
        "config_file": str(args.config),
        "run_config": config,
        "model_config": model_config.to_dict(),
        "model_config_digest": model_config.digest(),
        "scheme": scheme.name,
        "seed": train_config.seed,
        "parameters": breakdown,
        "best_step": result.best_step,
        "best_valid_nll": result.best_valid_nll,
    })
    print(f"best validation nll {result.best_valid_nll:.4f} "
          f"at step {result.best_step}; artifacts in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval / generate / synth


def cmd_eval(args) -> int:
    checkpoint = Path(args.model)
    if not checkpoint.exists():
        raise ConfigError(f"missing checkpoint {checkpoint}")
    model, meta = CompoundModel.load(checkpoint)
    vocab = FeatureVocab.from_json(Path(args.vocab).read_text(encoding="utf-8"))
    split = _load_split(Path(args.split_file))
    pieces = _pieces_for_split(Path(args.in_dir), split, args.split)
    report = evaluation.evaluate_corpus(
        model, pieces, vocab, args.scheme,
        window=args.window, stride=args.stride,
    )
    print(report.to_csv())
    if args.out:
        out = Path(args.out)
        out.write_text(report.to_json(), encoding="utf-8")
        out.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
        print(f"report written to {out}")
    return 0


def cmd_generate(args) -> int:
    checkpoint = Path(args.model)
    if not checkpoint.exists():
        raise ConfigError(f"missing checkpoint {checkpoint}")
    model, meta = CompoundModel.load(checkpoint)
    vocab = FeatureVocab.from_json(Path(args.vocab).read_text(encoding="utf-8"))
    scheme = encoding.scheme_for(args.scheme, vocab)
    if tuple(scheme.sizes) != tuple(s for _, s in model.config.features):
        raise ConfigError(
            f"checkpoint was trained for a different slot layout than "
            f"scheme {args.scheme}"
        )

    prompt_tokens = None
    if args.prompt:
        piece = midi.parse_midi(Path(args.prompt).read_bytes(),
                                source_id=Path(args.prompt).stem)
        piece = midi.quantize(piece, vocab.resolution)
        prompt_seq = generation.extract_prompt(piece, vocab, args.scheme,
                                               args.measures)
        prompt_tokens = prompt_seq.tokens

    sampler = generation.SamplerConfig(
        top_p=args.top_p, temperature=args.temperature,
        max_tokens=args.max_tokens, seed=args.seed, greedy=args.greedy,
    )
    tokens = generation.generate(model, scheme, sampler, prompt_tokens, vocab)
    seq = encoding.TokenSequence(scheme, tokens, vocab, "generated")
    piece = generation.decode_generated(seq)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(midi.write_midi(piece))
    out.with_suffix(out.suffix + ".tokens.txt").write_text(
        encoding.dump_tokens(seq), encoding="utf-8"
    )
    print(f"wrote {len(piece.notes)} notes ({len(tokens)} tokens) to {out}")
    return 0


def cmd_synth(args) -> int:
    corpus = synthetic.synth_corpus(
        n_features=args.features,
        vocab_size=args.vocab_size,
        mode=args.deps,
        length=args.length,
        n_sequences=args.sequences,
        seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(
        out_dir / "sequences.npz",
        **{f"seq{i:04d}": s for i, s in enumerate(corpus.sequences)},
    )
    report = {
        "mode": corpus.mode,
        "features": list(corpus.scheme.features),
        "sizes": list(corpus.scheme.sizes),
        "conditional_entropy": corpus.entropies,
        "marginal_entropy": corpus.marginal_entropies,
        "mean_conditional_entropy": corpus.mean_entropy,
    }
    (out_dir / "entropy.json").write_text(json.dumps(report, indent=2),
                                          encoding="utf-8")
    _write_manifest(out_dir, "synth", {
        "seed": args.seed, "report": report,
        "sequences": len(corpus.sequences), "length": args.length,
    })
    print(json.dumps(report, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fugato",
        description="Compound-token symbolic music modeling pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, filter, quantize, and split MIDI")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--resolution", type=int, default=4)
    p.add_argument("--min-instruments", type=int, default=None)
    p.add_argument("--min-notes", type=int, default=64)
    p.add_argument("--max-notes", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("vocab", help="build the feature vocabulary")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-instrument", action="store_true")
    p.add_argument("--no-chord", action="store_true")
    p.add_argument("--no-tempo", action="store_true")
    p.add_argument("--no-velocity", action="store_true")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("encode", help="encode a corpus and dump tokens")
    p.add_argument("--scheme", choices=encoding.SCHEME_NAMES, required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("stats", help="token-length statistics per scheme")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--scheme", choices=encoding.SCHEME_NAMES, default=None)
    p.add_argument("--subdecoder", default=None,
                   choices=("parallel", "ff", "rnn", "selfattn", "crossattn", "nmt"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="moving-window NLL on a held-out split")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--split-file", required=True)
    p.add_argument("--scheme", choices=encoding.SCHEME_NAMES, required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample a continuation to MIDI")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--scheme", choices=encoding.SCHEME_NAMES, required=True)
    p.add_argument("--prompt", default=None, help="MIDI file to continue")
    p.add_argument("--measures", type=int, default=4)
    p.add_argument("--top-p", type=float, default=0.99)
    p.add_argument("--temperature", type=float, default=1.1)
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("synth", help="synthetic compound corpus with exact entropy")
    p.add_argument("--features", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--deps", choices=("independent", "intra", "inter"),
                   default="intra")
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--sequences", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
