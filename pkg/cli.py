#!/usr/bin/env python3
"""
Command-line entry points: data generation, training, decoding, evaluation,
ablation runs and diagnostics
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from bias_encoder import phrases_from_surfaces
from config import FORMAT_VERSION, Config, __version__, apply_overrides, configure_logging, load_json_config
from contextual_decoder import BiasScope, DecodeSettings, attention_map, decode_dataset
from data import SynthTaskConfig, load_bias_list, load_dataset, load_task, write_task
from errors import ConfigError, DeepClasError, ParseError, VocabularyError
from fusion import FusionMethod
from metrics import DEFAULT_BUCKETS, parse_buckets, score_corpus
from prefix_tree import PrefixTree
from storage import ExperimentStorage, write_json
from training import (AblationLadder, ModelConfig, ablation_document, load_checkpoint, load_model,
                      run_ablation, save_checkpoint, train)
from vocabulary import Vocabulary

logger = logging.getLogger(__name__)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _load_config(path: str, overrides: Sequence[str]) -> Dict[str, Any]:
    return apply_overrides(load_json_config(path), overrides or [])


def _check_vocabulary(vocabulary: Vocabulary, utterances, surfaces: Sequence[str]) -> None:
    unknown = sorted({t for u in utterances for t in u.reference if t not in vocabulary}
                     | {ch for s in surfaces for ch in s if ch not in vocabulary})
    if unknown:
        raise ConfigError(f"Data uses tokens missing from the checkpoint vocabulary: {''.join(unknown[:20])}")


def cmd_gen_data(args) -> int:
    document = _load_config(args.config, args.set)
    if args.seed is not None:
        document["seed"] = args.seed
    summary = write_task(args.out, SynthTaskConfig.model_validate(document))
    print(json.dumps(summary, ensure_ascii=False, indent=2))
    return 0


def cmd_train(args) -> int:
    document = _load_config(args.config, args.set)
    if args.seed is not None:
        document["seed"] = args.seed
    config = ModelConfig.model_validate(document)
    vocabulary, train_set, _, _ = load_task(args.data)
    checkpoint = train(train_set, vocabulary, config)
    if args.out:
        out = args.out
        save_checkpoint(out, checkpoint)
    else:
        storage = ExperimentStorage()
        out = storage.path_for(config.name)
        if not storage.save_document(config.name, checkpoint.model_dump(mode="json")):
            raise OSError(f"Could not write checkpoint {out}")
    logger.info(f"💾 Checkpoint written to {out} after {checkpoint.step} steps")
    return 0


def _decode_settings(args, config: ModelConfig) -> DecodeSettings:
    return DecodeSettings(
        beam=args.beam,
        bias=args.bias,
        fusion=FusionMethod(args.fusion) if args.fusion else config.fusion.method,
        beta=config.fusion.beta if args.beta is None else args.beta,
        trie=config.trie if args.trie is None else args.trie,
        bias_scope=BiasScope(args.bias_scope),
    )


def cmd_decode(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model, params, vocabulary = load_model(checkpoint)
    utterances = load_dataset(args.data)
    surfaces = load_bias_list(args.bias_list) if args.bias_list else []
    _check_vocabulary(vocabulary, utterances, surfaces)
    phrases = phrases_from_surfaces(surfaces, vocabulary)
    settings = _decode_settings(args, checkpoint.config)

    results = decode_dataset(model, params, vocabulary, utterances, phrases, settings, threads=args.threads)
    lines = [json.dumps(r.to_json_dict(), ensure_ascii=False) for r in results]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line)

    if args.dump_attention:
        out_dir = Path(args.dump_attention)
        out_dir.mkdir(parents=True, exist_ok=True)
        for result in results:
            if not write_json(out_dir / f"{result.id}.json", attention_map(result)):
                raise OSError(f"Could not write attention map for {result.id}")
    return 0


def load_hypotheses(path: str) -> Dict[str, List[str]]:
    hypotheses: Dict[str, List[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                hypotheses[str(record["id"])] = list(record["hypothesis"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"malformed hypothesis record ({e})", line_number)
    return hypotheses


def cmd_eval(args) -> int:
    references = {u.id: u.reference for u in load_dataset(args.ref)}
    hypotheses = load_hypotheses(args.hyp)
    surfaces = load_bias_list(args.bias_list) if args.bias_list else []
    report = score_corpus(references, hypotheses, surfaces, parse_buckets(args.buckets))
    document = report.to_json_dict()
    if args.out:
        if not write_json(args.out, document):
            raise OSError(f"Could not write report {args.out}")
    else:
        print(json.dumps(document, ensure_ascii=False, indent=2))
    return 0


def cmd_ablate(args) -> int:
    ladder = AblationLadder.model_validate(_load_config(args.ladder, args.set))
    vocabulary, train_set, test_set, surfaces = load_task(args.data)
    table = run_ablation(ladder, train_set, test_set, vocabulary, surfaces, threads=args.threads)
    document = ablation_document(ladder, table)
    if args.out:
        out = Path(args.out)
        written = write_json(out, document)
    else:
        storage = ExperimentStorage()
        out = storage.path_for(f"ablation-{ladder.name}")
        written = storage.save_document(f"ablation-{ladder.name}", document)
    if not written:
        raise OSError(f"Could not write ablation report {out}")
    table.to_csv(out.with_suffix(".csv"), index=False)
    logger.info(f"📊 Ablation report written to {out} and {out.with_suffix('.csv')}")
    return 0


def cmd_dump_attention(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model, params, vocabulary = load_model(checkpoint)
    utterances = [u for u in load_dataset(args.data) if u.id == args.id]
    if not utterances:
        raise ConfigError(f"No utterance with id {args.id} in {args.data}")
    surfaces = load_bias_list(args.bias_list) if args.bias_list else []
    _check_vocabulary(vocabulary, utterances, surfaces)
    phrases = phrases_from_surfaces(surfaces, vocabulary)
    result = decode_dataset(model, params, vocabulary, utterances, phrases,
                            _decode_settings(args, checkpoint.config))[0]
    document = attention_map(result)
    if args.out:
        if not write_json(args.out, document):
            raise OSError(f"Could not write attention map {args.out}")
    else:
        print(json.dumps(document, ensure_ascii=False))
    return 0


def cmd_dump_trie(args) -> int:
    surfaces = load_bias_list(args.bias_list)
    if args.vocab:
        vocabulary = Vocabulary.load(args.vocab)
    else:
        vocabulary = Vocabulary(dict.fromkeys(ch for s in surfaces for ch in s))
    try:
        phrases = phrases_from_surfaces(surfaces, vocabulary)
    except VocabularyError as e:
        raise ConfigError(str(e))
    sys.stdout.write(PrefixTree(phrases).dump())
    return 0


def _add_decode_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="Checkpoint JSON written by `train`")
    parser.add_argument("--data", required=True, help="Dataset JSON-lines file")
    parser.add_argument("--bias-list", help="Bias list, one phrase per line")
    parser.add_argument("--beam", type=int, default=10, help="Beam width (default: 10)")
    parser.add_argument("--beta", type=float, help="Bias coefficient (default: from checkpoint config)")
    parser.add_argument("--fusion", choices=[m.value for m in FusionMethod],
                        help="Fusion method (default: from checkpoint config)")
    parser.add_argument("--trie", type=_on_off, help="Prefix-tree gating: on|off (default: from checkpoint config)")
    parser.add_argument("--bias", type=_on_off, default=True, help="Use the bias list: on|off (default: on)")
    parser.add_argument("--bias-scope", choices=[s.value for s in BiasScope], default=BiasScope.ALL.value,
                        help="Whole bias list or per-utterance entities (default: all)")


def parse_arguments(argv: Optional[Sequence[str]] = None):
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(prog="deepclas", description="Deep contextual biasing toolkit")
    parser.add_argument("--version", action="version",
                        version=f"deepclas {__version__} (format version {FORMAT_VERSION})")
    parser.add_argument("--log-level", default=None, help="Override DEEPCLAS_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate the synthetic long-tail task")
    p.add_argument("--config", required=True, help="SynthTaskConfig JSON")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--set", action="append", default=[], help="Dotted override, e.g. noise=0.5")
    p.add_argument("--seed", type=int, help="Override the config seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="Train a model on <data>/train.jsonl")
    p.add_argument("--config", required=True, help="ModelConfig JSON")
    p.add_argument("--data", required=True, help="Directory written by gen-data")
    p.add_argument("--out", help="Checkpoint path (default: <runs dir>/<name>.json)")
    p.add_argument("--set", action="append", default=[], help="Dotted override, e.g. optimizer.lr=0.01")
    p.add_argument("--seed", type=int, help="Override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="Beam-search decode a dataset")
    _add_decode_flags(p)
    p.add_argument("--out", help="Hypotheses JSON-lines (default: stdout)")
    p.add_argument("--dump-attention", help="Directory for per-utterance attention maps")
    p.add_argument("--threads", type=int, default=Config.THREADS, help="Decoding workers")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="Score hypotheses against references")
    p.add_argument("--ref", required=True, help="Reference dataset JSON-lines")
    p.add_argument("--hyp", required=True, help="Hypotheses JSON-lines written by decode")
    p.add_argument("--bias-list", help="Bias list, one phrase per line")
    p.add_argument("--buckets", default=DEFAULT_BUCKETS, help=f"Length buckets (default: {DEFAULT_BUCKETS})")
    p.add_argument("--out", help="Report path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Train and evaluate an ablation ladder")
    p.add_argument("--ladder", required=True, help="AblationLadder JSON")
    p.add_argument("--data", required=True, help="Directory written by gen-data")
    p.add_argument("--out", help="Report JSON, with a CSV next to it "
                                  "(default: <runs dir>/ablation-<ladder>.json)")
    p.add_argument("--set", action="append", default=[], help="Dotted override of the ladder document")
    p.add_argument("--threads", type=int, default=Config.THREADS, help="Decoding workers")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attention", help="Bias-attention map of one decoded utterance")
    _add_decode_flags(p)
    p.add_argument("--id", required=True, help="Utterance id")
    p.add_argument("--out", help="Output path (default: stdout)")
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("dump-trie", help="Print the prefix tree of a bias list")
    p.add_argument("--bias-list", required=True, help="Bias list, one phrase per line")
    p.add_argument("--vocab", help="Vocabulary file (default: characters of the bias list)")
    p.set_defaults(func=cmd_dump_trie)

    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_arguments(argv)
    configure_logging(level=args.log_level)
    try:
        Config.validate_config()
        return args.func(args)
    except (DeepClasError, ValidationError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
