#!/usr/bin/env python3
"""
Speech Chain Lab
Command-line entry point: data generation, training stages, inference,
benchmarking, judging, agreement statistics and the full desk experiment
"""
import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

from codec import export_mapping_table
from corpus import corpus_stats, load_pairs, save_pairs
from errors import ConfigError, DataError, LabError, RejectedInputError
from evaluator import (GROUND_TRUTH, RUBRICS, cohens_kappa, compare_systems, comparison_summary, load_ratings,
                       transcribe_outputs, win_rate_table)
from experiment import (CONFIG_FILE, ICOT_SYSTEM, build_vocab, canonical_json, generate_data, load_config,
                        make_judges, model_config, run_experiment, save_config, stop_rule)
from inference import bench, format_bench, run_chain, run_corpus, save_bench
from model import init_model
from template import ChainMode, apply_removal, dump_tokens, render
from trainer import (STAGE_ALIASES, MetricsLog, RunManifest, model_from_checkpoint, render_corpus, save_checkpoint,
                     train_stage, train_tts_icot)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
STAGE_SECTIONS = {'1': 'stage1', '2': 'stage2', '3': 'stage3', 'ata-nocot': 'ata_nocot'}


def _config(args):
    return load_config(args.config, args.set)


def _load_model(path, cfg, vocab, mode):
    """Checkpoint when given; the not-finetuned modes fall back to a fresh initialization"""
    if path:
        return model_from_checkpoint(path)
    if mode.finetuned:
        raise ConfigError(f"mode '{mode.value}' needs a checkpoint")
    return init_model(model_config(cfg, vocab))


def _find_pair(pairs, pair_id):
    for pair in pairs:
        if pair.pair_id == pair_id:
            return pair
    raise RejectedInputError(f"pair '{pair_id}' not found")


# ==================== COMMANDS ====================

def cmd_init(args):
    print("=" * 60)
    print("  SPEECH CHAIN LAB - SETUP")
    print("=" * 60)
    for directory in ('runs', 'prompts'):
        os.makedirs(directory, exist_ok=True)
        print(f"   ✓ {directory}/")
    if os.path.exists(args.config):
        print(f"   ✓ {args.config} already present")
    else:
        cfg = load_config(args.config)
        print(f"   ✓ wrote defaults to {args.config} (output_dir={cfg.output_dir})")
    if not os.path.exists('.env'):
        print("   ⚠️  no .env file; copy .env.example to use an endpoint judge")
    print("  ✅ SETUP COMPLETE")
    return 0


def cmd_gen_data(args):
    cfg = _config(args)
    train, test = generate_data(cfg)
    train_path = save_pairs(train, os.path.join(args.out, 'train.jsonl'))
    test_path = save_pairs(test, os.path.join(args.out, 'test.jsonl'))
    print(f"✓ {len(train)} train pairs -> {train_path}")
    print(f"✓ {len(test)} test pairs -> {test_path}")
    return 0


def cmd_stats(args):
    cfg = _config(args)
    stats = corpus_stats(load_pairs(args.corpus), cfg.codec)
    print(f"Pairs:                 {stats.num_pairs}")
    print(f"Audio tokens:          {stats.total_audio_tokens}")
    print(f"Tokens / utterance:    {stats.mean_tokens_per_utterance:.2f}")
    print(f"Corpus WER:            {100 * stats.corpus_wer:.2f}%")
    print(f"Unique speakers:       {stats.num_unique_speakers}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    vocab = build_vocab(cfg)
    stage_name = STAGE_ALIASES.get(args.stage, args.stage)
    stage = getattr(cfg.stages, STAGE_SECTIONS[stage_name])
    pairs = load_pairs(args.corpus)
    out = args.out or os.path.join(cfg.output_dir, 'checkpoints', f"{STAGE_SECTIONS[stage_name]}.pt")
    metrics_log = MetricsLog(args.metrics or os.path.join(os.path.dirname(out) or '.', 'metrics.jsonl'))
    common = dict(metrics_log=metrics_log, checkpoint_dir=os.path.dirname(out) or '.',
                  resume_from=args.resume, progress=not args.no_progress)

    if stage_name == '3':
        model, metrics = train_tts_icot(args.init, pairs, stage, vocab, **common)
    else:
        if stage_name == '2' and not args.init:
            raise ConfigError("stage 2 starts from a stage-1 checkpoint (--init)")
        model = model_from_checkpoint(args.init) if args.init else init_model(model_config(cfg, vocab))
        corpus = render_corpus(pairs, stage.chain_format, vocab)
        model, metrics = train_stage(model, corpus, stage, pad_id=vocab.pad_id, adapter_cfg=cfg.adapters, **common)
    save_checkpoint(out, model)

    if args.manifest:
        manifest = (RunManifest.load(args.manifest) if os.path.exists(args.manifest)
                    else RunManifest(config=json.loads(canonical_json(cfg)), seeds={'stage': stage.seed}))
        section = STAGE_SECTIONS[stage_name]
        if section not in manifest.stages:
            manifest.stages.append(section)
        manifest.step_budget = sum(getattr(cfg.stages, s).steps for s in manifest.stages)
        manifest.checkpoints[section] = out
        manifest.steps_completed[section] = metrics.steps_run
        manifest.metrics_log = metrics_log.path
        manifest.add_artifact(out)
        manifest.save(args.manifest)

    print(f"✓ stage {stage_name}: {metrics.steps_run} steps, loss {metrics.initial_loss} -> {metrics.final_loss}")
    print(f"✓ checkpoint -> {out}")
    return 0


def cmd_infer(args):
    cfg = _config(args)
    vocab = build_vocab(cfg)
    mode = ChainMode(args.mode)
    pair = _find_pair(load_pairs(args.corpus), args.pair)
    model = _load_model(args.ckpt, cfg, vocab, mode)
    output, stats = run_chain(model, pair.input_audio, mode, vocab, stop_rule(cfg, vocab))
    decoded = transcribe_outputs([output], cfg.codec)[0]
    print(f"Input:       {pair.transcript}")
    print(f"Transcript:  {output.transcript}")
    print(f"Response:    {output.response}")
    print(f"Audio:       {decoded}")
    print(f"Reference:   {pair.response_text}")
    print(f"Tokens before first audio: {stats.tokens_before_first_audio}  "
          f"latency {stats.latency_wall_clock:.4f}s  truncated={stats.truncated}  parse_ok={output.parse_ok}")
    return 0


def _systems(spec, cfg, vocab):
    """'mode=ckpt,mode=ckpt' (ckpt may be empty for the not-finetuned modes)"""
    systems = {}
    for item in spec.split(','):
        name, _, path = item.partition('=')
        try:
            mode = ChainMode(name.strip())
        except ValueError:
            raise ConfigError(f"unknown chain mode '{name.strip()}'") from None
        systems[mode] = _load_model(path.strip() or None, cfg, vocab, mode)
    return systems


def cmd_bench(args):
    cfg = _config(args)
    vocab = build_vocab(cfg)
    modes = [m.strip() for m in args.modes.split(',')]
    ckpts = [c.strip() for c in args.ckpts.split(',')] if args.ckpts else [''] * len(modes)
    if len(ckpts) != len(modes):
        raise ConfigError(f"{len(modes)} modes but {len(ckpts)} checkpoints")
    systems = _systems(','.join(f"{m}={c}" for m, c in zip(modes, ckpts)), cfg, vocab)
    pairs = load_pairs(args.corpus)
    report = bench(systems, pairs, vocab, cfg.codec, repetitions=args.reps, warmup=args.warmup,
                   comparisons=[(modes[0], m) for m in modes[1:]], stop=stop_rule(cfg, vocab))
    print(format_bench(report), end='')
    if args.out:
        json_path, text_path = save_bench(report, args.out)
        print(f"✓ report -> {json_path}, {text_path}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    if args.judge:
        cfg.eval.judge = args.judge
    vocab = build_vocab(cfg)
    pairs = load_pairs(args.corpus)[:args.limit or None]
    systems = _systems(args.systems, cfg, vocab)
    stop = stop_rule(cfg, vocab)

    texts = {mode.value: transcribe_outputs([o for o, _ in run_corpus(model, pairs, mode, vocab, stop)], cfg.codec)
             for mode, model in systems.items()}
    texts[GROUND_TRUTH] = [p.response_text for p in pairs]
    rubrics = RUBRICS if args.rubric == 'both' else (args.rubric,)
    records = compare_systems(texts, pairs, args.opponent, make_judges(cfg), rubrics=rubrics,
                              swap=not args.no_swap, max_in_flight=cfg.eval.max_in_flight,
                              max_attempts=cfg.eval.max_attempts, records_path=args.out)

    summary = comparison_summary(records)
    for system, row in win_rate_table(records, args.opponent).items():
        average = '-' if row['average'] is None else f"{100 * row['average']:.1f}%"
        print(f"  {system:<22} win rate vs {args.opponent}: {average}")
    print(f"✓ {summary['records']} records, {summary['failures']} failures, "
          f"{summary['order_inconsistent']} order-inconsistent")
    if args.out:
        print(f"✓ records -> {args.out}")
    return 0


def cmd_kappa(args):
    kappa = cohens_kappa(load_ratings(args.a), load_ratings(args.b))
    print(f"Cohen's kappa: {kappa:.4f}")
    return 0


def cmd_run_experiment(args):
    cfg = _config(args)
    report = run_experiment(cfg, progress=not args.no_progress)
    print(f"✓ report -> {os.path.join(cfg.output_dir, 'report.pdf')}")
    for mode, accuracy in report['accuracy'].items():
        print(f"  {mode:<22} accuracy {accuracy:.3f}")
    return 0


def cmd_export_mapping(args):
    cfg = _config(args)
    export_mapping_table(cfg.codec, args.out)
    print(f"✓ mapping table -> {args.out}")
    return 0


def cmd_dump_render(args):
    cfg = _config(args)
    vocab = build_vocab(cfg)
    pair = _find_pair(load_pairs(args.corpus), args.pair)
    seq = render(pair, ChainMode(args.mode), vocab)
    if args.remove:
        seq = apply_removal(seq, args.remove, args.target)
    text = dump_tokens(seq, vocab)
    if args.out:
        with open(args.out, 'w', encoding='utf-8') as f:
            f.write(text)
        print(f"✓ {len(seq)} tokens -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_write_config(args):
    cfg = _config(args)
    save_config(cfg, args.out)
    print(f"✓ canonical config -> {args.out}")
    return 0


# ==================== PARSER ====================

def build_parser():
    parser = argparse.ArgumentParser(description='Speech chain internalization lab')
    parser.add_argument('--config', default=CONFIG_FILE, help='experiment config JSON')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='config override, e.g. stages.stage1.steps=200')
    parser.add_argument('--log-level', default='INFO')
    sub = parser.add_subparsers(dest='command', required=True)
    modes = [m.value for m in ChainMode]

    sub.add_parser('init', help='create directories and a default config').set_defaults(func=cmd_init)

    p = sub.add_parser('gen-data', help='generate train/test JSONL')
    p.add_argument('--out', default='data')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('stats', help='dataset statistics')
    p.add_argument('--corpus', required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser('train', help='run one training stage')
    p.add_argument('--stage', required=True, choices=['1', '2', '3', 'ata-nocot', 'aa-icot'])
    p.add_argument('--corpus', required=True)
    p.add_argument('--init', help='checkpoint to start from (stage 1 for stage 2, stage 2 for stage 3)')
    p.add_argument('--resume', help='mid-stage checkpoint to resume from')
    p.add_argument('--manifest')
    p.add_argument('--metrics')
    p.add_argument('--out')
    p.add_argument('--no-progress', action='store_true')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('infer', help='run one chain mode on one pair')
    p.add_argument('--mode', required=True, choices=modes)
    p.add_argument('--ckpt')
    p.add_argument('--corpus', required=True)
    p.add_argument('--in', dest='pair', required=True, help='pair id')
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser('bench', help='inference statistics per mode')
    p.add_argument('--modes', required=True)
    p.add_argument('--ckpts')
    p.add_argument('--corpus', required=True)
    p.add_argument('--reps', type=int, default=1)
    p.add_argument('--warmup', type=int, default=1)
    p.add_argument('--out')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('eval', help='pairwise judge comparisons')
    p.add_argument('--systems', required=True, help='mode=ckpt,mode=ckpt')
    p.add_argument('--corpus', required=True)
    p.add_argument('--rubric', default='both', choices=list(RUBRICS) + ['both'])
    p.add_argument('--judge', choices=['stub', 'endpoint'])
    p.add_argument('--opponent', default=ICOT_SYSTEM)
    p.add_argument('--limit', type=int, default=0)
    p.add_argument('--no-swap', action='store_true')
    p.add_argument('--out')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('kappa', help="Cohen's kappa between two rating files")
    p.add_argument('--a', required=True)
    p.add_argument('--b', required=True)
    p.set_defaults(func=cmd_kappa)

    p = sub.add_parser('run-experiment', help='full desk experiment')
    p.add_argument('--no-progress', action='store_true')
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser('export-mapping', help='write the codec mapping table')
    p.add_argument('--out', default='codec_mapping.tsv')
    p.set_defaults(func=cmd_export_mapping)

    p = sub.add_parser('dump-render', help='token dump of a rendered pair')
    p.add_argument('--corpus', required=True)
    p.add_argument('--pair', required=True)
    p.add_argument('--mode', required=True, choices=modes)
    p.add_argument('--remove', type=int, default=0)
    p.add_argument('--target', default='transcript', choices=['transcript', 'text_response'])
    p.add_argument('--out')
    p.set_defaults(func=cmd_dump_render)

    p = sub.add_parser('write-config', help='write the effective config in canonical form')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_write_config)
    return parser


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format=LOG_FORMAT)
    try:
        return args.func(args)
    except LabError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        print(f"❌ {e}")
        return DataError.exit_code


if __name__ == '__main__':
    sys.exit(main())
