"""
Inference Module
Runs chain modes end-to-end and measures latency and token-count statistics
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from codec import AudioTokenSeq, decode_audio
from errors import RejectedInputError
from model import DecodeRule, StopRule, generate
from template import ChainMode, as_format, parse_continuation, render_prefix

logger = logging.getLogger(__name__)

# Full-scale reference values, documentation only
FULL_SCALE_LATENCY_SECONDS = {'ata-icot': 0.87, 'atta-finetuned': 1.09}
FULL_SCALE_TRANSCRIPT_COUNT = {'ata-icot': 0.0, 'atta-finetuned': 21.3}
FULL_SCALE_RESPONSE_COUNT = {'ata-icot': 19.6, 'atta-finetuned': 22.1}
FULL_SCALE_LATENCY_REDUCTION = 0.202
# The headline figure quoted elsewhere disagrees with (1.09 - 0.87) / 1.09
FULL_SCALE_HEADLINE_LATENCY_REDUCTION = 0.145

DEFAULT_COMPARISONS = (('atta-finetuned', 'ata-icot'),)


@dataclass
class ChainOutput:
    transcript: str
    response: str
    output_audio: AudioTokenSeq
    truncated: bool
    parse_ok: bool = True
    raw_tokens: list = field(default_factory=list)


@dataclass
class ModeBench:
    mode: str
    num_runs: int
    tokens_before_first_audio_mean: float
    tokens_before_first_audio_std: float
    latency_mean: float
    latency_std: float
    transcript_count_mean: float
    response_count_mean: float
    accuracy: float
    truncated_rate: float
    parse_failures: int


@dataclass
class BenchReport:
    modes: dict
    reductions: list
    repetitions: int
    warmup: int
    num_pairs: int

    def to_dict(self):
        return {
            'modes': {name: asdict(m) for name, m in self.modes.items()},
            'reductions': self.reductions,
            'repetitions': self.repetitions,
            'warmup': self.warmup,
            'num_pairs': self.num_pairs,
        }


def run_chain(model, input_audio, mode, vocab, stop=None, decode=DecodeRule()):
    """Render prompt + input audio, generate, and split the continuation into segments"""
    prefix = render_prefix(input_audio, mode, vocab)
    stop = stop or StopRule(eos_id=vocab.eos_id)
    tokens, stats = generate(model, prefix.tokens, stop, decode, is_audio=vocab.is_audio)
    parsed = parse_continuation(tokens, mode, vocab)

    stats.transcript_token_count = len(parsed.transcript_ids)
    stats.response_token_count = len(parsed.response_ids)
    output = ChainOutput(
        transcript=vocab.decode_chars(parsed.transcript_ids),
        response=vocab.decode_chars(parsed.response_ids),
        output_audio=AudioTokenSeq(tuple(parsed.audio_codes)),
        truncated=stats.truncated,
        parse_ok=parsed.parse_ok,
        raw_tokens=parsed.raw,
    )
    if not parsed.parse_ok:
        logger.debug("Unparseable %s continuation of %d tokens", as_format(mode).value, len(tokens))
    return output, stats


def run_corpus(model, pairs, mode, vocab, stop=None, decode=DecodeRule()):
    return [run_chain(model, pair.input_audio, mode, vocab, stop, decode) for pair in pairs]


def is_correct(output, pair, codec_cfg):
    """Exact match of the decoded output audio against the reference response f(input)"""
    return decode_audio(output.output_audio, codec_cfg) == pair.response_text


def response_accuracy(outputs, pairs, codec_cfg):
    if len(outputs) != len(pairs):
        raise RejectedInputError(f"{len(outputs)} outputs for {len(pairs)} pairs")
    if not pairs:
        raise RejectedInputError("accuracy needs at least one pair")
    return sum(is_correct(o, p, codec_cfg) for o, p in zip(outputs, pairs)) / len(pairs)


def relative_reduction(baseline, candidate):
    if baseline == 0:
        return 0.0
    return (baseline - candidate) / baseline


def _mode_name(mode):
    return mode.value if isinstance(mode, ChainMode) else str(mode)


def bench(models_by_mode, pairs, vocab, codec_cfg, repetitions=1, warmup=1, comparisons=DEFAULT_COMPARISONS,
          stop=None, decode=DecodeRule()):
    """
    Per-mode means and standard deviations of generation statistics over the test pairs.
    Warmup generations on the first pair are run and discarded before timing.
    """
    if not models_by_mode:
        raise RejectedInputError("bench needs at least one mode")
    if not pairs:
        raise RejectedInputError("bench needs a non-empty test corpus")
    if repetitions < 1:
        raise RejectedInputError("repetitions must be at least 1")

    modes = {}
    for mode, model in models_by_mode.items():
        mode = ChainMode(mode) if not isinstance(mode, ChainMode) else mode
        for _ in range(warmup):
            run_chain(model, pairs[0].input_audio, mode, vocab, stop, decode)

        stats, correct, failures = [], 0, 0
        for _ in range(repetitions):
            for pair in pairs:
                output, s = run_chain(model, pair.input_audio, mode, vocab, stop, decode)
                stats.append(s)
                correct += is_correct(output, pair, codec_cfg)
                failures += not output.parse_ok

        tokens = np.array([s.tokens_before_first_audio for s in stats], dtype=float)
        latency = np.array([s.latency_wall_clock for s in stats], dtype=float)
        modes[mode.value] = ModeBench(
            mode=mode.value,
            num_runs=len(stats),
            tokens_before_first_audio_mean=float(tokens.mean()),
            tokens_before_first_audio_std=float(tokens.std()),
            latency_mean=float(latency.mean()),
            latency_std=float(latency.std()),
            transcript_count_mean=float(np.mean([s.transcript_token_count for s in stats])),
            response_count_mean=float(np.mean([s.response_token_count for s in stats])),
            accuracy=correct / len(stats),
            truncated_rate=float(np.mean([s.truncated for s in stats])),
            parse_failures=failures,
        )
        logger.info("Bench %s: %.1f tokens before first audio, %.4fs latency, accuracy %.3f",
                    mode.value, modes[mode.value].tokens_before_first_audio_mean,
                    modes[mode.value].latency_mean, modes[mode.value].accuracy)

    reductions = []
    for baseline, candidate in comparisons:
        baseline, candidate = _mode_name(baseline), _mode_name(candidate)
        if baseline not in modes or candidate not in modes:
            continue
        b, c = modes[baseline], modes[candidate]
        reductions.append({
            'baseline': baseline,
            'candidate': candidate,
            'token_difference': b.tokens_before_first_audio_mean - c.tokens_before_first_audio_mean,
            'token_reduction': relative_reduction(b.tokens_before_first_audio_mean, c.tokens_before_first_audio_mean),
            'latency_reduction': relative_reduction(b.latency_mean, c.latency_mean),
        })

    return BenchReport(modes=modes, reductions=reductions, repetitions=repetitions,
                       warmup=warmup, num_pairs=len(pairs))


def format_bench(report):
    """Plain-text table of per-mode inference statistics"""
    names = list(report.modes)
    rows = [
        ('Tokens before first audio', 'tokens_before_first_audio_mean', '{:.2f}'),
        ('Latency (s)', 'latency_mean', '{:.4f}'),
        ('Mean generated transcript count', 'transcript_count_mean', '{:.2f}'),
        ('Mean generated text response count', 'response_count_mean', '{:.2f}'),
        ('Response accuracy', 'accuracy', '{:.3f}'),
    ]
    width = max(len(label) for label, _, _ in rows) + 2
    lines = ['Inference statistics'.ljust(width) + ''.join(n.rjust(20) for n in names)]
    for label, key, fmt in rows:
        lines.append(label.ljust(width) + ''.join(fmt.format(getattr(report.modes[n], key)).rjust(20) for n in names))
    for r in report.reductions:
        lines.append(f"{r['candidate']} vs {r['baseline']}: token reduction {r['token_reduction']:.1%}, "
                     f"latency reduction {r['latency_reduction']:.1%}")
    return '\n'.join(lines) + '\n'


def save_bench(report, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    text_path = os.path.splitext(path)[0] + '.txt'
    with open(text_path, 'w') as f:
        f.write(format_bench(report))
    return path, text_path
