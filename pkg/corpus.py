"""
Corpus Module
Synthetic dialogue-pair generation, dataset file I/O, corpus statistics and WER
"""
import hashlib
import json
import logging
import os
import string
from dataclasses import dataclass, field

import numpy as np

from codec import AudioTokenSeq, decode_audio, encode_text
from errors import ConfigError, DataError, RejectedInputError

logger = logging.getLogger(__name__)

TASK_FAMILIES = ('reverse', 'shift', 'arithmetic')

# Exact field names are part of the dataset contract
RECORD_FIELDS = ('pair_id', 'input_audio', 'transcript', 'response_text',
                 'output_audio', 'input_speaker', 'output_speaker')

# Statistics of the released training split, for reference only
FULL_SCALE_TRAIN_PAIRS = 663103
FULL_SCALE_TEST_PAIRS = 6540
FULL_SCALE_TRAIN_WER = 9.00
FULL_SCALE_TEST_WER = 9.30
FULL_SCALE_TRAIN_SPEAKERS = 200000


@dataclass(frozen=True)
class DialoguePair:
    input_audio: AudioTokenSeq
    transcript: str
    response_text: str
    output_audio: AudioTokenSeq
    input_speaker: int
    output_speaker: int
    pair_id: str

    def to_record(self):
        return {
            'pair_id': self.pair_id,
            'input_audio': list(self.input_audio.tokens),
            'transcript': self.transcript,
            'response_text': self.response_text,
            'output_audio': list(self.output_audio.tokens),
            'input_speaker': self.input_speaker,
            'output_speaker': self.output_speaker,
        }


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic conversation function f: input text -> response text"""
    family: str = 'reverse'
    min_length: int = 4
    max_length: int = 8
    letters: str = string.ascii_lowercase
    shift: int = 3
    max_operand: int = 99
    operations: tuple = ('add', 'subtract')

    def __post_init__(self):
        if self.family not in TASK_FAMILIES:
            raise ConfigError(f"unknown task family '{self.family}', expected one of {TASK_FAMILIES}")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError(f"invalid length range [{self.min_length}, {self.max_length}]")
        if self.max_operand < 0:
            raise ConfigError("max_operand must be non-negative")
        for op in self.operations:
            if op not in ('add', 'subtract'):
                raise ConfigError(f"unknown arithmetic operation '{op}'")


@dataclass
class CorpusStats:
    num_pairs: int = 0
    total_audio_tokens: int = 0
    mean_tokens_per_utterance: float = 0.0
    corpus_wer: float = 0.0
    num_unique_speakers: int = 0
    extra: dict = field(default_factory=dict)


# ==================== TASK FAMILIES ====================

def shift_text(text, shift):
    """Shift letters within a-z and digits within 0-9; other characters unchanged"""
    out = []
    for char in text:
        if 'a' <= char <= 'z':
            out.append(chr((ord(char) - ord('a') + shift) % 26 + ord('a')))
        elif char.isdigit():
            out.append(str((int(char) + shift) % 10))
        else:
            out.append(char)
    return ''.join(out)


def evaluate_arithmetic(text):
    """Evaluate 'add A and B' / 'subtract A from B'"""
    words = text.split()
    if len(words) == 4 and words[0] == 'add' and words[2] == 'and':
        return str(int(words[1]) + int(words[3]))
    if len(words) == 4 and words[0] == 'subtract' and words[2] == 'from':
        return str(int(words[3]) - int(words[1]))
    raise RejectedInputError(f"not an arithmetic template: {text!r}")


def respond(spec, text):
    """The task function f; total and deterministic over the task's inputs"""
    if spec.family == 'reverse':
        return text[::-1]
    if spec.family == 'shift':
        return shift_text(text, spec.shift)
    return evaluate_arithmetic(text)


def sample_input_text(spec, rng):
    if spec.family == 'arithmetic':
        op = spec.operations[int(rng.integers(len(spec.operations)))]
        a = int(rng.integers(0, spec.max_operand + 1))
        b = int(rng.integers(0, spec.max_operand + 1))
        if op == 'add':
            return f"add {a} and {b}"
        # keep the result non-negative: subtract the smaller from the larger
        small, large = min(a, b), max(a, b)
        return f"subtract {small} from {large}"

    length = int(rng.integers(spec.min_length, spec.max_length + 1))
    letters = np.array(list(spec.letters))
    return ''.join(rng.choice(letters, size=length))


# ==================== GENERATION ====================

def generate_pair(spec, rng, cfg, pair_id=None):
    """Sample an input, compute f(input), encode both with distinct speakers"""
    if cfg.num_speakers < 2:
        raise ConfigError("at least two speakers are needed for a dialogue pair")

    text = sample_input_text(spec, rng)
    response = respond(spec, text)

    input_speaker = int(rng.integers(cfg.num_speakers))
    output_speaker = int(rng.integers(cfg.num_speakers - 1))
    if output_speaker >= input_speaker:
        output_speaker += 1

    input_audio = encode_text(text, input_speaker, cfg, rng)
    output_audio = encode_text(response, output_speaker, cfg, rng)

    return DialoguePair(
        input_audio=input_audio,
        transcript=text,
        response_text=response,
        output_audio=output_audio,
        input_speaker=input_speaker,
        output_speaker=output_speaker,
        pair_id=pair_id or f"{spec.family}-{hashlib.sha1(f'{text}|{input_speaker}'.encode()).hexdigest()[:10]}",
    )


def generate_corpus(spec, num_pairs, seed, cfg, start_index=0):
    """Pair i is drawn from its own seed (seed, i), so disjoint ranges can be generated in parallel"""
    pairs = []
    for i in range(start_index, start_index + num_pairs):
        rng = np.random.default_rng([seed, i])
        pairs.append(generate_pair(spec, rng, cfg, pair_id=f"{spec.family}-{seed}-{i:07d}"))
    logger.info("Generated %d '%s' pairs (seed=%d)", num_pairs, spec.family, seed)
    return pairs


def split_corpus(pairs, test_size):
    """Hold out the last `test_size` pairs"""
    if test_size >= len(pairs):
        raise RejectedInputError(f"test_size {test_size} leaves no training pairs out of {len(pairs)}")
    return pairs[:len(pairs) - test_size], pairs[len(pairs) - test_size:]


# ==================== FILE I/O ====================

def save_pairs(pairs, path):
    """One JSON record per line"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_record(), ensure_ascii=False) + '\n')
    logger.info("Saved %d pairs to %s", len(pairs), path)
    return path


def _require(record, name, kind, line_number):
    if name not in record:
        raise DataError("missing required field", line_number=line_number, field=name)
    value = record[name]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is list:
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise DataError(f"wrong type for field, expected {kind.__name__}", line_number=line_number, field=name)
    return value


def parse_record(line, line_number):
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON: {e.msg}", line_number=line_number) from e
    if not isinstance(record, dict):
        raise DataError("record is not an object", line_number=line_number)

    pair_id = _require(record, 'pair_id', str, line_number)
    input_audio = _require(record, 'input_audio', list, line_number)
    transcript = _require(record, 'transcript', str, line_number)
    response_text = _require(record, 'response_text', str, line_number)
    output_audio = _require(record, 'output_audio', list, line_number)
    input_speaker = _require(record, 'input_speaker', int, line_number)
    output_speaker = _require(record, 'output_speaker', int, line_number)

    if not transcript:
        raise DataError("transcript must be nonempty", line_number=line_number, field='transcript')
    if not response_text:
        raise DataError("response_text must be nonempty", line_number=line_number, field='response_text')
    if input_speaker == output_speaker:
        raise DataError("output_speaker must differ from input_speaker", line_number=line_number,
                        field='output_speaker')

    return DialoguePair(
        input_audio=AudioTokenSeq(tuple(input_audio), input_speaker),
        transcript=transcript,
        response_text=response_text,
        output_audio=AudioTokenSeq(tuple(output_audio), output_speaker),
        input_speaker=input_speaker,
        output_speaker=output_speaker,
        pair_id=pair_id,
    )


def load_pairs(path):
    """All records in file order; blank lines are skipped"""
    pairs = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            pairs.append(parse_record(line, line_number))
    logger.info("Loaded %d pairs from %s", len(pairs), path)
    return pairs


def corpus_fingerprint(pairs):
    """SHA256 over the canonical record serialization"""
    sha256 = hashlib.sha256()
    for pair in pairs:
        sha256.update(json.dumps(pair.to_record(), sort_keys=True).encode('utf-8'))
        sha256.update(b'\n')
    return sha256.hexdigest()


# ==================== METRICS ====================

def word_edit_distance(hyp_words, ref_words):
    """Minimal substitutions + insertions + deletions between word lists"""
    previous = list(range(len(ref_words) + 1))
    for i, hyp_word in enumerate(hyp_words, start=1):
        current = [i] + [0] * len(ref_words)
        for j, ref_word in enumerate(ref_words, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (hyp_word != ref_word),
            )
        previous = current
    return previous[-1]


def compute_wer(hypothesis, reference):
    """Word error rate; whitespace tokens, case-sensitive, no normalization"""
    ref_words = reference.split()
    if not ref_words:
        raise RejectedInputError("WER reference has no words")
    return word_edit_distance(hypothesis.split(), ref_words) / len(ref_words)


def corpus_stats(pairs, cfg):
    """Dataset statistics; durations are replaced by token counts"""
    if not pairs:
        return CorpusStats()

    total_tokens = 0
    errors = 0
    reference_words = 0
    speakers = set()
    for pair in pairs:
        total_tokens += len(pair.input_audio) + len(pair.output_audio)
        ref_words = pair.transcript.split()
        if ref_words:
            errors += word_edit_distance(decode_audio(pair.input_audio, cfg).split(), ref_words)
            reference_words += len(ref_words)
        speakers.add(pair.input_speaker)
        speakers.add(pair.output_speaker)

    return CorpusStats(
        num_pairs=len(pairs),
        total_audio_tokens=total_tokens,
        mean_tokens_per_utterance=total_tokens / (2 * len(pairs)),
        corpus_wer=errors / reference_words if reference_words else 0.0,
        num_unique_speakers=len(speakers),
    )
