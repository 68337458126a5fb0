"""
Codec Module
Deterministic synthetic speech codec: text <-> discrete pseudo-audio tokens.

Encoding stands in for TTS + speech tokenizer, decoding stands in for the
ASR transcriber used before judging. Every character becomes
`units_per_char` tokens:

    token = (char_index * units_per_char + unit
             + (speaker % speaker_band_size) * band_width) % audio_vocab_size

where band_width = ceil(audio_vocab_size / speaker_band_size). Bands never
overlap, so the speaker band of a sequence can be recovered from the tokens.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, RejectedInputError

logger = logging.getLogger(__name__)

DEFAULT_ALPHABET = 'abcdefghijklmnopqrstuvwxyz 0123456789'
REPLACEMENT_CHAR = '?'


@dataclass(frozen=True)
class CodecConfig:
    text_alphabet: str = DEFAULT_ALPHABET
    units_per_char: int = 2
    audio_vocab_size: int = 640
    num_speakers: int = 200
    speaker_band_size: int = 8
    noise_rate: float = 0.0

    def __post_init__(self):
        if not self.text_alphabet:
            raise ConfigError("text_alphabet must not be empty")
        if len(set(self.text_alphabet)) != len(self.text_alphabet):
            raise ConfigError("text_alphabet contains duplicate characters")
        if REPLACEMENT_CHAR in self.text_alphabet:
            raise ConfigError(f"text_alphabet must not contain the replacement character {REPLACEMENT_CHAR!r}")
        for name in ('units_per_char', 'audio_vocab_size', 'num_speakers', 'speaker_band_size'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        codes_per_band = len(self.text_alphabet) * self.units_per_char
        if codes_per_band > self.audio_vocab_size // self.speaker_band_size:
            raise ConfigError(
                f"{len(self.text_alphabet)} chars x {self.units_per_char} units = {codes_per_band} codes "
                f"do not fit a speaker band of {self.audio_vocab_size // self.speaker_band_size} "
                f"(audio_vocab_size={self.audio_vocab_size}, speaker_band_size={self.speaker_band_size})"
            )

    @property
    def band_width(self):
        return math.ceil(self.audio_vocab_size / self.speaker_band_size)

    def char_index(self, char):
        return self.text_alphabet.index(char)


@dataclass(frozen=True)
class AudioTokenSeq:
    """Codec token ids in [0, audio_vocab_size). speaker is None for model output."""
    tokens: tuple
    speaker: int = None

    def __len__(self):
        return len(self.tokens)


def code_for(char_index, unit, speaker, cfg):
    band = speaker % cfg.speaker_band_size
    return (char_index * cfg.units_per_char + unit + band * cfg.band_width) % cfg.audio_vocab_size


def encode_text(text, speaker, cfg, rng=None):
    """Encode text spoken by `speaker`. rng is required only when noise_rate > 0."""
    if not 0 <= speaker < cfg.num_speakers:
        raise RejectedInputError(f"speaker {speaker} outside [0, {cfg.num_speakers})")

    tokens = []
    for position, char in enumerate(text):
        if char not in cfg.text_alphabet:
            raise RejectedInputError(f"character {char!r} at index {position} is not in the codec alphabet")
        index = cfg.char_index(char)
        for unit in range(cfg.units_per_char):
            tokens.append(code_for(index, unit, speaker, cfg))

    if cfg.noise_rate > 0 and tokens:
        if rng is None:
            raise RejectedInputError("noise_rate > 0 requires an rng")
        tokens = np.asarray(tokens, dtype=np.int64)
        corrupt = rng.random(len(tokens)) < cfg.noise_rate
        replacement = rng.integers(0, cfg.audio_vocab_size, size=len(tokens))
        tokens = np.where(corrupt, replacement, tokens).tolist()

    return AudioTokenSeq(tokens=tuple(int(t) for t in tokens), speaker=speaker)


def _frame_proposals(frames, band, cfg):
    """Per frame, the char index proposed by each unit under `band` (-1 = none)"""
    units = np.arange(cfg.units_per_char)[None, :]
    relative = (frames - units - band * cfg.band_width) % cfg.audio_vocab_size
    valid = (relative % cfg.units_per_char == 0) & (relative // cfg.units_per_char < len(cfg.text_alphabet))
    in_range = (frames >= 0) & (frames < cfg.audio_vocab_size)
    return np.where(valid & in_range, relative // cfg.units_per_char, -1)


def _best_per_frame(proposals):
    """(char index or -1, vote count) per frame; ties resolve to -1"""
    best = []
    for row in proposals:
        votes = Counter(int(c) for c in row if c >= 0)
        if not votes:
            best.append((-1, 0))
            continue
        ranked = votes.most_common()
        top_count = ranked[0][1]
        if len(ranked) > 1 and ranked[1][1] == top_count:
            best.append((-1, top_count))
        else:
            best.append((ranked[0][0], top_count))
    return best


def infer_band(tokens, cfg):
    """Majority vote over frames for the speaker band; None for empty input"""
    upc = cfg.units_per_char
    n_frames = len(tokens) // upc
    if n_frames == 0:
        return None
    frames = np.asarray(tokens[:n_frames * upc], dtype=np.int64).reshape(n_frames, upc)
    scores = []
    for band in range(cfg.speaker_band_size):
        proposals = _frame_proposals(frames, band, cfg)
        scores.append(sum(count for _, count in _best_per_frame(proposals)))
    return int(np.argmax(scores))


def decode_audio(seq, cfg):
    """Maximum-likelihood transcript of a token sequence. Total: never raises."""
    tokens = list(seq.tokens) if isinstance(seq, AudioTokenSeq) else list(seq)
    upc = cfg.units_per_char
    n_frames = len(tokens) // upc
    chars = []
    if n_frames:
        band = infer_band(tokens, cfg)
        frames = np.asarray(tokens[:n_frames * upc], dtype=np.int64).reshape(n_frames, upc)
        for index, _ in _best_per_frame(_frame_proposals(frames, band, cfg)):
            chars.append(cfg.text_alphabet[index] if index >= 0 else REPLACEMENT_CHAR)
    if len(tokens) % upc:
        chars.append(REPLACEMENT_CHAR)
    return ''.join(chars)


def mapping_table(cfg):
    """Rows of (band, char, [token ids]) for every band and alphabet character"""
    rows = []
    for band in range(cfg.speaker_band_size):
        for index, char in enumerate(cfg.text_alphabet):
            rows.append((band, char, [code_for(index, u, band, cfg) for u in range(cfg.units_per_char)]))
    return rows


def export_mapping_table(cfg, path):
    """Write the mapping table as an auditable text file"""
    with open(path, 'w', encoding='utf-8') as f:
        f.write("# synthetic codec mapping table\n")
        f.write(f"# units_per_char={cfg.units_per_char} audio_vocab_size={cfg.audio_vocab_size} "
                f"speaker_band_size={cfg.speaker_band_size} band_width={cfg.band_width}\n")
        f.write("# band\tchar\ttokens\n")
        for band, char, codes in mapping_table(cfg):
            shown = 'SPACE' if char == ' ' else char
            f.write(f"{band}\t{shown}\t{' '.join(str(c) for c in codes)}\n")
    logger.info("Exported codec mapping table to %s", path)
    return path
