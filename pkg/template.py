"""
Template Module
Vocabulary, chain modes, chain rendering, curriculum removal and loss masks.

Every rendered sequence is a list of labeled spans:

    ATTA  [prompt][input_audio][opener][transcript][\\n][header][text_response][ ][output_audio][<eos>]
    ATA   [prompt][input_audio][opener][header][text_response][ ][output_audio][<eos>]
    AA    [prompt][input_audio][opener][header][output_audio][<eos>]
    AA_RAW[prompt][input_audio][opener][output_audio][<eos>]

opener = "<eoh> [AnyGPT]: <-Res-> " (no trailing space for AA_RAW) and
header = "[AnyGPT]: ". Everything after the opener is the generation region
and is supervised.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

from errors import RejectedInputError

logger = logging.getLogger(__name__)

PAD = '<pad>'
INS = '<-Ins->'
RES = '<-Res->'
EOH = '<eoh>'
EOS = '<eos>'
HUMAN = '[Human]'
ANYGPT = '[AnyGPT]'
MARKERS = (INS, RES, EOH, EOS, HUMAN, ANYGPT)

COT_INSTRUCTION = (
    "You are [AnyGPT]. You are chatting with [Human]. Step by step, give me the transcript "
    "of the provided audio, a chat response to the transcript, and read the response."
)
RAW_INSTRUCTION = "You are [AnyGPT]. You are chatting with [Human]. Give me a speech response to [Human]."

PROMPT_TAIL = " <-Ins-> [Human]: "
OPENER = "<eoh> [AnyGPT]: <-Res-> "
RAW_OPENER = "<eoh> [AnyGPT]: <-Res->"
HEADER = "[AnyGPT]: "
TRANSCRIPT_SEPARATOR = "\n"
RESPONSE_SEPARATOR = " "

# segment labels
PROMPT = 'prompt'
INPUT_AUDIO = 'input_audio'
TRANSCRIPT = 'transcript'
TEXT_RESPONSE = 'text_response'
OUTPUT_AUDIO = 'output_audio'
GLUE = 'glue'
SEGMENT_LABELS = (PROMPT, INPUT_AUDIO, TRANSCRIPT, TEXT_RESPONSE, OUTPUT_AUDIO, GLUE)
REMOVABLE = (TRANSCRIPT, TEXT_RESPONSE)


class ChainFormat(Enum):
    ATTA = 'atta'
    ATA = 'ata'
    AA = 'aa'
    AA_RAW = 'aa_raw'

    @property
    def has_transcript(self):
        return self is ChainFormat.ATTA

    @property
    def has_response(self):
        return self in (ChainFormat.ATTA, ChainFormat.ATA)


class ChainMode(Enum):
    """The six model/prompt configurations compared in the experiment"""
    ATTA_NOT_FINETUNED = 'atta-not-finetuned'
    AA_NOT_FINETUNED = 'aa-not-finetuned'
    ATTA_FINETUNED = 'atta-finetuned'
    ATA_NO_COT = 'ata-no-cot'
    ATA_ICOT = 'ata-icot'
    AA_ICOT = 'aa-icot'

    @property
    def chain_format(self):
        return _MODE_TABLE[self][0]

    @property
    def finetuned(self):
        return _MODE_TABLE[self][1]

    @property
    def asr_prompt(self):
        return _MODE_TABLE[self][2]

    @property
    def tts_prompt(self):
        return _MODE_TABLE[self][3]

    @property
    def title(self):
        return _MODE_TABLE[self][4]


_MODE_TABLE = {
    ChainMode.ATTA_NOT_FINETUNED: (ChainFormat.ATTA, False, 'Yes', 'Yes', 'A-T-T-A No Finetuning'),
    ChainMode.AA_NOT_FINETUNED: (ChainFormat.AA_RAW, False, 'No', 'No', 'A-A No Finetuning'),
    ChainMode.ATTA_FINETUNED: (ChainFormat.ATTA, True, 'Yes', 'Yes', 'A-T-T-A Finetuned'),
    ChainMode.ATA_NO_COT: (ChainFormat.ATA, True, 'No', 'Yes', 'A-T-A No ASR ICoT'),
    ChainMode.ATA_ICOT: (ChainFormat.ATA, True, 'Internalized', 'Yes', 'A-T-A ASR ICoT'),
    ChainMode.AA_ICOT: (ChainFormat.AA, True, 'Internalized', 'Internalized', 'A-A ICoT'),
}


def as_format(mode):
    if isinstance(mode, ChainMode):
        return mode.chain_format
    if isinstance(mode, ChainFormat):
        return mode
    raise RejectedInputError(f"not a chain mode: {mode!r}")


def mode_summary():
    """Rows of (model, ASR prompt, TTS prompt, finetuned)"""
    return [(m.title, m.asr_prompt, m.tts_prompt, m.finetuned) for m in ChainMode]


# ==================== VOCABULARY ====================

def _split_markers(text):
    """Split literal template text into marker names and single characters"""
    pieces = []
    i = 0
    while i < len(text):
        for marker in MARKERS:
            if text.startswith(marker, i):
                pieces.append(marker)
                i += len(marker)
                break
        else:
            pieces.append(text[i])
            i += 1
    return pieces


def _template_chars():
    chars = set()
    for literal in (COT_INSTRUCTION, RAW_INSTRUCTION, PROMPT_TAIL, OPENER, HEADER,
                    TRANSCRIPT_SEPARATOR, RESPONSE_SEPARATOR):
        chars.update(p for p in _split_markers(literal) if p not in MARKERS)
    return chars


class Vocabulary:
    """
    Unified id space: [<pad> + markers][text characters][audio codes].
    Audio tokens are recognizable by id range alone.
    """

    def __init__(self, codec_cfg):
        self.codec_cfg = codec_cfg
        self.specials = [PAD] + list(MARKERS)
        self.text_chars = sorted(set(codec_cfg.text_alphabet) | _template_chars())
        self.text_offset = len(self.specials)
        self.audio_offset = self.text_offset + len(self.text_chars)
        self.size = self.audio_offset + codec_cfg.audio_vocab_size
        self._marker_ids = {name: i for i, name in enumerate(self.specials)}
        self._char_ids = {c: self.text_offset + i for i, c in enumerate(self.text_chars)}

    def __len__(self):
        return self.size

    @property
    def pad_id(self):
        return self._marker_ids[PAD]

    @property
    def eos_id(self):
        return self._marker_ids[EOS]

    def marker_id(self, name):
        return self._marker_ids[name]

    def char_id(self, char):
        if char not in self._char_ids:
            raise RejectedInputError(f"character {char!r} is not representable in the vocabulary")
        return self._char_ids[char]

    def audio_id(self, code):
        if not 0 <= code < self.codec_cfg.audio_vocab_size:
            raise RejectedInputError(f"audio code {code} outside [0, {self.codec_cfg.audio_vocab_size})")
        return self.audio_offset + code

    def is_audio(self, token_id):
        return self.audio_offset <= token_id < self.size

    def is_text(self, token_id):
        return self.text_offset <= token_id < self.audio_offset

    def is_marker(self, token_id, name=None):
        if name is not None:
            return token_id == self._marker_ids[name]
        return 0 <= token_id < self.text_offset

    def audio_code(self, token_id):
        return token_id - self.audio_offset

    def char(self, token_id):
        return self.text_chars[token_id - self.text_offset]

    def encode_literal(self, text):
        return [self._marker_ids[p] if p in MARKERS else self.char_id(p) for p in _split_markers(text)]

    def encode_chars(self, text):
        """Character-level text tokens (no marker recognition)"""
        return [self.char_id(c) for c in text]

    def decode_chars(self, token_ids):
        """Text characters only; non-text ids are dropped"""
        return ''.join(self.char(t) for t in token_ids if self.is_text(t))

    def token_name(self, token_id):
        if 0 <= token_id < self.text_offset:
            return self.specials[token_id]
        if self.is_text(token_id):
            char = self.char(token_id)
            return {' ': '<space>', '\n': '<newline>'}.get(char, char)
        if self.is_audio(token_id):
            return f"<a{self.audio_code(token_id)}>"
        return f"<unk{token_id}>"


# ==================== SEGMENTED SEQUENCES ====================

@dataclass(frozen=True)
class Span:
    label: str
    start: int
    end: int
    attached_to: str = None

    def __len__(self):
        return self.end - self.start


@dataclass(frozen=True)
class SegmentedSequence:
    tokens: tuple
    spans: tuple
    loss_mask: tuple
    chain_format: ChainFormat
    prefix_length: int
    original_lengths: dict = field(default_factory=dict)
    removed: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tokens)

    @property
    def removal_applied(self):
        return self.removed.get(TRANSCRIPT, 0)

    def span(self, label):
        """The single span with this label, or None (not for glue)"""
        for span in self.spans:
            if span.label == label:
                return span
        return None

    def segment(self, label):
        span = self.span(label)
        return self.tokens[span.start:span.end] if span else ()

    def labels(self):
        return {span.label for span in self.spans}

    def prefix(self):
        return self.tokens[:self.prefix_length]


def _assemble(pieces, chain_format, prefix_pieces, original_lengths, removed):
    tokens = []
    spans = []
    prefix_length = 0
    for index, (label, ids, attached_to) in enumerate(pieces):
        start = len(tokens)
        tokens.extend(ids)
        spans.append(Span(label, start, len(tokens), attached_to))
        if index < prefix_pieces:
            prefix_length = len(tokens)
    mask = tuple(i >= prefix_length for i in range(len(tokens)))
    return SegmentedSequence(
        tokens=tuple(tokens),
        spans=tuple(spans),
        loss_mask=mask,
        chain_format=chain_format,
        prefix_length=prefix_length,
        original_lengths=dict(original_lengths),
        removed=dict(removed),
    )


def _prefix_pieces(input_audio, chain_format, vocab):
    instruction = RAW_INSTRUCTION if chain_format is ChainFormat.AA_RAW else COT_INSTRUCTION
    opener = RAW_OPENER if chain_format is ChainFormat.AA_RAW else OPENER
    return [
        (PROMPT, vocab.encode_literal(instruction + PROMPT_TAIL), None),
        (INPUT_AUDIO, [vocab.audio_id(c) for c in input_audio.tokens], None),
        (GLUE, vocab.encode_literal(opener), None),
    ]


def render(pair, mode, vocab):
    """Render a dialogue pair in the mode's chain template"""
    chain_format = as_format(mode)
    pieces = _prefix_pieces(pair.input_audio, chain_format, vocab)
    prefix_pieces = len(pieces)
    original_lengths = {}

    if chain_format is ChainFormat.ATTA:
        transcript = vocab.encode_chars(pair.transcript)
        pieces.append((TRANSCRIPT, transcript, None))
        pieces.append((GLUE, vocab.encode_literal(TRANSCRIPT_SEPARATOR), TRANSCRIPT))
        original_lengths[TRANSCRIPT] = len(transcript)
    if chain_format is not ChainFormat.AA_RAW:
        pieces.append((GLUE, vocab.encode_literal(HEADER), None))
    if chain_format.has_response:
        response = vocab.encode_chars(pair.response_text)
        pieces.append((TEXT_RESPONSE, response, None))
        pieces.append((GLUE, vocab.encode_literal(RESPONSE_SEPARATOR), TEXT_RESPONSE))
        original_lengths[TEXT_RESPONSE] = len(response)
    pieces.append((OUTPUT_AUDIO, [vocab.audio_id(c) for c in pair.output_audio.tokens], None))
    pieces.append((GLUE, [vocab.eos_id], None))

    return _assemble(pieces, chain_format, prefix_pieces, original_lengths, {})


def render_prefix(input_audio, mode, vocab):
    """Prompt + input audio + opener: what the model is given at inference"""
    chain_format = as_format(mode)
    pieces = _prefix_pieces(input_audio, chain_format, vocab)
    return _assemble(pieces, chain_format, len(pieces), {}, {})


def apply_removal(seq, s, target=TRANSCRIPT):
    """
    Drop min(s, remaining) tokens from the front of the target segment.
    When the segment empties, its attached separator goes with it.
    """
    if target not in REMOVABLE:
        raise RejectedInputError(f"segment '{target}' is not removable")
    if target not in seq.original_lengths:
        raise RejectedInputError(f"sequence has no {target} span")
    if s < 0:
        raise RejectedInputError(f"removal count must be non-negative, got {s}")

    span = seq.span(target)
    if span is None or s == 0:
        return seq

    count = min(s, len(span))
    emptied = count == len(span)
    pieces = []
    prefix_pieces = 0
    for sp in seq.spans:
        ids = list(seq.tokens[sp.start:sp.end])
        if sp.label == target:
            if emptied:
                continue
            ids = ids[count:]
        elif emptied and sp.attached_to == target:
            continue
        pieces.append((sp.label, ids, sp.attached_to))
        if sp.end <= seq.prefix_length:
            prefix_pieces = len(pieces)

    removed = dict(seq.removed)
    removed[target] = removed.get(target, 0) + count
    return _assemble(pieces, seq.chain_format, prefix_pieces, seq.original_lengths, removed)


def remaining(seq, target=TRANSCRIPT):
    span = seq.span(target)
    return len(span) if span else 0


def loss_mask_targets(seq):
    """Next-token alignment: (inputs, targets, mask) with targets = inputs shifted by one"""
    tokens = list(seq.tokens)
    return tokens[:-1], tokens[1:], list(seq.loss_mask[1:])


def supervised_length(seq):
    """Tokens in the generation region: retained segments plus their separators"""
    return sum(len(sp) for sp in seq.spans if sp.start >= seq.prefix_length)


def dump_tokens(seq, vocab):
    """One token name per line, for golden files"""
    return '\n'.join(vocab.token_name(t) for t in seq.tokens) + '\n'


# ==================== CONTINUATION PARSING ====================

@dataclass
class ParsedContinuation:
    transcript_ids: list
    response_ids: list
    audio_codes: list
    glue_count: int
    first_audio_index: int
    ended: bool
    parse_ok: bool
    raw: list


def parse_continuation(tokens, mode, vocab):
    """
    Split generated tokens into transcript / response / audio.
    Vocabulary id ranges first (the first audio token cuts the text region),
    markers second (the [AnyGPT] header separates transcript from response).
    Total: malformed output only clears parse_ok.
    """
    chain_format = as_format(mode)
    tokens = list(tokens)
    ok = True

    ended = vocab.eos_id in tokens
    body = tokens[:tokens.index(vocab.eos_id)] if ended else tokens
    glue = 1 if ended else 0

    first_audio = next((i for i, t in enumerate(body) if vocab.is_audio(t)), None)
    text_region = body if first_audio is None else body[:first_audio]
    audio_region = [] if first_audio is None else body[first_audio:]
    if first_audio is None:
        ok = False

    audio_codes = [vocab.audio_code(t) for t in audio_region if vocab.is_audio(t)]
    if len(audio_codes) != len(audio_region):
        ok = False
        glue += len(audio_region) - len(audio_codes)

    header = vocab.marker_id(ANYGPT)
    if chain_format is ChainFormat.AA_RAW:
        before, after = text_region, []
        if text_region:
            ok = False
    elif header in text_region:
        cut = text_region.index(header)
        before, after = text_region[:cut], text_region[cut + 1:]
        glue += 1
        for expected in vocab.encode_literal(HEADER)[1:]:
            if after and after[0] == expected:
                after = after[1:]
                glue += 1
            else:
                ok = False
    else:
        before, after = text_region, []
        ok = False

    if before and vocab.char_id(TRANSCRIPT_SEPARATOR) == before[-1]:
        before = before[:-1]
        glue += 1
    if after and vocab.char_id(RESPONSE_SEPARATOR) == after[-1]:
        after = after[:-1]
        glue += 1

    if not chain_format.has_transcript and before:
        ok = False
    if not chain_format.has_response and after:
        ok = False
    stray = [t for t in before + after if not vocab.is_text(t)]
    if stray:
        ok = False

    return ParsedContinuation(
        transcript_ids=[t for t in before if vocab.is_text(t)],
        response_ids=[t for t in after if vocab.is_text(t)],
        audio_codes=audio_codes,
        glue_count=glue + len(stray),
        first_audio_index=first_audio,
        ended=ended,
        parse_ok=ok,
        raw=tokens,
    )
