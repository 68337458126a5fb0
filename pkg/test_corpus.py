#!/usr/bin/env python3
"""Corpus tests: task functions, generation, JSONL I/O, statistics and WER"""
import itertools
import json
from functools import lru_cache

import numpy as np
import pytest

from codec import CodecConfig, decode_audio
from corpus import (TaskSpec, compute_wer, corpus_fingerprint, corpus_stats, evaluate_arithmetic, generate_corpus,
                    generate_pair, load_pairs, respond, save_pairs, split_corpus, word_edit_distance)
from errors import ConfigError, DataError, RejectedInputError


def test_task_functions():
    assert respond(TaskSpec(family='reverse'), 'hello') == 'olleh'
    assert respond(TaskSpec(family='shift', shift=3), 'xyz 9') == 'abc 2'
    assert evaluate_arithmetic('add 12 and 30') == '42'
    assert evaluate_arithmetic('subtract 5 from 17') == '12'
    with pytest.raises(RejectedInputError):
        evaluate_arithmetic('multiply 2 by 3')
    with pytest.raises(ConfigError):
        TaskSpec(family='sort')


def test_generated_pairs_are_consistent(codec_cfg):
    for family in ('reverse', 'shift', 'arithmetic'):
        spec = TaskSpec(family=family)
        for pair in generate_corpus(spec, 25, seed=3, cfg=codec_cfg):
            assert pair.response_text == respond(spec, pair.transcript)
            assert pair.input_speaker != pair.output_speaker
            assert decode_audio(pair.input_audio, codec_cfg) == pair.transcript
            assert decode_audio(pair.output_audio, codec_cfg) == pair.response_text
            if family != 'arithmetic':
                assert spec.min_length <= len(pair.transcript) <= spec.max_length


def test_generation_is_seed_determined(codec_cfg):
    spec = TaskSpec()
    a = generate_corpus(spec, 20, seed=5, cfg=codec_cfg)
    b = generate_corpus(spec, 20, seed=5, cfg=codec_cfg)
    c = generate_corpus(spec, 20, seed=6, cfg=codec_cfg)
    assert [p.to_record() for p in a] == [p.to_record() for p in b]
    assert [p.to_record() for p in a] != [p.to_record() for p in c]
    # ranges generated separately concatenate to the full corpus
    tail = generate_corpus(spec, 10, seed=5, cfg=codec_cfg, start_index=10)
    assert [p.to_record() for p in tail] == [p.to_record() for p in a[10:]]


def test_default_pair_id_is_stable(codec_cfg):
    first = generate_pair(TaskSpec(), np.random.default_rng(0), codec_cfg)
    second = generate_pair(TaskSpec(), np.random.default_rng(0), codec_cfg)
    assert first.pair_id == second.pair_id


def test_split_corpus(pairs):
    train, test = split_corpus(pairs, 3)
    assert len(train) == 5 and len(test) == 3
    assert train + test == pairs
    with pytest.raises(RejectedInputError):
        split_corpus(pairs, len(pairs))


def test_jsonl_round_trip(tmp_path, pairs):
    path = str(tmp_path / 'pairs.jsonl')
    save_pairs(pairs, path)
    loaded = load_pairs(path)
    assert [p.to_record() for p in loaded] == [p.to_record() for p in pairs]
    assert corpus_fingerprint(loaded) == corpus_fingerprint(pairs)
    assert corpus_fingerprint(loaded[1:]) != corpus_fingerprint(pairs)


def test_load_pairs_reports_line_and_field(tmp_path, pairs):
    good = json.dumps(pairs[0].to_record())
    bad = pairs[1].to_record()
    del bad['transcript']
    path = tmp_path / 'bad.jsonl'
    path.write_text(good + '\n\n' + json.dumps(bad) + '\n')
    with pytest.raises(DataError) as info:
        load_pairs(str(path))
    assert info.value.line_number == 3
    assert info.value.field == 'transcript'

    typed = pairs[1].to_record()
    typed['input_speaker'] = 'seven'
    path.write_text(json.dumps(typed) + '\n')
    with pytest.raises(DataError) as info:
        load_pairs(str(path))
    assert info.value.field == 'input_speaker'

    path.write_text('{not json\n')
    with pytest.raises(DataError) as info:
        load_pairs(str(path))
    assert info.value.line_number == 1


def test_load_pairs_rejects_single_speaker_dialogue(tmp_path, pairs):
    record = pairs[0].to_record()
    record['output_speaker'] = record['input_speaker']
    path = tmp_path / 'same_speaker.jsonl'
    path.write_text(json.dumps(pairs[1].to_record()) + '\n' + json.dumps(record) + '\n')
    with pytest.raises(DataError) as info:
        load_pairs(str(path))
    assert info.value.line_number == 2
    assert info.value.field == 'output_speaker'


@lru_cache(maxsize=None)
def _levenshtein(hyp, ref):
    if not hyp:
        return len(ref)
    if not ref:
        return len(hyp)
    return min(_levenshtein(hyp[1:], ref) + 1,
               _levenshtein(hyp, ref[1:]) + 1,
               _levenshtein(hyp[1:], ref[1:]) + (hyp[0] != ref[0]))


def test_wer_matches_exhaustive_edit_distance():
    words = ('x', 'y', 'z')
    sequences = [seq for n in range(6) for seq in itertools.product(words, repeat=n)]
    for hyp in sequences:
        for ref in sequences:
            if not ref:
                continue
            expected = _levenshtein(hyp, ref)
            assert word_edit_distance(list(hyp), list(ref)) == expected
            assert compute_wer(' '.join(hyp), ' '.join(ref)) == expected / len(ref)


def test_wer_edge_cases():
    assert compute_wer('a b c', 'a b c') == 0.0
    assert compute_wer('', 'a b') == 1.0
    assert compute_wer('a b c d', 'a') == 3.0
    with pytest.raises(RejectedInputError):
        compute_wer('a', '   ')


def test_stats_recount():
    cfg = CodecConfig(noise_rate=0.05)
    spec = TaskSpec(family='arithmetic')
    pairs = generate_corpus(spec, 40, seed=2, cfg=cfg)
    stats = corpus_stats(pairs, cfg)

    tokens = sum(len(p.input_audio) + len(p.output_audio) for p in pairs)
    errors = sum(word_edit_distance(decode_audio(p.input_audio, cfg).split(), p.transcript.split()) for p in pairs)
    words = sum(len(p.transcript.split()) for p in pairs)
    speakers = {s for p in pairs for s in (p.input_speaker, p.output_speaker)}

    assert stats.num_pairs == 40
    assert stats.total_audio_tokens == tokens
    assert stats.mean_tokens_per_utterance == pytest.approx(tokens / 80)
    assert stats.corpus_wer == pytest.approx(errors / words)
    assert stats.num_unique_speakers == len(speakers)
    assert corpus_stats([], cfg).num_pairs == 0


def test_noiseless_corpus_has_zero_wer(pairs, codec_cfg):
    assert corpus_stats(pairs, codec_cfg).corpus_wer == 0.0


if __name__ == '__main__':
    import sys
    sys.exit(pytest.main([__file__, '-v']))
