#!/usr/bin/env python3
"""Codec tests: mapping, round trips, decoding totality and noise behaviour"""
import numpy as np
import pytest

from codec import (DEFAULT_ALPHABET, REPLACEMENT_CHAR, AudioTokenSeq, CodecConfig, code_for, decode_audio,
                   encode_text, export_mapping_table, infer_band, mapping_table)
from errors import ConfigError, RejectedInputError


def test_golden_mapping():
    cfg = CodecConfig()
    assert encode_text("ab", 0, cfg).tokens == (0, 1, 2, 3)
    assert cfg.band_width == 80
    assert encode_text("ab", 1, cfg).tokens == (80, 81, 82, 83)
    # speakers share a band modulo speaker_band_size
    assert encode_text("ab", 9, cfg).tokens == encode_text("ab", 1, cfg).tokens


def test_round_trip_every_band():
    cfg = CodecConfig()
    rng = np.random.default_rng(0)
    letters = np.array(list(DEFAULT_ALPHABET))
    for speaker in range(cfg.speaker_band_size):
        for _ in range(20):
            text = ''.join(rng.choice(letters, size=int(rng.integers(1, 30))))
            seq = encode_text(text, speaker, cfg)
            assert len(seq) == cfg.units_per_char * len(text)
            assert infer_band(seq.tokens, cfg) == speaker
            assert decode_audio(seq, cfg) == text


def test_codes_are_injective():
    cfg = CodecConfig()
    codes = [c for _, _, ids in mapping_table(cfg) for c in ids]
    assert len(codes) == len(set(codes))
    assert all(0 <= c < cfg.audio_vocab_size for c in codes)


def test_config_rejects_overlapping_bands():
    with pytest.raises(ConfigError):
        CodecConfig(audio_vocab_size=64)
    with pytest.raises(ConfigError):
        CodecConfig(text_alphabet='ab?')
    with pytest.raises(ConfigError):
        CodecConfig(noise_rate=1.5)


def test_encode_rejects_unknown_character():
    with pytest.raises(RejectedInputError, match="index 2"):
        encode_text("ab!", 0, CodecConfig())
    with pytest.raises(RejectedInputError):
        encode_text("ab", 500, CodecConfig())


def test_decode_is_total():
    cfg = CodecConfig()
    assert decode_audio(AudioTokenSeq(()), cfg) == ''
    garbage = decode_audio([639, 5, 7], cfg)
    assert len(garbage) == 2
    assert garbage.endswith(REPLACEMENT_CHAR)
    # out-of-range ids decode, they do not raise
    assert decode_audio([-3, 10000], cfg) == REPLACEMENT_CHAR


def test_noisy_encoding_needs_rng():
    cfg = CodecConfig(noise_rate=0.1)
    with pytest.raises(RejectedInputError):
        encode_text("abc", 0, cfg)
    noisy = encode_text("abc" * 50, 0, cfg, np.random.default_rng(3))
    assert noisy.tokens != encode_text("abc" * 50, 0, CodecConfig()).tokens


def test_single_corrupted_unit_error_rate():
    """One uniformly corrupted unit per frame: a frame is lost only on a tie with another character"""
    cfg = CodecConfig()
    rng = np.random.default_rng(7)
    letters = np.array(list(DEFAULT_ALPHABET))
    errors = total = 0
    for _ in range(20):
        text = ''.join(rng.choice(letters, size=1000))
        tokens = np.array(encode_text(text, 3, cfg).tokens).reshape(-1, cfg.units_per_char)
        units = rng.integers(0, cfg.units_per_char, size=len(tokens))
        tokens[np.arange(len(tokens)), units] = rng.integers(0, cfg.audio_vocab_size, size=len(tokens))
        decoded = decode_audio(tokens.reshape(-1).tolist(), cfg)
        errors += sum(a != b for a, b in zip(decoded, text))
        total += len(text)
    expected = (len(DEFAULT_ALPHABET) - 1) / cfg.audio_vocab_size
    stderr = np.sqrt(expected * (1 - expected) / total)
    assert abs(errors / total - expected) < 4 * stderr


def test_export_mapping_table(tmp_path):
    cfg = CodecConfig()
    path = tmp_path / 'mapping.tsv'
    export_mapping_table(cfg, str(path))
    rows = [line for line in path.read_text().splitlines() if not line.startswith('#')]
    assert len(rows) == cfg.speaker_band_size * len(cfg.text_alphabet)
    assert rows[0] == "0\ta\t0 1"
    assert f"1\tSPACE\t{code_for(26, 0, 1, cfg)} {code_for(26, 1, 1, cfg)}" in rows


if __name__ == '__main__':
    import sys
    sys.exit(pytest.main([__file__, '-v']))
