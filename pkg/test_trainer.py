#!/usr/bin/env python3
"""Trainer tests: stage configs, batching, curriculum removal, resets, checkpoints and resume"""
import logging
import os
from dataclasses import replace

import pytest
import torch

from corpus import TaskSpec, generate_corpus
from curriculum import CurriculumState, removal_count, steps_to_full_removal
from errors import ConfigError, RejectedStateError, TrainingDivergence
from model import AdapterConfig, attach_adapters, init_model
from template import TEXT_RESPONSE, TRANSCRIPT, ChainFormat, render
from trainer import (BatchSchedule, MetricsLog, RunManifest, StageConfig, collate, evaluate_loss, load_checkpoint,
                     max_target_length, model_from_checkpoint, render_corpus, resolve_steps_per_drop, save_checkpoint,
                     train_baseline_ata_nocot, train_stage, train_tts_icot)

ADAPTERS = AdapterConfig(rank=2, alpha=2)


def _stage1(**overrides):
    values = dict(stage='1', steps=20, learning_rate=3e-3, batch_size=4)
    values.update(overrides)
    return StageConfig(**values)


def _stage2(**overrides):
    values = dict(stage='2', steps=12, learning_rate=3e-3, batch_size=4, use_adapters=True, steps_per_drop=3)
    values.update(overrides)
    return StageConfig(**values)


def _params(model):
    return {n: p.detach().clone() for n, p in model.state_dict().items()}


def test_stage_config_validation():
    assert _stage2().target_segment == TRANSCRIPT
    assert StageConfig(stage='aa-icot', steps=1, learning_rate=1e-3, batch_size=1, use_adapters=True,
                       steps_per_drop=1, target_segment=TEXT_RESPONSE).stage == '3'
    with pytest.raises(ConfigError):
        StageConfig(stage='4', steps=1, learning_rate=1e-3, batch_size=1)
    with pytest.raises(ConfigError):
        _stage2(use_adapters=False)
    with pytest.raises(ConfigError):
        _stage2(steps_per_drop=None)
    with pytest.raises(ConfigError):
        _stage1(steps_per_drop=10)
    with pytest.raises(ConfigError):
        _stage1(removal_margin=2)
    with pytest.raises(ConfigError):
        _stage2(steps_per_drop=None, removal_margin=-1)
    assert _stage2(steps_per_drop=None, removal_margin=0).has_curriculum
    with pytest.raises(ConfigError):
        _stage1(learning_rate=0)
    with pytest.raises(ConfigError):
        _stage2(target_segment=TEXT_RESPONSE)
    # full-parameter stage 2 is possible, but only on request
    assert _stage2(use_adapters=False, allow_full_finetune=True).stage == '2'


def test_reference_defaults():
    stage3 = StageConfig.full_scale_defaults('aa-icot')
    assert stage3.stage == '3' and stage3.target_segment == TEXT_RESPONSE
    assert stage3.steps_per_drop == 2000
    stage2 = StageConfig.full_scale_defaults('2')
    assert (stage2.steps, stage2.learning_rate, stage2.batch_size, stage2.steps_per_drop) == (24000, 5e-5, 4, 500)
    assert StageConfig.full_scale_defaults('ata-nocot').steps == 48000


def test_batch_schedule_covers_every_example_once_per_epoch():
    lengths = [5, 9, 2, 7, 7, 1, 3, 8, 4, 6, 10]
    schedule = BatchSchedule(lengths, batch_size=3, seed=4, bucket_batches=2)
    assert schedule.per_epoch == 4
    for epoch in range(3):
        seen = [i for step in range(epoch * 4, epoch * 4 + 4) for i in schedule.batch(step)]
        assert sorted(seen) == list(range(len(lengths)))
    again = BatchSchedule(lengths, batch_size=3, seed=4, bucket_batches=2)
    assert [again.batch(s) for s in range(8)] == [schedule.batch(s) for s in range(8)]


def test_collate_masks_padding(pairs, vocab):
    long_seq = render(pairs[0], ChainFormat.ATTA, vocab)
    short_seq = render(pairs[0], ChainFormat.AA, vocab)
    inputs, targets, mask = collate([long_seq, short_seq], vocab.pad_id)
    assert inputs.shape == targets.shape == mask.shape == (2, len(long_seq) - 1)
    width = len(short_seq) - 1
    assert not mask[1, width:].any()
    assert (inputs[1, width:] == vocab.pad_id).all()
    assert int(mask[1].sum()) == sum(short_seq.loss_mask[1:])


def test_mode_mismatch_is_rejected(pairs, vocab, tiny_model_cfg):
    corpus = render_corpus(pairs, ChainFormat.ATA, vocab)
    with pytest.raises(ConfigError):
        train_stage(init_model(tiny_model_cfg), corpus, _stage1(), progress=False)


def test_zero_steps_leaves_model_unchanged(pairs, vocab, tiny_model_cfg):
    model = init_model(tiny_model_cfg)
    before = _params(model)
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    trained, metrics = train_stage(model, corpus, _stage1(steps=0), progress=False)
    assert trained is model and metrics.steps_run == 0
    for name, value in _params(trained).items():
        assert torch.equal(value, before[name])


def test_context_overflow_is_a_config_error(pairs, vocab, tiny_model_cfg):
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    small = replace(tiny_model_cfg, context_length=32)
    with pytest.raises(ConfigError):
        train_stage(init_model(small), corpus, _stage1(), progress=False)


def test_stage1_reduces_loss(pairs, vocab, tiny_model_cfg):
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    model = init_model(tiny_model_cfg)
    start = evaluate_loss(model, corpus, vocab.pad_id)
    model, metrics = train_stage(model, corpus, _stage1(steps=60), pad_id=vocab.pad_id, progress=False)
    assert metrics.steps_run == 60
    assert evaluate_loss(model, corpus, vocab.pad_id) < start
    assert sum(metrics.losses[-5:]) < sum(metrics.losses[:5])


def test_training_is_deterministic(pairs, vocab, tiny_model_cfg):
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    _, first = train_stage(init_model(tiny_model_cfg), corpus, _stage2(), pad_id=vocab.pad_id,
                           adapter_cfg=ADAPTERS, progress=False)
    _, second = train_stage(init_model(tiny_model_cfg), corpus, _stage2(), pad_id=vocab.pad_id,
                            adapter_cfg=ADAPTERS, progress=False)
    assert first.losses == second.losses
    assert first.realized_removal == second.realized_removal


def test_unit_steps_per_drop_removes_whole_transcript(vocab, tiny_model_cfg):
    pairs = generate_corpus(TaskSpec(min_length=4, max_length=4), 8, seed=2, cfg=vocab.codec_cfg)
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    _, metrics = train_stage(init_model(tiny_model_cfg), corpus, _stage2(steps=8, steps_per_drop=1),
                             pad_id=vocab.pad_id, adapter_cfg=ADAPTERS, progress=False)
    for step, realized in enumerate(metrics.realized_removal):
        assert all(min(step, 4) <= s <= 4 for s in realized)
    assert all(realized == [4, 4, 4, 4] for realized in metrics.realized_removal[4:])


def test_removal_margin_fits_schedule_to_longest_transcript(vocab):
    pairs = generate_corpus(TaskSpec(family='arithmetic'), 60, seed=4, cfg=vocab.codec_cfg)
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    k_max = max_target_length(corpus, TRANSCRIPT)
    assert k_max == max(len(p.transcript) for p in pairs) > 8

    stage = resolve_steps_per_drop(_stage2(steps=3000, steps_per_drop=None, removal_margin=8), k_max)
    assert stage.steps_per_drop == 3000 // (k_max + 8)
    assert steps_to_full_removal(stage.steps_per_drop, k_max) < stage.steps
    last_step = CurriculumState(t=stage.steps - 1, T=stage.steps_per_drop, o=0.0)
    assert removal_count(last_step, k_max) == k_max


def test_slow_explicit_schedule_is_reported(caplog):
    with caplog.at_level(logging.WARNING, logger='trainer'):
        stage = resolve_steps_per_drop(_stage2(steps=12, steps_per_drop=3), 6)
    assert stage.steps_per_drop == 3
    assert 'never trains the fully removed format' in caplog.text

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger='trainer'):
        resolve_steps_per_drop(_stage2(steps=12, steps_per_drop=2), 4)
    assert not caplog.text


def test_train_stage_with_removal_margin(vocab, tiny_model_cfg):
    pairs = generate_corpus(TaskSpec(min_length=4, max_length=4), 8, seed=2, cfg=vocab.codec_cfg)
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    stage = _stage2(steps=12, steps_per_drop=None, removal_margin=2)
    _, metrics = train_stage(init_model(tiny_model_cfg), corpus, stage, pad_id=vocab.pad_id, adapter_cfg=ADAPTERS,
                             progress=False)
    # T = 12 // (4 + 2)
    assert metrics.steps_per_drop == 2
    assert all(realized == [4, 4, 4, 4] for realized in metrics.realized_removal[8:])
    assert all(isinstance(value, float) for value in metrics.losses)


def test_rerun_stage_keeps_one_record_per_step(pairs, vocab, tiny_model_cfg, tmp_path):
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    log_path = str(tmp_path / 'metrics.jsonl')
    for _ in range(2):
        model, _ = train_stage(init_model(tiny_model_cfg), corpus, _stage1(steps=5), pad_id=vocab.pad_id,
                               metrics_log=log_path, progress=False)
    stage = _stage2(steps=8, checkpoint_every=4)
    train_stage(model, corpus, stage, pad_id=vocab.pad_id, adapter_cfg=ADAPTERS, metrics_log=log_path,
                checkpoint_dir=str(tmp_path), progress=False)
    train_stage(init_model(tiny_model_cfg), corpus, stage, pad_id=vocab.pad_id, adapter_cfg=ADAPTERS,
                metrics_log=log_path, resume_from=str(tmp_path / 'stage2_step4.pt'), progress=False)

    records = MetricsLog(log_path).read()
    assert [r['step'] for r in records if r['stage'] == '1'] == list(range(5))
    assert [r['step'] for r in records if r['stage'] == '2'] == list(range(8))


def test_optimizer_resets_at_level_changes(pairs, vocab, tiny_model_cfg, tmp_path):
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    log_path = str(tmp_path / 'metrics.jsonl')
    _, metrics = train_stage(init_model(tiny_model_cfg), corpus, _stage2(steps=8), pad_id=vocab.pad_id,
                             adapter_cfg=ADAPTERS, metrics_log=log_path, progress=False)
    assert metrics.reset_steps == [3, 6]
    records = MetricsLog(log_path).read()
    assert [r['step'] for r in records] == list(range(8))
    for record in records:
        fresh = record['step'] in (0, 3, 6)
        assert record['reset'] == (record['step'] in (3, 6))
        assert (record['second_moment_norm'] == 0.0) == fresh
        assert record['level'] == record['step'] // 3
        assert record['offset'] >= 0


def test_resume_matches_uninterrupted_run(pairs, vocab, tiny_model_cfg, tmp_path):
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    stage = _stage2(steps=8, checkpoint_every=4)
    full, full_metrics = train_stage(init_model(tiny_model_cfg), corpus, stage, pad_id=vocab.pad_id,
                                     adapter_cfg=ADAPTERS, checkpoint_dir=str(tmp_path), progress=False)
    checkpoint = tmp_path / 'stage2_step4.pt'
    assert checkpoint.exists()

    resumed, resumed_metrics = train_stage(init_model(tiny_model_cfg), corpus, stage, pad_id=vocab.pad_id,
                                           adapter_cfg=ADAPTERS, resume_from=str(checkpoint), progress=False)
    assert resumed_metrics.steps_run == 4
    assert resumed_metrics.losses == pytest.approx(full_metrics.losses[4:], rel=1e-6)
    assert resumed_metrics.realized_removal == full_metrics.realized_removal[4:]
    for name, value in resumed.state_dict().items():
        assert torch.allclose(value, full.state_dict()[name], atol=1e-6), name


def test_divergence_writes_diagnostic_checkpoint(pairs, vocab, tiny_model_cfg, tmp_path):
    corpus = render_corpus(pairs, ChainFormat.ATTA, vocab)
    model = init_model(tiny_model_cfg)
    with torch.no_grad():
        model.lm_head.bias.fill_(float('nan'))
    with pytest.raises(TrainingDivergence) as info:
        train_stage(model, corpus, _stage1(), pad_id=vocab.pad_id, checkpoint_dir=str(tmp_path), progress=False)
    assert info.value.checkpoint_path == os.path.join(str(tmp_path), 'diverged_stage1_step0.pt')
    assert os.path.exists(info.value.checkpoint_path)


def test_checkpoint_round_trip(tiny_model_cfg, tmp_path):
    model = attach_adapters(init_model(tiny_model_cfg), ADAPTERS)
    with torch.no_grad():
        model.blocks[0].attn.v_proj.lora_B.fill_(0.5)
    path = save_checkpoint(str(tmp_path / 'ckpt.pt'), model, stage=_stage2(), step=7)
    checkpoint = load_checkpoint(path)
    assert checkpoint['step'] == 7 and checkpoint['stage']['stage'] == '2'
    restored = model_from_checkpoint(path)
    assert restored.adapter_cfg == ADAPTERS
    for name, value in restored.state_dict().items():
        assert torch.equal(value, model.state_dict()[name]), name


def test_bad_checkpoints_are_rejected(tmp_path):
    with pytest.raises(RejectedStateError):
        load_checkpoint(str(tmp_path / 'missing.pt'))
    path = str(tmp_path / 'old.pt')
    torch.save({'version': 99}, path)
    with pytest.raises(RejectedStateError):
        load_checkpoint(path)


def test_stage3_requires_stage2_checkpoint(pairs, vocab, tmp_path):
    stage3 = StageConfig(stage='3', steps=2, learning_rate=1e-3, batch_size=2, use_adapters=True,
                         steps_per_drop=1, target_segment=TEXT_RESPONSE)
    with pytest.raises(RejectedStateError):
        train_tts_icot(None, pairs, stage3, vocab, progress=False)
    with pytest.raises(RejectedStateError):
        train_tts_icot(str(tmp_path / 'nothing.pt'), pairs, stage3, vocab, progress=False)


def test_stage3_removes_response_tokens(pairs, vocab, tiny_model_cfg, tmp_path):
    stage2_path = save_checkpoint(str(tmp_path / 'stage2.pt'), attach_adapters(init_model(tiny_model_cfg), ADAPTERS))
    stage3 = StageConfig(stage='3', steps=6, learning_rate=1e-3, batch_size=2, use_adapters=True,
                         steps_per_drop=1, target_segment=TEXT_RESPONSE)
    model, metrics = train_tts_icot(stage2_path, pairs, stage3, vocab, progress=False)
    assert model.adapter_cfg == ADAPTERS
    assert metrics.steps_run == 6
    # responses hold 4 to 6 characters, s(5) >= 5
    assert all(s >= 4 for s in metrics.realized_removal[5])


def test_baseline_trains_ata_renders(pairs, vocab, tiny_model_cfg):
    stage = StageConfig(stage='ata-nocot', steps=3, learning_rate=1e-3, batch_size=4)
    model = train_baseline_ata_nocot(init_model(tiny_model_cfg), pairs, stage, vocab, progress=False)
    assert model.adapter_cfg is None
    with pytest.raises(ConfigError):
        train_baseline_ata_nocot(init_model(tiny_model_cfg), pairs, _stage1(), vocab, progress=False)


def test_manifest_round_trip(tmp_path):
    manifest = RunManifest(config={'a': 1}, seeds={'data': 0}, step_budget=10)
    manifest.add_artifact('x.json')
    manifest.add_artifact('x.json')
    path = manifest.save(str(tmp_path / 'run' / 'manifest.json'))
    loaded = RunManifest.load(path)
    assert loaded.artifacts == ['x.json']
    assert loaded.step_budget == 10 and loaded.updated_at


if __name__ == '__main__':
    import sys
    sys.exit(pytest.main([__file__, '-v']))
