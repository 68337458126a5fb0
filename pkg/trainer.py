"""
Trainer Module
Staged training: stage 1 full-parameter chain training (A-T-T-A), stage 2
transcript internalization with adapters, stage 3 response internalization,
and the direct A-T-A baseline.
"""
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime

import numpy as np
import torch
from tqdm import tqdm

from curriculum import (ASR_STEPS_PER_DROP, DEFAULT_LAMBDA, TTS_STEPS_PER_DROP, CurriculumState, advance,
                        removal_count, sample_offset, scaled_steps_per_drop, steps_to_full_removal)
from errors import ConfigError, RejectedInputError, RejectedStateError, TrainingDivergence
from model import AdapterConfig, ModelConfig, attach_adapters, init_model, loss, parameters_finite, unfreeze
from template import TEXT_RESPONSE, TRANSCRIPT, ChainFormat, apply_removal, loss_mask_targets, render

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAGES = ('1', '2', '3', 'ata-nocot')
STAGE_ALIASES = {'aa-icot': '3'}

STAGE_FORMATS = {
    '1': ChainFormat.ATTA,
    '2': ChainFormat.ATTA,
    '3': ChainFormat.ATA,
    'ata-nocot': ChainFormat.ATA,
}

# Hyperparameters of the full-scale runs, for reference and for `StageConfig.full_scale_defaults`
FULL_SCALE_STAGE_DEFAULTS = {
    '1': dict(steps=24000, learning_rate=5e-6, batch_size=2, use_adapters=False),
    '2': dict(steps=24000, learning_rate=5e-5, batch_size=4, use_adapters=True,
              steps_per_drop=ASR_STEPS_PER_DROP, target_segment=TRANSCRIPT),
    '3': dict(steps=24000, learning_rate=2e-6, batch_size=4, use_adapters=True,
              steps_per_drop=TTS_STEPS_PER_DROP, target_segment=TEXT_RESPONSE),
    'ata-nocot': dict(steps=48000, learning_rate=5e-6, batch_size=2, use_adapters=False),
}


@dataclass
class StageConfig:
    stage: str
    steps: int
    learning_rate: float
    batch_size: int
    use_adapters: bool = False
    steps_per_drop: int = None
    # when set and steps_per_drop is not, T = steps // (K_max + removal_margin) from the trained corpus
    removal_margin: int = None
    smoothing_lambda: float = DEFAULT_LAMBDA
    target_segment: str = None
    allow_full_finetune: bool = False
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    bucket_batches: int = 8
    seed: int = 0

    def __post_init__(self):
        self.stage = STAGE_ALIASES.get(str(self.stage), str(self.stage))
        self.betas = tuple(self.betas)
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage '{self.stage}', expected one of {STAGES}")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.stage in ('2', '3') and not (self.use_adapters or self.allow_full_finetune):
            raise ConfigError(f"stage {self.stage} trains adapters; set use_adapters or allow_full_finetune")
        if self.stage == '2' and self.target_segment not in (None, TRANSCRIPT):
            raise ConfigError("stage 2 removes transcript tokens")
        if self.stage == '3' and self.target_segment != TEXT_RESPONSE:
            raise ConfigError("stage 3 removes text_response tokens")
        if self.removal_margin is not None and self.removal_margin < 0:
            raise ConfigError("removal_margin must be non-negative")
        if self.stage in ('2', '3') and not self.has_curriculum:
            raise ConfigError(f"stage {self.stage} needs steps_per_drop or removal_margin")
        if self.stage in ('1', 'ata-nocot') and self.has_curriculum:
            raise ConfigError(f"stage {self.stage} has no removal curriculum")
        if self.stage == '2' and self.target_segment is None:
            self.target_segment = TRANSCRIPT

    @property
    def chain_format(self):
        return STAGE_FORMATS[self.stage]

    @property
    def has_curriculum(self):
        return bool(self.steps_per_drop) or self.removal_margin is not None

    @classmethod
    def full_scale_defaults(cls, stage, **overrides):
        stage = STAGE_ALIASES.get(str(stage), str(stage))
        values = dict(FULL_SCALE_STAGE_DEFAULTS[stage])
        values.update(overrides)
        return cls(stage=stage, **values)


@dataclass
class RenderedCorpus:
    chain_format: ChainFormat
    sequences: list
    pair_ids: list

    def __len__(self):
        return len(self.sequences)

    def max_length(self):
        return max((len(s) for s in self.sequences), default=0)


@dataclass
class StageMetrics:
    stage: str
    losses: list = field(default_factory=list)
    realized_removal: list = field(default_factory=list)
    reset_steps: list = field(default_factory=list)
    steps_run: int = 0
    steps_per_drop: int = None

    @property
    def initial_loss(self):
        return self.losses[0] if self.losses else None

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else None


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    corpus_fingerprint: str = ''
    stages: list = field(default_factory=list)
    step_budget: int = 0
    steps_completed: dict = field(default_factory=dict)
    stage_summaries: dict = field(default_factory=dict)
    metrics_log: str = ''
    checkpoints: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    status: str = 'created'
    updated_at: str = ''

    def add_artifact(self, path):
        if path not in self.artifacts:
            self.artifacts.append(path)

    def save(self, path):
        self.updated_at = datetime.now().isoformat(timespec='seconds')
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path):
        with open(path, 'r') as f:
            return cls(**json.load(f))


class MetricsLog:
    """Line-delimited JSON metrics; one writer per run"""

    def __init__(self, path):
        self.path = path
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)

    def append(self, record):
        if not self.path:
            return
        with open(self.path, 'a') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')

    def read(self):
        if not self.path or not os.path.exists(self.path):
            return []
        with open(self.path, 'r') as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate(self, stage, from_step=0):
        """Drop the records of `stage` at or after `from_step`"""
        records = self.read()
        kept = [r for r in records if not (r.get('stage') == stage and r.get('step', 0) >= from_step)]
        if len(kept) == len(records):
            return 0
        with open(self.path, 'w') as f:
            for record in kept:
                f.write(json.dumps(record, sort_keys=True) + '\n')
        return len(records) - len(kept)


# ==================== DATA ====================

def render_corpus(pairs, mode, vocab):
    chain_format = mode.chain_format if hasattr(mode, 'chain_format') else mode
    sequences = [render(pair, chain_format, vocab) for pair in pairs]
    return RenderedCorpus(chain_format, sequences, [p.pair_id for p in pairs])


def check_context(corpus, model_cfg):
    longest = corpus.max_length()
    if longest > model_cfg.context_length:
        raise ConfigError(f"longest rendered sequence has {longest} tokens, context_length is {model_cfg.context_length}")


def epoch_batches(lengths, batch_size, seed, epoch, bucket_batches=8):
    """
    Seed-determined batches for one epoch. Shuffled indices are pooled,
    each pool sorted by length and chunked, then the batch order is shuffled.
    """
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(lengths))
    pool_size = batch_size * max(1, bucket_batches)
    batches = []
    for start in range(0, len(order), pool_size):
        pool = sorted(order[start:start + pool_size].tolist(), key=lambda i: (lengths[i], i))
        batches.extend(pool[i:i + batch_size] for i in range(0, len(pool), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


class BatchSchedule:
    """Maps an optimization step to its batch; stateless so resumed runs see the same data"""

    def __init__(self, lengths, batch_size, seed, bucket_batches=8):
        self.lengths = list(lengths)
        self.batch_size = batch_size
        self.seed = seed
        self.bucket_batches = bucket_batches
        self.per_epoch = math.ceil(len(self.lengths) / batch_size)
        self._cache = {}

    def batch(self, step):
        epoch, index = divmod(step, self.per_epoch)
        if epoch not in self._cache:
            self._cache = {epoch: epoch_batches(self.lengths, self.batch_size, self.seed, epoch, self.bucket_batches)}
        return self._cache[epoch][index]


def collate(sequences, pad_id):
    """Pad to the batch max; padded positions are mask-false"""
    rows = [loss_mask_targets(seq) for seq in sequences]
    width = max(len(inputs) for inputs, _, _ in rows)
    inputs = torch.full((len(rows), width), pad_id, dtype=torch.long)
    targets = torch.full((len(rows), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, (inp, tgt, msk) in enumerate(rows):
        inputs[i, :len(inp)] = torch.tensor(inp, dtype=torch.long)
        targets[i, :len(tgt)] = torch.tensor(tgt, dtype=torch.long)
        mask[i, :len(msk)] = torch.tensor(msk, dtype=torch.bool)
    return inputs, targets, mask


def evaluate_loss(model, corpus, pad_id, batch_size=16):
    """Mean masked NLL over a rendered corpus (no removal)"""
    was_training = model.training
    model.eval()
    total, weight = 0.0, 0
    try:
        with torch.no_grad():
            for start in range(0, len(corpus), batch_size):
                inputs, targets, mask = collate(corpus.sequences[start:start + batch_size], pad_id)
                n = int(mask.sum())
                total += loss(model, inputs, targets, mask).item() * n
                weight += n
    finally:
        model.train(was_training)
    return total / weight if weight else float('nan')


# ==================== OPTIMIZER & CHECKPOINTS ====================

def make_optimizer(model, stage):
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise RejectedStateError("model has no trainable parameters")
    return torch.optim.AdamW(params, lr=stage.learning_rate, betas=stage.betas, weight_decay=stage.weight_decay)


def second_moment_norm(optimizer):
    total = 0.0
    for state in optimizer.state.values():
        if 'exp_avg_sq' in state:
            total += float(state['exp_avg_sq'].double().pow(2).sum())
    return math.sqrt(total)


def save_checkpoint(path, model, optimizer=None, stage=None, curriculum=None, step=0, reset_pending=False):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save({
        'version': CHECKPOINT_VERSION,
        'model_config': asdict(model.cfg),
        'adapter_config': asdict(model.adapter_cfg) if model.adapter_cfg else None,
        'model_state': model.state_dict(),
        'optimizer_state': optimizer.state_dict() if optimizer is not None else None,
        'stage': asdict(stage) if stage is not None else None,
        'curriculum': curriculum.to_dict() if curriculum is not None else None,
        'step': step,
        'reset_pending': reset_pending,
        'torch_rng_state': torch.get_rng_state(),
    }, path)
    logger.info("Saved checkpoint %s (step %d)", path, step)
    return path


def load_checkpoint(path):
    if not path or not os.path.exists(path):
        raise RejectedStateError(f"checkpoint not found: {path}")
    checkpoint = torch.load(path, map_location='cpu', weights_only=False)
    if checkpoint.get('version') != CHECKPOINT_VERSION:
        raise RejectedStateError(f"unsupported checkpoint version {checkpoint.get('version')} in {path}")
    return checkpoint


def model_from_checkpoint(checkpoint):
    """Rebuild the model (with adapters when present) from a loaded checkpoint or a path"""
    if isinstance(checkpoint, str):
        checkpoint = load_checkpoint(checkpoint)
    model_cfg = ModelConfig(**checkpoint['model_config'])
    model = init_model(model_cfg)
    if checkpoint['adapter_config']:
        acfg = checkpoint['adapter_config']
        attach_adapters(model, AdapterConfig(**{**acfg, 'target': tuple(acfg['target'])}))
    model.load_state_dict(checkpoint['model_state'])
    return model


# ==================== STAGES ====================

def max_target_length(corpus, target):
    """K_max: longest removable segment in the corpus"""
    return max((seq.original_lengths.get(target, 0) for seq in corpus.sequences), default=0)


def resolve_steps_per_drop(stage, k_max):
    """
    Fix T for a curriculum stage. With removal_margin set (and no explicit
    steps_per_drop) T = steps // (k_max + margin), so the last stretch of the
    stage trains the fully removed format.
    """
    if not stage.steps_per_drop:
        stage = replace(stage, steps_per_drop=scaled_steps_per_drop(stage.steps, k_max, stage.removal_margin))
        logger.info("Stage %s: steps_per_drop=%d from K_max=%d and margin %d", stage.stage, stage.steps_per_drop,
                    k_max, stage.removal_margin)
    full = steps_to_full_removal(stage.steps_per_drop, k_max)
    if full >= stage.steps:
        logger.warning("Stage %s removes all %d %s tokens only at step %d of %d; the stage never trains the fully "
                       "removed format", stage.stage, k_max, stage.target_segment, full, stage.steps)
    return stage


def _prepare_trainable(model, stage, adapter_cfg):
    if stage.use_adapters:
        if model.adapter_cfg is None:
            attach_adapters(model, adapter_cfg or AdapterConfig())
    elif model.adapter_cfg is None:
        unfreeze(model)
    else:
        raise ConfigError(f"stage {stage.stage} is full-parameter but the model carries adapters")


def train_stage(model, corpus, stage, curriculum=None, pad_id=0, adapter_cfg=None, metrics_log=None,
                checkpoint_dir=None, resume_from=None, progress=True):
    """
    Run the optimization loop of one stage:
    batch -> per-example removal s_i = min(s(t), K_i) -> loss mask -> loss -> AdamW step,
    with a fresh optimizer whenever the deterministic removal level rises.
    """
    if corpus.chain_format is not stage.chain_format:
        raise ConfigError(f"stage {stage.stage} trains {stage.chain_format.value} renders, "
                          f"corpus is {corpus.chain_format.value}")
    metrics = StageMetrics(stage=stage.stage)
    if stage.steps == 0:
        return model, metrics
    if not len(corpus):
        raise RejectedInputError("cannot train on an empty corpus")

    check_context(corpus, model.cfg)
    if stage.has_curriculum:
        stage = resolve_steps_per_drop(stage, max_target_length(corpus, stage.target_segment))
        metrics.steps_per_drop = stage.steps_per_drop
    _prepare_trainable(model, stage, adapter_cfg)
    model.train()
    log = metrics_log if isinstance(metrics_log, MetricsLog) else MetricsLog(metrics_log)

    optimizer = make_optimizer(model, stage)
    state = None
    if stage.has_curriculum:
        state = curriculum or CurriculumState(T=stage.steps_per_drop, lam=stage.smoothing_lambda)
        state = replace(state, o=sample_offset(state.lam, _offset_rng(stage.seed, state.t)))

    start_step = 0
    reset_pending = False
    if resume_from:
        checkpoint = load_checkpoint(resume_from)
        model.load_state_dict(checkpoint['model_state'])
        optimizer.load_state_dict(checkpoint['optimizer_state'])
        if checkpoint['curriculum'] is not None:
            state = CurriculumState.from_dict(checkpoint['curriculum'])
        start_step = checkpoint['step']
        reset_pending = checkpoint['reset_pending']
        logger.info("Resumed stage %s at step %d from %s", stage.stage, start_step, resume_from)
    if log.truncate(stage.stage, start_step):
        logger.info("Cleared earlier stage %s records from step %d in %s", stage.stage, start_step, log.path)

    schedule = BatchSchedule([len(s) for s in corpus.sequences], stage.batch_size, stage.seed, stage.bucket_batches)
    target = stage.target_segment
    started = time.perf_counter()

    bar = tqdm(range(start_step, stage.steps), desc=f"stage {stage.stage}", disable=not progress, leave=False)
    for step in bar:
        batch = [corpus.sequences[i] for i in schedule.batch(step)]
        realized = []
        if state is not None:
            s = removal_count(state, max(seq.original_lengths[target] for seq in batch))
            trimmed = []
            for seq in batch:
                s_i = min(s, seq.original_lengths[target])
                trimmed.append(apply_removal(seq, s_i, target))
                realized.append(s_i)
            batch = trimmed

        inputs, targets, mask = collate(batch, pad_id)
        moment_norm = second_moment_norm(optimizer)
        optimizer.zero_grad(set_to_none=True)
        value = loss(model, inputs, targets, mask)

        if not torch.isfinite(value):
            path = None
            if checkpoint_dir:
                path = save_checkpoint(os.path.join(checkpoint_dir, f"diverged_stage{stage.stage}_step{step}.pt"),
                                       model, optimizer, stage, state, step, reset_pending)
            raise TrainingDivergence(f"non-finite loss at stage {stage.stage} step {step}", checkpoint_path=path)

        value.backward()
        if stage.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], stage.grad_clip)
        optimizer.step()

        loss_value = value.item()
        record = {
            'stage': stage.stage,
            'step': step,
            'loss': loss_value,
            'realized_s': realized,
            'offset': state.o if state else None,
            'level': state.deterministic_level if state else None,
            'reset': reset_pending,
            'lr': optimizer.param_groups[0]['lr'],
            'second_moment_norm': moment_norm,
            'wall_clock': time.perf_counter() - started,
        }
        log.append(record)
        metrics.losses.append(loss_value)
        metrics.realized_removal.append(realized)
        if reset_pending:
            metrics.reset_steps.append(step)
        metrics.steps_run += 1
        bar.set_postfix(loss=f"{loss_value:.3f}", s=max(realized, default=0))

        reset_pending = False
        if state is not None:
            state, reset_pending = advance(state, _offset_rng(stage.seed, state.t + 1))
            if reset_pending:
                optimizer = make_optimizer(model, stage)

        if stage.checkpoint_every and checkpoint_dir and (step + 1) % stage.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"stage{stage.stage}_step{step + 1}.pt"),
                            model, optimizer, stage, state, step + 1, reset_pending)

    if not parameters_finite(model):
        raise TrainingDivergence(f"non-finite parameters after stage {stage.stage}")
    logger.info("Stage %s: %d steps, loss %.4f -> %.4f, %d optimizer resets", stage.stage, metrics.steps_run,
                metrics.initial_loss or float('nan'), metrics.final_loss or float('nan'), len(metrics.reset_steps))
    return model, metrics


def _offset_rng(seed, t):
    return np.random.default_rng([seed, 0x0FF5E7, t])


def train_baseline_ata_nocot(model, pairs, stage, vocab, **kwargs):
    """Direct A-T-A finetuning: the transcript never appears, no curriculum"""
    if stage.stage != 'ata-nocot':
        raise ConfigError(f"baseline expects an 'ata-nocot' stage config, got '{stage.stage}'")
    corpus = render_corpus(pairs, ChainFormat.ATA, vocab)
    model, _ = train_stage(model, corpus, stage, pad_id=vocab.pad_id, **kwargs)
    return model


def train_tts_icot(stage2_checkpoint, pairs, stage, vocab, **kwargs):
    """Stage 3: start from the stage-2 model and remove text-response tokens"""
    if not stage2_checkpoint or not os.path.exists(stage2_checkpoint):
        raise RejectedStateError("stage 3 needs a stage-2 checkpoint")
    if stage.stage != '3':
        raise ConfigError(f"expected a stage '3' config, got '{stage.stage}'")
    model = model_from_checkpoint(stage2_checkpoint)
    corpus = render_corpus(pairs, ChainFormat.ATA, vocab)
    return train_stage(model, corpus, stage, pad_id=vocab.pad_id, **kwargs)
