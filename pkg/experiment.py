"""
Experiment Module
ExperimentConfig (one JSON file plus --set overrides), canonical serialization,
and the one-command desk-scale reproduction of the full experiment matrix
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

from codec import CodecConfig
from corpus import TaskSpec, corpus_fingerprint, corpus_stats, generate_corpus, load_pairs, save_pairs, split_corpus
from errors import ConfigError, LabError, RejectedStateError
from evaluator import (GROUND_TRUTH, FULL_SCALE_AA_ICOT_WIN_RATE, FULL_SCALE_KAPPA_GPT4O_HUMAN, FULL_SCALE_KAPPA_GROUND_TRUTH_TRIAL,
                       FULL_SCALE_WIN_RATE_VS_ATA_NOCOT, FULL_SCALE_WIN_RATE_VS_ATTA, PROMPT_FAMILIES, RUBRICS, EndpointJudge,
                       StubJudge, compare_systems, comparison_summary, qualitative_samples, save_records,
                       transcribe_outputs, win_rate_table)
from inference import (FULL_SCALE_HEADLINE_LATENCY_REDUCTION, FULL_SCALE_LATENCY_REDUCTION, bench, format_bench,
                       response_accuracy, run_corpus, save_bench)
from model import AdapterConfig, DecodeRule, ModelConfig, StopRule, init_model
from report_generator import ReportGenerator, save_win_rate_chart
from template import ChainFormat, ChainMode, Vocabulary, mode_summary
from trainer import (MetricsLog, RunManifest, StageConfig, model_from_checkpoint, render_corpus, save_checkpoint,
                     train_baseline_ata_nocot, train_stage, train_tts_icot)

logger = logging.getLogger(__name__)

CONFIG_FILE = 'experiment_config.json'
MANIFEST_FILE = 'manifest.json'
ICOT_SYSTEM = ChainMode.ATA_ICOT.value

DESK_STAGE_STEPS = 2000
DESK_STAGE2_STEPS = 3000
DESK_MAX_LENGTH = 8
# T = steps // (K_max + margin); a margin of K_max leaves the second half of a stage on the fully removed format
DESK_REMOVAL_MARGIN = 8


@dataclass
class DataConfig:
    train_pairs: int = 5000
    test_pairs: int = 200
    seed: int = 0


@dataclass
class ModelSection:
    """ModelConfig without vocab_size, which follows from the codec"""
    context_length: int = 512
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 128
    feedforward_dim: int = 512
    seed: int = 0


def _desk_stage(stage, **values):
    return StageConfig(stage=stage, **values)


@dataclass
class StagesConfig:
    stage1: StageConfig = field(default_factory=lambda: _desk_stage(
        '1', steps=DESK_STAGE_STEPS, learning_rate=1e-3, batch_size=16))
    stage2: StageConfig = field(default_factory=lambda: _desk_stage(
        '2', steps=DESK_STAGE2_STEPS, learning_rate=1e-3, batch_size=16, use_adapters=True,
        removal_margin=DESK_REMOVAL_MARGIN, target_segment='transcript'))
    stage3: StageConfig = field(default_factory=lambda: _desk_stage(
        '3', steps=DESK_STAGE_STEPS, learning_rate=5e-4, batch_size=16, use_adapters=True,
        removal_margin=DESK_REMOVAL_MARGIN, target_segment='text_response'))
    # same total budget as stage 1 + stage 2
    ata_nocot: StageConfig = field(default_factory=lambda: _desk_stage(
        'ata-nocot', steps=DESK_STAGE_STEPS + DESK_STAGE2_STEPS, learning_rate=1e-3, batch_size=16))


@dataclass
class EvalConfig:
    judge: str = 'stub'
    judge_families: tuple = PROMPT_FAMILIES
    rubrics: tuple = RUBRICS
    swap: bool = True
    max_in_flight: int = 4
    max_attempts: int = 3
    eval_pairs: int = 50
    bench_pairs: int = 50
    bench_repetitions: int = 1
    bench_warmup: int = 1
    max_new_tokens: int = 128
    samples: int = 3


@dataclass
class ExperimentConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    task: TaskSpec = field(default_factory=lambda: TaskSpec(max_length=DESK_MAX_LENGTH))
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = 'runs/desk'

    def __post_init__(self):
        if self.eval.judge not in ('stub', 'endpoint'):
            raise ConfigError(f"eval.judge must be 'stub' or 'endpoint', got '{self.eval.judge}'")
        if self.data.train_pairs < 1 or self.data.test_pairs < 1:
            raise ConfigError("train_pairs and test_pairs must be positive")

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                codec=CodecConfig(**data.get('codec', {})),
                task=TaskSpec(**_tuples(data.get('task', {}), 'operations')),
                data=DataConfig(**data.get('data', {})),
                model=ModelSection(**data.get('model', {})),
                adapters=AdapterConfig(**_tuples(data.get('adapters', {}), 'target')),
                stages=StagesConfig(**{name: StageConfig(**values)
                                       for name, values in data.get('stages', {}).items()}),
                eval=EvalConfig(**_tuples(data.get('eval', {}), 'judge_families', 'rubrics')),
                **{k: v for k, v in data.items()
                   if k not in ('codec', 'task', 'data', 'model', 'adapters', 'stages', 'eval')},
            )
        except TypeError as e:
            raise ConfigError(f"invalid experiment config: {e}") from e


def _tuples(values, *names):
    values = dict(values)
    for name in names:
        if name in values:
            values[name] = tuple(values[name])
    return values


# ==================== CONFIG FILES ====================

def canonical_json(cfg):
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + '\n'


def apply_overrides(data, overrides):
    """Apply 'a.b.c=value' overrides to a config dict; values parse as JSON, else as strings"""
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(f"override '{item}' is not of the form key.path=value")
        path, raw = item.split('=', 1)
        keys = path.strip().split('.')
        node = data
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"unknown config key '{path}'")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"unknown config key '{path}'")
        try:
            node[keys[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[keys[-1]] = raw
    return data


def save_config(cfg, path=CONFIG_FILE):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        f.write(canonical_json(cfg))
    return path


def load_config(path=CONFIG_FILE, overrides=None, create=True):
    """Read a config file (written with defaults when missing), then apply overrides"""
    if not os.path.exists(path):
        if not create:
            raise ConfigError(f"config file not found: {path}")
        save_config(ExperimentConfig(), path)
        logger.info("Wrote default configuration to %s", path)
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


# ==================== BUILDING BLOCKS ====================

def build_vocab(cfg):
    return Vocabulary(cfg.codec)


def model_config(cfg, vocab):
    return ModelConfig(vocab_size=len(vocab), **asdict(cfg.model))


def generate_data(cfg):
    pairs = generate_corpus(cfg.task, cfg.data.train_pairs + cfg.data.test_pairs, cfg.data.seed, cfg.codec)
    return split_corpus(pairs, cfg.data.test_pairs)


def stop_rule(cfg, vocab):
    return StopRule(eos_id=vocab.eos_id, max_new_tokens=cfg.eval.max_new_tokens)


def make_judges(cfg):
    if cfg.eval.judge == 'stub':
        return [StubJudge()]
    return [EndpointJudge.from_env(family) for family in cfg.eval.judge_families]


class ExperimentRun:
    """
    One run directory: data, checkpoints, metrics log, records, reports and manifest.
    Finished stages are skipped on rerun, so a failed run resumes from its manifest.
    """

    def __init__(self, cfg, progress=True):
        self.cfg = cfg
        self.progress = progress
        self.out = cfg.output_dir
        self.vocab = build_vocab(cfg)
        self.model_cfg = model_config(cfg, self.vocab)
        self.checkpoint_dir = os.path.join(self.out, 'checkpoints')
        self.manifest_path = os.path.join(self.out, MANIFEST_FILE)
        os.makedirs(self.out, exist_ok=True)

        config_data = json.loads(canonical_json(cfg))
        if os.path.exists(self.manifest_path):
            self.manifest = RunManifest.load(self.manifest_path)
            if self.manifest.config != config_data:
                raise RejectedStateError(f"{self.out} holds a run with a different configuration")
        else:
            self.manifest = RunManifest(
                config=config_data,
                seeds={'data': cfg.data.seed, 'model': cfg.model.seed,
                       **{name: getattr(cfg.stages, name).seed for name in ('stage1', 'stage2', 'stage3', 'ata_nocot')}},
                stages=['stage1', 'stage2', 'ata_nocot'] + (['stage3'] if cfg.stages.stage3.steps else []),
            )
        self.manifest.step_budget = sum(getattr(cfg.stages, name).steps for name in self.manifest.stages)
        self.manifest.metrics_log = os.path.join(self.out, 'metrics.jsonl')
        self.metrics_log = MetricsLog(self.manifest.metrics_log)
        self.artifact(save_config(cfg, os.path.join(self.out, 'config.json')))

    def artifact(self, path):
        self.manifest.add_artifact(path)
        return path

    def save_manifest(self):
        self.manifest.save(self.manifest_path)

    def finished(self, name):
        path = self.manifest.checkpoints.get(name)
        return path if path and os.path.exists(path) else None

    def _record_stage(self, name, model, metrics=None, steps=0):
        path = self.artifact(save_checkpoint(os.path.join(self.checkpoint_dir, f"{name}.pt"), model))
        self.manifest.checkpoints[name] = path
        self.manifest.steps_completed[name] = metrics.steps_run if metrics else steps
        if metrics:
            self.manifest.stage_summaries[name] = {
                'initial_loss': metrics.initial_loss,
                'final_loss': metrics.final_loss,
                'reset_steps': metrics.reset_steps,
                'steps_per_drop': metrics.steps_per_drop,
            }
        self.save_manifest()
        return path

    # ==================== STAGES ====================

    def prepare_data(self):
        train_path = os.path.join(self.out, 'data', 'train.jsonl')
        test_path = os.path.join(self.out, 'data', 'test.jsonl')
        if os.path.exists(train_path) and os.path.exists(test_path):
            train, test = load_pairs(train_path), load_pairs(test_path)
        else:
            train, test = generate_data(self.cfg)
            save_pairs(train, train_path)
            save_pairs(test, test_path)
        self.artifact(train_path)
        self.artifact(test_path)
        self.manifest.corpus_fingerprint = corpus_fingerprint(train + test)
        self.save_manifest()
        return train, test

    def train_all(self, train):
        stages = self.cfg.stages
        common = dict(metrics_log=self.metrics_log, checkpoint_dir=self.checkpoint_dir, progress=self.progress)

        if not self.finished('stage1'):
            model, metrics = train_stage(init_model(self.model_cfg), render_corpus(train, ChainFormat.ATTA, self.vocab),
                                         stages.stage1, pad_id=self.vocab.pad_id, **common)
            self._record_stage('stage1', model, metrics)

        if not self.finished('stage2'):
            model, metrics = train_stage(model_from_checkpoint(self.finished('stage1')),
                                         render_corpus(train, ChainFormat.ATTA, self.vocab), stages.stage2,
                                         pad_id=self.vocab.pad_id, adapter_cfg=self.cfg.adapters, **common)
            self._record_stage('stage2', model, metrics)

        if not self.finished('ata_nocot'):
            model = train_baseline_ata_nocot(init_model(self.model_cfg), train, stages.ata_nocot, self.vocab, **common)
            self._record_stage('ata_nocot', model, steps=stages.ata_nocot.steps)

        if 'stage3' in self.manifest.stages and not self.finished('stage3'):
            model, metrics = train_tts_icot(self.finished('stage2'), train, stages.stage3, self.vocab, **common)
            self._record_stage('stage3', model, metrics)

    def systems(self):
        """Model per chain mode; the not-finetuned modes get a fresh initialization"""
        systems = {
            ChainMode.ATTA_NOT_FINETUNED: init_model(self.model_cfg),
            ChainMode.AA_NOT_FINETUNED: init_model(self.model_cfg),
            ChainMode.ATTA_FINETUNED: model_from_checkpoint(self.finished('stage1')),
            ChainMode.ATA_NO_COT: model_from_checkpoint(self.finished('ata_nocot')),
            ChainMode.ATA_ICOT: model_from_checkpoint(self.finished('stage2')),
        }
        if self.finished('stage3'):
            systems[ChainMode.AA_ICOT] = model_from_checkpoint(self.finished('stage3'))
        return systems

    def evaluate(self, train, test, judges=None):
        cfg = self.cfg
        stop = stop_rule(cfg, self.vocab)
        systems = self.systems()

        accuracy, system_texts = {}, {}
        eval_pairs = test[:cfg.eval.eval_pairs]
        for mode, model in systems.items():
            outputs = [o for o, _ in run_corpus(model, test, mode, self.vocab, stop, DecodeRule())]
            accuracy[mode.value] = response_accuracy(outputs, test, cfg.codec)
            system_texts[mode.value] = transcribe_outputs(outputs[:len(eval_pairs)], cfg.codec)
            logger.info("%s accuracy %.3f", mode.value, accuracy[mode.value])
        system_texts[GROUND_TRUTH] = [p.response_text for p in eval_pairs]

        bench_report = bench(systems, test[:cfg.eval.bench_pairs], self.vocab, cfg.codec,
                             repetitions=cfg.eval.bench_repetitions, warmup=cfg.eval.bench_warmup,
                             comparisons=((ChainMode.ATTA_FINETUNED, ChainMode.ATA_ICOT),
                                          (ChainMode.ATTA_FINETUNED, ChainMode.ATA_NO_COT)),
                             stop=stop)
        for path in save_bench(bench_report, os.path.join(self.out, 'bench.json')):
            self.artifact(path)

        judges = judges or make_judges(cfg)
        judge_options = dict(rubrics=cfg.eval.rubrics, swap=cfg.eval.swap, max_in_flight=cfg.eval.max_in_flight,
                             max_attempts=cfg.eval.max_attempts)
        vs_icot = compare_systems(system_texts, eval_pairs, ICOT_SYSTEM, judges,
                                  **judge_options)
        vs_truth = compare_systems(system_texts, eval_pairs, GROUND_TRUTH, judges,
                                   **judge_options)
        self.artifact(save_records(vs_icot + vs_truth, os.path.join(self.out, 'records.jsonl')))

        report = {
            'notes': report_notes(cfg),
            'mode_summary': [list(row) for row in mode_summary()],
            'corpus_stats': {'train': asdict(corpus_stats(train, cfg.codec)),
                             'test': asdict(corpus_stats(test, cfg.codec))},
            'accuracy': accuracy,
            'inference': bench_report.to_dict(),
            'training': self.manifest.stage_summaries,
            'win_rates': win_rate_table(vs_icot, ICOT_SYSTEM),
            'win_rates_vs_ground_truth': win_rate_table(vs_truth, GROUND_TRUTH),
            'comparison_summary': comparison_summary(vs_icot + vs_truth),
            'samples': qualitative_samples(system_texts, eval_pairs, cfg.eval.samples),
            'documentation': documentation_constants(),
        }
        return report, format_bench(bench_report)

    def write_report(self, report, bench_text):
        with open(self.artifact(os.path.join(self.out, 'report.json')), 'w') as f:
            json.dump(report, f, indent=2, sort_keys=True)
        with open(self.artifact(os.path.join(self.out, 'win_rates.json')), 'w') as f:
            json.dump({'vs_icot': report['win_rates'], 'vs_ground_truth': report['win_rates_vs_ground_truth']},
                      f, indent=2, sort_keys=True)
        with open(self.artifact(os.path.join(self.out, 'report.txt')), 'w') as f:
            f.write(format_report_text(report, bench_text))
        self.artifact(save_win_rate_chart(report['win_rates'], os.path.join(self.out, 'win_rates.pdf')))
        self.artifact(ReportGenerator(self.out).generate_report(report))


def report_notes(cfg):
    notes = [
        f"Task '{cfg.task.family}', {cfg.data.train_pairs} train / {cfg.data.test_pairs} test pairs, "
        f"{cfg.model.num_layers}-layer model (d={cfg.model.model_dim}).",
        "Latency proxy: tokens generated after the last input token before the first output-audio token.",
        f"Judge: {cfg.eval.judge}. Every comparison is judged in both orders when swap is on; a system wins only "
        "if it wins both, order-inconsistent comparisons are excluded.",
    ]
    if cfg.eval.judge == 'stub':
        notes.append("Stub judge: lower WER (then CER) against the reference response wins.")
    return notes


def documentation_constants():
    """Full-scale reference values; not reproducible at desk scale"""
    return {
        'win_rate_vs_atta': FULL_SCALE_WIN_RATE_VS_ATTA,
        'win_rate_vs_ata_nocot': FULL_SCALE_WIN_RATE_VS_ATA_NOCOT,
        'aa_icot_win_rate': FULL_SCALE_AA_ICOT_WIN_RATE,
        'kappa_gpt4o_human': FULL_SCALE_KAPPA_GPT4O_HUMAN,
        'kappa_ground_truth_trial': FULL_SCALE_KAPPA_GROUND_TRUTH_TRIAL,
        'latency_reduction': FULL_SCALE_LATENCY_REDUCTION,
        'headline_latency_reduction': FULL_SCALE_HEADLINE_LATENCY_REDUCTION,
    }


def format_report_text(report, bench_text):
    lines = list(report['notes']) + ['']
    lines.append('Chain modes')
    for title, asr, tts, finetuned in report['mode_summary']:
        lines.append(f"  {title:<28} ASR={asr:<13} TTS={tts:<13} finetuned={finetuned}")
    lines.append('')
    lines.append('Response accuracy')
    for mode, value in report['accuracy'].items():
        lines.append(f"  {mode:<22} {value:.3f}")
    lines.append('')
    lines.append(bench_text.rstrip('\n'))
    for key in ('win_rates', 'win_rates_vs_ground_truth'):
        lines.append('')
        lines.append(key)
        for system, row in report[key].items():
            average = '-' if row['average'] is None else f"{100 * row['average']:.1f}%"
            lines.append(f"  {system:<22} {average}")
    return '\n'.join(lines) + '\n'


def run_experiment(cfg, progress=True, judges=None):
    """gen-data -> stage 1 -> stage 2 -> baselines and stage 3 -> bench -> judge -> report"""
    run = ExperimentRun(cfg, progress)
    run.manifest.status = 'running'
    run.save_manifest()
    try:
        train, test = run.prepare_data()
        run.train_all(train)
        report, bench_text = run.evaluate(train, test, judges)
        run.write_report(report, bench_text)
    except LabError as e:
        run.manifest.status = f"failed: {e}"
        run.save_manifest()
        raise
    run.manifest.status = 'completed'
    run.save_manifest()
    logger.info("Experiment finished: %s", run.out)
    return report
