"""
Evaluator Module
Transcription of generated audio, pairwise LLM-judge comparisons with a
position-swap protocol, win rates and Cohen's kappa.
"""
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from string import Template

import numpy as np
import requests
from dotenv import load_dotenv

from codec import decode_audio
from corpus import compute_wer, word_edit_distance
from errors import JudgeFailure, RejectedInputError

logger = logging.getLogger(__name__)

PROMPT_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'prompts')

NATURALNESS = 'naturalness'
SPECIFICITY = 'specificity'
RUBRICS = (NATURALNESS, SPECIFICITY)

GPT4O = 'gpt4o'
PROMETHEUS = 'prometheus'
PROMPT_FAMILIES = (GPT4O, PROMETHEUS)

GROUND_TRUTH = 'ground_truth'

# Full-scale reference values, documentation only
FULL_SCALE_WIN_RATE_VS_ATTA = 0.423
FULL_SCALE_WIN_RATE_VS_ATA_NOCOT = 0.717
FULL_SCALE_AA_ICOT_WIN_RATE = 0.355
FULL_SCALE_KAPPA_GPT4O_HUMAN = 0.586
FULL_SCALE_KAPPA_GROUND_TRUTH_TRIAL = 0.389


@dataclass(frozen=True)
class JudgeRequest:
    dialogue_input: str
    response_a: str
    response_b: str
    rubric: str
    prompt: str
    family: str = GPT4O
    reference: str = ''


@dataclass(frozen=True)
class JudgeVerdict:
    winner: str
    explanation: str
    judge: str


@dataclass
class ComparisonRecord:
    pair_id: str
    system_a: str
    system_b: str
    rubric: str
    judge: str
    swapped: bool
    winner: str = None
    explanation: str = ''
    failure: str = None

    @property
    def valid(self):
        return self.failure is None and self.winner in ('A', 'B')

    @property
    def winning_system(self):
        if not self.valid:
            return None
        return self.system_a if self.winner == 'A' else self.system_b


# ==================== PROMPTS ====================

def load_prompt(rubric, family=GPT4O):
    if rubric not in RUBRICS:
        raise RejectedInputError(f"unknown rubric '{rubric}', expected one of {RUBRICS}")
    if family == GPT4O:
        name = f"{rubric}_gpt4o.txt"
    elif family == PROMETHEUS:
        name = 'prometheus_relative.txt'
    else:
        raise RejectedInputError(f"unknown judge prompt family '{family}'")
    with open(os.path.join(PROMPT_DIR, name), 'r', encoding='utf-8') as f:
        return Template(f.read())


def prometheus_rubric(rubric):
    with open(os.path.join(PROMPT_DIR, 'prometheus_rubrics.json'), 'r', encoding='utf-8') as f:
        entry = json.load(f)[rubric]
    lines = [f"[{entry['criteria']}]"]
    lines += [f"Score {i}: {entry[f'score{i}_description']}" for i in range(1, 6)]
    return '\n'.join(lines)


def render_judge_prompt(rubric, dialogue_input, response_a, response_b, family=GPT4O):
    slots = {'dialogue_input': dialogue_input, 'response_a': response_a, 'response_b': response_b}
    if family == PROMETHEUS:
        slots['rubric'] = prometheus_rubric(rubric)
    return load_prompt(rubric, family).substitute(slots)


def build_request(rubric, dialogue_input, response_a, response_b, family=GPT4O, reference=''):
    prompt = render_judge_prompt(rubric, dialogue_input, response_a, response_b, family)
    return JudgeRequest(dialogue_input, response_a, response_b, rubric, prompt, family, reference)


_WINNER_FIELD = re.compile(r"""['"]winner['"]\s*:\s*['"]?\s*([AB])\b""")
_RESULT_TAG = re.compile(r"""\[RESULT\]\s*\(?\s*['"]?([AB])\b""")


def parse_verdict(text, family=GPT4O):
    """Winner 'A' or 'B' from a judge completion; JudgeFailure when absent"""
    pattern = _RESULT_TAG if family == PROMETHEUS else _WINNER_FIELD
    matches = pattern.findall(text or '')
    if not matches:
        raise JudgeFailure(f"no winner field in judge output: {(text or '')[:80]!r}")
    return matches[-1]


# ==================== JUDGES ====================

class StubJudge:
    """Offline oracle: the response with lower WER against the reference wins, then lower CER; ties go to A"""

    name = 'stub'

    def judge(self, request):
        def distance(text):
            wer = compute_wer(text, request.reference)
            cer = word_edit_distance(list(text), list(request.reference)) / max(1, len(request.reference))
            return wer, cer

        score_a, score_b = distance(request.response_a), distance(request.response_b)
        winner = 'B' if score_b < score_a else 'A'
        explanation = f"WER/CER A={score_a[0]:.3f}/{score_a[1]:.3f} B={score_b[0]:.3f}/{score_b[1]:.3f}"
        return JudgeVerdict(winner=winner, explanation=explanation, judge=self.name)


class EndpointJudge:
    """Chat-completions style endpoint: one text prompt in, one completion out"""

    def __init__(self, endpoint, model, api_key=None, family=GPT4O, timeout=60):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.family = family
        self.timeout = timeout
        self.name = f"{family}:{model}"

    @classmethod
    def from_env(cls, family=GPT4O, timeout=60):
        load_dotenv()
        endpoint = os.environ.get('JUDGE_ENDPOINT', 'https://api.openai.com/v1/chat/completions')
        model = os.environ.get('JUDGE_MODEL', 'gpt-4o')
        api_key = os.environ.get('JUDGE_API_KEY')
        if not api_key:
            logger.warning("JUDGE_API_KEY is not set; requests will be sent without authorization")
        return cls(endpoint, model, api_key, family, timeout)

    def complete(self, prompt):
        headers = {'Content-Type': 'application/json'}
        if self.api_key:
            headers['Authorization'] = f"Bearer {self.api_key}"
        payload = {'model': self.model, 'temperature': 0,
                   'messages': [{'role': 'user', 'content': prompt}]}
        try:
            response = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            response.raise_for_status()
            data = response.json()
        except (requests.exceptions.RequestException, ValueError) as e:
            raise JudgeFailure(f"judge endpoint error: {e}") from e
        try:
            return data['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError):
            if isinstance(data, dict) and 'text' in data:
                return data['text']
            raise JudgeFailure("unexpected judge response shape")

    def judge(self, request):
        text = self.complete(request.prompt)
        return JudgeVerdict(winner=parse_verdict(text, self.family), explanation=text, judge=self.name)


def judge_pair(request, judge, max_attempts=3, backoff=0.5):
    """Submit with bounded retries; raises JudgeFailure once attempts are exhausted"""
    last_error = None
    for attempt in range(1, max_attempts + 1):
        try:
            return judge.judge(request)
        except JudgeFailure as e:
            last_error = e
            logger.warning("Judge %s attempt %d/%d failed: %s", judge.name, attempt, max_attempts, e)
            if attempt < max_attempts and backoff:
                time.sleep(backoff * attempt)
    raise JudgeFailure(f"judge {judge.name} failed after {max_attempts} attempts: {last_error}")


# ==================== PIPELINE ====================

def transcribe_outputs(outputs, cfg):
    """Codec decode of every output's audio; total"""
    return [decode_audio(getattr(o, 'output_audio', o), cfg) for o in outputs]


def _judge_record(judge, request, record, max_attempts, backoff):
    try:
        verdict = judge_pair(request, judge, max_attempts, backoff)
        record.winner = verdict.winner
        record.explanation = verdict.explanation
    except JudgeFailure as e:
        record.failure = str(e)
    return record


def compare_systems(system_texts, pairs, opponent, judges, rubrics=RUBRICS, swap=True, max_in_flight=4,
                    max_attempts=3, backoff=0.5, records_path=None):
    """
    Judge every system against `opponent` on every pair, rubric and judge.
    With swap on, each logical comparison is run in both orders.
    """
    if opponent not in system_texts:
        raise RejectedInputError(f"opponent '{opponent}' has no outputs")
    for name, texts in system_texts.items():
        if len(texts) != len(pairs):
            raise RejectedInputError(f"system '{name}' has {len(texts)} outputs for {len(pairs)} pairs")

    jobs = []
    for system, texts in system_texts.items():
        if system == opponent:
            continue
        for i, pair in enumerate(pairs):
            for judge in judges:
                family = getattr(judge, 'family', GPT4O)
                for rubric in rubrics:
                    orders = [(system, opponent, texts[i], system_texts[opponent][i], False)]
                    if swap:
                        orders.append((opponent, system, system_texts[opponent][i], texts[i], True))
                    for sys_a, sys_b, text_a, text_b, swapped in orders:
                        request = build_request(rubric, pair.transcript, text_a, text_b, family, pair.response_text)
                        record = ComparisonRecord(pair.pair_id, sys_a, sys_b, rubric, judge.name, swapped)
                        jobs.append((judge, request, record))

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        futures = [pool.submit(_judge_record, judge, request, record, max_attempts, backoff)
                   for judge, request, record in jobs]
        records = [f.result() for f in futures]

    if records and not any(r.valid for r in records):
        raise JudgeFailure(f"all {len(records)} judge comparisons failed")
    failed = sum(not r.valid for r in records)
    if failed:
        logger.warning("%d of %d judge comparisons failed and are excluded", failed, len(records))
    if records_path:
        save_records(records, records_path)
    return records


def _logical_key(record):
    return record.pair_id, record.rubric, record.judge, frozenset((record.system_a, record.system_b))


def resolve_comparisons(records):
    """
    Logical outcomes {key: winning system or None}. With both orders present a
    system must win both; an order-inconsistent or failed comparison resolves to None.
    """
    groups = {}
    for record in records:
        groups.setdefault(_logical_key(record), []).append(record)
    outcomes = {}
    for key, group in groups.items():
        if any(not r.valid for r in group):
            outcomes[key] = None
            continue
        winners = {r.winning_system for r in group}
        outcomes[key] = winners.pop() if len(winners) == 1 else None
    return outcomes


def win_rate(records, system, opponent=None, rubric=None, judge=None):
    """wins(system) / decided comparisons involving system; failures and inconsistencies excluded"""
    selected = [r for r in records
                if system in (r.system_a, r.system_b)
                and (opponent is None or opponent in (r.system_a, r.system_b))
                and (rubric is None or r.rubric == rubric)
                and (judge is None or r.judge == judge)]
    decided = [winner for winner in resolve_comparisons(selected).values() if winner is not None]
    if not decided:
        raise RejectedInputError(f"no valid comparisons for system '{system}'")
    return sum(w == system for w in decided) / len(decided)


def win_rate_table(records, opponent):
    """Per system: win rate against `opponent` per (judge, rubric) and the average over them"""
    systems = sorted({s for r in records for s in (r.system_a, r.system_b)} - {opponent})
    cells = sorted({(r.judge, r.rubric) for r in records})
    table = {}
    for system in systems:
        row = {}
        for judge, rubric in cells:
            try:
                row[f"{judge}/{rubric}"] = win_rate(records, system, opponent, rubric, judge)
            except RejectedInputError:
                row[f"{judge}/{rubric}"] = None
        rates = [v for v in row.values() if v is not None]
        row['average'] = float(np.mean(rates)) if rates else None
        table[system] = row
    return table


def comparison_summary(records):
    outcomes = resolve_comparisons(records)
    return {
        'records': len(records),
        'failures': sum(r.failure is not None for r in records),
        'logical_comparisons': len(outcomes),
        'order_inconsistent': sum(w is None for w in outcomes.values()),
    }


def save_records(records, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(asdict(record), sort_keys=True, ensure_ascii=False) + '\n')
    return path


def load_records(path):
    with open(path, 'r', encoding='utf-8') as f:
        return [ComparisonRecord(**json.loads(line)) for line in f if line.strip()]


def qualitative_samples(system_texts, pairs, count=3):
    """First few dialogue inputs with every system's transcribed response"""
    samples = []
    for i, pair in enumerate(pairs[:count]):
        samples.append({
            'pair_id': pair.pair_id,
            'input': pair.transcript,
            'responses': {name: texts[i] for name, texts in system_texts.items()},
        })
    return samples


# ==================== AGREEMENT ====================

def cohens_kappa(ratings_a, ratings_b):
    """(p_o - p_e) / (1 - p_e) from the confusion matrix of two raters"""
    ratings_a, ratings_b = list(ratings_a), list(ratings_b)
    if len(ratings_a) != len(ratings_b):
        raise RejectedInputError(f"rating sequences differ in length: {len(ratings_a)} vs {len(ratings_b)}")
    if not ratings_a:
        raise RejectedInputError("kappa needs at least one rated item")

    categories = sorted(set(ratings_a) | set(ratings_b), key=str)
    index = {c: i for i, c in enumerate(categories)}
    confusion = np.zeros((len(categories), len(categories)))
    np.add.at(confusion, ([index[r] for r in ratings_a], [index[r] for r in ratings_b]), 1)

    n = confusion.sum()
    p_o = np.trace(confusion) / n
    p_e = float(confusion.sum(axis=1) @ confusion.sum(axis=0)) / (n * n)
    if p_e == 1.0:
        return 1.0
    return float((p_o - p_e) / (1.0 - p_e))


def load_ratings(path):
    """One categorical rating per non-blank line"""
    with open(path, 'r', encoding='utf-8') as f:
        return [line.strip() for line in f if line.strip()]
