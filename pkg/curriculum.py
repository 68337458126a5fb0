"""
Curriculum Module
Transcript-removal schedule with exponential smoothing and the optimizer reset policy.

    s(t) = min(floor(t / T + o), K_i),   o ~ Exponential(rate=lambda)

o is resampled once per optimization step and shared by the whole batch.
The optimizer is reset whenever floor(t / T) increases.
"""
import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction

from errors import ConfigError

logger = logging.getLogger(__name__)

ASR_STEPS_PER_DROP = 500
TTS_STEPS_PER_DROP = 2000
DEFAULT_LAMBDA = 4.0


@dataclass(frozen=True)
class CurriculumState:
    t: int = 0
    T: int = ASR_STEPS_PER_DROP
    lam: float = DEFAULT_LAMBDA
    o: float = 0.0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"steps per drop T must be positive, got {self.T}")
        if self.lam <= 0:
            raise ConfigError(f"smoothing parameter lambda must be positive, got {self.lam}")
        if self.t < 0 or self.o < 0:
            raise ConfigError("t and o must be non-negative")

    @property
    def deterministic_level(self):
        return self.t // self.T

    def to_dict(self):
        return {'t': self.t, 'T': self.T, 'lam': self.lam, 'o': self.o}

    @classmethod
    def from_dict(cls, data):
        return cls(t=int(data['t']), T=int(data['T']), lam=float(data['lam']), o=float(data['o']))


def sample_offset(lam, rng):
    """Exponential draw with rate lam (mean 1 / lam)"""
    if lam <= 0:
        raise ConfigError(f"smoothing parameter lambda must be positive, got {lam}")
    return float(rng.exponential(1.0 / lam))


def removal_count(state, k_i):
    """Tokens removed at the current step for an example with k_i removable tokens"""
    if k_i < 0:
        raise ConfigError(f"K_i must be non-negative, got {k_i}")
    # exact rational floor, so boundaries do not depend on float rounding
    return min(math.floor(Fraction(state.t, state.T) + Fraction(state.o)), k_i)


def advance(state, rng):
    """One optimization step: t += 1, fresh o. reset_flag marks a deterministic level change."""
    new_state = replace(state, t=state.t + 1, o=sample_offset(state.lam, rng))
    reset_flag = new_state.deterministic_level > state.deterministic_level
    if reset_flag:
        logger.debug("Removal level %d reached at step %d", new_state.deterministic_level, new_state.t)
    return new_state, reset_flag


def removal_probability(t, T, lam, k):
    """Closed-form P(floor(t / T + o) = k) for o ~ Exponential(lam)"""
    a = t / T
    upper = k + 1 - a
    if upper <= 0:
        return 0.0
    lower = max(0.0, k - a)
    return math.exp(-lam * lower) - math.exp(-lam * upper)


def steps_to_full_removal(T, k_max):
    """Deterministic step at which every example with <= k_max tokens is fully removed"""
    return T * k_max


def scaled_steps_per_drop(stage_steps, k_max, margin=2):
    """Desk-scale T so that full removal completes inside the stage"""
    return max(1, stage_steps // max(1, k_max + margin))
