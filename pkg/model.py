"""
Model Module
Small decoder-only transformer with optional low-rank adapters on the
attention projections, and cached incremental generation.
"""
import logging
import math
import time
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError, RejectedInputError, RejectedStateError

logger = logging.getLogger(__name__)

INIT_STD = 0.02
ATTENTION_PROJECTIONS = ('q_proj', 'k_proj', 'v_proj', 'o_proj')


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 512
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 128
    feedforward_dim: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ('vocab_size', 'context_length', 'num_layers', 'num_heads', 'model_dim', 'feedforward_dim'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 32
    alpha: float = 32
    target: tuple = ATTENTION_PROJECTIONS
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        for name in self.target:
            if name not in ATTENTION_PROJECTIONS:
                raise ConfigError(f"adapters attach only to attention projections, not '{name}'")


def parameter_count(cfg):
    """Closed-form parameter count of the architecture below"""
    d, f, v, c, n = cfg.model_dim, cfg.feedforward_dim, cfg.vocab_size, cfg.context_length, cfg.num_layers
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
    return v * d + c * d + n * per_layer + 2 * d + (d * v + v)


def adapter_parameter_count(model_cfg, acfg):
    d = model_cfg.model_dim
    return 2 * acfg.rank * d * len(acfg.target) * model_cfg.num_layers


# ==================== LAYERS ====================

class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update scaled by alpha / rank"""

    def __init__(self, base, rank, alpha, generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.randn(rank, base.in_features, generator=generator,
                                               dtype=base.weight.dtype) / math.sqrt(base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        for p in self.base.parameters():
            p.requires_grad = False

    def forward(self, x):
        return self.base(x) + (x @ self.lora_A.T) @ self.lora_B.T * self.scaling


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.model_dim // cfg.num_heads
        self.q_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.k_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.v_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.o_proj = nn.Linear(cfg.model_dim, cfg.model_dim)

    def _heads(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, cache=None):
        b, t, d = x.shape
        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(x))
        v = self._heads(self.v_proj(x))
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        total = k.size(2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # query i sits at absolute position total - t + i
        mask = torch.ones(t, total, dtype=torch.bool, device=x.device).tril(diagonal=total - t)
        scores = scores.masked_fill(~mask, float('-inf'))
        out = F.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).contiguous().view(b, t, d)
        return self.o_proj(out), (k, v)


class Block(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.model_dim)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.model_dim)
        self.ff_in = nn.Linear(cfg.model_dim, cfg.feedforward_dim)
        self.ff_out = nn.Linear(cfg.feedforward_dim, cfg.model_dim)

    def forward(self, x, cache=None):
        attended, new_cache = self.attn(self.ln1(x), cache)
        x = x + attended
        x = x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))
        return x, new_cache


class SpeechLM(nn.Module):
    """Pre-norm decoder-only transformer over the unified text/audio vocabulary"""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.adapter_cfg = None
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.position_embedding = nn.Embedding(cfg.context_length, cfg.model_dim)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.num_layers)])
        self.ln_final = nn.LayerNorm(cfg.model_dim)
        self.lm_head = nn.Linear(cfg.model_dim, cfg.vocab_size)

    def forward(self, tokens, cache=None):
        """tokens: (batch, time). Returns logits and the per-layer key/value cache."""
        past = 0 if cache is None else cache[0][0].size(2)
        t = tokens.size(1)
        if past + t > self.cfg.context_length:
            raise RejectedInputError(f"sequence of {past + t} tokens exceeds context length {self.cfg.context_length}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise RejectedInputError(f"token id outside [0, {self.cfg.vocab_size})")

        positions = torch.arange(past, past + t, device=tokens.device)
        x = self.token_embedding(tokens) + self.position_embedding(positions)[None]
        new_cache = []
        for i, block in enumerate(self.blocks):
            x, layer_cache = block(x, None if cache is None else cache[i])
            new_cache.append(layer_cache)
        return self.lm_head(self.ln_final(x)), new_cache


# ==================== OPERATIONS ====================

def init_model(cfg):
    """Deterministic given cfg.seed: N(0, 0.02) weights, zero biases, unit layer norms"""
    model = SpeechLM(cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                module.weight.copy_(torch.randn(module.weight.shape, generator=generator) * INIT_STD)
                if getattr(module, 'bias', None) is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
    logger.debug("Initialized model with %d parameters (seed=%d)", count_parameters(model), cfg.seed)
    return model


def count_parameters(model, trainable_only=False):
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def forward(model, tokens):
    """Per-position next-token log-probabilities for a 1-D or 2-D token tensor"""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    squeeze = tokens.dim() == 1
    if squeeze:
        tokens = tokens[None]
    logits, _ = model(tokens)
    log_probs = F.log_softmax(logits, dim=-1)
    return log_probs[0] if squeeze else log_probs


def loss(model, inputs, targets, mask):
    """Mean negative log-likelihood over mask-true positions"""
    inputs = torch.as_tensor(inputs, dtype=torch.long)
    targets = torch.as_tensor(targets, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if inputs.shape != targets.shape or inputs.shape != mask.shape:
        raise RejectedInputError(f"shape mismatch: inputs {tuple(inputs.shape)}, targets {tuple(targets.shape)}, "
                                 f"mask {tuple(mask.shape)}")
    if not bool(mask.any()):
        raise RejectedInputError("loss mask selects no positions")
    if inputs.dim() == 1:
        inputs, targets, mask = inputs[None], targets[None], mask[None]

    logits, _ = model(inputs)
    nll = F.cross_entropy(logits.reshape(-1, logits.size(-1)), targets.reshape(-1), reduction='none')
    weights = mask.reshape(-1).to(nll.dtype)
    return (nll * weights).sum() / weights.sum()


def attach_adapters(model, acfg):
    """Freeze every base parameter and wrap the attention projections in LoRA"""
    if model.adapter_cfg is not None:
        raise RejectedStateError("adapters are already attached")
    for p in model.parameters():
        p.requires_grad = False
    generator = torch.Generator().manual_seed(acfg.seed)
    for block in model.blocks:
        for name in acfg.target:
            base = getattr(block.attn, name)
            setattr(block.attn, name, LoRALinear(base, acfg.rank, acfg.alpha, generator))
    model.adapter_cfg = acfg
    logger.info("Attached rank-%d adapters: %d trainable parameters", acfg.rank,
                count_parameters(model, trainable_only=True))
    return model


def unfreeze(model):
    """Make every parameter trainable (full-parameter stages)"""
    for p in model.parameters():
        p.requires_grad = True
    return model


def parameters_finite(model):
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


# ==================== GENERATION ====================

@dataclass(frozen=True)
class StopRule:
    eos_id: int
    max_new_tokens: int = 256


@dataclass(frozen=True)
class DecodeRule:
    greedy: bool = True
    temperature: float = 1.0
    top_k: int = 0
    seed: int = 0
    use_cache: bool = True


@dataclass
class GenerationStats:
    tokens_before_first_audio: int = 0
    latency_wall_clock: float = 0.0
    transcript_token_count: int = 0
    response_token_count: int = 0
    truncated: bool = False
    generated_tokens: int = 0


def _pick(logits, rule, generator):
    if rule.greedy:
        return int(torch.argmax(logits))
    logits = logits / max(rule.temperature, 1e-6)
    if rule.top_k:
        threshold = torch.topk(logits, min(rule.top_k, logits.numel())).values[-1]
        logits = logits.masked_fill(logits < threshold, float('-inf'))
    probs = F.softmax(logits, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


@torch.no_grad()
def generate(model, prefix, stop, decode=DecodeRule(), is_audio=None):
    """
    Autoregressive continuation of `prefix` (a token list or anything with .tokens).
    Returns (new tokens, GenerationStats). The clock starts once the prefix is
    handed to the model and stops when the first audio token is emitted.
    """
    prefix = list(getattr(prefix, 'tokens', prefix))
    if not prefix:
        raise RejectedInputError("generation needs a non-empty prefix")
    if len(prefix) > model.cfg.context_length:
        raise RejectedInputError(f"prefix of {len(prefix)} tokens exceeds context length {model.cfg.context_length}")

    stats = GenerationStats()
    if prefix and prefix[-1] == stop.eos_id:
        return [], stats

    was_training = model.training
    model.eval()
    generator = torch.Generator().manual_seed(decode.seed)
    budget = min(stop.max_new_tokens, model.cfg.context_length - len(prefix))
    generated = []
    first_audio = None

    start = time.perf_counter()
    cache = None
    pending = prefix
    try:
        while len(generated) < budget:
            if decode.use_cache:
                logits, cache = model(torch.tensor([pending], dtype=torch.long), cache)
            else:
                logits, _ = model(torch.tensor([prefix + generated], dtype=torch.long))
            token = _pick(logits[0, -1], decode, generator)
            generated.append(token)
            pending = [token]
            if first_audio is None and is_audio is not None and is_audio(token):
                first_audio = len(generated) - 1
                stats.latency_wall_clock = time.perf_counter() - start
            if token == stop.eos_id:
                break
    finally:
        model.train(was_training)

    stats.generated_tokens = len(generated)
    stats.truncated = not generated or generated[-1] != stop.eos_id
    if first_audio is None:
        stats.tokens_before_first_audio = len(generated)
        stats.latency_wall_clock = time.perf_counter() - start
    else:
        stats.tokens_before_first_audio = first_audio
    return generated, stats
