"""Post-LN transformer encoder with feature-modulation hooks.

Each block exposes two sites right after its LayerNorms where per-token
scale/shift matrices may be applied::

    H_hat = gamma1 * LN(H + Attn(H)) + beta1
    H_out = gamma2 * LN(H_hat + FF(H_hat)) + beta2

Without modulation a block is the plain BERT-style block.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .kfm import apply_modulation
from .layers import INIT_STD, LayerNorm, Linear, Module, normal


@dataclass
class TransformerConfig:
    num_layers: int = 4
    hidden: int = 64
    intermediate: int = 256
    num_heads: int = 4
    vocab_size: int = 1000
    max_len: int = 128
    dropout: float = 0.1
    kfm_locations: tuple = (4,)
    init_std: float = INIT_STD  # std of every weight matrix and embedding

    def __post_init__(self):
        self.kfm_locations = tuple(sorted(int(l) for l in self.kfm_locations))
        self.validate()

    def validate(self):
        if self.hidden % self.num_heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.num_heads} heads")
        bad = [l for l in self.kfm_locations if not 1 <= l <= self.num_layers]
        if bad:
            raise ConfigError(f"KFM locations {bad} outside 1..{self.num_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")


@dataclass
class HiddenStates:
    """H^0 .. H^L; ``layers[0]`` is the embedding output."""

    layers: list = field(default_factory=list)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def final(self):
        return self.layers[-1]


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng, std=INIT_STD):
        self.heads = heads
        self.query = Linear(d, d, rng, std=std)
        self.key = Linear(d, d, rng, std=std)
        self.value = Linear(d, d, rng, std=std)
        self.output = Linear(d, d, rng, std=std)

    def __call__(self, h, key_mask=None, return_weights=False):
        b, n, d = h.shape
        dh = d // self.heads

        def split(x):
            return nx.transpose(nx.reshape(x, (b, n, self.heads, dh)), (0, 2, 1, 3))

        q, k, v = split(self.query(h)), split(self.key(h)), split(self.value(h))
        scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(dh))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        weights = nx.softmax_rows(scores, mask)
        ctx = nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3))
        out = self.output(nx.reshape(ctx, (b, n, d)))
        if return_weights:
            return out, weights
        return out


class FeedForward(Module):
    def __init__(self, d, d_ff, rng, std=INIT_STD):
        self.fc1 = Linear(d, d_ff, rng, std=std)
        self.fc2 = Linear(d_ff, d, rng, std=std)

    def __call__(self, h):
        return self.fc2(nx.gelu(self.fc1(h)))


class Block(Module):
    def __init__(self, cfg, rng):
        self.attention = MultiHeadAttention(cfg.hidden, cfg.num_heads, rng, cfg.init_std)
        self.ln1 = LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.intermediate, rng, cfg.init_std)
        self.ln2 = LayerNorm(cfg.hidden)
        self.dropout = cfg.dropout

    def __call__(self, h, key_mask, mod=None, training=False, rng=None):
        a = nx.dropout(self.attention(h, key_mask), self.dropout, rng, training)
        h_hat = self.ln1(nx.add(h, a))
        if mod is not None:
            h_hat = apply_modulation(h_hat, mod.gamma1, mod.beta1)
        f = nx.dropout(self.ff(h_hat), self.dropout, rng, training)
        out = self.ln2(nx.add(h_hat, f))
        if mod is not None:
            out = apply_modulation(out, mod.gamma2, mod.beta2)
        return out


class Encoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.token_embedding = normal(rng, (cfg.vocab_size, cfg.hidden), cfg.init_std)
        self.position_embedding = normal(rng, (cfg.max_len, cfg.hidden), cfg.init_std)
        self.embedding_ln = LayerNorm(cfg.hidden)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.num_layers)]

    def embed(self, token_ids, training=False, rng=None):
        n = token_ids.shape[1]
        tok = nx.take_rows(self.token_embedding, token_ids)
        pos = nx.take_rows(self.position_embedding, np.arange(n))
        h = self.embedding_ln(nx.add(tok, pos))
        return nx.dropout(h, self.cfg.dropout, rng, training)

    def encode(self, token_ids, modulation=None, attention_mask=None, training=False, rng=None):
        """Run the encoder and return every layer's hidden states.

        ``token_ids`` is [n] or [B, n]. ``modulation`` is either a mapping
        from 1-based layer index to a ``ModulationParams`` or a callable
        ``(layer, H_prev) -> ModulationParams | None`` that is consulted
        right before each block runs. ``attention_mask`` marks real (non-pad)
        tokens.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise DimensionError("token_ids must be [n] or [B, n]")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractError("token id outside vocabulary")
        if ids.shape[1] > self.cfg.max_len:
            raise ContractError(f"sequence length {ids.shape[1]} exceeds {self.cfg.max_len}")
        key_mask = None
        if attention_mask is not None:
            key_mask = np.asarray(attention_mask, dtype=bool).reshape(ids.shape)
        if training and rng is None:
            raise ContractError("training mode needs an explicit rng")

        h = self.embed(ids, training, rng)
        states = [h]
        for layer, block in enumerate(self.blocks, start=1):
            mod = self._lookup(modulation, layer, h)
            if mod is not None:
                if layer not in self.cfg.kfm_locations:
                    raise ConfigError(f"modulation supplied for layer {layer}, "
                                      f"which is not a KFM location {self.cfg.kfm_locations}")
            h = block(h, key_mask, mod, training, rng)
            states.append(h)
        if single:
            states = [nx.reshape(s, s.shape[1:]) for s in states]
        return HiddenStates(states)

    @staticmethod
    def _lookup(modulation, layer, h_prev):
        if modulation is None:
            return None
        if callable(modulation):
            return modulation(layer, h_prev)
        return modulation.get(layer)


def attention_block(attention, h, key_mask=None, return_weights=False):
    """Multi-head self-attention on an unbatched [n, d] input."""
    if h.ndim != 2:
        raise DimensionError("attention_block expects [n, d]")
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[None, :]
    out = attention(nx.reshape(h, (1,) + h.shape), mask, return_weights=return_weights)
    if return_weights:
        out, weights = out
        return nx.reshape(out, h.shape), nx.reshape(weights, weights.shape[1:])
    return nx.reshape(out, h.shape)


def feed_forward_block(ff, h):
    return ff(h)
