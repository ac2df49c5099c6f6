"""Knowledge-conditioned feature modulation.

Four independent MLPs, one per site, map a retrieved entity vector ``v`` to
per-token scale/shift rows: ``gamma = 1 + mlp(v)`` for the two scales and
``beta = mlp(v)`` for the two shifts. Every token of a mention gets the
same rows; tokens outside mentions, and mentions of the null entity, get the
identity (gamma 1, beta 0).
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import AnnotationError, ConfigError, DimensionError
from .layers import MLP, Module
from .numerics import Tensor

NULL_ENTITY = "<null>"
SITES = ("gamma1", "beta1", "gamma2", "beta2")


@dataclass
class KfmConfig:
    gamma1: bool = True
    beta1: bool = True
    gamma2: bool = True
    beta2: bool = True
    hidden: int = 0  # 0 -> model width

    def enabled(self):
        return tuple(s for s in SITES if getattr(self, s))

    def validate(self):
        if not self.enabled():
            raise ConfigError("KFM is active but every modulation flag is off")


@dataclass
class ModulationParams:
    gamma1: Tensor
    beta1: Tensor
    gamma2: Tensor
    beta2: Tensor

    @classmethod
    def identity(cls, shape):
        ones, zeros = np.ones(shape), np.zeros(shape)
        return cls(Tensor(ones), Tensor(zeros), Tensor(ones.copy()), Tensor(zeros.copy()))

    def as_dict(self):
        return {s: getattr(self, s) for s in SITES}


def apply_modulation(normalized, gamma, beta):
    if not (normalized.shape[-2:] == gamma.shape[-2:] == beta.shape[-2:]):
        raise DimensionError(
            f"modulation shapes differ: {normalized.shape}, {gamma.shape}, {beta.shape}")
    return nx.add(nx.mul(gamma, normalized), beta)


def validate_mentions(spans, seq_len):
    """Reject spans outside ``[0, seq_len)`` or overlapping one another.

    Spans are inclusive 0-based ``(start, end)`` token pairs.
    """
    taken = np.zeros(seq_len, dtype=bool)
    for start, end in spans:
        if not 0 <= start <= end < seq_len:
            raise AnnotationError(f"mention ({start}, {end}) outside sequence of length {seq_len}")
        if taken[start:end + 1].any():
            raise AnnotationError(f"mention ({start}, {end}) overlaps another mention")
        taken[start:end + 1] = True


class KfmLayer(Module):
    """The four modulation MLPs of one modulated layer.

    The last affine layer of each MLP starts at zero, so a fresh layer is an
    exact identity modulation.
    """

    def __init__(self, d, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        width = cfg.hidden or d
        self.d = d
        self.gamma1 = MLP(d, width, d, rng, zero_last=True) if cfg.gamma1 else None
        self.beta1 = MLP(d, width, d, rng, zero_last=True) if cfg.beta1 else None
        self.gamma2 = MLP(d, width, d, rng, zero_last=True) if cfg.gamma2 else None
        self.beta2 = MLP(d, width, d, rng, zero_last=True) if cfg.beta2 else None

    def mlps(self):
        return {site: getattr(self, site) for site in SITES}

    def from_vectors(self, vectors, token_node, node_active):
        """Modulation matrices from per-node vectors.

        ``vectors`` is a [N, d] tensor of retrieved entity vectors,
        ``token_node`` an integer array ([n] or [B, n]) giving the node whose
        mention covers each token (-1 for none), and ``node_active`` a boolean
        [N] array; inactive nodes (the null entity) yield identity rows.
        """
        token_node = np.asarray(token_node, dtype=np.int64)
        node_active = np.asarray(node_active, dtype=bool)
        covered = token_node >= 0
        if covered.any():
            covered &= node_active[np.where(covered, token_node, 0)]
        # row 0 of each table is the identity offset
        index = np.where(covered, token_node + 1, 0)
        shape = token_node.shape + (self.d,)
        zero_row = Tensor(np.zeros((1, self.d)))
        out = {}
        for site, mlp in self.mlps().items():
            is_gamma = site.startswith("gamma")
            if mlp is None or not covered.any():
                out[site] = Tensor(np.ones(shape) if is_gamma else np.zeros(shape))
                continue
            table = nx.concat([zero_row, mlp(vectors)], axis=0)
            rows = nx.take_rows(table, index)
            out[site] = nx.add(rows, 1.0) if is_gamma else rows
        return ModulationParams(**out)


def compute_modulation(layer, entity_vectors, mentions, seq_len):
    """Modulation for one sequence.

    ``entity_vectors`` maps entity -> vector [d]; ``mentions`` is a list of
    ``(entity, start, end)`` with inclusive 0-based token spans. Mentions of
    ``NULL_ENTITY`` produce identity rows.
    """
    validate_mentions([(s, e) for _, s, e in mentions], seq_len)
    order = [e for e in entity_vectors if e != NULL_ENTITY]
    node_of = {e: i for i, e in enumerate(order)}
    d = layer.d
    if order:
        vectors = nx.concat([nx.reshape(nx.as_tensor(entity_vectors[e]), (1, d)) for e in order],
                            axis=0)
    else:
        vectors = Tensor(np.zeros((0, d)))
    token_node = np.full(seq_len, -1, dtype=np.int64)
    for entity, start, end in mentions:
        if entity == NULL_ENTITY:
            continue
        token_node[start:end + 1] = node_of[entity]
    return layer.from_vectors(vectors, token_node, np.ones(len(order), dtype=bool))
