"""
Hierarchical Transformer for link prediction.

The entity block encodes every (entity, relation) pair as the three-token
sequence ([CLS], entity, relation) and pools it at the [CLS] position. The
context block reads ([GCLS], source pair, neighbour pairs...) and its [GCLS]
output is scored against the entity table. Neither block uses positional
encodings; slot roles come from type embeddings only.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

import tensor_core as tc
from batcher import Perturbation
from errors import ConfigError, ContractError
from logger import get_logger
from tensor_core import Tensor

logger = get_logger(__name__)

ATTENTION_MASK_VALUE = -1e9

REFERENCE_PARAMETER_COUNT = 16_000_000


@dataclass(frozen=True)
class HitterConfig:
    """
    Model hyperparameters.

    Attributes:
        d_model (int): hidden size of both blocks
        ffn_dim (int): position-wise feed-forward size
        heads (int): attention heads per layer
        entity_layers (int): depth of the entity (bottom) block
        context_layers (int): depth of the context (top) block
        dropout (float): dropout inside the encoder layers
        embedding_dropout (float): dropout on the input token sequences
        label_smoothing (float): smoothing rate of both losses
        context_enabled (bool): false gives the context-independent baseline
        mep_aux_enabled (bool): add the masked-entity recovery loss
        activation (str): "gelu" or "relu"
        norm (str): "pre" or "post" layer normalisation
        init_std (float): std of the normal initialiser
        layer_norm_eps (float): variance floor of every layer norm
        mep_projection (bool): learned transform before the MEP classifier
    """

    d_model: int = 320
    ffn_dim: int = 1280
    heads: int = 8
    entity_layers: int = 3
    context_layers: int = 6
    dropout: float = 0.1
    embedding_dropout: float = 0.6
    label_smoothing: float = 0.1
    context_enabled: bool = True
    mep_aux_enabled: bool = False
    activation: str = "gelu"
    norm: str = "pre"
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12
    mep_projection: bool = False

    def __post_init__(self):
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} must be divisible by heads {self.heads}")
        for key in ("dropout", "embedding_dropout", "label_smoothing"):
            value = getattr(self, key)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{key} must be in [0, 1), got {value}")
        if self.activation not in tc.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if self.entity_layers < 1 or self.context_layers < 0:
            raise ConfigError("entity_layers must be >= 1 and context_layers >= 0")


class Module:
    """Parameter container with train/eval mode, walked in attribute order."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def mode(self):
        return "train" if self.training else "eval"


def _param(array, name):
    return Tensor(array, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, std):
        self.weight = _param(rng.normal(0.0, std, (d_in, d_out)), "weight")
        self.bias = _param(np.zeros(d_out), "bias")

    def __call__(self, x):
        return tc.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d, eps):
        self.gain = _param(np.ones(d), "gain")
        self.bias = _param(np.zeros(d), "bias")
        self.eps = eps

    def __call__(self, x):
        return tc.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Bidirectional self-attention with an additive key mask."""

    def __init__(self, d_model, heads, dropout, rng, std):
        self.heads = heads
        self.query = Linear(d_model, d_model, rng, std)
        self.key = Linear(d_model, d_model, rng, std)
        self.value = Linear(d_model, d_model, rng, std)
        self.output = Linear(d_model, d_model, rng, std)
        self.dropout = dropout

    def __call__(self, x, key_bias, rng):
        n, length, d = x.shape
        head_dim = d // self.heads

        def split(t):
            return tc.transpose(tc.reshape(t, (n, length, self.heads, head_dim)), (0, 2, 1, 3))

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(head_dim))
        if key_bias is not None:
            scores = scores + Tensor(key_bias)
        weights = tc.dropout_mask(tc.softmax_row(scores), self.dropout, self.mode, rng)
        context = tc.reshape(tc.transpose(tc.matmul(weights, v), (0, 2, 1, 3)), (n, length, d))
        return self.output(context)


class EncoderLayer(Module):
    def __init__(self, cfg, rng):
        std = cfg.init_std
        self.attention = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout, rng, std)
        self.attention_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.ffn_in = Linear(cfg.d_model, cfg.ffn_dim, rng, std)
        self.ffn_out = Linear(cfg.ffn_dim, cfg.d_model, rng, std)
        self.ffn_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.activation = tc.ACTIVATIONS[cfg.activation]
        self.pre_norm = cfg.norm == "pre"
        self.dropout = cfg.dropout

    def _ffn(self, x):
        return self.ffn_out(self.activation(self.ffn_in(x)))

    def __call__(self, x, key_bias, rng):
        def drop(t):
            return tc.dropout_mask(t, self.dropout, self.mode, rng)

        if self.pre_norm:
            x = x + drop(self.attention(self.attention_norm(x), key_bias, rng))
            return x + drop(self._ffn(self.ffn_norm(x)))
        x = self.attention_norm(x + drop(self.attention(x, key_bias, rng)))
        return self.ffn_norm(x + drop(self._ffn(x)))


class Encoder(Module):
    """Stack of encoder layers; pre-norm stacks end with a final layer norm."""

    def __init__(self, cfg, num_layers, rng):
        self.layers = [EncoderLayer(cfg, rng) for _ in range(num_layers)]
        self.final_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps) if cfg.norm == "pre" else None

    def __call__(self, x, key_bias, rng):
        for layer in self.layers:
            x = layer(x, key_bias, rng)
        if self.final_norm is not None:
            x = self.final_norm(x)
        return x


@dataclass
class ForwardOutputs:
    """
    Attributes:
        m_src (Tensor): [B, d] entity-block output of the source pair
        t_gcls (Tensor or None): [B, d] context-block [GCLS] output
        t_src (Tensor or None): [B, d] context-block source-slot output
        logits (Tensor): [B, |E|] plausibility of every entity as the target
    """

    m_src: Tensor
    t_gcls: Tensor
    t_src: Tensor
    logits: Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    lp: Tensor
    mep: Tensor


class HitterModel(Module):
    """
    Embedding tables plus the entity and context blocks.

    The entity table is a single parameter used for input lookup, target
    scoring and masked-entity classification.

    Args:
        cfg (HitterConfig): hyperparameters
        num_entities (int): |E|
        num_relations (int): relation table size including reciprocals (2|R|)
        seed (int): seeds initialisation and the dropout stream
    """

    def __init__(self, cfg, num_entities, num_relations, seed=0):
        if num_entities < 1 or num_relations < 1:
            raise ConfigError("model needs at least one entity and one relation")
        self.cfg = cfg
        self.num_entities = num_entities
        self.num_relations = num_relations
        init = np.random.default_rng(seed)
        self.rng = np.random.default_rng([seed, 1])
        d, std = cfg.d_model, cfg.init_std

        self.entity_embeddings = _param(init.normal(0.0, std, (num_entities, d)), "entity_embeddings")
        self.relation_embeddings = _param(init.normal(0.0, std, (num_relations, d)), "relation_embeddings")
        self.cls_token = _param(init.normal(0.0, std, (1, d)), "cls_token")
        self.mask_token = _param(init.normal(0.0, std, (1, d)), "mask_token")
        # cls slot, entity slot, relation slot
        self.entity_type_embeddings = _param(init.normal(0.0, std, (3, d)), "entity_type_embeddings")
        self.entity_encoder = Encoder(cfg, cfg.entity_layers, init)

        self.context_enabled = cfg.context_enabled
        if cfg.context_enabled:
            self.gcls_token = _param(init.normal(0.0, std, (1, d)), "gcls_token")
            # gcls slot, source slot, neighbour slot
            self.context_type_embeddings = _param(init.normal(0.0, std, (3, d)), "context_type_embeddings")
            self.context_encoder = Encoder(cfg, cfg.context_layers, init)
        if cfg.mep_projection:
            self.mep_transform = Linear(d, d, init, std)
            self.mep_norm = LayerNorm(d, cfg.layer_norm_eps)

    @property
    def mask_token_id(self):
        return self.num_entities

    def parameter_count(self):
        return int(np.sum([p.size for p in self.parameters()]))

    def check_parameter_budget(self, reference=REFERENCE_PARAMETER_COUNT, tolerance=0.2):
        """Raise ContractError when the parameter count leaves the +-tolerance band around reference."""
        count = self.parameter_count()
        if abs(count - reference) > tolerance * reference:
            raise ContractError(f"parameter count {count} outside {tolerance:.0%} of {reference}")
        return count

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        for name, param in self.named_parameters():
            if name not in state:
                raise ContractError(f"missing parameter {name}")
            if state[name].shape != param.shape:
                raise ContractError(f"shape mismatch for {name}: {state[name].shape} vs {param.shape}")
            param.data[...] = state[name]

    # inputs

    def embed_pairs(self, entity_ids, relation_ids, perturbations=None):
        """
        Build the ([CLS], entity, relation) input sequences.

        Args:
            entity_ids (array-like): [N] entity ids; ``mask_token_id`` selects [MASK]
            relation_ids (array-like): [N]
            perturbations (array-like, optional): [N] codes; MASK entries use [MASK]

        Returns:
            Tensor: [N, 3, d] with type embeddings added and embedding dropout applied
        """
        entity_ids = np.asarray(entity_ids, dtype=np.int64)
        relation_ids = np.asarray(relation_ids, dtype=np.int64)
        if perturbations is not None:
            entity_ids = np.where(np.asarray(perturbations) == Perturbation.MASK, self.mask_token_id, entity_ids)
        n, d = len(entity_ids), self.cfg.d_model
        table = tc.concat([self.entity_embeddings, self.mask_token], axis=0)
        entities = tc.reshape(tc.take(table, entity_ids), (n, 1, d))
        relations = tc.reshape(tc.take(self.relation_embeddings, relation_ids), (n, 1, d))
        cls = tc.broadcast_to(tc.reshape(self.cls_token, (1, 1, d)), (n, 1, d))
        sequence = tc.concat([cls, entities, relations], axis=1) + self.entity_type_embeddings
        return tc.dropout_mask(sequence, self.cfg.embedding_dropout, self.mode, self.rng)

    def entity_block_forward(self, pair_sequences):
        """Encode [N, 3, d] pair sequences and return their [CLS] outputs, [N, d]."""
        encoded = self.entity_encoder(pair_sequences, None, self.rng)
        return encoded[:, 0, :]

    def context_block_forward(self, m_src, neighbor_reprs, neighbor_mask):
        """
        Contextualise the source pair with its neighbour pairs.

        Args:
            m_src (Tensor): [B, d]
            neighbor_reprs (Tensor): [B, C, d]
            neighbor_mask (np.ndarray): [B, C] bool, true at valid slots

        Returns:
            tuple[Tensor, Tensor]: T_gcls [B, d] and T_src [B, d]
        """
        batch, cap, d = neighbor_reprs.shape
        gcls = tc.broadcast_to(tc.reshape(self.gcls_token, (1, 1, d)), (batch, 1, d))
        source = tc.reshape(m_src, (batch, 1, d))
        sequence = tc.concat([gcls, source, neighbor_reprs], axis=1)
        slot_types = np.array([0, 1] + [2] * cap, dtype=np.int64)
        sequence = sequence + tc.take(self.context_type_embeddings, slot_types)
        sequence = tc.dropout_mask(sequence, self.cfg.dropout, self.mode, self.rng)

        valid = np.concatenate([np.ones((batch, 2), dtype=bool), np.asarray(neighbor_mask, dtype=bool)], axis=1)
        key_bias = np.where(valid, 0.0, ATTENTION_MASK_VALUE).astype(sequence.data.dtype)
        encoded = self.context_encoder(sequence, key_bias[:, None, None, :], self.rng)
        return encoded[:, 0, :], encoded[:, 1, :]

    def score_entities(self, query):
        """Dot product of query vectors [B, d] with every entity embedding; [B, |E|]."""
        return tc.matmul(query, tc.transpose(self.entity_embeddings))

    # forward passes

    def forward(self, batch):
        """
        Run the model on a collated batch.

        Returns:
            ForwardOutputs
        """
        batch_size = len(batch)
        d = self.cfg.d_model
        if not self.context_enabled:
            pairs = self.embed_pairs(batch.source_ids, batch.predicate_ids)
            m_src = self.entity_block_forward(pairs)
            return ForwardOutputs(m_src, None, None, self.score_entities(m_src))

        cap = batch.cap
        mask = batch.neighbor_mask
        neighbor_entities = np.where(mask, batch.neighbor_entities, 0).reshape(-1)
        neighbor_relations = np.where(mask, batch.neighbor_relations, 0).reshape(-1)
        pairs = self.embed_pairs(
            np.concatenate([batch.source_ids, neighbor_entities]),
            np.concatenate([batch.predicate_ids, neighbor_relations]),
        )
        pooled = self.entity_block_forward(pairs)
        m_src = pooled[:batch_size]
        neighbors = tc.reshape(pooled[batch_size:], (batch_size, cap, d))
        t_gcls, t_src = self.context_block_forward(m_src, neighbors, mask)
        return ForwardOutputs(m_src, t_gcls, t_src, self.score_entities(t_gcls))

    def forward_no_context(self, src, predicate):
        """
        Context-independent baseline: entity block only.

        Args:
            src (array-like): [B] source ids
            predicate (array-like): [B] relation ids

        Returns:
            Tensor: [B, |E|] logits
        """
        if self.context_enabled:
            raise ContractError("forward_no_context needs a model built with context_enabled=False")
        m_src = self.entity_block_forward(self.embed_pairs(np.atleast_1d(src), np.atleast_1d(predicate)))
        return self.score_entities(m_src)

    # losses

    def lp_loss(self, logits, targets):
        return tc.cross_entropy_smoothed(logits, targets, self.cfg.label_smoothing)

    def mep_loss(self, t_src, original_source_ids, selected):
        """
        Masked-entity recovery loss over the selected examples.

        Returns a zero tensor when the auxiliary loss is disabled, the model has
        no context block, or nothing was selected.
        """
        rows = np.nonzero(np.asarray(selected, dtype=bool))[0]
        if not self.cfg.mep_aux_enabled or t_src is None or not len(rows):
            return Tensor(0.0)
        hidden = t_src[rows]
        if self.cfg.mep_projection:
            hidden = self.mep_norm(tc.gelu(self.mep_transform(hidden)))
        logits = self.score_entities(hidden)
        targets = np.asarray(original_source_ids)[rows]
        return tc.cross_entropy_smoothed(logits, targets, self.cfg.label_smoothing)

    def losses(self, outputs, batch):
        """Total loss L = L_LP + L_MEP with unit weights."""
        lp = self.lp_loss(outputs.logits, batch.target_ids)
        mep = self.mep_loss(outputs.t_src, batch.original_source_ids, batch.selected())
        return LossBreakdown(total=lp + mep, lp=lp, mep=mep)

    def config_dict(self):
        return {
            "model": asdict(self.cfg),
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
        }
