"""The three ranking architectures.

* ``ITEModel`` fuses a GMF branch and an MLP tower into an implicit-layer
  representation, reads off the implicit probability, then feeds the same
  representation through an explicit tower for the explicit probability.
* ``BertITEModel`` replaces the fusion network with a bidirectional
  transformer over [user; recent items; target item] rows; the user row of
  the final layer, gated by the target item embedding, plays the role of
  the implicit layer.
* Side-information variants extend either model by projecting per-user
  category-frequency vectors and per-item category multi-hots into the
  embedding space at lookup time.

Both models output a pair of probabilities (implicit, explicit); the
ranking score is their product.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import ConfigError, ParameterRegistry, Tensor

VARIANTS = {
    "ite": ("ite", "none"),
    "ite-si": ("ite", "user_and_item"),
    "ite-ossi": ("ite", "item_only"),
    "bert-ite": ("bert", "none"),
    "bert-ite-si": ("bert", "user_and_item"),
    "bert-ite-ossi": ("bert", "item_only"),
}

SIDE_MODES = ("none", "item_only", "user_and_item")


@dataclass
class ModelConfig:
    embedding_dim: int = 16              # K
    seq_len: int = 20                    # n recent items ahead of the target
    transformer_layers: int = 2          # L
    attention_heads: int = 2             # h
    implicit_mlp_layers: int = 3         # depth of the fusion tower (ITE)
    explicit_mlp_layers: int = 3         # depth of the explicit tower
    dropout: float = 0.1
    side_info_mode: str = "none"
    side_dim: int = 0                    # T (category count)

    def validate(self) -> None:
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.embedding_dim % self.attention_heads != 0:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} not divisible by attention_heads {self.attention_heads}")
        if self.side_info_mode not in SIDE_MODES:
            raise ConfigError(f"side_info_mode must be one of {SIDE_MODES}, got {self.side_info_mode!r}")
        if self.side_info_mode != "none" and self.side_dim <= 0:
            raise ConfigError("side_info_mode requires side_dim > 0")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")

    def to_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "seq_len": self.seq_len,
            "transformer_layers": self.transformer_layers,
            "attention_heads": self.attention_heads,
            "implicit_mlp_layers": self.implicit_mlp_layers,
            "explicit_mlp_layers": self.explicit_mlp_layers,
            "dropout": self.dropout,
            "side_info_mode": self.side_info_mode,
            "side_dim": self.side_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class ForwardResult:
    """Batched forward outputs plus the embedding vectors the batch touched
    (the inputs to the L2 regularizer)."""
    x_hat: Tensor                     # implicit probabilities, shape [B]
    y_hat: Tensor                     # explicit probabilities, shape [B]
    embedding_rows: list = field(default_factory=list)


def _implicit_tower_widths(k: int, depth: int) -> list[int]:
    # halving tower ending at K: depth 3 gives 4K -> 2K -> K
    return [k * 2 ** (depth - 1 - j) for j in range(depth)]


def _explicit_tower_widths(in_dim: int, depth: int) -> list[int]:
    # width holds at the input then halves: 2K -> K -> K/2 (floor of 1)
    return [max(1, in_dim // 2 ** j) for j in range(depth)]


def _head_scores(phi: Tensor, head: Tensor) -> Tensor:
    """sigma(phi @ h) for a vector head, returned with shape [B]."""
    col = T.reshape(head, (head.shape[0], 1))
    return T.sigmoid(T.reshape(T.matmul(phi, col), (phi.shape[0],)))


class ITEModel:
    """GMF/MLP fusion front end with a chained explicit tower."""

    kind = "ite"

    def __init__(self, num_users: int, num_items: int, config: ModelConfig,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE):
        config.validate()
        self.num_users = num_users
        self.num_items = num_items
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        params = ParameterRegistry()
        k = config.embedding_dim
        mlp_widths = _implicit_tower_widths(k, config.implicit_mlp_layers)
        mlp_emb = mlp_widths[0]  # concat of two such embeddings feeds the tower

        user_side = config.side_dim if config.side_info_mode == "user_and_item" else 0
        item_side = config.side_dim if config.side_info_mode in ("user_and_item", "item_only") else 0

        self.gmf_user = L.EmbeddingTable.build(params, "gmf.user", num_users, k, rng, user_side, dtype)
        self.gmf_item = L.EmbeddingTable.build(params, "gmf.item", num_items, k, rng, item_side, dtype)
        self.mlp_user = L.EmbeddingTable.build(params, "mlp.user", num_users, mlp_emb, rng, user_side, dtype)
        self.mlp_item = L.EmbeddingTable.build(params, "mlp.item", num_items, mlp_emb, rng, item_side, dtype)
        self.implicit_tower = L.dense_tower(params, "implicit_mlp", 2 * mlp_emb, mlp_widths, "relu", rng, dtype)
        self.implicit_head = params.add("implicit_head", L.glorot_uniform(rng, 2 * k, 1, (2 * k,), dtype))
        expl_widths = _explicit_tower_widths(2 * k, config.explicit_mlp_layers)
        self.explicit_tower = L.dense_tower(params, "explicit_mlp", 2 * k, expl_widths, "relu", rng, dtype)
        self.explicit_head = params.add("explicit_head", L.glorot_uniform(rng, expl_widths[-1], 1, (expl_widths[-1],), dtype))
        self.params = params

    def _check_side(self, user_side, item_side) -> None:
        mode = self.config.side_info_mode
        want_user = mode == "user_and_item"
        want_item = mode in ("user_and_item", "item_only")
        if want_user != (user_side is not None):
            raise ConfigError(f"side_info_mode={mode!r}: user side vectors "
                              + ("required" if want_user else "not accepted"))
        if want_item != (item_side is not None):
            raise ConfigError(f"side_info_mode={mode!r}: item side vectors "
                              + ("required" if want_item else "not accepted"))

    def forward(self, users: np.ndarray, items: np.ndarray,
                user_side: Optional[np.ndarray] = None,
                item_side: Optional[np.ndarray] = None) -> ForwardResult:
        """Score a batch of (user, item) pairs. ``users``/``items`` are int
        arrays [B]; side matrices are [B, T] when the variant uses them."""
        self._check_side(user_side, item_side)
        users = np.asarray(users)
        items = np.asarray(items)
        pg = self.gmf_user.lookup(users, user_side)
        qg = self.gmf_item.lookup(items, item_side)
        pm = self.mlp_user.lookup(users, user_side)
        qm = self.mlp_item.lookup(items, item_side)

        phi_gmf = T.elementwise_mul(pg, qg)
        phi_mlp = L.apply_tower(self.implicit_tower, T.concat(pm, qm, axis=-1))
        phi_implicit = T.concat(phi_gmf, phi_mlp, axis=-1)
        x_hat = _head_scores(phi_implicit, self.implicit_head.value)
        phi_explicit = L.apply_tower(self.explicit_tower, phi_implicit)
        y_hat = _head_scores(phi_explicit, self.explicit_head.value)
        return ForwardResult(x_hat, y_hat, [pg, qg, pm, qm])


class BertITEModel:
    """Transformer session encoder feeding the implicit/explicit heads."""

    kind = "bert"

    def __init__(self, num_users: int, num_items: int, config: ModelConfig,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE):
        config.validate()
        self.num_users = num_users
        self.num_items = num_items
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        params = ParameterRegistry()
        k = config.embedding_dim

        user_side = config.side_dim if config.side_info_mode == "user_and_item" else 0
        item_side = config.side_dim if config.side_info_mode in ("user_and_item", "item_only") else 0

        self.user_table = L.EmbeddingTable.build(params, "user", num_users, k, rng, user_side, dtype)
        # one item table shared by sequence rows and the target item
        self.item_table = L.EmbeddingTable.build(params, "item", num_items, k, rng, item_side, dtype)
        self.transformer = [
            L.TransformerLayer(params, f"trm{l}", k, config.attention_heads, rng, config.dropout, dtype)
            for l in range(config.transformer_layers)
        ]
        self.implicit_head = params.add("implicit_head", L.glorot_uniform(rng, k, 1, (k,), dtype))
        expl_widths = _explicit_tower_widths(k, config.explicit_mlp_layers)
        self.explicit_tower = L.dense_tower(params, "explicit_mlp", k, expl_widths, "relu", rng, dtype)
        self.explicit_head = params.add("explicit_head", L.glorot_uniform(rng, expl_widths[-1], 1, (expl_widths[-1],), dtype))
        self.params = params

    def _check_side(self, user_side, seq_side, target_side) -> None:
        mode = self.config.side_info_mode
        want_user = mode == "user_and_item"
        want_item = mode in ("user_and_item", "item_only")
        if want_user != (user_side is not None):
            raise ConfigError(f"side_info_mode={mode!r}: user side vectors "
                              + ("required" if want_user else "not accepted"))
        if want_item != (seq_side is not None) or want_item != (target_side is not None):
            raise ConfigError(f"side_info_mode={mode!r}: item side vectors "
                              + ("required" if want_item else "not accepted"))

    def forward(self, users: np.ndarray, sequences: np.ndarray, targets: np.ndarray,
                user_side: Optional[np.ndarray] = None,
                seq_side: Optional[np.ndarray] = None,
                target_side: Optional[np.ndarray] = None,
                training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ForwardResult:
        """Score a batch of (user, n-item context, target) triples.

        ``sequences`` is int [B, n] (pre-padded); side matrices are
        [B, T] / [B, n, T] when the variant uses them.
        """
        self._check_side(user_side, seq_side, target_side)
        users = np.asarray(users)
        sequences = np.asarray(sequences)
        targets = np.asarray(targets)
        n = self.config.seq_len
        if sequences.ndim != 2 or sequences.shape[1] != n:
            raise ConfigError(f"sequences must be [batch, {n}], got {sequences.shape}")
        b = sequences.shape[0]
        k = self.config.embedding_dim

        u_emb = self.user_table.lookup(users, user_side)          # [B, K]
        seq_emb = self.item_table.lookup(sequences, seq_side)     # [B, n, K]
        tgt_emb = self.item_table.lookup(targets, target_side)    # [B, K]

        x = T.concat_many([
            T.reshape(u_emb, (b, 1, k)),
            seq_emb,
            T.reshape(tgt_emb, (b, 1, k)),
        ], axis=-2)                                               # [B, n+2, K]
        for layer in self.transformer:
            x = L.transformer_layer(x, layer, training, rng)
        u_rep = T.select_row(x, 0)                                # [B, K]

        phi_implicit = T.elementwise_mul(u_rep, tgt_emb)
        x_hat = _head_scores(phi_implicit, self.implicit_head.value)
        phi_explicit = L.apply_tower(self.explicit_tower, phi_implicit)
        y_hat = _head_scores(phi_explicit, self.explicit_head.value)
        return ForwardResult(x_hat, y_hat, [u_emb, seq_emb, tgt_emb])


def build_model(variant: str, num_users: int, num_items: int, config: ModelConfig,
                seed: int = 0, dtype=T.DEFAULT_DTYPE):
    """Construct one of the six named variants; the variant fixes the side
    mode, everything else comes from ``config``."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown model variant {variant!r}; expected one of {sorted(VARIANTS)}")
    kind, side_mode = VARIANTS[variant]
    cfg = replace(config, side_info_mode=side_mode)
    if side_mode == "none":
        cfg = replace(cfg, side_dim=0)
    cls = ITEModel if kind == "ite" else BertITEModel
    return cls(num_users, num_items, cfg, seed=seed, dtype=dtype)


def predict_score(x_hat, y_hat):
    """Ranking score: the product of the implicit and explicit probabilities."""
    return x_hat * y_hat


def ite_forward(model: ITEModel, user: int, item: int,
                side: Optional[tuple] = None) -> tuple[float, float]:
    """Single-pair convenience wrapper returning (implicit, explicit) probs.

    ``side`` is (user_vec, item_vec); pass only the vectors the variant needs.
    """
    user_side = item_side = None
    if side is not None:
        u_vec, i_vec = side
        user_side = None if u_vec is None else np.asarray(u_vec)[None, :]
        item_side = None if i_vec is None else np.asarray(i_vec)[None, :]
    with T.no_grad():
        res = model.forward(np.array([user]), np.array([item]), user_side, item_side)
    return res.x_hat.item(), res.y_hat.item()


def bert_ite_forward(model: BertITEModel, user: int, sequence: Sequence[int], target: int,
                     side: Optional[tuple] = None, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """Single-example convenience wrapper returning (implicit, explicit) probs.

    ``sequence`` must already be padded to the configured length.
    ``side`` is (user_vec, seq_mat, target_vec).
    """
    seq = np.asarray(sequence)
    if seq.shape != (model.config.seq_len,):
        raise ConfigError(f"sequence must have exactly {model.config.seq_len} entries, got {seq.shape}")
    user_side = seq_side = target_side = None
    if side is not None:
        u_vec, s_mat, t_vec = side
        user_side = None if u_vec is None else np.asarray(u_vec)[None, :]
        seq_side = None if s_mat is None else np.asarray(s_mat)[None, :, :]
        target_side = None if t_vec is None else np.asarray(t_vec)[None, :]
    if training:
        res = model.forward(np.array([user]), seq[None, :], np.array([target]),
                            user_side, seq_side, target_side, training=True, rng=rng)
    else:
        with T.no_grad():
            res = model.forward(np.array([user]), seq[None, :], np.array([target]),
                                user_side, seq_side, target_side)
    return res.x_hat.item(), res.y_hat.item()


def encode_side_user(items: Sequence[int], item_categories: Sequence[Sequence[int]],
                     num_categories: int) -> np.ndarray:
    """Category-frequency vector over a user's interacted items.

    Each item increments every category it belongs to; the vector is
    normalized by the total count. A user whose items carry no categories
    gets the all-zero vector (degenerate but valid input downstream).
    """
    counts = np.zeros(num_categories, dtype=np.float64)
    for item in items:
        for c in item_categories[item]:
            counts[c] += 1.0
    total = counts.sum()
    if total > 0:
        counts /= total
    return counts
