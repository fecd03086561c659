"""Neural sublayers in dense and Kronecker-factored forms, shape planning,
and parameter accounting.

Biases and layer-norm parameters are never factored; they are O(d) and
factoring them saves nothing. The factored embedding keeps one row per
vocabulary item in its A factor so lookups stay O(d) per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PlanningError, ShapeError, TokenIdError
from .kronecker import DecompositionReport, KroneckerPair, kron_matmul, nearest_kron
from .tensor_core import Rng


@dataclass
class DenseLinear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None = None  # (out,)

    def __post_init__(self):
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} != weight rows {self.weight.shape[0]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class KroneckerLinear:
    factors: KroneckerPair
    bias: np.ndarray | None = None  # (out,), kept dense

    def __post_init__(self):
        if self.bias is not None and self.bias.shape != (self.factors.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} != product rows {self.factors.shape[0]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors.shape


@dataclass
class KroneckerEmbedding:
    """Factored lookup table: row i of the implied v x d table is
    kron(a_e[i], b_e)."""

    a_e: np.ndarray  # (v, d/f)
    b_e: np.ndarray  # (1, f)

    def __post_init__(self):
        if self.b_e.shape[0] != 1:
            raise ShapeError(f"b_e must be 1 x f, got {self.b_e.shape}")

    @property
    def vocab(self) -> int:
        return self.a_e.shape[0]

    @property
    def dim(self) -> int:
        return self.a_e.shape[1] * self.b_e.shape[1]

    @property
    def factor(self) -> int:
        return self.b_e.shape[1]


def dense_forward(layer: DenseLinear, x: np.ndarray) -> np.ndarray:
    """x @ W^T plus bias broadcast per row."""
    if x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(f"dense_forward: x {x.shape} vs weight {layer.weight.shape}")
    y = x @ layer.weight.T
    if layer.bias is not None:
        y = y + layer.bias
    return y


def kron_forward(layer: KroneckerLinear, x: np.ndarray) -> np.ndarray:
    """Same contract as dense_forward with W = materialize(factors), computed
    through the factored kernel."""
    y = kron_matmul(layer.factors, x)
    if layer.bias is not None:
        y = y + layer.bias
    return y


def embed_lookup(e: KroneckerEmbedding, ids) -> np.ndarray:
    """Embed ids without building the v x d table; Theta(d) per token."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= e.vocab):
        bad = int(ids[(ids < 0) | (ids >= e.vocab)][0])
        raise TokenIdError(f"token id {bad} out of range for vocab {e.vocab}")
    rows = e.a_e[ids]  # (T, d/f)
    return (rows[:, :, None] * e.b_e[0][None, None, :]).reshape(len(ids), e.dim)


def embed_lookup_flops(n_tokens: int, d: int, f: int) -> int:
    """Multiplication count of embed_lookup: one product per output entry.

    Independent of the vocabulary size and linear in d at fixed f.
    """
    del f  # the d/f x f outer product still touches each of the d cells once
    return n_tokens * d


def decompose_linear(
    layer: DenseLinear, shapes: tuple[int, int, int, int], rng: Rng | None = None
) -> tuple[KroneckerLinear, DecompositionReport]:
    """Nearest-Kronecker initialization of a factored layer from a dense one.

    The bias is copied unchanged.
    """
    m1, n1, m2, n2 = shapes
    pair, report = nearest_kron(layer.weight, m1, n1, m2, n2, rng=rng)
    bias = None if layer.bias is None else layer.bias.copy()
    return KroneckerLinear(factors=pair, bias=bias), report


def param_count(layer) -> int:
    """Stored real parameters of a single layer object."""
    if isinstance(layer, DenseLinear):
        return layer.weight.size + (0 if layer.bias is None else layer.bias.size)
    if isinstance(layer, KroneckerLinear):
        return layer.factors.param_count + (0 if layer.bias is None else layer.bias.size)
    if isinstance(layer, KroneckerEmbedding):
        return layer.a_e.size + layer.b_e.size
    if isinstance(layer, np.ndarray):
        return layer.size
    raise TypeError(f"param_count: unsupported layer type {type(layer).__name__}")


def plan_shapes(m: int, n: int, target_factor: int) -> tuple[int, int, int, int]:
    """Factor shapes (m1, n1, m2, n2) for compressing an m x n matrix.

    Follows the convention that B stays tiny (each dim 1 or 2) and A carries
    the bulk: factor 2 halves m when possible (B = 2x1), otherwise halves n
    (B = 1x2); factor 4 halves both (B = 2x2). The achieved compression
    factor approaches ``target_factor`` as m*n grows.
    """
    if target_factor < 1:
        raise PlanningError(f"target factor must be >= 1, got {target_factor}")
    if target_factor == 2:
        if m % 2 == 0:
            return (m // 2, n, 2, 1)
        if n % 2 == 0:
            return (m, n // 2, 1, 2)
        raise PlanningError(f"no divisor split for ({m}, {n}) at factor 2: both dims odd")
    if target_factor == 4:
        if m % 2 == 0 and n % 2 == 0:
            return (m // 2, n // 2, 2, 2)
        raise PlanningError(f"no divisor split for ({m}, {n}) at factor 4: need both dims even")
    raise PlanningError(
        f"target factor {target_factor} unsupported: B dims are limited to 1 or 2, "
        "so only factors 2 and 4 are plannable"
    )


@dataclass
class CompressionSchedule:
    """Which tensors get factored and into what shapes.

    ``layer_indices`` lists the transformer blocks (numbered from 0) whose
    projection matrices are replaced. The default selects blocks 1, 3, ... ,
    i.e. half of the layers. ``include_wo`` also factors the attention output
    projection of a selected block; the feed-forward projections follow the
    convention that c_proj's factor shapes are the transpose of c_fc's.
    """

    layer_indices: tuple[int, ...]
    compress_embedding: bool = True
    embedding_factor: int = 2
    include_wo: bool = True
    shape_qkv: tuple[int, int, int, int] = ()
    shape_wo: tuple[int, int, int, int] = ()
    shape_cfc: tuple[int, int, int, int] = ()
    shape_cproj: tuple[int, int, int, int] = ()
    factor: int = 2

    @staticmethod
    def odd_layers(n_layers: int) -> tuple[int, ...]:
        return tuple(i for i in range(n_layers) if i % 2 == 1)

    @staticmethod
    def for_dims(
        n_layers: int,
        d_model: int,
        d_ff: int,
        factor: int = 2,
        layers: str | tuple[int, ...] = "odd",
        compress_embedding: bool = True,
        embedding_factor: int | None = None,
        include_wo: bool = True,
    ) -> "CompressionSchedule":
        if isinstance(layers, str):
            if layers == "odd":
                idx = CompressionSchedule.odd_layers(n_layers)
            elif layers == "even":
                idx = tuple(i for i in range(n_layers) if i % 2 == 0)
            elif layers == "all":
                idx = tuple(range(n_layers))
            elif layers == "none":
                idx = ()
            else:
                raise PlanningError(f"unknown layer selector {layers!r}")
        else:
            idx = tuple(sorted(set(int(i) for i in layers)))
            for i in idx:
                if i < 0 or i >= n_layers:
                    raise PlanningError(f"layer index {i} out of range for {n_layers} blocks")
        if embedding_factor is None:
            embedding_factor = factor
        if compress_embedding and d_model % embedding_factor != 0:
            raise PlanningError(
                f"embedding factor {embedding_factor} does not divide d_model {d_model}"
            )
        shape_qkv = plan_shapes(d_model, d_model, factor)
        shape_cfc = plan_shapes(d_ff, d_model, factor)
        m1, n1, m2, n2 = shape_cfc
        return CompressionSchedule(
            layer_indices=idx,
            compress_embedding=compress_embedding,
            embedding_factor=embedding_factor,
            include_wo=include_wo,
            shape_qkv=shape_qkv,
            shape_wo=shape_qkv,
            shape_cfc=shape_cfc,
            shape_cproj=(n1, m1, n2, m2),  # transpose of c_fc per the shape table
            factor=factor,
        )

    def selects(self, layer_index: int) -> bool:
        return layer_index in self.layer_indices

    def embedding_shapes(self, vocab: int, d_model: int) -> tuple[int, int, int, int]:
        f = self.embedding_factor
        if d_model % f != 0:
            raise PlanningError(f"embedding factor {f} does not divide d_model {d_model}")
        return (vocab, d_model // f, 1, f)
