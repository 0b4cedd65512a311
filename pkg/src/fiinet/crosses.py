"""Explicit feature-cross construction (the Split stage).

All order-2 and order-3 field combinations are enumerated once, in
lexicographic order, into a fixed channel layout: pair channels first,
triple channels after.  Each cross is materialized as the plain Hadamard
product of the participating field embeddings; the per-channel attention
weights and the downstream network absorb any per-cross scaling.

Both branch tensors live on the shared C-channel axis with zero-filled
foreign slots, so the elementwise branch fusion degenerates to a
concatenation of the live channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import engine as eg
from .errors import ShapeError


def enumerate_pairs(num_fields: int) -> list[tuple[int, int]]:
    """All (i,j) with i<j in lexicographic order; length f(f-1)/2."""
    if num_fields < 2:
        raise ShapeError("need at least 2 fields to enumerate pairs")
    return list(combinations(range(num_fields), 2))


def enumerate_triples(num_fields: int) -> list[tuple[int, int, int]]:
    """All (i,j,k) with i<j<k in lexicographic order; length f(f-1)(f-2)/6."""
    if num_fields < 3:
        raise ShapeError("need at least 3 fields to enumerate triples")
    return list(combinations(range(num_fields), 3))


@dataclass(frozen=True)
class ChannelLayout:
    """Fixed channel order consumed by the attention layer and the reports.

    Channels 0..C2-1 are the pair crosses, C2..C-1 the triple crosses.
    Immutable after model construction.
    """

    num_fields: int
    pairs: tuple[tuple[int, int], ...]
    triples: tuple[tuple[int, int, int], ...]

    @classmethod
    def build(cls, num_fields: int, orders: tuple[int, ...] = (2, 3)) -> "ChannelLayout":
        pairs = tuple(enumerate_pairs(num_fields)) if 2 in orders else ()
        triples = tuple(enumerate_triples(num_fields)) if 3 in orders else ()
        if not pairs and not triples:
            raise ShapeError("channel layout needs at least one cross order")
        return cls(num_fields=num_fields, pairs=pairs, triples=triples)

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    @property
    def num_channels(self) -> int:
        return len(self.pairs) + len(self.triples)

    def channel_fields(self, channel: int) -> tuple[int, ...]:
        if channel < len(self.pairs):
            return self.pairs[channel]
        return self.triples[channel - len(self.pairs)]

    def channel_order(self, channel: int) -> int:
        return 2 if channel < len(self.pairs) else 3


def _validate_embeddings(embeddings: eg.Tensor, layout: ChannelLayout) -> None:
    if embeddings.data.ndim != 3 or embeddings.data.shape[1] != layout.num_fields:
        raise ShapeError(
            f"expected embeddings of shape (B,{layout.num_fields},k), "
            f"got {embeddings.data.shape}"
        )


def build_branch_2(embeddings: eg.Tensor, layout: ChannelLayout) -> eg.Tensor:
    """Second-order branch: pair channel (i,j) holds e_i * e_j elementwise.

    Returns (B,C,k) on the full layout with triple channels all-zero.
    """
    _validate_embeddings(embeddings, layout)
    if not layout.pairs:
        raise ShapeError("layout carries no pair channels")
    i_idx = np.fromiter((p[0] for p in layout.pairs), dtype=np.intp)
    j_idx = np.fromiter((p[1] for p in layout.pairs), dtype=np.intp)
    live = eg.mul(eg.take_fields(embeddings, i_idx), eg.take_fields(embeddings, j_idx))
    return eg.pad_channels(live, layout.num_channels, 0)


def build_branch_3(embeddings: eg.Tensor, layout: ChannelLayout) -> eg.Tensor:
    """Third-order branch: triple channel (i,j,k) holds e_i * e_j * e_k.

    Returns (B,C,k) on the full layout with pair channels all-zero.
    """
    _validate_embeddings(embeddings, layout)
    if not layout.triples:
        raise ShapeError("layout carries no triple channels")
    i_idx = np.fromiter((t[0] for t in layout.triples), dtype=np.intp)
    j_idx = np.fromiter((t[1] for t in layout.triples), dtype=np.intp)
    k_idx = np.fromiter((t[2] for t in layout.triples), dtype=np.intp)
    live = eg.hadamard(
        eg.take_fields(embeddings, i_idx),
        eg.take_fields(embeddings, j_idx),
        eg.take_fields(embeddings, k_idx),
    )
    return eg.pad_channels(live, layout.num_channels, layout.num_pairs)


def write_layout(layout: ChannelLayout, field_names: list[str], path) -> None:
    """Dump channel index -> order and field-name tuple, one line per channel."""
    if len(field_names) != layout.num_fields:
        raise ShapeError(
            f"{len(field_names)} field names for a {layout.num_fields}-field layout"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("channel\torder\tfields\n")
        for c in range(layout.num_channels):
            names = ",".join(field_names[i] for i in layout.channel_fields(c))
            f.write(f"{c}\t{layout.channel_order(c)}\t{names}\n")
