"""Splice projector output blocks into an embedded token sequence.

Each image placeholder in a prompt stands for ``n_queries`` consecutive rows
produced by the projector.  The placeholder's own embedding row is never used
— the spliced rows must be the projector outputs themselves, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..errors import AssemblyError
from ..idformer import IDFormerConfig
from ..idformer import forward as idf_forward
from .dataset import InterleavedSample


@dataclass(frozen=True)
class AssembledSample:
    """Spliced sequence ready for the decoder.

    ``token_ids`` holds -1 on image rows; ``resp_mask`` is True on supervised
    rows (the response tokens and the trailing end marker).  ``image_rows``
    records, per spliced block, ``(block_index, start_row, n_rows)`` so
    gradients can be routed back to the projector.
    """

    embeddings: np.ndarray
    token_ids: np.ndarray
    resp_mask: np.ndarray
    image_rows: tuple[tuple[int, int, int], ...]


def splice_sequence(
    sample: InterleavedSample,
    image_blocks: Sequence[np.ndarray],
    tok_emb: np.ndarray,
) -> AssembledSample:
    """Build the full training sequence from text rows and image blocks.

    ``image_blocks`` is ordered reference blocks first, then test blocks,
    matching the projector's output order.
    """
    sample.validate()
    n_refs = len(sample.id_refs)
    expected = n_refs + len(sample.test_feats)
    if len(image_blocks) != expected:
        raise AssemblyError(f"expected {expected} image blocks, got {len(image_blocks)}")
    d = tok_emb.shape[1]
    rows: list[np.ndarray] = []
    token_ids: list[int] = []
    image_rows: list[tuple[int, int, int]] = []

    def push_token(token: int) -> None:
        if not 0 <= token < tok_emb.shape[0]:
            raise AssemblyError(f"token id {token} outside embedding table")
        rows.append(tok_emb[token])
        token_ids.append(token)

    def push_block(index: int) -> None:
        block = image_blocks[index]
        if block.ndim != 2 or block.shape[1] != d:
            raise AssemblyError(f"image block {index} has shape {block.shape}")
        image_rows.append((index, len(token_ids), block.shape[0]))
        for row in block:
            rows.append(row)
            token_ids.append(-1)

    for segment in sample.prompt:
        if segment.kind == "text":
            for token in segment.tokens:
                push_token(token)
        elif segment.kind == "id_slot":
            push_block(segment.index)
        else:
            push_block(n_refs + segment.index)
    prompt_len = len(token_ids)
    for token in sample.response:
        push_token(token)

    mask = np.zeros(len(token_ids), dtype=bool)
    mask[prompt_len:] = True
    return AssembledSample(
        embeddings=np.stack(rows),
        token_ids=np.array(token_ids, dtype=np.int64),
        resp_mask=mask,
        image_rows=tuple(image_rows),
    )


def assemble_embeddings(
    sample: InterleavedSample,
    idf_params: Mapping[str, np.ndarray],
    idf_config: IDFormerConfig,
    tok_emb: np.ndarray,
    ablate_modulate: bool = False,
) -> AssembledSample:
    """Run the projector on the sample's features and splice the results."""
    blocks = idf_forward(
        idf_params,
        idf_config,
        [ref.feats for ref in sample.id_refs],
        list(sample.test_feats),
        ablate_modulate=ablate_modulate,
    )
    return splice_sequence(sample, blocks, tok_emb)
