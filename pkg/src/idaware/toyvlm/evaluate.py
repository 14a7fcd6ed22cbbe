"""Exact-match evaluation of a trained model on interleaved samples."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..idformer import IDFormerConfig
from .dataset import InterleavedSample
from .lm import TinyLMConfig
from .model import greedy_decode
from .vocab import Vocab


def exact_match(
    params: Mapping[str, np.ndarray],
    idf_config: IDFormerConfig,
    lm_config: TinyLMConfig,
    vocab: Vocab,
    samples: Sequence[InterleavedSample],
    ablate_modulate: bool = False,
    max_new: int = 16,
) -> dict:
    """Greedy decode each sample and score exact sequence match per task.

    The gold sequence is the response without its trailing end marker.
    """
    counts: dict[str, list[int]] = {}
    for sample in samples:
        gold = list(sample.response)
        if gold and gold[-1] == vocab.eot_id:
            gold = gold[:-1]
        out = greedy_decode(
            params, idf_config, lm_config, vocab, sample,
            max_new=max_new, ablate_modulate=ablate_modulate,
        )
        hit = int(out == gold)
        bucket = counts.setdefault(sample.task_kind, [0, 0])
        bucket[0] += hit
        bucket[1] += 1
    per_task = {
        kind: {
            "correct": hits,
            "n": n,
            "accuracy": hits / n,
        }
        for kind, (hits, n) in sorted(counts.items())
    }
    total_hits = sum(v["correct"] for v in per_task.values())
    total_n = sum(v["n"] for v in per_task.values())
    return {
        "per_task": per_task,
        "overall": total_hits / total_n if total_n else 0.0,
        "n": total_n,
    }
