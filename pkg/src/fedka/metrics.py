"""Evaluation criteria: target task accuracy, the per-round group effect of
aggregation (negative transfer), and feature dumps for offline projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .data import DomainDataset
from .nn import EncoderClassifier, forward, model_apply_delta, predict_labels

if TYPE_CHECKING:  # avoid a runtime cycle with the federation module
    from .federation import ClientUpdate


@dataclass
class RoundRecord:
    """Per-round metrics, one JSONL line per record.

    ``tta_global`` is measured right after aggregation (the model the group
    effect compares against); ``tta_tuned`` after the voting fine-tune, i.e.
    the model actually delivered to clients next round (equal to
    ``tta_global`` when voting is off). Fields for disabled building blocks
    are None, never missing.
    """

    round: int
    tta_global: float
    tta_tuned: float
    tta_patch: list[float] | None
    group_effect: float | None
    j_cls: float
    j_dis: float | None
    j_mmd: float | None
    lambda_end: float
    vote_ties: int | None
    exchanges_disentangler: int
    exchanges_mmd: int

    FIELDS = (
        "round",
        "tta_global",
        "tta_tuned",
        "tta_patch",
        "group_effect",
        "j_cls",
        "j_dis",
        "j_mmd",
        "lambda_end",
        "vote_ties",
        "exchanges_disentangler",
        "exchanges_mmd",
    )

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def correct_count(model: EncoderClassifier, dataset: DomainDataset) -> int:
    """Number of eval-mode argmax predictions matching the labels."""
    if not dataset.fully_labeled:
        raise ValueError("accuracy needs a fully labeled dataset")
    return int(np.sum(predict_labels(model, dataset.x) == dataset.y))


def tta(model: EncoderClassifier, dataset: DomainDataset) -> float:
    """Fraction of correctly classified samples; argmax ties resolve to the
    lowest class index."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return correct_count(model, dataset) / len(dataset)


def group_effect_from_counts(
    patch_counts: Sequence[int], aggregate_count: int, n_test: int
) -> float:
    """Group effect from integer correct-counts.

    Evaluating (sum_k c_k - K * c_agg) / (K * n) in integers first makes the
    identities exact: equal counts give 0.0 with no rounding residue.
    """
    k = len(patch_counts)
    if k == 0 or n_test == 0:
        raise ValueError("need at least one update and a non-empty test set")
    return (int(sum(patch_counts)) - k * int(aggregate_count)) / (k * n_test)


def group_effect_detail(
    global_model: EncoderClassifier,
    updates: Sequence["ClientUpdate"],
    aggregated: EncoderClassifier,
    test_set: DomainDataset,
) -> tuple[float, list[float], float]:
    """Group effect plus the per-patch and aggregate accuracies behind it.

    Each client's update is applied to the pre-round global model alone and
    all K+1 models are scored on the full test set. Positive values mean the
    aggregation lost accuracy relative to the average patched model.
    """
    if not updates:
        raise ValueError("no client updates")
    n = len(test_set)
    patch_counts = []
    for u in sorted(updates, key=lambda u: u.client_id):
        patched = model_apply_delta(global_model, u.delta)
        patch_counts.append(correct_count(patched, test_set))
    agg_count = correct_count(aggregated, test_set)
    ge = group_effect_from_counts(patch_counts, agg_count, n)
    return ge, [c / n for c in patch_counts], agg_count / n


def group_effect(
    global_model: EncoderClassifier,
    updates: Sequence["ClientUpdate"],
    aggregated: EncoderClassifier,
    test_set: DomainDataset,
) -> float:
    ge, _, _ = group_effect_detail(global_model, updates, aggregated, test_set)
    return ge


def dump_features(encoder, datasets: Sequence[DomainDataset], path) -> None:
    """Write eval-mode encodings of every dataset to one CSV.

    Columns: domain_id, label (-1 when unlabeled), f0..f{U-1}. Deterministic
    byte-for-byte given the same encoder and datasets.
    """
    width = encoder.spec.out_dim
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("domain_id,label," + ",".join(f"f{j}" for j in range(width)) + "\n")
        for ds in datasets:
            h, _ = forward(encoder, ds.x, "eval")
            y = ds.y
            for i in range(len(ds)):
                label = -1 if y is None else int(y[i])
                fh.write(
                    f"{ds.domain_id},{label},"
                    + ",".join(repr(float(v)) for v in h[i])
                    + "\n"
                )
