"""Experiment execution and persistence.

One run = one variant, several seed replicates, one JSON-lines metrics file
(per-round records, then a single summary line), plus the final model and a
feature dump per replicate. A sweep runs several variants under the same
master seed, so they see identical data and initial models, and writes a
comparison CSV of max-over-rounds accuracy.

Output is fully determined by (config, seed): records carry no timestamps
and floats are serialized with repr, so reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .config import ExperimentConfig
from .data import (
    DomainDataset,
    generate_synthetic_domains,
    load_manifest,
    split_domains,
)
from .federation import VariantFlags, init_global_state, run_round
from .metrics import dump_features
from .nn import classifier_spec, encoder_spec, model_digest, save_model


def safe_tag(tag: str) -> str:
    return "".join(c if c.isalnum() or c == "-" else "-" for c in tag.lower())


def load_domains(
    cfg: ExperimentConfig, replicate_seed: int
) -> tuple[list[DomainDataset], DomainDataset, DomainDataset]:
    if cfg.data == "synthetic":
        domains = generate_synthetic_domains(
            cfg.synthetic_spec(), rng_mod.derive_seed(replicate_seed, rng_mod.DATA)
        )
    else:
        domains = load_manifest(cfg.data)
    return split_domains(domains)


@dataclass
class ReplicateResult:
    replicate: int
    max_tta: float
    final_tta: float
    cum_ge: float | None
    init_digest: str
    records: list[dict]


def run_replicate(
    cfg: ExperimentConfig, flags: VariantFlags, replicate: int
) -> tuple[ReplicateResult, "object", list[DomainDataset]]:
    """Run all rounds of one seed replicate; returns its summary, the final
    state, and the domains (for the feature dump)."""
    rep_seed = rng_mod.derive_seed(cfg.seed, rng_mod.REPLICATE, replicate)
    sources, target_train, target_test = load_domains(cfg, rep_seed)
    n_features = sources[0].n_features
    n_classes = int(max(int(s.y.max()) for s in sources)) + 1
    state = init_global_state(
        rep_seed,
        num_clients=len(sources),
        enc_spec=encoder_spec(n_features, cfg.encoder_hidden, cfg.feature_dim),
        cls_spec=classifier_spec(cfg.feature_dim, cfg.classifier_hidden, n_classes),
        dom_spec=classifier_spec(cfg.feature_dim, cfg.classifier_hidden, 2),
    )
    init_digest = model_digest(state.model)
    hp = cfg.hyperparams()
    records = []
    for _ in range(cfg.rounds):
        state, record = run_round(state, sources, target_train, target_test, flags, hp)
        row = {"replicate": replicate, **record.to_dict()}
        records.append(row)
    ttas = [r["tta_tuned"] for r in records]
    ges = [r["group_effect"] for r in records]
    cum_ge = float(sum(ges)) if all(g is not None for g in ges) else None
    result = ReplicateResult(
        replicate=replicate,
        max_tta=float(max(ttas)),
        final_tta=float(ttas[-1]),
        cum_ge=cum_ge,
        init_digest=init_digest,
        records=records,
    )
    all_domains = [*sources, target_train, target_test]
    return result, state, all_domains


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute every replicate of one variant and persist all artifacts.

    Writes ``metrics_<variant>.jsonl`` (append-only; the summary line marks
    a complete run), ``model_<variant>_rep<i>.npz``, and
    ``features_<variant>_rep<i>.csv`` under the output directory. Returns
    the summary dict.
    """
    flags = cfg.variant_flags()
    tag = safe_tag(flags.tag)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"metrics_{tag}.jsonl"
    results: list[ReplicateResult] = []
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        for rep in range(cfg.replicates):
            result, state, domains = run_replicate(cfg, flags, rep)
            for row in result.records:
                fh.write(json.dumps(row) + "\n")
            fh.flush()
            save_model(state.model, out_dir / f"model_{tag}_rep{rep}.npz")
            dump_features(
                state.model.encoder, domains, out_dir / f"features_{tag}_rep{rep}.csv"
            )
            results.append(result)
        max_mean, max_std = _mean_std([r.max_tta for r in results])
        final_mean, final_std = _mean_std([r.final_tta for r in results])
        cum_ges = [r.cum_ge for r in results]
        summary = {
            "summary": True,
            "variant": flags.tag,
            "seed": cfg.seed,
            "replicates": cfg.replicates,
            "rounds": cfg.rounds,
            "max_tta": [r.max_tta for r in results],
            "max_tta_mean": max_mean,
            "max_tta_std": max_std,
            "final_tta": [r.final_tta for r in results],
            "final_tta_mean": final_mean,
            "final_tta_std": final_std,
            "cum_ge": cum_ges,
            "init_model_digest": [r.init_digest for r in results],
        }
        fh.write(json.dumps(summary) + "\n")
    return summary


def sweep(cfg: ExperimentConfig, variants: list[str]) -> list[dict]:
    """Run several variants under the same master seed and write a
    comparison CSV of max-over-rounds accuracy."""
    from .config import override

    if not variants:
        raise ValueError("empty variant list")
    summaries = []
    for tag in variants:
        summaries.append(run_experiment(override(cfg, variant=tag)))
    out_dir = Path(cfg.out)
    with open(out_dir / "comparison.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant,max_tta_mean,max_tta_std\n")
        for s in summaries:
            fh.write(f"{s['variant']},{s['max_tta_mean']!r},{s['max_tta_std']!r}\n")
    return summaries
