"""The federated round protocol.

Each round: the server ships the global model to every client; clients run
one pass of local training (32 mini-batches of 16 by default) during which
their encoder features travel to the server and feature gradients travel
back (domain-confusion gradients per mini-batch, embedding-matching
gradients per 128-sample macro-batch); the server then aggregates the
weighted client updates, pseudo-labels target samples by majority vote of
the pre-aggregation client models, and fine-tunes the aggregated model on
those labels with a ramped learning rate.

The client/server wire types (FeaturePacket, FeatureGradPacket,
ClientUpdate) are plain serializable records so a networked deployment can
adopt them unchanged. All randomness is drawn from per-client and server
streams, so results do not depend on the order clients are processed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod
from .data import DomainDataset, sample_batch
from .losses import (
    ScheduleClock,
    combined_local_objective,
    disentangler_loss,
    kernel_bank_from,
    lambda_schedule,
    mk_mmd_sq,
    nll_loss,
    ramp,
)
from .metrics import RoundRecord, group_effect_detail, tta
from .nn import (
    AdamState,
    EncoderClassifier,
    ModelDelta,
    ModelParams,
    NetworkSpec,
    adam_init,
    adam_step,
    backward,
    forward,
    init_network,
    model_apply_delta,
    model_clone,
    model_delta,
)


class NonFiniteLossError(RuntimeError):
    """A local training loss became NaN or infinite; the round is aborted."""


# variant tag -> (use_disentangler, use_mmd, use_voting)
_VARIANT_FLAGS = {
    "fedavg": (False, False, False),
    "f-dann": (True, False, False),
    "f-dan": (False, True, False),
    "voting": (False, False, True),
    "disentangler+voting": (True, False, True),
    "disentangler+mk-mmd": (True, True, False),
    "fedka": (True, True, True),
}
VARIANTS = tuple(_VARIANT_FLAGS)


@dataclass(frozen=True)
class VariantFlags:
    """Which of the three building blocks a run enables."""

    use_disentangler: bool
    use_mmd: bool
    use_voting: bool
    tag: str = "custom"

    @classmethod
    def from_tag(cls, tag: str) -> "VariantFlags":
        key = tag.strip().lower()
        if key not in _VARIANT_FLAGS:
            raise ValueError(
                f"unknown variant {tag!r}; expected one of: {', '.join(VARIANTS)}"
            )
        dis, mmd, vote = _VARIANT_FLAGS[key]
        return cls(dis, mmd, vote, key)


@dataclass(frozen=True)
class Hyperparams:
    """Protocol hyperparameters shared by server and clients."""

    batch_size: int = 16
    batches_per_round: int = 32
    rounds: int = 200
    lr: float = 0.0003
    gamma: float = 5.0
    voting_size: int | None = 512  # None: vote on every target-train sample
    mmd_group: int = 8  # mini-batches pooled into one macro-batch
    ge_enabled: bool = True

    def __post_init__(self) -> None:
        if min(self.batch_size, self.batches_per_round, self.rounds) < 1:
            raise ValueError("batch_size, batches_per_round, rounds must be >= 1")
        if self.lr <= 0 or self.gamma <= 0:
            raise ValueError("lr and gamma must be positive")
        if self.voting_size is not None and self.voting_size < 1:
            raise ValueError("voting_size must be >= 1 (or None for all)")
        if self.mmd_group < 2:
            raise ValueError("mmd_group must be >= 2")

    @property
    def samples_per_round(self) -> int:
        return self.batch_size * self.batches_per_round

    @property
    def macro_size(self) -> int:
        return self.batch_size * self.mmd_group


# ---------------------------------------------------------------------------
# wire types

@dataclass
class FeaturePacket:
    """Client -> server: encoder outputs for one mini- or macro-batch."""

    client_id: int
    features: np.ndarray
    sample_indices: np.ndarray

    def to_payload(self) -> dict:
        return {
            "client_id": int(self.client_id),
            "features": self.features.tolist(),
            "sample_indices": [int(i) for i in self.sample_indices],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "FeaturePacket":
        return cls(
            client_id=int(payload["client_id"]),
            features=np.asarray(payload["features"], dtype=np.float64),
            sample_indices=np.asarray(payload["sample_indices"], dtype=np.int64),
        )


@dataclass
class FeatureGradPacket:
    """Server -> client: feature gradients plus the loss values for logging.

    ``grad_disentangler`` is the raw confusion-loss gradient at the packet's
    features; the client applies the reversal sign and the ramp coefficient
    when assembling its encoder gradient. Fields for disabled blocks are
    None.
    """

    client_id: int
    grad_disentangler: np.ndarray | None
    grad_mmd: np.ndarray | None
    j_dis: float | None
    j_mmd: float | None

    def to_payload(self) -> dict:
        return {
            "client_id": int(self.client_id),
            "grad_disentangler": None
            if self.grad_disentangler is None
            else self.grad_disentangler.tolist(),
            "grad_mmd": None if self.grad_mmd is None else self.grad_mmd.tolist(),
            "j_dis": self.j_dis,
            "j_mmd": self.j_mmd,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "FeatureGradPacket":
        def arr(v):
            return None if v is None else np.asarray(v, dtype=np.float64)

        return cls(
            client_id=int(payload["client_id"]),
            grad_disentangler=arr(payload["grad_disentangler"]),
            grad_mmd=arr(payload["grad_mmd"]),
            j_dis=payload["j_dis"],
            j_mmd=payload["j_mmd"],
        )


@dataclass
class ClientUpdate:
    """Client -> server: parameter delta of one local round plus its weight."""

    client_id: int
    delta: ModelDelta
    num_samples: int

    def __post_init__(self) -> None:
        if self.num_samples <= 0:
            raise ValueError("num_samples must be positive")

    def to_payload(self) -> dict:
        return {
            "client_id": int(self.client_id),
            "num_samples": int(self.num_samples),
            "encoder": {k: a.tolist() for k, a in self.delta.encoder.items()},
            "classifier": {k: a.tolist() for k, a in self.delta.classifier.items()},
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ClientUpdate":
        return cls(
            client_id=int(payload["client_id"]),
            delta=ModelDelta(
                encoder={
                    k: np.asarray(a, dtype=np.float64)
                    for k, a in payload["encoder"].items()
                },
                classifier={
                    k: np.asarray(a, dtype=np.float64)
                    for k, a in payload["classifier"].items()
                },
            ),
            num_samples=int(payload["num_samples"]),
        )


ExchangeFn = Callable[[FeaturePacket], FeatureGradPacket]


@dataclass
class ClientRoundResult:
    """Everything one client produces in a round: the wire update, the
    trained local model (snapshotted for voting), and loss/message logs."""

    update: ClientUpdate
    local_model: EncoderClassifier
    j_cls: float
    j_dis: float | None
    j_mmd: float | None
    exchanges_disentangler: int
    exchanges_mmd: int


# ---------------------------------------------------------------------------
# server side of the per-batch exchange

def server_exchange(
    packet: FeaturePacket,
    global_model: EncoderClassifier,
    f_d: ModelParams,
    f_d_adam: AdamState,
    target_batch: np.ndarray,
    flags: VariantFlags,
    hp: Hyperparams,
) -> tuple[FeatureGradPacket, ModelParams, AdamState]:
    """Answer one feature packet.

    Mini-batches feed the domain-confusion block: the client's domain
    classifier takes one Adam step toward separating the two feature sets,
    and the raw confusion gradient w.r.t. the client features is returned.
    Macro-batches (``mmd_group`` mini-batches wide) feed embedding matching:
    the multi-kernel MMD against the global encoding of the target batch is
    computed with a freshly fit bandwidth ladder and its feature gradient is
    returned. Returns the reply packet plus the classifier's new state.
    """
    feats = packet.features
    if target_batch.shape[0] != feats.shape[0]:
        raise ValueError(
            f"target batch rows {target_batch.shape[0]} != packet rows {feats.shape[0]}"
        )
    is_macro = feats.shape[0] == hp.macro_size
    grad_dis = grad_mmd = None
    j_dis = j_mmd = None
    if (flags.use_disentangler and not is_macro) or (flags.use_mmd and is_macro):
        h_target, _ = forward(global_model.encoder, target_batch, "eval")
        if flags.use_disentangler and not is_macro:
            j, g_fd, g_hc, _ = disentangler_loss(feats, h_target, f_d, mode="train")
            f_d, f_d_adam = adam_step(f_d, g_fd, f_d_adam, hp.lr)
            grad_dis, j_dis = g_hc, j
        if flags.use_mmd and is_macro:
            bank = kernel_bank_from(feats, h_target)
            j, g = mk_mmd_sq(feats, h_target, bank)
            grad_mmd, j_mmd = g, j
    reply = FeatureGradPacket(packet.client_id, grad_dis, grad_mmd, j_dis, j_mmd)
    return reply, f_d, f_d_adam


# ---------------------------------------------------------------------------
# client side

def client_local_round(
    client_id: int,
    global_model: EncoderClassifier,
    dataset: DomainDataset,
    exchange: ExchangeFn,
    flags: VariantFlags,
    round_index: int,
    rng: np.random.Generator,
    hp: Hyperparams,
) -> ClientRoundResult:
    """One local training pass starting from the delivered global model.

    Draws the round pool without replacement, then per mini-batch: forward,
    classification NLL, optional feature/gradient exchange, backward, Adam.
    Exchange gradients enter the encoder's feature-gradient slot scaled by
    the ramp coefficient (confusion gradients sign-reversed for ascent,
    matching gradients as-is for descent). The macro-batch matching gradient
    is fetched once per group and scattered to that group's mini-batches.
    """
    if not dataset.fully_labeled:
        raise ValueError("client dataset must be fully labeled")
    if len(dataset) < hp.batch_size:
        raise ValueError(
            f"client dataset of {len(dataset)} samples is smaller than one batch"
        )
    n_pool = min(hp.samples_per_round, len(dataset) - len(dataset) % hp.batch_size)
    pool = sample_batch(dataset, rng, n_pool)
    n_batches = n_pool // hp.batch_size
    local = model_clone(global_model)
    enc_adam = adam_init(local.encoder)
    cls_adam = adam_init(local.classifier)
    j_cls_sum = 0.0
    j_dis_vals: list[float] = []
    j_mmd_vals: list[float] = []
    n_dis = n_mmd = 0
    pending_mmd: np.ndarray | None = None
    pending_j_mmd = 0.0
    for m in range(n_batches):
        clock = ScheduleClock(m, hp.batches_per_round, round_index, hp.rounds, hp.gamma)
        lam = lambda_schedule(clock)
        if flags.use_mmd and m % hp.mmd_group == 0:
            pending_mmd, pending_j_mmd = None, 0.0
            if m + hp.mmd_group <= n_batches:
                rows = pool[m * hp.batch_size : (m + hp.mmd_group) * hp.batch_size]
                h_macro, _ = forward(local.encoder, dataset.x[rows], "eval")
                reply = exchange(FeaturePacket(client_id, h_macro, rows))
                n_mmd += 1
                pending_mmd = reply.grad_mmd
                pending_j_mmd = reply.j_mmd
                j_mmd_vals.append(reply.j_mmd)
        idx = pool[m * hp.batch_size : (m + 1) * hp.batch_size]
        xb, yb = dataset.x[idx], dataset.y[idx]
        h, tape_e = forward(local.encoder, xb, "train")
        log_probs, tape_c = forward(local.classifier, h, "train")
        j_cls, g_lp = nll_loss(log_probs, yb)
        grads_c, gh = backward(local.classifier, tape_c, g_lp)
        j_dis_b = 0.0
        if flags.use_disentangler:
            reply = exchange(FeaturePacket(client_id, h, idx))
            n_dis += 1
            j_dis_b = reply.j_dis
            j_dis_vals.append(reply.j_dis)
            if lam != 0.0:
                gh = gh - lam * reply.grad_disentangler
        if pending_mmd is not None and lam != 0.0:
            offset = (m % hp.mmd_group) * hp.batch_size
            gh = gh + lam * pending_mmd[offset : offset + hp.batch_size]
        try:
            combined_local_objective(j_cls, j_dis_b, pending_j_mmd, lam)
        except ValueError as exc:
            raise NonFiniteLossError(
                f"client {client_id}, round {round_index}, batch {m}: {exc}"
            ) from exc
        grads_e, _ = backward(local.encoder, tape_e, gh)
        new_enc, enc_adam = adam_step(local.encoder, grads_e, enc_adam, hp.lr)
        new_cls, cls_adam = adam_step(local.classifier, grads_c, cls_adam, hp.lr)
        local = EncoderClassifier(new_enc, new_cls)
        j_cls_sum += j_cls
    update = ClientUpdate(client_id, model_delta(local, global_model), n_pool)
    return ClientRoundResult(
        update=update,
        local_model=local,
        j_cls=j_cls_sum / n_batches,
        j_dis=(sum(j_dis_vals) / len(j_dis_vals)) if j_dis_vals else None,
        j_mmd=(sum(j_mmd_vals) / len(j_mmd_vals)) if j_mmd_vals else None,
        exchanges_disentangler=n_dis,
        exchanges_mmd=n_mmd,
    )


# ---------------------------------------------------------------------------
# aggregation, voting, fine-tuning

def fedavg_aggregate(
    global_model: EncoderClassifier, updates: Sequence[ClientUpdate]
) -> EncoderClassifier:
    """Weighted-average aggregation over every parameter, batch-norm running
    statistics included. Updates are folded in client-id order, so the
    result is invariant to the order of the list."""
    if not updates:
        raise ValueError("no client updates")
    total = sum(u.num_samples for u in updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    agg = ModelDelta(
        encoder={k: np.zeros_like(a) for k, a in global_model.encoder.values.items()},
        classifier={
            k: np.zeros_like(a) for k, a in global_model.classifier.values.items()
        },
    )
    for u in ordered:
        w = u.num_samples / total
        for part, acc in (("encoder", agg.encoder), ("classifier", agg.classifier)):
            delta = getattr(u.delta, part)
            if set(delta) != set(acc):
                raise ValueError(f"update {u.client_id}: {part} delta keys mismatch")
            for k, a in delta.items():
                if a.shape != acc[k].shape:
                    raise ValueError(
                        f"update {u.client_id}: shape mismatch for {part}.{k}"
                    )
                acc[k] += w * a
    return model_apply_delta(global_model, agg)


def vote_from_predictions(
    preds: np.ndarray, n_classes: int, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Majority vote over a (clients x samples) prediction matrix.

    Ties are broken uniformly at random among the top vote-getters using the
    caller's stream; non-tied samples never touch it.
    """
    k, n = preds.shape
    votes = np.zeros((n, n_classes), dtype=np.int64)
    rows = np.arange(n)
    for j in range(k):
        votes[rows, preds[j]] += 1
    top = votes.max(axis=1)
    is_top = votes == top[:, None]
    labels = np.argmax(is_top, axis=1)
    tied = np.nonzero(is_top.sum(axis=1) > 1)[0]
    for i in tied:
        candidates = np.nonzero(is_top[i])[0]
        labels[i] = candidates[rng.integers(len(candidates))]
    return labels, int(tied.size)


def federated_vote(
    models: Sequence[EncoderClassifier], x: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Pseudo-labels for target samples by majority vote of client models
    (eval mode)."""
    if not models:
        raise ValueError("need at least one client model")
    if x.shape[0] == 0:
        raise ValueError("empty sample set")
    from .nn import predict_labels

    n_classes = models[0].classifier.spec.out_dim
    preds = np.stack([predict_labels(m, x) for m in models])
    return vote_from_predictions(preds, n_classes, rng)


def fine_tune_global(
    model: EncoderClassifier,
    x: np.ndarray,
    labels: np.ndarray,
    lam: float,
    enc_adam: AdamState,
    cls_adam: AdamState,
    hp: Hyperparams,
) -> tuple[EncoderClassifier, AdamState, AdamState]:
    """Fine-tune the aggregated model on voted labels with learning rate
    ``lam * lr`` through the global model's persistent Adam state.

    ``lam == 0`` returns the model unchanged (no pass is run at all, so the
    batch-norm statistics are untouched too).
    """
    if labels.shape[0] != x.shape[0]:
        raise ValueError("labels length does not match sample count")
    if lam == 0.0:
        return model, enc_adam, cls_adam
    local = model_clone(model)
    lr = lam * hp.lr
    for start in range(0, x.shape[0], hp.batch_size):
        xb = x[start : start + hp.batch_size]
        yb = labels[start : start + hp.batch_size]
        if xb.shape[0] < 2:  # batch norm cannot train on a single row
            break
        h, tape_e = forward(local.encoder, xb, "train")
        log_probs, tape_c = forward(local.classifier, h, "train")
        _, g_lp = nll_loss(log_probs, yb)
        grads_c, gh = backward(local.classifier, tape_c, g_lp)
        grads_e, _ = backward(local.encoder, tape_e, gh)
        new_enc, enc_adam = adam_step(local.encoder, grads_e, enc_adam, lr)
        new_cls, cls_adam = adam_step(local.classifier, grads_c, cls_adam, lr)
        local = EncoderClassifier(new_enc, new_cls)
    return local, enc_adam, cls_adam


# ---------------------------------------------------------------------------
# global state and the round driver

@dataclass
class GlobalState:
    """Everything the server owns: the global model, one domain classifier
    (and optimizer state) per client, the fine-tuning optimizer states, the
    round counter, and the derived random streams."""

    model: EncoderClassifier
    domain_classifiers: list[ModelParams]
    fd_adam: list[AdamState]
    enc_adam: AdamState
    cls_adam: AdamState
    t: int
    server_rng: np.random.Generator
    client_rngs: list[np.random.Generator]


def init_global_state(
    master_seed: int,
    num_clients: int,
    enc_spec: NetworkSpec,
    cls_spec: NetworkSpec,
    dom_spec: NetworkSpec,
) -> GlobalState:
    """Build round-0 state; every stream and init seed is derived from the
    master seed by a fixed path, so adding clients never shifts existing
    streams."""
    model = EncoderClassifier(
        init_network(enc_spec, rng_mod.derive_seed(master_seed, rng_mod.INIT_ENCODER)),
        init_network(
            cls_spec, rng_mod.derive_seed(master_seed, rng_mod.INIT_CLASSIFIER)
        ),
    )
    fds = [
        init_network(
            dom_spec, rng_mod.derive_seed(master_seed, rng_mod.INIT_DOMAIN_CLS, k)
        )
        for k in range(num_clients)
    ]
    return GlobalState(
        model=model,
        domain_classifiers=fds,
        fd_adam=[adam_init(fd) for fd in fds],
        enc_adam=adam_init(model.encoder),
        cls_adam=adam_init(model.classifier),
        t=0,
        server_rng=rng_mod.stream(master_seed, rng_mod.SERVER),
        client_rngs=[
            rng_mod.stream(master_seed, rng_mod.CLIENT, k) for k in range(num_clients)
        ],
    )


def _target_rows(pool_x: np.ndarray, start: int, count: int) -> np.ndarray:
    if start + count <= pool_x.shape[0]:
        return pool_x[start : start + count]
    return pool_x[np.arange(start, start + count) % pool_x.shape[0]]


def _serve_client(
    k: int,
    state: GlobalState,
    dataset: DomainDataset,
    pool_x: np.ndarray | None,
    flags: VariantFlags,
    hp: Hyperparams,
) -> ClientRoundResult:
    counters = {"mini": 0, "macro": 0}

    def exchange(packet: FeaturePacket) -> FeatureGradPacket:
        rows = packet.features.shape[0]
        if rows == hp.macro_size:
            start = counters["macro"] * hp.macro_size
            counters["macro"] += 1
        else:
            start = counters["mini"] * hp.batch_size
            counters["mini"] += 1
        target = _target_rows(pool_x, start, rows)
        reply, fd, fda = server_exchange(
            packet,
            state.model,
            state.domain_classifiers[k],
            state.fd_adam[k],
            target,
            flags,
            hp,
        )
        state.domain_classifiers[k] = fd
        state.fd_adam[k] = fda
        return reply

    return client_local_round(
        k, state.model, dataset, exchange, flags, state.t, state.client_rngs[k], hp
    )


def run_round(
    state: GlobalState,
    client_datasets: Sequence[DomainDataset],
    target_train: DomainDataset,
    target_test: DomainDataset,
    flags: VariantFlags,
    hp: Hyperparams,
    client_order: Sequence[int] | None = None,
) -> tuple[GlobalState, RoundRecord]:
    """Advance the federation by one round and report its metrics.

    Order within the round: deliver the global model, train all clients
    (with exchanges), aggregate, measure the group effect against the
    aggregate, vote with the pre-aggregation local models, fine-tune, and
    advance the round counter. ``client_order`` only reorders processing;
    results are identical for any order because every stream is per-client.
    """
    n_clients = len(client_datasets)
    if n_clients == 0:
        raise ValueError("no clients")
    if n_clients != len(state.client_rngs):
        raise ValueError("state was initialized for a different client count")
    t = state.t
    pool_x = None
    if flags.use_disentangler or flags.use_mmd:
        pool_idx = sample_batch(target_train, state.server_rng, hp.samples_per_round)
        pool_x = target_train.x[pool_idx]
    order = list(range(n_clients)) if client_order is None else list(client_order)
    if sorted(order) != list(range(n_clients)):
        raise ValueError("client_order must be a permutation of all clients")
    results: list[ClientRoundResult | None] = [None] * n_clients
    for k in order:
        results[k] = _serve_client(k, state, client_datasets[k], pool_x, flags, hp)
    updates = [r.update for r in results]
    aggregated = fedavg_aggregate(state.model, updates)

    if hp.ge_enabled:
        ge, tta_patch, tta_agg = group_effect_detail(
            state.model, updates, aggregated, target_test
        )
    else:
        ge, tta_patch = None, None
        tta_agg = tta(aggregated, target_test)

    lam_end = ramp((t + 1) / hp.rounds, hp.gamma)
    ties = None
    final = aggregated
    if flags.use_voting:
        n_vote = (
            len(target_train)
            if hp.voting_size is None
            else min(hp.voting_size, len(target_train))
        )
        vote_idx = sample_batch(target_train, state.server_rng, n_vote)
        vote_x = target_train.x[vote_idx]
        labels, ties = federated_vote(
            [r.local_model for r in results], vote_x, state.server_rng
        )
        final, state.enc_adam, state.cls_adam = fine_tune_global(
            aggregated, vote_x, labels, lam_end, state.enc_adam, state.cls_adam, hp
        )
        tta_tuned = tta(final, target_test)
    else:
        tta_tuned = tta_agg

    def _mean(vals: list[float | None]) -> float | None:
        present = [v for v in vals if v is not None]
        return sum(present) / len(present) if present else None

    record = RoundRecord(
        round=t,
        tta_global=tta_agg,
        tta_tuned=tta_tuned,
        tta_patch=tta_patch,
        group_effect=ge,
        j_cls=sum(r.j_cls for r in results) / n_clients,
        j_dis=_mean([r.j_dis for r in results]),
        j_mmd=_mean([r.j_mmd for r in results]),
        lambda_end=lam_end,
        vote_ties=ties,
        exchanges_disentangler=sum(r.exchanges_disentangler for r in results),
        exchanges_mmd=sum(r.exchanges_mmd for r in results),
    )
    state.model = final
    state.t = t + 1
    return state, record
