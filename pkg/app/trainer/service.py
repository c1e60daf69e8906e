"""Adam, the joint objective over triplet batches, and the epoch loop."""

import logging
import math
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DivergenceError, InsufficientUsersError, UsageError
from metrics import TRAIN_STEPS
from aggregator.service import aggregate_backward, relative_day_offsets
from datapipe.schemas import UserArchive
from encoder.service import DayPass, day_backward, day_forward
from numkernel.schemas import Parameter, RngState
from siamese.schemas import LossBreakdown, TripletSample
from siamese.service import (
    joint_loss,
    sample_triplet_batch,
    triplet_loss_backward,
    triplet_loss_forward,
)
from trainer.checkpoint import load_checkpoint, save_checkpoint
from trainer.model import JointModel
from trainer.schemas import (
    STOPPING_FIELDS,
    AdamState,
    Checkpoint,
    EpochProgress,
    EpochRecord,
    FitResult,
    TrainConfig,
    TrainingState,
)

logger = logging.getLogger(__name__)

VALIDATION_STREAM = 2**63
SPLIT_STREAM = 2**63 + 2


def adam_update(params: Mapping[str, Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step over ``params``; gradients are zeroed afterwards."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.gradient)):
            raise DivergenceError(f"Non-finite gradient in parameter {name}", parameter=name)
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.gradient
        v *= state.beta2
        v += (1.0 - state.beta2) * p.gradient * p.gradient
        p.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.zero_grad()


def batch_objective(
    model: JointModel,
    sample: TripletSample,
    config: TrainConfig,
    compute_gradients: bool,
) -> LossBreakdown:
    """L_joint over a sampled batch; optionally accumulate its parameter gradients.

    L_ae is the mean over every encoded day of the batch and L_s the mean over
    anchors, so gradients are scaled by 1 / n_days and lambda / n_anchors.
    """
    triplets = sample.triplets
    if not triplets:
        raise UsageError("batch objective needs at least one anchor")
    n_days = sum(len(t.days) for t in triplets)
    head = model.head
    head_users = [t.anchor_user for t in triplets if head is not None and head.has_target(t.anchor_user)]
    decoder = model.decoder if model.uses_decoder else None
    ae_weight = 1.0 / n_days if decoder is not None else 0.0
    triplet_weight = config.lambda_weight / len(triplets)
    head_weight = head.loss_weight if head is not None else 0.0

    l_ae_sum = l_s_sum = head_sum = 0.0
    for triplet in triplets:
        passes: List[DayPass] = [
            day_forward(d.values, d.mask, model.encoder, decoder, model.config) for d in triplet.days
        ]
        l_ae_sum += sum(p.loss for p in passes)
        grads: List[Optional[np.ndarray]] = [None] * len(passes)
        with_head = triplet.anchor_user in head_users
        if model.uses_triplet or with_head:
            n_ref, n_pos = len(triplet.reference), len(triplet.positive)
            g = np.stack([p.embedding for p in passes[:n_ref]])
            offsets = relative_day_offsets([d.date for d in triplet.reference])
            aggregated, aggregate_cache = model.aggregate_stack(g, offsets)
            grad_reference = np.zeros_like(aggregated.vector)
            if model.uses_triplet:
                positives = np.stack([p.embedding for p in passes[n_ref : n_ref + n_pos]])
                negatives = np.stack([p.embedding for p in passes[n_ref + n_pos :]])
                l_s, triplet_cache = triplet_loss_forward(
                    aggregated.vector, positives, negatives, config.margin
                )
                l_s_sum += l_s
                if compute_gradients:
                    g_ref, g_pos, g_neg = triplet_loss_backward(triplet_weight, triplet_cache)
                    grad_reference += g_ref
                    for i, row in enumerate(np.concatenate([g_pos, g_neg])):
                        grads[n_ref + i] = row
            if with_head:
                scale = head_weight / len(head_users) if compute_gradients else None
                loss, g_vec = head.loss(aggregated.vector, triplet.anchor_user, scale)
                head_sum += loss
                if g_vec is not None:
                    grad_reference += g_vec
            if compute_gradients:
                grad_g = aggregate_backward(grad_reference, model.aggregator, aggregate_cache)
                for i in range(n_ref):
                    grads[i] = grad_g[i]
        if compute_gradients:
            for day, grad in zip(passes, grads):
                day_backward(day, model.encoder, decoder, grad, ae_weight)

    if not all(math.isfinite(x) for x in (l_ae_sum, l_s_sum, head_sum)):
        raise DivergenceError(
            f"Non-finite loss (l_ae={l_ae_sum}, l_s={l_s_sum}, head={head_sum})", parameter="loss"
        )
    return joint_loss(
        l_ae_sum / n_days,
        l_s_sum / len(triplets),
        config.lambda_weight,
        head_loss=head_sum / len(head_users) if head_users else 0.0,
        head_weight=head_weight,
    )


def train_step(
    model: JointModel,
    archives: Mapping[str, UserArchive],
    anchor_users: Sequence[str],
    config: TrainConfig,
    rng: np.random.Generator,
    adam: AdamState,
) -> LossBreakdown:
    """Sample one batch, backpropagate L_joint and take one Adam step."""
    if not anchor_users:
        raise UsageError("train_step needs a non-empty batch of anchor users")
    sample = sample_triplet_batch(
        archives,
        anchor_users,
        config.support_size,
        config.positive_size,
        config.negative_size,
        rng,
    )
    model.zero_grad()
    breakdown = batch_objective(model, sample, config, compute_gradients=True)
    if not math.isfinite(breakdown.l_joint):
        raise DivergenceError(f"Non-finite training loss {breakdown.l_joint}", parameter="loss")
    adam_update(model.named_parameters(), adam, config.learning_rate)
    TRAIN_STEPS.inc()
    logger.debug(
        "step t=%d l_ae=%.6f l_s=%.6f l_joint=%.6f fallbacks=%d",
        adam.t,
        breakdown.l_ae,
        breakdown.l_s,
        breakdown.l_joint,
        sample.fallbacks,
    )
    return breakdown


def validation_loss(
    model: JointModel,
    archives: Mapping[str, UserArchive],
    users: Sequence[str],
    config: TrainConfig,
) -> float:
    """L_joint on a fixed sample of held-out anchors; identical triplets every epoch."""
    rng = RngState(seed=config.seed, counter=VALIDATION_STREAM).generator()
    sample = sample_triplet_batch(
        archives, users, config.support_size, config.positive_size, config.negative_size, rng
    )
    return batch_objective(model, sample, config, compute_gradients=False).l_joint


def holdout_users(users: Sequence[str], config: TrainConfig) -> Tuple[List[str], List[str]]:
    """Split sorted user ids into (train, validation); at least one training user remains."""
    n_valid = math.floor(len(users) * config.validation_fraction + 0.5)
    n_valid = min(n_valid, len(users) - 1)
    perm = RngState(seed=config.seed, counter=SPLIT_STREAM).generator().permutation(len(users))
    shuffled = [users[i] for i in perm]
    return sorted(shuffled[n_valid:]), sorted(shuffled[:n_valid])


def _budget_spent(state: TrainingState, config: TrainConfig) -> bool:
    return config.max_steps is not None and state.steps >= config.max_steps


def _check_resumable(saved: TrainConfig, config: TrainConfig) -> None:
    a = saved.model_dump(exclude=set(STOPPING_FIELDS))
    b = config.model_dump(exclude=set(STOPPING_FIELDS))
    if a != b:
        changed = sorted(k for k in a if a[k] != b[k])
        raise ConfigError(f"cannot resume: configuration differs from the checkpoint in {changed}")


def fit(
    archives: Sequence[UserArchive],
    config: TrainConfig,
    checkpoint_path: Optional[str] = None,
    resume_from: Optional[str] = None,
    model: Optional[JointModel] = None,
) -> FitResult:
    """Epochs of shuffled anchor batches with early stopping on validation L_joint.

    A checkpoint is written after every epoch when ``checkpoint_path`` is set,
    and also where the step budget cuts an epoch short; that epoch gets no
    history record until a resumed run finishes it. Every batch samples from
    its own counter-keyed stream, so the checkpoint alone fixes the rest of the
    run. The returned model carries the best-validation parameters.
    """
    by_user = {a.user_id: a for a in archives if a.days}
    if len(by_user) < 2:
        raise InsufficientUsersError(f"Training needs at least 2 users with days, got {len(by_user)}")
    train_users, valid_users = holdout_users(sorted(by_user), config)

    if model is None:
        model = JointModel.initialize(config.model, config.seed)
    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from)
        _check_resumable(checkpoint.config, config)
        model.load_state_dict(checkpoint.parameters)
        adam, state = checkpoint.adam, checkpoint.state
        logger.info("resume path=%s epoch=%d steps=%d", resume_from, state.epoch, state.steps)
    else:
        adam = AdamState.for_parameters(model.named_parameters())
        state = TrainingState(rng=RngState(seed=config.seed))

    logger.info(
        "fit users=%d train=%d valid=%d variant=%s",
        len(by_user),
        len(train_users),
        len(valid_users),
        config.model.variant.value,
    )
    stopped_early = False
    n_batches = math.ceil(len(train_users) / config.batch_size)
    while state.epoch < config.max_epochs:
        if _budget_spent(state, config):
            break
        if state.progress is None:
            state.progress = EpochProgress(order_counter=state.rng.counter)
            state.rng.counter += 1
        progress = state.progress
        perm = RngState(seed=state.rng.seed, counter=progress.order_counter).generator()
        order = [train_users[i] for i in perm.permutation(len(train_users))]
        while progress.next_batch < n_batches and not _budget_spent(state, config):
            start = progress.next_batch * config.batch_size
            breakdown = train_step(
                model,
                by_user,
                order[start : start + config.batch_size],
                config,
                state.rng.next_generator(),
                adam,
            )
            step_losses = (breakdown.l_ae, breakdown.l_s, breakdown.l_joint)
            progress.totals = [t + v for t, v in zip(progress.totals, step_losses)]
            progress.next_batch += 1
            state.steps += 1
        if progress.next_batch < n_batches:
            logger.info(
                "step budget reached epoch=%d batch=%d/%d steps=%d",
                state.epoch + 1,
                progress.next_batch,
                n_batches,
                state.steps,
            )
            if checkpoint_path is not None:
                save_checkpoint(
                    checkpoint_path,
                    Checkpoint(config=config, parameters=model.state_dict(), adam=adam, state=state),
                )
            break
        l_ae, l_s, l_joint = (t / n_batches for t in progress.totals)
        state.progress = None

        if valid_users:
            val = validation_loss(model, by_user, valid_users, config)
        else:
            val = float(l_joint)
        if not math.isfinite(val):
            raise DivergenceError(f"Non-finite validation loss {val}", parameter="loss")

        state.epoch += 1
        state.history.append(
            EpochRecord(epoch=state.epoch, l_ae=l_ae, l_s=l_s, l_joint=l_joint, val_joint=val)
        )
        if val < state.best_val:
            state.best_val = val
            state.best_epoch = state.epoch
            state.best_parameters = model.state_dict()
            state.epochs_without_improvement = 0
        else:
            state.epochs_without_improvement += 1
        logger.info(
            "epoch=%d steps=%d l_ae=%.6f l_s=%.6f l_joint=%.6f val_joint=%.6f",
            state.epoch,
            state.steps,
            l_ae,
            l_s,
            l_joint,
            val,
        )
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                Checkpoint(config=config, parameters=model.state_dict(), adam=adam, state=state),
            )
        if state.epochs_without_improvement > config.patience:
            logger.info("early stop epoch=%d best_epoch=%d", state.epoch, state.best_epoch)
            stopped_early = True
            break

    if state.best_parameters is not None:
        model.load_state_dict(state.best_parameters)
    return FitResult(
        model=model,
        history=list(state.history),
        best_epoch=state.best_epoch,
        steps=state.steps,
        stopped_early=stopped_early,
    )
