"""Probes, metrics and the downstream evaluation protocols."""

import logging
from datetime import date, timedelta
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.linalg import eigvalsh, solve
from scipy.stats import rankdata
from sklearn import metrics as skmetrics

from errors import ConfigError, DataFileError, InsufficientUsersError, UnknownAttributeError
from metrics import EVAL_TRIALS
from datapipe.schemas import LabelValue, UserArchive
from datapipe.service import split_labels
from encoder.schemas import DayEmbedding
from numkernel.schemas import RngState
from trainer.model import HeadKind, JointModel, TaskHead
from trainer.schemas import FitResult, TrainConfig
from trainer.service import fit
from evalsuite.schemas import (
    EvalConfig,
    LabeledEmbedding,
    LinearRegressor,
    LogisticClassifier,
    MetricReport,
)

logger = logging.getLogger(__name__)

HEAD_STREAM = 2**63 + 3

Period = Tuple[date, date]


def _stack(rows: Sequence[LabeledEmbedding]) -> Tuple[np.ndarray, np.ndarray]:
    if len({r.features.shape for r in rows}) > 1:
        raise ConfigError("feature dimension differs between rows of one task")
    return np.stack([r.features for r in rows]), np.array([r.label for r in rows])


# ---------- probes ----------


def fit_logistic(
    train: Sequence[LabeledEmbedding],
    l2: float = 1e-4,
    max_iters: int = 500,
    learning_rate: Optional[float] = None,
) -> LogisticClassifier:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised; the intercept is not penalised. Without an
    explicit ``learning_rate`` the step is 1 / L for the curvature bound L of
    the penalised cross-entropy, so the recorded losses never increase.
    """
    if not train:
        raise ConfigError("logistic regression needs training rows")
    X, labels = _stack(train)
    labels = labels.astype(np.int64)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ConfigError(f"logistic regression needs at least 2 classes, got {classes}")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    n = Z.shape[0]
    Y = (labels[:, None] == np.asarray(classes)[None, :]).astype(np.float64)

    if learning_rate is None:
        augmented = np.hstack([Z, np.ones((n, 1))])
        curvature = 0.5 * float(eigvalsh(augmented.T @ augmented / n)[-1]) + l2
        learning_rate = 1.0 / curvature

    W = np.zeros((len(classes), Z.shape[1]))
    b = np.zeros(len(classes))
    losses: List[float] = []
    for _ in range(max_iters):
        logits = Z @ W.T + b
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        P = exp / exp.sum(axis=1, keepdims=True)
        log_p = np.log(np.maximum((P * Y).sum(axis=1), 1e-300))
        losses.append(float(-log_p.mean() + 0.5 * l2 * np.sum(W * W)))
        G = (P - Y) / n
        W -= learning_rate * (G.T @ Z + l2 * W)
        b -= learning_rate * G.sum(axis=0)
    return LogisticClassifier(classes=classes, weights=W, bias=b, mean=mean, scale=scale, losses=losses)


def fit_linear(train: Sequence[LabeledEmbedding], ridge: float = 1e-8) -> LinearRegressor:
    """Least squares through the normal equations.

    A tiny ridge on the coefficients keeps the system positive definite; the
    intercept is not penalised, so a constant target gets an exactly flat fit.
    """
    if len(train) < 2:
        raise ConfigError(f"linear regression needs at least 2 samples, got {len(train)}")
    X, y = _stack(train)
    augmented = np.hstack([X, np.ones((X.shape[0], 1))])
    penalty = np.full(augmented.shape[1], ridge)
    penalty[-1] = 0.0
    gram = augmented.T @ augmented + np.diag(penalty)
    beta = solve(gram, augmented.T @ y.astype(np.float64), assume_a="pos")
    return LinearRegressor(coef=beta[:-1], intercept=float(beta[-1]))


# ---------- metrics ----------


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """Mann-Whitney statistic: P(score_pos > score_neg), ties count one half.

    None when either class is absent.
    """
    labels = np.asarray(labels)
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(
    labels: Sequence[int],
    predictions: Sequence[int],
    scores: Optional[Sequence[float]] = None,
    task: str = "classification",
    n_classes: Optional[int] = None,
) -> MetricReport:
    """Accuracy, micro/macro F1; binary tasks add F1 of class 1 and, with scores, AUC.

    A task is binary when ``n_classes`` is 2; without it, when every label and
    prediction is 0 or 1.
    """
    y_true = np.asarray(labels)
    y_pred = np.asarray(predictions)
    if y_true.shape != y_pred.shape:
        raise ConfigError(f"labels and predictions differ in length: {y_true.shape} vs {y_pred.shape}")
    values: Dict[str, float] = {
        "accuracy": float(skmetrics.accuracy_score(y_true, y_pred)),
        "micro_f1": float(skmetrics.f1_score(y_true, y_pred, average="micro", zero_division=0)),
        "macro_f1": float(skmetrics.f1_score(y_true, y_pred, average="macro", zero_division=0)),
    }
    if n_classes is None:
        binary = set(y_true.tolist()) | set(y_pred.tolist()) <= {0, 1}
    else:
        binary = n_classes == 2
    if binary:
        values["f1"] = float(skmetrics.f1_score(y_true, y_pred, pos_label=1, zero_division=0))
        if scores is not None:
            auc = roc_auc(y_true, scores)
            if auc is not None:
                values["auc"] = auc
    return MetricReport(task=task, metrics=values)


def regression_metrics(
    targets: Sequence[float], predictions: Sequence[float], task: str = "regression"
) -> MetricReport:
    y_true = np.asarray(targets, dtype=np.float64)
    y_pred = np.asarray(predictions, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ConfigError(f"targets and predictions differ in length: {y_true.shape} vs {y_pred.shape}")
    return MetricReport(
        task=task,
        metrics={
            "mse": float(skmetrics.mean_squared_error(y_true, y_pred)),
            "mae": float(skmetrics.mean_absolute_error(y_true, y_pred)),
        },
    )


def mean_report(reports: Sequence[MetricReport], task: str) -> MetricReport:
    """Per-metric mean over the keys every report shares."""
    if not reports:
        raise InsufficientUsersError(f"no evaluation produced a report for {task}")
    shared = set(reports[0].metrics)
    for report in reports[1:]:
        shared &= set(report.metrics)
    return MetricReport(
        task=task,
        metrics={k: float(np.mean([r.metrics[k] for r in reports])) for k in sorted(shared)},
        skipped_users=max(r.skipped_users for r in reports),
    )


def repeat_eval(
    run: Callable[[np.random.Generator], MetricReport], repeats: int, seed: int, task: str
) -> MetricReport:
    """Run a protocol ``repeats`` times on derived generators and average."""
    reports = [run(RngState(seed=seed, counter=i).generator()) for i in range(repeats)]
    if repeats == 1:
        return reports[0]
    return mean_report(reports, task)


# ---------- user identification ----------


def embed_archives(model: JointModel, archives: Sequence[UserArchive]) -> Dict[str, List[DayEmbedding]]:
    return {a.user_id: [model.embed_day(d) for d in a.days] for a in archives if a.days}


def _period_pool(
    embeddings: Mapping[str, List[DayEmbedding]], period: Period
) -> Dict[str, List[DayEmbedding]]:
    start, end = period
    pool = {u: [e for e in days if start <= e.date < end] for u, days in embeddings.items()}
    return {u: days for u, days in pool.items() if days}


def _identification_trials(
    model: JointModel,
    pool: Mapping[str, List[DayEmbedding]],
    support_size: int,
    trials_per_user: int,
    rng: np.random.Generator,
) -> Tuple[List[LabeledEmbedding], Set[str]]:
    users = sorted(pool)
    if len(users) < 2:
        raise InsufficientUsersError(f"identification needs at least 2 users in a period, got {len(users)}")
    rows: List[LabeledEmbedding] = []
    skipped: Set[str] = set()
    for user in users:
        days = pool[user]
        if len(days) < support_size + 1:
            skipped.add(user)
            logger.warning(
                "identify skip user=%s days=%d need=%d", user, len(days), support_size + 1
            )
            continue
        others = [u for u in users if u != user]
        for _ in range(trials_per_user):
            picked = rng.choice(len(days), support_size + 1, replace=False)
            reference = model.aggregate([days[i] for i in picked[:support_size]]).vector
            query = days[picked[support_size]].vector
            other_days = pool[others[int(rng.integers(len(others)))]]
            stranger = other_days[int(rng.integers(len(other_days)))].vector
            rows.append(LabeledEmbedding(features=reference * query, label=1, group=user))
            rows.append(LabeledEmbedding(features=reference * stranger, label=0, group=user))
            EVAL_TRIALS.inc()
    return rows, skipped


def default_periods(archives: Sequence[UserArchive], config: EvalConfig) -> Tuple[Period, Period]:
    """Configured (train, test) periods, else the chronological halves of the data."""
    if config.train_start is not None:
        return (config.train_start, config.train_end), (config.train_end, config.test_end)
    dates = sorted({d.date for a in archives for d in a.days})
    if len(dates) < 2:
        raise InsufficientUsersError(f"identification needs at least 2 distinct dates, got {len(dates)}")
    middle = dates[len(dates) // 2]
    return (dates[0], middle), (middle, dates[-1] + timedelta(days=1))


def user_identification_eval(
    model: JointModel,
    archives: Sequence[UserArchive],
    train_period: Period,
    test_period: Period,
    rng: np.random.Generator,
    config: Optional[EvalConfig] = None,
    embeddings: Optional[Mapping[str, List[DayEmbedding]]] = None,
    task: str = "identify",
) -> MetricReport:
    """Does an unseen day belong to the user behind a reference vector?

    Reference vectors aggregate ``support_size`` days of one user; the query is
    another day of that user (label 1) or a day of a random other user
    (label 0). Features are element-wise products. The classifier only sees
    trials built from ``train_period`` days and is scored on ``test_period``.
    """
    config = config or EvalConfig()
    if embeddings is None:
        embeddings = embed_archives(model, archives)
    train_rows, train_skipped = _identification_trials(
        model, _period_pool(embeddings, train_period), config.support_size, config.trials_per_user, rng
    )
    test_rows, test_skipped = _identification_trials(
        model, _period_pool(embeddings, test_period), config.support_size, config.trials_per_user, rng
    )
    if not train_rows or not test_rows:
        raise InsufficientUsersError(
            f"no user has {config.support_size + 1} days in both identification periods"
        )
    classifier = fit_logistic(train_rows, config.l2, config.max_iters)
    X_test, y_test = _stack(test_rows)
    scores = classifier.predict_proba(X_test)[:, classifier.classes.index(1)]
    report = classification_metrics(
        y_test, classifier.predict(X_test), scores, task=task, n_classes=2
    )
    skipped = len(train_skipped | test_skipped)
    logger.info(
        "identify train_trials=%d test_trials=%d skipped_users=%d auc=%s",
        len(train_rows) // 2,
        len(test_rows) // 2,
        skipped,
        report.metrics.get("auc"),
    )
    return report.model_copy(update={"skipped_users": skipped})


def _month_period(year: int, month: int) -> Period:
    start = date(year, month, 1)
    end = date(year + 1, 1, 1) if month == 12 else date(year, month + 1, 1)
    return start, end


def identification_sliding_windows(
    model: JointModel,
    archives: Sequence[UserArchive],
    rng: np.random.Generator,
    config: Optional[EvalConfig] = None,
) -> MetricReport:
    """Train on each calendar month present, test on the next one, average the reports."""
    config = config or EvalConfig()
    months = sorted({(d.date.year, d.date.month) for a in archives for d in a.days})
    embeddings = embed_archives(model, archives)
    reports: List[MetricReport] = []
    for (y1, m1), (y2, m2) in zip(months, months[1:]):
        try:
            reports.append(
                user_identification_eval(
                    model,
                    archives,
                    _month_period(y1, m1),
                    _month_period(y2, m2),
                    rng,
                    config,
                    embeddings=embeddings,
                )
            )
        except InsufficientUsersError as e:
            logger.warning("identify window %d-%02d skipped: %s", y1, m1, e.detail)
    return mean_report(reports, "identify_sliding")


# ---------- attribute protocols ----------


def labeled_archives(archives: Sequence[UserArchive], attribute: str) -> List[UserArchive]:
    """Archives with days and a label for ``attribute``."""
    labeled = [a for a in archives if attribute in a.labels and a.days]
    if not labeled:
        available = {k for a in archives for k in a.labels}
        raise UnknownAttributeError(attribute, available)
    return labeled


def attribute_kind(archives: Sequence[UserArchive], attribute: str) -> HeadKind:
    """Numeric when every label of ``attribute`` is a number."""
    values = [a.labels[attribute] for a in labeled_archives(archives, attribute)]
    if all(isinstance(v, (int, float)) for v in values):
        return HeadKind.numeric
    return HeadKind.categorical


def _numeric(value: LabelValue, attribute: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"attribute {attribute} has non-numeric label {value!r}")


def attribute_classification_eval(
    model: JointModel,
    archives: Sequence[UserArchive],
    attribute: str,
    config: Optional[EvalConfig] = None,
) -> MetricReport:
    """Logistic regression on aggregated user embeddings over a user-level split."""
    config = config or EvalConfig()
    labeled = labeled_archives(archives, attribute)
    train, _, test = split_labels(labeled, config.label_fractions, config.seed)
    classes = sorted({str(a.labels[attribute]) for a in labeled})

    def rows(group: Sequence[UserArchive]) -> List[LabeledEmbedding]:
        return [
            LabeledEmbedding(
                features=model.embed_user(a.days).vector,
                label=classes.index(str(a.labels[attribute])),
                group=a.user_id,
            )
            for a in group
        ]

    classifier = fit_logistic(rows(train), config.l2, config.max_iters)
    X_test, y_test = _stack(rows(test))
    scores = None
    if len(classes) == 2 and 1 in classifier.classes:
        scores = classifier.predict_proba(X_test)[:, classifier.classes.index(1)]
    return classification_metrics(
        y_test,
        classifier.predict(X_test),
        scores,
        task=f"classify_{attribute}",
        n_classes=len(classes),
    )


def attribute_regression_eval(
    model: JointModel,
    archives: Sequence[UserArchive],
    attribute: str,
    config: Optional[EvalConfig] = None,
) -> MetricReport:
    """Linear regression of a numeric attribute on aggregated user embeddings."""
    config = config or EvalConfig()
    labeled = labeled_archives(archives, attribute)
    train, _, test = split_labels(labeled, config.label_fractions, config.seed)

    def rows(group: Sequence[UserArchive]) -> List[LabeledEmbedding]:
        return [
            LabeledEmbedding(
                features=model.embed_user(a.days).vector,
                label=_numeric(a.labels[attribute], attribute),
                group=a.user_id,
            )
            for a in group
        ]

    regressor = fit_linear(rows(train))
    X_test, y_test = _stack(rows(test))
    return regression_metrics(y_test, regressor.predict(X_test), task=f"regress_{attribute}")


# ---------- semi-supervised fine-tuning ----------


def semi_supervised_finetune(
    model: JointModel,
    archives: Sequence[UserArchive],
    attribute: str,
    kind: HeadKind,
    train_config: TrainConfig,
    config: Optional[EvalConfig] = None,
    labeled_users: Optional[Sequence[str]] = None,
) -> FitResult:
    """Attach a dense head for ``attribute`` and keep training on L_joint plus the head loss.

    Only users in ``labeled_users`` (all labeled users when None) contribute a
    head target; every user still feeds the unsupervised terms.
    """
    config = config or EvalConfig()
    allowed = None if labeled_users is None else set(labeled_users)
    labels = {
        a.user_id: a.labels[attribute]
        for a in labeled_archives(archives, attribute)
        if allowed is None or a.user_id in allowed
    }
    head = TaskHead.build(
        kind,
        attribute,
        labels,
        model.config.embedding_dim,
        RngState(seed=config.seed, counter=HEAD_STREAM).generator(),
        loss_weight=config.head_weight,
    )
    if head.kind is HeadKind.categorical and len(head.classes) < 2:
        raise ConfigError(f"attribute {attribute} needs at least 2 classes among labeled users")
    model.head = head
    steps = config.finetune_steps
    finetune_config = train_config.model_copy(
        update={"max_steps": steps, "max_epochs": max(train_config.max_epochs, steps)}
    )
    logger.info(
        "finetune attribute=%s kind=%s labeled_users=%d steps=%d",
        attribute,
        head.kind.value,
        len(labels),
        steps,
    )
    return fit(archives, finetune_config, model=model)


def finetune_eval(
    model: JointModel,
    archives: Sequence[UserArchive],
    attribute: str,
    train_config: TrainConfig,
    config: Optional[EvalConfig] = None,
) -> MetricReport:
    """Fine-tune with the labels of training users, score the head on test users."""
    config = config or EvalConfig()
    kind = attribute_kind(archives, attribute)
    labeled = labeled_archives(archives, attribute)
    train, _, test = split_labels(labeled, config.label_fractions, config.seed)
    result = semi_supervised_finetune(
        model, archives, attribute, kind, train_config, config, labeled_users=[a.user_id for a in train]
    )
    tuned = result.model
    head = tuned.head
    vectors = [tuned.embed_user(a.days).vector for a in test]
    task = f"finetune_{attribute}"
    if kind is HeadKind.numeric:
        return regression_metrics(
            [_numeric(a.labels[attribute], attribute) for a in test],
            [head.predict(v) for v in vectors],
            task=task,
        )
    classes = sorted({str(a.labels[attribute]) for a in labeled})
    y_true = [classes.index(str(a.labels[attribute])) for a in test]
    y_pred = [classes.index(head.predict(v)) for v in vectors]
    scores = None
    if len(classes) == 2 and head.classes == classes:
        scores = [float(head.scores(v)[1]) for v in vectors]
    return classification_metrics(y_true, y_pred, scores, task=task, n_classes=len(classes))


# ---------- report files ----------


def format_reports(reports: Sequence[MetricReport]) -> str:
    return "".join(line + "\n" for report in reports for line in report.lines())


def write_reports(reports: Sequence[MetricReport], path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(format_reports(reports))
    except OSError as e:
        raise DataFileError(f"Cannot write metric report {path}: {e}")
