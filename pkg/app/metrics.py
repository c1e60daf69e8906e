from prometheus_client import CollectorRegistry, Counter, write_to_textfile

# dedicated registry so repeated imports in tests never collide with the default one
REGISTRY = CollectorRegistry()

RECORDS_INGESTED = Counter(
    "records_ingested_total", "Measurement rows accepted", registry=REGISTRY
)
ROWS_SKIPPED = Counter(
    "rows_skipped_total", "Malformed or non-positive measurement rows", registry=REGISTRY
)
SAMPLER_FALLBACKS = Counter(
    "sampler_fallbacks_total",
    "Anchors sampled with replacement for lack of days",
    registry=REGISTRY,
)
TRAIN_STEPS = Counter("train_steps_total", "Optimizer steps taken", registry=REGISTRY)
EVAL_TRIALS = Counter(
    "eval_trials_total", "User identification trials evaluated", registry=REGISTRY
)


def write_metrics(path: str) -> None:
    """Write the registry in Prometheus text format."""
    write_to_textfile(path, REGISTRY)
