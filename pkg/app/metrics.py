from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram

registry: CollectorRegistry
env_steps_total: Counter
episodes_total: Counter
replay_inserts_total: Counter
train_batches_total: Counter
simulation_failures_total: Counter
best_distance: Gauge
substeps: Histogram


def reset() -> CollectorRegistry:
    """Replace every collector with a zeroed one on a new registry; called once per run."""
    global registry, env_steps_total, episodes_total, replay_inserts_total
    global train_batches_total, simulation_failures_total, best_distance, substeps

    registry = CollectorRegistry()
    env_steps_total = Counter(
        "texture_env_steps_total",
        "Total environment steps executed",
        ["action_kind"],
        registry=registry,
    )
    episodes_total = Counter(
        "texture_episodes_total",
        "Total episodes completed",
        ["mode", "terminal_reason"],
        registry=registry,
    )
    replay_inserts_total = Counter(
        "texture_replay_inserts_total",
        "Total experiences inserted into replay",
        ["origin"],
        registry=registry,
    )
    train_batches_total = Counter(
        "texture_train_batches_total",
        "Total mini-batch updates of the Q-network",
        registry=registry,
    )
    simulation_failures_total = Counter(
        "texture_simulation_failures_total",
        "Total simulator failures",
        ["kind"],
        registry=registry,
    )
    best_distance = Gauge(
        "texture_best_distance",
        "Running best texture distance of the current run",
        registry=registry,
    )
    substeps = Histogram(
        "texture_substeps",
        "Crystal integration substeps per process step",
        buckets=(20, 40, 80, 160, 320, 640, 1280, 2560, 5120, 10240, 16384),
        registry=registry,
    )
    return registry


reset()
