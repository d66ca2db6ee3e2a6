"""Shared fixtures: parsed bundled taxonomies and one session-wide smoke run."""

import time

import numpy as np
import pytest

from wordsem import harness, taxonomy, tinynet


@pytest.fixture(scope="session")
def fig_graph():
    with open(harness.fixture_path("fig_tree.txt"), "r", encoding="utf-8") as f:
        return taxonomy.load_mini_taxonomy(f)


@pytest.fixture(scope="session")
def desk_graph():
    with open(harness.fixture_path("desk_taxonomy.txt"), "r", encoding="utf-8") as f:
        return taxonomy.load_mini_taxonomy(f)


@pytest.fixture(scope="session")
def smoke_run():
    """The built-in 60-word / 8-concept run, trained once and shared.

    Several tests (training diagnostics, retrieval bounds, crop robustness)
    read from the same trained model; training it once keeps the suite fast.
    """
    spec = harness.ExperimentSpec.desk_smoke(seed=7, epochs=30)
    t0 = time.time()
    vocab = spec.build_vocabulary()
    dataset = spec.build_dataset(vocab)
    train_ds, val_ds = dataset.split_by_replica(spec.val_replicas)
    specs, input_shape = tinynet.get_preset(spec.preset, vocab.k)
    net = tinynet.init(specs, input_shape, seed=spec.train.seed)
    net, train_log = harness.run_training(net, train_ds, spec.train)
    return {
        "spec": spec,
        "vocab": vocab,
        "dataset": dataset,
        "train_ds": train_ds,
        "val_ds": val_ds,
        "net": net,
        "train_log": train_log,
        "wall_clock_s": time.time() - t0,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.PCG64(0))
