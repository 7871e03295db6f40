import time

import numpy as np
import pytest

from ghhdet.ghh import GhhModel
from ghhdet.trainset import TrainingSet

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _record(number, ok, detail):
        ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return _record


def random_model(rng, n=2, m=3, c=2, p=5, scale=1.0):
    return GhhModel(
        rng.normal(size=(n, m, c, p, p)) * scale,
        rng.normal(size=(n, m)) * scale,
        rng.choice([-1.0, 1.0], size=n),
    )


def random_trainset(rng, k=30, c=2, p=5, group_size=3, pos_frac=0.4):
    n_groups = k // group_size
    labels = np.repeat(np.where(rng.random(n_groups) < pos_frac, 1.0, -1.0), group_size)
    labels[:group_size] = 1.0
    labels[group_size : 2 * group_size] = -1.0
    feats = rng.normal(size=(n_groups * group_size, c, p, p))
    group = np.repeat(np.arange(n_groups), group_size)
    image = np.tile(np.arange(group_size), n_groups)
    return TrainingSet(feats, labels, group, image)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_pipeline():
    """Train the default detector once on the 15 training images of the synthetic stack."""
    from ghhdet.learner import TrainConfig, train_greedy
    from ghhdet.synth import SynthConfig, make_stack
    from ghhdet.trainset import ImageStack, build_training_set

    t0 = time.perf_counter()
    images, scene = make_stack(SynthConfig())
    stack = ImageStack(images[:15], list(range(15)))
    ts, anchors = build_training_set(stack)
    trace = []
    model = train_greedy(ts, TrainConfig(), trace=trace)
    elapsed = time.perf_counter() - t0
    return {
        "images": images,
        "train": images[:15],
        "test": images[15:],
        "scene": scene,
        "trainset": ts,
        "anchors": anchors,
        "model": model,
        "trace": trace,
        "train_seconds": elapsed,
    }
