import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from verdoc.featurespace import build_vocabulary, extract_features  # noqa: E402
from verdoc.mlp import MlpModel  # noqa: E402
from verdoc.synth import generate  # noqa: E402
from verdoc.train import Dataset  # noqa: E402


def random_net(rng, sizes, scale=1.0) -> MlpModel:
    ws = [rng.normal(0, scale / np.sqrt(a), size=(b, a)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(0, 0.3, size=b) for b in sizes[1:]]
    return MlpModel(ws, bs)


@pytest.fixture(scope="session")
def small_corpus():
    return generate(30, 30, seed=3)


@pytest.fixture(scope="session")
def corpus400():
    """The seeded 400-document corpus, its vocabulary and the stratified split."""
    docs = generate(200, 200, seed=0)
    vocab = build_vocabulary([t for _, t, _ in docs])
    X = np.stack([extract_features(t, vocab) for _, t, _ in docs])
    y = np.array([label for *_, label in docs])
    ds = Dataset.split(X, y, [i for i, _, _ in docs], 0.3, seed=0)
    return {"docs": docs, "trees": {i: t for i, t, _ in docs}, "vocab": vocab, "X": X, "y": y, "ds": ds}


@pytest.fixture(scope="session")
def trained(corpus400):
    """Models trained once per session on the 400-document corpus at full size."""
    import time

    from verdoc.baselines import train_ensemble, train_monotonic
    from verdoc.mlp import TrainConfig
    from verdoc.properties import presets
    from verdoc.train import adv_retrain, train_regular, train_robust

    ds, vocab = corpus400["ds"], corpus400["vocab"]
    p = presets(vocab.n_subtrees)
    cfg = TrainConfig()
    out, minutes = {}, {}

    def timed(name, fn):
        t0 = time.perf_counter()
        out[name] = fn()
        minutes[name] = (time.perf_counter() - t0) / 60

    timed("regular", lambda: train_regular(ds, cfg))
    timed("robust_B", lambda: train_robust(ds, [p["B"]], cfg, vocab))
    timed("robust_AB", lambda: train_robust(ds, [p["A"], p["B"]], cfg, vocab))
    timed("adv_AB", lambda: adv_retrain(ds, [p["A"], p["B"]], cfg, vocab))
    timed("ensemble_AB", lambda: train_ensemble(ds.X_train, ds.y_train, vocab, "AB", cfg))
    timed("ensemble_D", lambda: train_ensemble(ds.X_train, ds.y_train, vocab, "D", cfg))
    timed("monotonic", lambda: train_monotonic(ds.X_train, ds.y_train, n_learners=100))
    return {"models": out, "minutes": minutes}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
