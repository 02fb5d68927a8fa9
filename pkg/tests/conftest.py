from __future__ import annotations

import socket

import numpy as np
import pytest

from tidyscore import datagen
from tidyscore.scene import ObjectSpec, build_scene


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any outbound or listening socket use."""

    def refuse(*args, **kwargs):
        raise NetworkBlocked("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket.socket, "bind", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    monkeypatch.setattr(socket, "getaddrinfo", refuse)
    yield


def obj(k: int, category: str = "can", w: float = 0.06, d: float = 0.06) -> ObjectSpec:
    return ObjectSpec(f"obj_{k}", category, w, d)


@pytest.fixture
def row_scene():
    """Four cans in a row with 0.02 gaps, plus two forks below."""
    items = [(obj(i), 0.2 + i * 0.08, 0.5) for i in range(4)]
    items += [(obj(4 + i, "fork", 0.03, 0.14), 0.3 + i * 0.05, 0.2) for i in range(2)]
    return build_scene(1.2, 0.8, items)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    meta = datagen.DatasetMeta(master_seed=11, trajectory_count=12)
    datagen.generate_dataset(meta, root)
    return datagen.load_dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_model(small_dataset):
    from tidyscore import trainer

    model, _ = trainer.train(trainer.TrainConfig(max_epochs=40, early_stop_patience=40, learning_rate=3e-3), small_dataset)
    return model


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
