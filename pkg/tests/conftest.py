"""Shared fixtures: a synthetic world on disk and a client wired to its mock."""

from __future__ import annotations

import pytest

from grounder.protocol.client import DetectorClient

from synth import make_world


@pytest.fixture()
def world(tmp_path):
    return make_world(tmp_path / "world")


@pytest.fixture()
def client(world):
    with DetectorClient.from_spec(world["adapter"]) as c:
        yield c
