"""Shared fixtures and the acceptance-verdict summary hook.

Unit tests run on a deliberately tiny setup (48 16x16 images, an
8/12/16-channel encoder) so the whole suite stays fast; the acceptance
tests own their full-size runs.
"""

import dataclasses

import numpy as np
import pytest

from densesim import data as D
from densesim.config import TrainConfig

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(num, name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {num:2d} [{name}] {detail}"
        _VERDICTS.append(line)
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _VERDICTS:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset():
    """(images, masks, kinds): 48 labeled 16x16 images, 3 classes."""
    images, masks = D.gen_shapes_dataset(48, 3, 16, seed=7)
    return images, masks, D.class_kinds(3)


@pytest.fixture()
def tiny_cfg():
    """TrainConfig factory sized for the tiny dataset (3 steps/epoch)."""

    def make(**overrides):
        base = dict(
            mode="pretrain",
            batch_size=16,
            epochs=4,
            base_lr=0.4,
            view_size=16,
            output_stride=4,
            n=6,
            n_aux=8,
            head_width=16,
            region_dim=8,
            encoder_channels=(8, 12, 16),
            k=3,
            seed=3,
        )
        base.update(overrides)
        return TrainConfig(**base)

    return make


def config_as_text(cfg):
    """Render a TrainConfig as a loadable config file body."""
    from densesim.config import format_config

    return format_config(cfg)


def assert_same_config(a, b):
    assert dataclasses.replace(a, raw_text="") == dataclasses.replace(b, raw_text="")


def rand_f32(rng, *shape):
    return rng.normal(0.0, 1.0, size=shape).astype(np.float32)
