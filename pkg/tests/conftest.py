"""Shared fixtures.

The expensive piece is `toy_run`: one small denoiser trained from
scratch for the whole session, reused by the sampler, CLI, and
acceptance tests.  Everything it depends on is seeded, so the artifacts
are identical from run to run.
"""

import time

import numpy as np
import pytest

import flexifuse as ff

TINY_ARCH = ff.PatchConfig(patch=4, dim=16, e_width=32, state_dim=8, depth=2)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Train the reference toy model once; returns params and artifacts."""
    arch = ff.PatchConfig()
    sched = ff.make_schedule("linear", 100)
    data = ff.synthetic_corpus(240, size=16, seed=0)
    cfg = ff.TrainConfig(steps=2000, seed=0)
    start = time.perf_counter()
    params, losses = ff.train(cfg, data, arch, sched)
    seconds = time.perf_counter() - start
    path = tmp_path_factory.mktemp("toy") / "toy.ffz"
    ff.save_checkpoint(str(path), params, steps=100, schedule_kind="linear")
    return {
        "arch": arch,
        "sched": sched,
        "data": data,
        "cfg": cfg,
        "params": params,
        "losses": losses,
        "seconds": seconds,
        "ckpt": str(path),
    }


@pytest.fixture(scope="session")
def tiny_params():
    return ff.init_params(TINY_ARCH, seed=0)


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory, tiny_params):
    path = tmp_path_factory.mktemp("tiny") / "tiny.ffz"
    ff.save_checkpoint(str(path), tiny_params, steps=10, schedule_kind="linear")
    return str(path)


@pytest.fixture(scope="session")
def source_pngs(tmp_path_factory):
    """Two deterministic 16x16 grayscale source images on disk."""
    d = tmp_path_factory.mktemp("sources")
    fields = ff.synthetic_corpus(2, size=16, seed=7)
    paths = []
    for i, field in enumerate(fields):
        p = d / f"src{i}.png"
        ff.save_image(ff.denormalize(field), str(p))
        paths.append(str(p))
    return paths
