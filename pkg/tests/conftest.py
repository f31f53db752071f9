import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bootkeeper import corpus
from bootkeeper.cfg import recover_cfg
from bootkeeper.machine import run


@pytest.fixture(scope="session")
def corpus_build():
    """(specs, images) built once per test session."""
    return corpus.build_images()


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    specs = corpus.build_corpus(out)
    return out, specs


@pytest.fixture(scope="session")
def cfg_of(corpus_build):
    """Memoized recover_cfg per fixture id."""
    _, images = corpus_build
    cache = {}

    def get(fid):
        if fid not in cache:
            cache[fid] = recover_cfg(images[fid])
        return cache[fid]

    return get


@pytest.fixture(scope="session")
def run_of(corpus_build):
    """Memoized concrete run per fixture id."""
    _, images = corpus_build
    cache = {}

    def get(fid):
        if fid not in cache:
            cache[fid] = run(images[fid], 3_000_000)
        return cache[fid]

    return get
