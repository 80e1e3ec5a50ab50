import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cloudssl.config import vit_config  # noqa: E402
from cloudssl.data import SplitData  # noqa: E402
from cloudssl.synth import GeneratorConfig, build_dataset  # noqa: E402

torch.set_num_threads(1)


def mini_vit(**overrides):
    """Miniature transformer: 32 px images, 8 px tokens (16 tokens), width 16, depth 1."""
    kw = dict(image_size=32, embed_dim=16, depth=1, heads=2, decoder_dim=16, decoder_depth=1,
              decoder_heads=2, head_channels=(8, 8, 8))
    kw.update(overrides)
    return vit_config("desk", kw.pop("token_size", 8), **kw)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """A 32-pixel dataset with every split populated."""
    root = tmp_path_factory.mktemp("data") / "small"
    build_dataset(GeneratorConfig(seed=3, n_scenes=62, n_pretrain_scenes=40, image_size=32), root)
    return root


@pytest.fixture(scope="session")
def small_splits(small_root):
    return {s: SplitData.load(small_root, s)
            for s in ("pretrain_train", "pretrain_val", "finetune_train", "finetune_val", "finetune_test")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One "criterion N: PASS/FAIL ..." line per acceptance criterion, printed at the end of the run.
ACCEPTANCE: dict[int, str] = {}


def report(n: int, passed: bool, detail: str) -> bool:
    line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
