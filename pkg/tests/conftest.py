import copy
from pathlib import Path

import pytest
import torch

from projgen.bridge import TinyLMConfig, make_reference_backends
from projgen.synthetic import SyntheticConfig, make_world

REPO = Path(__file__).resolve().parents[1]

torch.set_num_threads(1)

# criterion id -> (passed, detail); filled by the acceptance suite, echoed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


SMALL_RUN = {
    "name": "small",
    "output_dir": "unused",
    "sources": [{"kind": "synthetic", "synthetic": {"n_images": 900, "seed": 3}}],
    "embedding": {"id": "planted"},
    "filters": {"mcqa_min_count": 5, "mcqa_cap": 20},
    "backend": {"kind": "reference", "num_patches": 4, "vocab_size": 128,
                "lm": {"d_lm": 16, "num_layers": 2, "num_heads": 2, "d_ffn": 24}},
    "train": {"lr_peak": 0.03, "batch_size": 16},
    "ablation": {"methods": ["CLASS_EXCLUSIVE"], "proportions": [0.5]},
    "probe": {"max_prefixes": 30, "permutation_n": 50},
}


@pytest.fixture
def small_run_dict():
    """A config small enough to run every stage in a few seconds."""
    return copy.deepcopy(SMALL_RUN)


@pytest.fixture(scope="session")
def tiny_world():
    return make_world(SyntheticConfig(n_images=400, seed=5))


@pytest.fixture(scope="session")
def tiny_backends(tiny_world):
    cfg = TinyLMConfig(d_lm=16, num_layers=2, num_heads=2, d_ffn=24, seed=1)
    return tiny_world.backends(seed=1, d_v=8, num_patches=4, lm_cfg=cfg, vocab_size=128)


@pytest.fixture(scope="session")
def random_backends():
    return make_reference_backends(seed=2, labels=("apple", "pear", "plum", "fig", "red car"), d_v=6, num_patches=3,
                                   lm_cfg=TinyLMConfig(d_lm=8, num_layers=2, num_heads=2, d_ffn=12, seed=2))
