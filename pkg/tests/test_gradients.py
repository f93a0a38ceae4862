import time

import pytest

from c2a.gradsuite import CASES, run_suite


@pytest.mark.parametrize("name", sorted(CASES))
def test_case_over_twenty_seeds(name):
    worst = max(CASES[name](s) for s in range(20))
    assert worst < 1e-4, (name, worst)


def test_suite_runtime():
    t0 = time.perf_counter()
    res = run_suite(range(20))
    assert time.perf_counter() - t0 < 60
    assert set(res) == {
        "encoder", "decoder", "ftn", "discriminator", "cluster_assign",
        "sup_loss", "adv_loss", "disc_loss", "cluster_loss", "kl_loss",
    }
