import pytest

from fedrec_lab.data import (
    FORMAT_PRESETS,
    leave_one_out_split,
    load_dataset,
    write_synthetic_dataset,
)
from fedrec_lab.federation import SeedBlock
from fedrec_lab.numerics import RngStream


@pytest.fixture(scope="session")
def toy_seeds():
    return SeedBlock.from_master(1)


@pytest.fixture(scope="session")
def toy_split(tmp_path_factory, toy_seeds):
    """Small synthetic world shared by federation and attack tests."""
    path = tmp_path_factory.mktemp("data") / "toy_u.data"
    write_synthetic_dataset(path, n_users=16, n_items=220,
                            n_interactions=420, seed=5)
    inter, cat, dups = load_dataset(path, FORMAT_PRESETS["ml-100k"])
    return leave_one_out_split(inter, cat, RngStream(toy_seeds.split, "split"), dups)
