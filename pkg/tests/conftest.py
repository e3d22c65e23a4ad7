import time

import pytest
import torch
from torch.utils.data import DataLoader

from ddfp.data import SliceDataset, SynthConfig, generate_synthetic_domains, load_dataset
from ddfp.models import SegModelSpec, build_unet, train_source

BENCH_SEED = 0
SOURCE_EPOCHS = 30


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """Fixed-seed A -> B benchmark (20 volumes, 12 x 64 x 64, 4 foreground classes)
    with a source U-Net trained on domain A."""
    root = tmp_path_factory.mktemp("bench")
    dir_a, dir_b = generate_synthetic_domains(SynthConfig(), BENCH_SEED, root)
    data = {
        "dir_a": dir_a, "dir_b": dir_b,
        "a_train": load_dataset(dir_a, "train"), "a_test": load_dataset(dir_a, "test"),
        "b_train": load_dataset(dir_b, "train"), "b_test": load_dataset(dir_b, "test"),
    }
    torch.manual_seed(BENCH_SEED)
    model = build_unet(SegModelSpec(), seed=BENCH_SEED)
    loader = DataLoader(SliceDataset(data["a_train"]), batch_size=16, shuffle=True,
                        generator=torch.Generator().manual_seed(BENCH_SEED))
    t0 = time.perf_counter()
    data["source_history"] = train_source(model, loader, SOURCE_EPOCHS)
    data["source_seconds"] = time.perf_counter() - t0
    data["source_model"] = model
    data["b_target"] = SliceDataset(data["b_train"])
    return data



def pytest_collection_modifyitems(items):
    for item in items:
        if "benchmark" in getattr(item, "fixturenames", ()) or "end_to_end" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
