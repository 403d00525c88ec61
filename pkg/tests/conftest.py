import os
import sys

import pytest

# Ensure project root is on sys.path so tests can import `src` when pytest
# is invoked from the repository root or other working directories.
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains small networks end to end (deselect with -m \"not slow\")")


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """40 primary + 10 secondary 32x32 pairs embedded at 0.4 bpp, with a manifest."""
    from src.images import write_image
    from src.pipeline import split_dataset, synth_corpus
    from src.stego import embed, image_rng

    root = tmp_path_factory.mktemp("corpus")
    pairs = []
    for i, cover in enumerate(synth_corpus(50, 32, seed=3)):
        stego = embed(cover, "inverse_variance", 0.4, image_rng(3, i)).stego
        cover_path = write_image(root / "cover" / f"{i:03d}.pgm", cover)
        stego_path = write_image(root / "stego" / f"{i:03d}.pgm", stego)
        pairs.append((str(cover_path), str(stego_path)))
    manifest = split_dataset(pairs[:40], seed=0, secondary=pairs[40:])
    return manifest.write(root / "manifest.csv")


@pytest.fixture
def tiny_model_config():
    from src.model import desk_config

    return desk_config(input_size=32, branch_width=4, head_channels=16, depth=3)
