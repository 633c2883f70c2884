import pytest

from bgmoment.data import GroundingDataset, SyntheticSpec, generate_synthetic, split_by_video
from bgmoment.model import ModelConfig


def tiny_spec(**kw) -> SyntheticSpec:
    base = dict(num_videos=12, frames=16, feature_dim=8, text_dim=6, vocab_size=8, event_len_min=2, event_len_max=4, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(d_video=8, d_text=6, d_model=16, encoder_layers=1, decoder_layers=1, heads=2, num_spans=4, ff_dim=16, dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_synthetic(tiny_spec())


@pytest.fixture(scope="session")
def tiny_splits(tiny_world):
    ann, store, _ = tiny_world
    tr, te = split_by_video(ann, 0.25, 0)
    return GroundingDataset.from_store(tr, store), GroundingDataset.from_store(te, store)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    from bgmoment.cli import main

    root = tmp_path_factory.mktemp("synth")
    rc = main([
        "synth", "--out", str(root), "--num-videos", "12", "--frames", "16", "--seed", "5",
        "--set", "feature_dim=8", "--set", "text_dim=6", "--set", "vocab_size=8",
        "--set", "event_len_min=2", "--set", "event_len_max=4", "--ood-threshold", "0.6",
    ])
    assert rc == 0
    return root


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("ab")), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
