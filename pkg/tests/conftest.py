import pytest

from lineagegan import (
    GeneratorConfig,
    SynthConfig,
    TrainConfig,
    eligible_families,
    generate_corpus,
    ingest_manifest,
)


@pytest.fixture(scope="session")
def corpus_manifest(tmp_path_factory):
    """8-family, 32px synthetic corpus shared by the fast tests."""
    out = tmp_path_factory.mktemp("corpus8")
    return generate_corpus(SynthConfig(n_families=8, image_size=32, seed=11), out)


@pytest.fixture(scope="session")
def corpus_graph(corpus_manifest):
    return ingest_manifest(corpus_manifest)


@pytest.fixture(scope="session")
def corpus_templates(corpus_graph):
    return eligible_families(corpus_graph)


def tiny_train_config(**overrides) -> TrainConfig:
    """Small-capacity 32px config keeping unit tests fast."""
    defaults = dict(
        image_size=32,
        batch_size=2,
        seed=7,
        checkpoint_every=0,
        generator=GeneratorConfig(
            image_size=32, base_channels=8, n_downsample=2, n_resblocks=2
        ),
        disc_channels=8,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)
