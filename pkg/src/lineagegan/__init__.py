"""Graph-conditioned image-to-image translation over image lineage graphs."""

from .discriminator import MultiScaleDiscriminator, discriminate
from .evaluation import (
    FeatureExtractor,
    MetricsReport,
    evaluate_checkpoint,
    fid,
    kid,
    paired_perceptual_distance,
)
from .generator import Generator, GeneratorConfig
from .graph_conv import GraphConvBlock, adjacency_tensor, mix_nodes
from .lineage import (
    FAMILY_SIZE,
    FamilyTemplate,
    LineageGraph,
    LineageNode,
    ManifestError,
    NormalizedAdjacency,
    build_adjacency,
    eligible_families,
    ingest_manifest,
    normalize_adjacency,
    write_manifest,
)
from .synthetic import SynthConfig, blend_images, generate_corpus
from .training import (
    FamilySample,
    TrainConfig,
    Trainer,
    TrainState,
    TrainingDiverged,
    gan_losses,
    load_checkpoint,
    load_generator,
    make_sample,
    random_adjacency,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
