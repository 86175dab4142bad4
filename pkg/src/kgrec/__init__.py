"""kgrec: knowledge-graph embeddings with image mapping and link prediction."""

from .context import ContextStats, fit_context, load_context, rescore, save_context
from .evaluation import (
    LinkQuery,
    RankingReport,
    evaluate_dataset,
    f_at_n,
    mean_rank_fraction,
    pca_project,
    rank_links,
    t_at_n,
)
from .graph import (
    DatasetSplits,
    Triple,
    TripleStore,
    Vocab,
    corrupt_tail,
    gen_toy_graph,
    load_triples,
    make_splits,
    save_triples,
    transitive_expand,
    write_splits,
)
from .image import (
    EmbedderConfig,
    FeatureRecord,
    ImageEmbedder,
    LabeledFeature,
    class_mean,
    embed,
    embed_batch,
    load_embedder,
    read_features,
    save_embedder,
    train_embedder,
    write_features,
)
from .ioutil import SchemaError
from .models import (
    KgModel,
    ModelConfig,
    init_model,
    load_model,
    save_model,
    score,
)
from .training import (
    GradientSet,
    TrainReport,
    batch_hinge_loss,
    lipschitz_estimate,
    loss_gradients,
    perturb,
    smooth_loss,
    smooth_loss_given_noise,
    train,
)

__version__ = "0.1.0"
