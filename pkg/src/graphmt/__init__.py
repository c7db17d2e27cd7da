"""Scene-graph guided, image-free-at-inference machine translation."""

from .adapter import AdapterConfig, GraphAdapter, GraphBatch
from .backbone import Vocab
from .bleu import BleuReport, corpus_bleu
from .checkpoint import Checkpoint
from .embeddings import EmbeddedGraph, StubProvider, embed_graph, stub_embed
from .estimator import GraphGuidedTranslator
from .model import GraphTranslator, ModelConfig
from .scene_graph import (
    LinguisticSceneGraph,
    MultimodalSceneGraph,
    SceneGraph,
    build_lsg,
    build_msg,
    parse_isg_jsonl,
    parse_tsg_triplets,
    validate,
)
from .training import ParallelExample, TrainConfig, train_one_stage_multimodal, train_stage1, train_stage2

__version__ = "0.1.0"
