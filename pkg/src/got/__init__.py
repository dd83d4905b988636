"""Grounded object toolkit: joint object detection, per-object caption
generation, and natural-language object retrieval, built on numpy with a
small reverse-mode autodiff core.

Typical flow: generate or load an annotated dataset (:mod:`got.datasets`),
train one of the two tasks (:mod:`got.trainer`), then run inference and the
metric suite (:mod:`got.infer_eval`) or the HTTP service (:mod:`got.serve`).
"""

from .config import BackboneConfig, ModelWidths, TrainConfig
from .datasets import (
    AnnotatedImage,
    AnnotatedObject,
    Dataset,
    Vocabulary,
    build_vocabulary,
    encode_caption,
    generate_synthetic_corpus,
    load_annotations,
    merge_superclasses,
    save_annotations,
    tokenize,
)
from .geometry import AnchorGrid, Box, decode_deltas, encode_deltas, generate_anchors, iou, nms, roi_align
from .infer_eval import (
    MetricReport,
    bleu_n,
    cider,
    detect_and_caption,
    evaluate_captioning,
    evaluate_retrieval,
    r_at_1,
    retrieve,
    rouge_l,
)
from .trainer import Checkpoint, ModelParams, init_model, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid", "AnnotatedImage", "AnnotatedObject", "BackboneConfig", "Box",
    "Checkpoint", "Dataset", "MetricReport", "ModelParams", "ModelWidths",
    "TrainConfig", "Vocabulary", "bleu_n", "build_vocabulary", "cider",
    "decode_deltas", "detect_and_caption", "encode_caption", "encode_deltas",
    "evaluate_captioning", "evaluate_retrieval", "generate_anchors",
    "generate_synthetic_corpus", "init_model", "iou", "load_annotations",
    "load_checkpoint", "merge_superclasses", "nms", "r_at_1", "retrieve",
    "roi_align", "rouge_l", "save_annotations", "save_checkpoint", "tokenize",
    "train", "__version__",
]
