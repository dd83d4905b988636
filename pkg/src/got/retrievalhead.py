"""Second branch for retrieval: query LSTM encoder, RoI/query fusion, the
two-layer scorer, retrieval labels, and the logistic loss.

The query shares the captioning vocabulary (one-hot over the same dictionary,
same fixed unroll length, padding steps included). Fusion is concatenation,
so the first scorer layer consumes roi_dim + query_dim inputs. Relevance is
{0, 1} in the labels and sign-mapped to y in {-1, +1} inside the loss, the
usual logistic-loss convention (a literal y = 0 would contribute a constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ModelWidths
from .detectnet import LabeledRoIs, init_linear
from .errors import ValidationError
from .seqcore import init_lstm_params, lstm_unroll, one_hot_rows

from .captionhead import _lstm_from

QUERY_INIT_RANGE = 0.6


def init_retrieval_head(
    widths: ModelWidths,
    pooled_channels: int,
    vocab_size: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> dict[str, ad.Tensor]:
    """Reduction FCs (shared shape with the caption branch), the query LSTM,
    and the fusion scorer."""
    tensors: dict[str, ad.Tensor] = {}
    dims = [widths.pooled_size * widths.pooled_size * pooled_channels, *widths.reduce_widths]
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        tensors[f"ret/reduce{i}/w"], tensors[f"ret/reduce{i}/b"] = init_linear(rng, n_in, n_out, dtype)
    # wide init: with the generation-friendly +-0.08 range, six-token queries
    # all encode to nearly the same vector and the fusion scorer starts at a
    # query-blind saddle it cannot leave at desk scale
    query_lstm = init_lstm_params(vocab_size, widths.lstm_hidden, rng, dtype, init_range=QUERY_INIT_RANGE)
    tensors.update(query_lstm.tensors("ret/query_lstm"))
    fused = widths.roi_feature_dim + widths.lstm_hidden
    tensors["ret/fc1/w"], tensors["ret/fc1/b"] = init_linear(rng, fused, widths.retrieval_fc, dtype)
    tensors["ret/out/w"], tensors["ret/out/b"] = init_linear(rng, widths.retrieval_fc, 1, dtype)
    return tensors


def reduce_roi_feature(pooled: ad.Tensor, tensors: dict[str, ad.Tensor]) -> ad.Tensor:
    """Pooled RoI batch (n, P, P, C) -> (n, roi_feature_dim)."""
    if pooled.ndim != 4:
        raise ValidationError(f"reduce_roi_feature expects (n, P, P, C), got {pooled.shape}")
    x = ad.reshape(pooled, (pooled.shape[0], -1))
    for i in (1, 2, 3):
        x = ad.relu(x @ tensors[f"ret/reduce{i}/w"] + tensors[f"ret/reduce{i}/b"])
    return x


def encode_query(token_ids, tensors: dict[str, ad.Tensor], dtype=np.float32) -> ad.Tensor:
    """Unroll the query LSTM over one-hot tokens (padding steps included) and
    return the final hidden state, shape (1, hidden)."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ValidationError("query must contain at least one token")
    lstm = _lstm_from(tensors, "ret/query_lstm")
    vocab_size = lstm.input_dim
    inputs = [ad.Tensor(one_hot_rows([t], vocab_size, dtype)) for t in ids]
    states = lstm_unroll(inputs, lstm)
    return states[-1].h


def retrieval_score(roi_features: ad.Tensor, query: ad.Tensor, tensors: dict[str, ad.Tensor]) -> ad.Tensor:
    """Raw scores f (n,) for each RoI feature against one encoded query.

    concat(roi, query) -> FC(relu) -> FC(1); the probability view is
    sigmoid(f). Scores are per-RoI: no cross-RoI terms exist.
    """
    if roi_features.ndim != 2 or query.ndim != 2 or query.shape[0] != 1:
        raise ValidationError(
            f"retrieval_score expects roi (n, d) and query (1, h), got {roi_features.shape} and {query.shape}")
    n = roi_features.shape[0]
    tiled = ad.take(query, np.zeros(n, dtype=np.int64))
    fused = ad.concat([roi_features, tiled], axis=1)
    if fused.shape[1] != tensors["ret/fc1/w"].shape[0]:
        raise ValidationError(
            f"fused dim {fused.shape[1]} does not match scorer input {tensors['ret/fc1/w'].shape[0]}")
    h = ad.relu(fused @ tensors["ret/fc1/w"] + tensors["ret/fc1/b"])
    out = h @ tensors["ret/out/w"] + tensors["ret/out/b"]
    return ad.reshape(out, (n,))


@dataclass(frozen=True)
class RetrievalLabels:
    """Per-RoI relevance in {0, 1} and its {-1, +1} sign mapping."""

    relevance: np.ndarray
    signs: np.ndarray


def build_retrieval_labels(rois: LabeledRoIs, query_object_index: int, n_objects: int) -> RetrievalLabels:
    """Relevance 1 exactly for positive RoIs matched to the query's object;
    positives matched to other objects and background RoIs get 0."""
    if not 0 <= query_object_index < n_objects:
        raise ValidationError(f"query object index {query_object_index} out of range [0, {n_objects})")
    relevance = ((rois.matched_gt == query_object_index) & rois.positive_mask).astype(np.int64)
    signs = np.where(relevance == 1, 1.0, -1.0)
    return RetrievalLabels(relevance, signs)


def loss_retrieval(scores: ad.Tensor, signs) -> ad.Tensor:
    """Mean log(1 + exp(-y * f)), numerically stabilized for large |f|."""
    y = np.asarray(signs, dtype=np.float64)
    if scores.shape != y.shape:
        raise ValidationError(f"scores {scores.shape} and labels {y.shape} are not aligned")
    if y.size == 0:
        return ad.Tensor(np.zeros((), dtype=scores.dtype))
    return ad.softplus(scores * ad.Tensor(-y.astype(scores.dtype))).mean()
