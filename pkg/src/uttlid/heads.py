"""Utterance-level pooling (self-attentive and temporal average) and the classifier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import tensor as T
from .model import ModelParameters, SequenceRepresentation, forward_frontend
from .tensor import Tensor


@dataclass
class UtteranceEmbedding:
    """Pooled ``(N, F)`` vectors; ``attention`` is ``(N, T)`` for SAP, else None."""

    e: Tensor
    attention: Optional[Tensor] = None


def _frames(seq) -> Tensor:
    values = seq.values if isinstance(seq, SequenceRepresentation) else T.as_tensor(seq)
    if values.ndim == 2:
        values = values.reshape(1, *values.shape)
    return values


def sap_pool(seq, weight: Tensor, bias: Tensor, context: Tensor) -> UtteranceEmbedding:
    """Self-attentive pooling over a ``(N, F, T)`` (or ``(F, T)``) sequence.

    Each frame x_t is scored as ``tanh(W x_t + b) . mu``; the scores are
    softmax-normalized over time and used to average the frames.
    """
    x = _frames(seq)
    n, _, steps = x.shape
    hidden = T.tanh(T.affine(T.transpose(x, (0, 2, 1)), weight, bias))
    scores = (hidden * context).sum(axis=2)
    alpha = T.softmax(scores, axis=1)
    e = (x * alpha.reshape(n, 1, steps)).sum(axis=2)
    return UtteranceEmbedding(e, alpha)


def tap_pool(seq) -> UtteranceEmbedding:
    """Unweighted mean over time."""
    return UtteranceEmbedding(T.mean(_frames(seq), axis=2))


def pool(seq, params: ModelParameters) -> UtteranceEmbedding:
    if params.config.head == "sap":
        return sap_pool(seq, params["sap.weight"], params["sap.bias"], params["sap.context"])
    return tap_pool(seq)


def classify(e: Tensor, params: ModelParameters) -> Tensor:
    """FC + ReLU, then the output affine map to class logits."""
    hidden = T.relu(T.affine(e, params["fc.weight"], params["fc.bias"]))
    return T.affine(hidden, params["out.weight"], params["out.bias"])


def forward_logits(features, params: ModelParameters, mode: str = "train",
                   update_stats: bool = True) -> tuple[Tensor, UtteranceEmbedding]:
    seq = forward_frontend(features, params, mode, update_stats)
    emb = pool(seq, params)
    return classify(emb.e, params), emb


def utterance_posteriors(features, params: ModelParameters, head: Optional[str] = None) -> Tensor:
    """Log-posteriors ``(N, num_classes)`` in inference mode, for any length >= 8."""
    if head is not None and head != params.config.head:
        raise ValueError(f"parameters were built for head {params.config.head!r}, not {head!r}")
    logits, _ = forward_logits(features, params, mode="infer")
    return T.log_softmax(logits, axis=-1)
