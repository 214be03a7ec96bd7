"""Text similarity critic (SC) and domain critic (DC).

SC encodes its first sentence with the generator's shared encoder (frozen
inside SC's loss) and its second sentence with its own BiLSTM. DC reads the
shared encoder and posterior, so its loss pushes reversed gradients into
them through a gradient reversal layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .corpus import DialogueAct, Vocab
from .generator import Params, approximate_posterior, encode_da, encode_utterance

DOMAIN_LABELS = ("source", "target", "generated")
SIMILAR, UNSIMILAR = 1, 0


@dataclass(frozen=True)
class SimilarityPair:
    y1: tuple[int, ...]  # priority sentence, shared encoder
    y2: tuple[int, ...]  # SC's own encoder
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"similarity label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class DomainExample:
    da: DialogueAct
    ids: tuple[int, ...]
    label: str

    def __post_init__(self):
        if self.label not in DOMAIN_LABELS:
            raise ValueError(f"domain label must be one of {DOMAIN_LABELS}, got {self.label!r}")


def similarity_pairs(y_target, y_source, generated: Sequence = ()) -> list[SimilarityPair]:
    """Pairs with labels as in the SC objective.

    (target, generated) is similar; (target, source) and (generated, source)
    are unsimilar. The first element always goes through the shared encoder.
    """
    pairs = [SimilarityPair(tuple(y_target), tuple(y_source), UNSIMILAR)]
    for y_g in generated:
        pairs.append(SimilarityPair(tuple(y_target), tuple(y_g), SIMILAR))
        pairs.append(SimilarityPair(tuple(y_g), tuple(y_source), UNSIMILAR))
    return pairs


def _frozen(params: Params, names) -> Params:
    """Constant copies of ``names``; gradients stop there."""
    out = dict(params)
    for n in names:
        out[n] = ad.constant(params[n].value)
    return out


def sc_logit(pair: SimilarityPair, params: Params, freeze_shared: bool = True) -> Node:
    if not pair.y1 or not pair.y2:
        raise ValueError("sc_score: empty utterance")
    shared = params
    if freeze_shared:
        shared = _frozen(params, [n for n in params if n.startswith("enc.")])
    r1 = encode_utterance(pair.y1, shared, prefix="enc").pooled
    r2 = encode_utterance(pair.y2, params, prefix="sc").pooled
    feats = ad.concat([ad.abs_(ad.sub(r1, r2)), ad.mul(r1, r2)])
    return ad.add(ad.matmul(params["sc.w"], feats), params["sc.b"])


def sc_score(pair: SimilarityPair, params: Params) -> float:
    with ad.no_grad():
        return float(ad.sigmoid(sc_logit(pair, params)).value[0])


def _bce_from_logit(logit: Node, label: int) -> Node:
    # -log sigmoid(s) for label 1, -log(1 - sigmoid(s)) for label 0, as a 2-way softmax
    zero = ad.constant(np.zeros(1))
    two = ad.concat([zero, logit])
    return ad.softmax_cross_entropy(two, label)


def sc_loss(pairs: Sequence[SimilarityPair], params: Params) -> Node:
    if not pairs:
        raise ValueError("sc_loss: empty batch")
    losses = [_bce_from_logit(sc_logit(p, params), p.label) for p in pairs]
    return ad.scale(ad.add_n(losses), 1.0 / len(losses))


def dc_logits(ex: DomainExample, vocab: Vocab, params: Params, lambda_p: float,
              use_grl: bool = True) -> Node:
    """Unnormalised 3-way scores over (source, target, generated).

    Features [h_D; h_Y; mu] pass a gradient reversal layer, then two
    relu feed-forward layers and a linear 3-way head.
    """
    h_D = encode_da(ex.da, vocab, params).pooled
    h_Y = encode_utterance(ex.ids, params).pooled
    post = approximate_posterior(h_D, h_Y, params)
    feats = ad.concat([h_D, h_Y, post.mu])
    if use_grl:
        feats = ad.grad_reverse(feats, lambda_p)
    h1 = ad.relu(ad.add(ad.matmul(params["dc.W1"], feats), params["dc.b1"]))
    h2 = ad.relu(ad.add(ad.matmul(params["dc.W2"], h1), params["dc.b2"]))
    return ad.add(ad.matmul(params["dc.Wout"], h2), params["dc.bout"])


def dc_distribution(ex: DomainExample, vocab: Vocab, params: Params) -> np.ndarray:
    with ad.no_grad():
        return ad.softmax(dc_logits(ex, vocab, params, 0.0)).value


def dc_loss(batch: Sequence[DomainExample], vocab: Vocab, params: Params, lambda_p: float,
            use_grl: bool = True) -> Node:
    if not batch:
        raise ValueError("dc_loss: empty batch")
    losses = [ad.softmax_cross_entropy(dc_logits(ex, vocab, params, lambda_p, use_grl),
                                       DOMAIN_LABELS.index(ex.label)) for ex in batch]
    return ad.scale(ad.add_n(losses), 1.0 / len(losses))


def sc_names(params: Params) -> list[str]:
    return [n for n in params if n.startswith("sc.")]


def dc_head_names(params: Params) -> list[str]:
    return [n for n in params if n.startswith("dc.")]
