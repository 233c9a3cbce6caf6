"""Class knowledge embeddings and the fusion classifier.

Each class owns a learnable D-vector. Its dot product with the image
representation is a classification logit (trained with cross-entropy against
the true label), the softmax of those logits mixes the embeddings into a
knowledge vector, and ``FC(LN(y + delta))`` produces the final logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, cross_entropy, layernorm, linear, matmul, mul, softmax, swap_last
from .vit import INIT_STD, LN_EPS, Params, glorot_std, trunc_normal

DEFAULT_MU = 2.0


def init_knowledge_params(dim: int, classes: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    p = Params()
    p["knowledge"] = Tensor(rng.normal(0.0, INIT_STD, size=(classes, dim)).astype(dtype),
                            requires_grad=True, name="knowledge")
    p["fusion_ln.gain"] = Tensor(np.ones(dim, dtype=dtype), requires_grad=True, name="fusion_ln.gain")
    p["fusion_ln.bias"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name="fusion_ln.bias")
    p["fc.weight"] = Tensor(trunc_normal(rng, (dim, classes), std=glorot_std(dim, classes), dtype=dtype), requires_grad=True, name="fc.weight")
    p["fc.bias"] = Tensor(np.zeros(classes, dtype=dtype), requires_grad=True, name="fc.bias")
    return p


def init_linear_head(dim: int, classes: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    p = Params()
    p["aux.weight"] = Tensor(trunc_normal(rng, (dim, classes), std=glorot_std(dim, classes), dtype=dtype), requires_grad=True, name="aux.weight")
    p["aux.bias"] = Tensor(np.zeros(classes, dtype=dtype), requires_grad=True, name="aux.bias")
    return p


def similarity(y: Tensor, knowledge: Tensor) -> Tensor:
    """S(y, k^g) = sum_d y_d * k^g_d for every class; (B, D) x (G, D) -> (B, G)."""
    if y.shape[-1] != knowledge.shape[-1]:
        raise ValueError(f"representation width {y.shape[-1]} != embedding width {knowledge.shape[-1]}")
    return matmul(y, swap_last(knowledge))


def respond(y: Tensor, knowledge: Tensor) -> Tensor:
    """Response coefficients r = softmax of the similarities over classes."""
    return softmax(similarity(y, knowledge), axis=-1)


def knowledge_loss(logits: Tensor, labels) -> Tensor:
    return cross_entropy(logits, labels)


def knowledge_representation(r: Tensor, knowledge: Tensor) -> Tensor:
    """delta = r^T K, a convex combination of the class embeddings."""
    return matmul(r, knowledge)


def fuse(y: Tensor, delta: Tensor, head: Params) -> Tensor:
    h = layernorm(add(y, delta), head["fusion_ln.gain"], head["fusion_ln.bias"], LN_EPS)
    return linear(h, head["fc.weight"], head["fc.bias"])


@dataclass
class ForwardArtifacts:
    y: Tensor
    logits_kl: Tensor | None
    r: Tensor | None
    delta: Tensor | None
    u_logits: Tensor
    loss_kl: Tensor | None = None
    loss_rep: Tensor | None = None
    loss_total: Tensor | None = None


def total_loss(loss_kl: Tensor, loss_rep: Tensor, mu: float = DEFAULT_MU) -> Tensor:
    if mu < 0:
        raise ValueError(f"mu must be nonnegative, got {mu}")
    return add(loss_kl, mul(loss_rep, float(mu)))


def kg_forward(y: Tensor, head: Params, labels=None, mu: float = DEFAULT_MU) -> ForwardArtifacts:
    """Knowledge head on a batch of representations; losses only when labels are given."""
    logits_kl = similarity(y, head["knowledge"])
    r = softmax(logits_kl, axis=-1)
    delta = knowledge_representation(r, head["knowledge"])
    u = fuse(y, delta, head)
    art = ForwardArtifacts(y=y, logits_kl=logits_kl, r=r, delta=delta, u_logits=u)
    if labels is not None:
        art.loss_kl = knowledge_loss(logits_kl, labels)
        art.loss_rep = cross_entropy(u, labels)
        art.loss_total = total_loss(art.loss_kl, art.loss_rep, mu)
    return art


def linear_forward(y: Tensor, head: Params, labels=None) -> ForwardArtifacts:
    """Plain classifier on y, used when knowledge guidance is switched off."""
    u = linear(y, head["aux.weight"], head["aux.bias"])
    art = ForwardArtifacts(y=y, logits_kl=None, r=None, delta=None, u_logits=u)
    if labels is not None:
        art.loss_rep = cross_entropy(u, labels)
        art.loss_total = art.loss_rep
    return art
