"""Revised domain-adaptation baselines sharing the grounding backbone.

Three families: adversarial feature alignment with a binary domain
classifier (placements: language summary, subject feature, both, or their
concatenation), the conditional variant whose discriminator sees the outer
product of the subject feature with attribute-head predictions, and
smoothness-based adaptation that penalizes score changes under bounded
perturbations of the target feature.

The minimax is realized with a gradient-reversal node on the classifier
input: the classifier's own parameters receive the plain domain-loss
gradient while everything upstream receives it scaled by -lambda. A test
pins equivalence with the explicit two-pass computation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import ParameterStore

logger = logging.getLogger(__name__)

MAX_CONDITIONED_DIM = 16384
PLACEMENTS = ("language", "visual", "both", "concat")
SOURCE_LABEL = 0.0
TARGET_LABEL = 1.0


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    return _GradReverse.apply(x, lam)


@dataclass
class DomainClassifier:
    placement: str
    lam: float
    w1: torch.Tensor   # (in_dim, hidden)
    b1: torch.Tensor
    w2: torch.Tensor   # (hidden, 1)
    b2: torch.Tensor


def init_domain_classifier(store: ParameterStore, in_dim: int, hidden: int,
                           placement: str, lam: float, rng: np.random.Generator,
                           prefix: str) -> DomainClassifier:
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")

    def glorot(shape):
        bound = np.sqrt(6.0 / sum(shape))
        return rng.uniform(-bound, bound, size=shape)

    return DomainClassifier(
        placement=placement, lam=lam,
        w1=store.register(f"{prefix}.w1", glorot((in_dim, hidden))),
        b1=store.register(f"{prefix}.b1", np.zeros(hidden)),
        w2=store.register(f"{prefix}.w2", glorot((hidden, 1))),
        b2=store.register(f"{prefix}.b2", np.zeros(1)),
    )


def classifier_logits(clf: DomainClassifier, feats: torch.Tensor) -> torch.Tensor:
    return (torch.relu(feats @ clf.w1 + clf.b1) @ clf.w2 + clf.b2).squeeze(-1)


def domain_probability(clf: DomainClassifier, feats: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(classifier_logits(clf, feats))


def domain_loss(clf: DomainClassifier, src_feats: torch.Tensor, tgt_feats: torch.Tensor,
                reverse: bool = True) -> torch.Tensor:
    """Binary cross-entropy over both domains' feature batches.

    With ``reverse`` the classifier input passes through the reversal node,
    so one backward pass trains the classifier and un-trains the features.
    """
    lam = clf.lam if reverse else 0.0
    feats = torch.cat([src_feats, tgt_feats])
    if reverse:
        feats = grad_reverse(feats, lam)
    logits = classifier_logits(clf, feats)
    labels = torch.cat([
        torch.full((src_feats.shape[0],), SOURCE_LABEL, dtype=feats.dtype),
        torch.full((tgt_feats.shape[0],), TARGET_LABEL, dtype=feats.dtype),
    ])
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, labels)


def dann_objective(task_loss: torch.Tensor,
                   feature_pairs: list[tuple[DomainClassifier, torch.Tensor, torch.Tensor]]
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Combine the task loss with one or more reversed domain losses.

    Returns (total objective, domain-loss value). Backward through the
    total realizes the minimax: classifier parameters descend the domain
    loss, feature extractors ascend it scaled by each classifier's lambda.
    """
    if not feature_pairs:
        return task_loss, torch.tensor(0.0, dtype=task_loss.dtype)
    d_losses = [domain_loss(clf, s, t) for clf, s, t in feature_pairs]
    d_total = torch.stack(d_losses).sum()
    return task_loss + d_total, d_total.detach()


@dataclass
class AttributeHead:
    weight: torch.Tensor   # (d, n_categories)
    bias: torch.Tensor


def init_attribute_head(store: ParameterStore, d: int, n_categories: int,
                        rng: np.random.Generator, prefix: str = "attr") -> AttributeHead:
    bound = np.sqrt(6.0 / (d + n_categories))
    return AttributeHead(
        weight=store.register(f"{prefix}.weight",
                              rng.uniform(-bound, bound, size=(d, n_categories))),
        bias=store.register(f"{prefix}.bias", np.zeros(n_categories)),
    )


def attribute_logits(head: AttributeHead, feats: torch.Tensor) -> torch.Tensor:
    return feats @ head.weight + head.bias


def outer_condition(feats: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Flattened outer product of features (B, d) and predictions (B, C)."""
    d, c = feats.shape[1], probs.shape[1]
    if d * c > MAX_CONDITIONED_DIM:
        raise ValueError(f"conditioned feature dim {d}*{c} exceeds {MAX_CONDITIONED_DIM}")
    return torch.einsum("bi,bj->bij", feats, probs).reshape(feats.shape[0], d * c)


def cdan_objective(task_loss: torch.Tensor, clf: DomainClassifier, head: AttributeHead,
                   src_feats: torch.Tensor, tgt_feats: torch.Tensor,
                   src_labels: torch.Tensor, attr_weight: float = 0.5,
                   ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Conditioned adversarial objective plus attribute supervision.

    The discriminator input conditions each feature on the detached
    softmax of its attribute prediction; the attribute head itself trains
    only through its cross-entropy on labeled source samples.
    """
    probs_src = torch.softmax(attribute_logits(head, src_feats), dim=1).detach()
    probs_tgt = torch.softmax(attribute_logits(head, tgt_feats), dim=1).detach()
    d_loss = domain_loss(clf, outer_condition(src_feats, probs_src),
                         outer_condition(tgt_feats, probs_tgt))
    attr_ce = torch.nn.functional.cross_entropy(attribute_logits(head, src_feats), src_labels)
    total = task_loss + d_loss + attr_weight * attr_ce
    return total, d_loss.detach(), attr_ce.detach()


@dataclass
class LsdConfig:
    eps: float
    mode: str = "random"        # random | one-step-ascent
    ascent_start: float = 1e-3  # relative norm of the random start

    def validate(self) -> None:
        if self.eps < 0:
            raise ValueError("perturbation bound must be non-negative")
        if self.mode not in ("random", "one-step-ascent"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")


def mse_discrepancy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()


def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    raw = rng.normal(size=shape)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return raw / norms


def srda_lsd(features: torch.Tensor, score_fn, cfg: LsdConfig,
             rng: np.random.Generator) -> torch.Tensor:
    """Local smooth discrepancy of the scores under bounded perturbation.

    ``features`` must be connected to the feature-extractor parameters;
    ``score_fn`` maps features to score outputs and must hold its own
    parameters constant (detach them upstream). The clean branch is
    detached, so only the extractor receives gradient.
    """
    cfg.validate()
    if cfg.eps == 0:
        logger.warning("perturbation bound is 0: smoothness term is identically zero")
        return torch.tensor(0.0, dtype=features.dtype)
    clean = score_fn(features.detach())
    unit = _unit_rows(rng, tuple(features.shape))
    if cfg.mode == "random":
        r = torch.from_numpy(cfg.eps * unit).to(features.dtype)
    else:
        start = torch.from_numpy(cfg.ascent_start * cfg.eps * unit).to(features.dtype)
        start.requires_grad_(True)
        d0 = mse_discrepancy(score_fn(features.detach() + start), clean)
        grad = torch.autograd.grad(d0, start, create_graph=False)[0]
        norms = grad.norm(dim=-1, keepdim=True)
        direction = torch.where(norms > 0, grad / (norms + 1e-12), start / start.norm(dim=-1, keepdim=True))
        r = (cfg.eps * direction).detach()
    perturbed = score_fn(features + r)
    return mse_discrepancy(perturbed, clean)
