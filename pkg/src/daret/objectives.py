"""Loss functions and the adversarial-weight schedule.

Losses return their value together with analytic derivatives so the trainer
never needs autodiff. Probabilities are clamped once to
[PROB_EPS, 1 - PROB_EPS] and that clamped value is used consistently in the
loss, in dloss/dp, and in the softmax jacobian p(1-p) when chaining to
classifier logits; composing the two therefore reproduces the bounded fused
gradients (e.g. confusion d/dlogit0 = p - 1/2) instead of vanishing or
exploding at saturation.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import clamp_prob, log_sum_exp

CONFUSION = "confusion"
MINIMAX = "minimax"
GAN = "gan"
ADV_LOSS_KINDS = (CONFUSION, MINIMAX, GAN)

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class LambdaSchedule:
    """Exponential decay: lambda(t) = lambda0 * 2^(-t / half_life_steps)."""

    lambda0: float
    half_life_steps: int

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if self.half_life_steps <= 0:
            raise ValueError("half_life_steps must be positive")


def lambda_at(sched: LambdaSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return sched.lambda0 * 2.0 ** (-step / sched.half_life_steps)


def ranking_loss(score_pos: float, scores_neg):
    """NLL of the positive among positive + negatives.

    loss = -score_pos + log_sum_exp([score_pos, *scores_neg]).
    Returns (loss, dscore_pos, dscores_neg); the gradient is the softmax over
    all scores minus the indicator of the positive slot.
    """
    negs = np.asarray(scores_neg, dtype=np.float64)
    if negs.size == 0:
        raise ValueError("ranking_loss needs at least one negative score")
    scores = np.concatenate(([float(score_pos)], negs))
    lse = log_sum_exp(scores)
    loss = -float(score_pos) + lse
    probs = np.exp(scores - lse)
    dpos = float(probs[0] - 1.0)
    dnegs = probs[1:].copy()
    return loss, dpos, dnegs


def discrimination_loss(p_source: float, domain: str):
    """Binary cross-entropy of the domain classifier at one embedding.

    Returns (loss, dlogits) where dlogits is the gradient with respect to the
    two classifier logits: softmax probs minus the one-hot true domain.
    """
    p = clamp_prob(p_source)
    if domain == SOURCE:
        loss = -np.log(p)
        dlogits = np.array([p - 1.0, 1.0 - p])
    elif domain == TARGET:
        loss = -np.log(1.0 - p)
        dlogits = np.array([p, -p])
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return float(loss), dlogits


def adversarial_loss(kind: str, p_q: float, p_d: float, domain: str):
    """Encoder-side adversarial loss for one query-document pair.

    Returns (loss, dp_q, dp_d), derivatives taken at the clamped
    probabilities.

    confusion: -1/2 (ln p + ln(1-p)) summed over the two embeddings,
      domain-symmetric, minimized at p = 1/2.
    minimax: the negated discrimination loss at the pair's true domain; the
      encoder descends what the classifier ascends.
    gan: inverted-label cross-entropy, -1/2 (ln p_q + ln p_d) on target
      pairs, zero on source pairs.
    """
    if domain not in (SOURCE, TARGET):
        raise ValueError(f"unknown domain {domain!r}")
    pq = clamp_prob(p_q)
    pd = clamp_prob(p_d)
    if kind == CONFUSION:
        loss = -0.5 * (np.log(pq) + np.log(1.0 - pq) + np.log(pd) + np.log(1.0 - pd))
        dpq = -0.5 * (1.0 / pq - 1.0 / (1.0 - pq))
        dpd = -0.5 * (1.0 / pd - 1.0 / (1.0 - pd))
    elif kind == MINIMAX:
        if domain == SOURCE:
            loss = np.log(pq) + np.log(pd)
            dpq = 1.0 / pq
            dpd = 1.0 / pd
        else:
            loss = np.log(1.0 - pq) + np.log(1.0 - pd)
            dpq = -1.0 / (1.0 - pq)
            dpd = -1.0 / (1.0 - pd)
    elif kind == GAN:
        if domain == SOURCE:
            return 0.0, 0.0, 0.0
        loss = -0.5 * (np.log(pq) + np.log(pd))
        dpq = -0.5 / pq
        dpd = -0.5 / pd
    else:
        raise ValueError(f"unknown adversarial loss kind {kind!r}")
    return float(loss), float(dpq), float(dpd)


def dprob_to_dlogits(p: float, dp: float) -> np.ndarray:
    """Chain dloss/dp through the 2-way softmax to logit space.

    p must be the clamped probability the loss was evaluated at; then
    dp * p(1-p) stays bounded for every loss above.
    """
    p = clamp_prob(p)
    j = p * (1.0 - p)
    d0 = dp * j
    return np.array([d0, -d0])
