"""Training objectives: CTC, intermediate CTC, intermediate biasing, transducer.

All lattice arithmetic is log-domain with explicit ``-inf`` for impossible
states. The array-level functions return ``(loss, gradient)`` pairs with
analytic gradients; thin wrappers lift them onto the autodiff tape so a
model's loss graph can backpropagate through them.

Reduction convention: every loss here is a per-utterance value; batching
code averages over the batch so the mixing weights keep their meaning at
any batch size.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import EvaluationError, Tensor

NEG_INF = -np.inf


class InfeasibleError(ValueError):
    """The target cannot be aligned to the given number of frames."""


@dataclass
class LossWeights:
    """Mixing weights for the total objective.

    ``lam_ae`` balances the encoder-side CTC objectives against the
    transducer loss; ``lam_ic`` splits the encoder side between final-layer
    CTC and intermediate CTC; ``lam_ib`` adds the intermediate biasing term.
    """

    lam_ae: float = 0.3
    lam_ic: float = 0.66
    lam_ib: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.lam_ae <= 1.0:
            raise ValueError(f"lam_ae must be in [0,1], got {self.lam_ae}")
        if not 0.0 <= self.lam_ic <= 1.0:
            raise ValueError(f"lam_ic must be in [0,1], got {self.lam_ic}")
        if self.lam_ib < 0.0:
            raise ValueError(f"lam_ib must be >= 0, got {self.lam_ib}")


@dataclass
class CtcLattice:
    """Forward/backward tables over the blank-interleaved label sequence."""

    expanded: np.ndarray  # (2U+1,) label ids with blanks interleaved
    alpha: np.ndarray  # (T', 2U+1) log prob of prefixes ending at state s
    beta: np.ndarray  # (T', 2U+1) log prob of suffixes, excluding emission at t
    log_total_forward: float
    log_total_backward: float


@dataclass
class RnntLattice:
    """Forward/backward tables over the (frames consumed, labels emitted) grid."""

    alpha: np.ndarray  # (T'+1, U+1)
    beta: np.ndarray  # (T'+1, U+1)
    log_total_forward: float  # alpha[T', U]
    log_total_backward: float  # beta[0, 0]


def _validate_target(target: Sequence[int], blank: int, n_classes: int) -> np.ndarray:
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.ndim != 1:
        raise ValueError(f"target must be 1-D, got shape {tgt.shape}")
    if (tgt == blank).any():
        raise ValueError("target must not contain the blank id")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n_classes):
        raise ValueError("target id out of range")
    return tgt


def _logaddexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_lattice(logp: np.ndarray, target: Sequence[int], blank: int = 0) -> CtcLattice:
    """Run the CTC forward/backward recursions.

    ``logp`` is a (T', C) table of per-frame log-posteriors. ``beta[t, s]``
    deliberately excludes the emission at frame t, so that
    ``alpha + beta - log_total`` is exactly the state-occupancy posterior.
    """
    logp = np.asarray(logp, dtype=np.float64)
    n_frames, n_classes = logp.shape
    tgt = _validate_target(target, blank, n_classes)
    n_labels = tgt.size
    repeats = int(np.sum(tgt[1:] == tgt[:-1])) if n_labels > 1 else 0
    if n_frames < max(1, n_labels + repeats):
        raise InfeasibleError(
            f"{n_labels} labels with {repeats} adjacent repeats need at least "
            f"{n_labels + repeats} frames, got {n_frames}"
        )

    ext = np.full(2 * n_labels + 1, blank, dtype=np.int64)
    ext[1::2] = tgt
    n_states = ext.size
    # skip transition s-2 -> s is legal only into a non-blank that differs
    # from the label two states back
    skip_ok = np.zeros(n_states, dtype=bool)
    if n_states > 2:
        skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = logp[0, blank]
    if n_states > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        step = np.full(n_states, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(n_states, NEG_INF)
        if n_states > 2:
            skip[2:] = np.where(skip_ok[2:], prev[:-2], NEG_INF)
        alpha[t] = _logaddexp3(prev, step, skip) + logp[t, ext]

    total_f = alpha[n_frames - 1, n_states - 1]
    if n_states > 1:
        total_f = np.logaddexp(total_f, alpha[n_frames - 1, n_states - 2])

    beta = np.full((n_frames, n_states), NEG_INF)
    beta[n_frames - 1, n_states - 1] = 0.0
    if n_states > 1:
        beta[n_frames - 1, n_states - 2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        step = np.full(n_states, NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(n_states, NEG_INF)
        if n_states > 2:
            skip[:-2] = np.where(skip_ok[2:], nxt[2:], NEG_INF)
        beta[t] = _logaddexp3(nxt, step, skip)

    total_b = beta[0, 0] + logp[0, blank]
    if n_states > 1:
        total_b = np.logaddexp(total_b, beta[0, 1] + logp[0, ext[1]])

    if not np.isfinite(total_f):
        raise EvaluationError("CTC total log-likelihood is -inf")
    return CtcLattice(ext, alpha, beta, float(total_f), float(total_b))


def ctc_loss(
    logp: np.ndarray, target: Sequence[int], blank: int = 0
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``logp``.

    The gradient is the negated state-occupancy posterior scattered back
    onto label ids; it is exact whether or not the rows of ``logp`` are
    normalized, so it composes with an upstream log-softmax.
    """
    logp = np.asarray(logp, dtype=np.float64)
    lat = ctc_lattice(logp, target, blank)
    occupancy = np.exp(lat.alpha + lat.beta - lat.log_total_forward)
    grad = np.zeros_like(logp)
    cols = lat.expanded
    for t in range(logp.shape[0]):
        np.add.at(grad[t], cols, -occupancy[t])
    return -lat.log_total_forward, grad


def ctc_loss_graph(logp: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Tape-recorded ctc_loss for a (T', C) log-posterior tensor."""
    loss, grad = ctc_loss(logp.data, target, blank)
    return ad.custom_op(loss, (logp,), "ctc_loss", lambda g: (g * grad,))


def rnnt_lattice(logp: np.ndarray, target: Sequence[int], blank: int = 0) -> RnntLattice:
    """Run the transducer forward/backward recursions on normalized ``logp``.

    ``logp`` has shape (T', U+1, C). Grid node (t, u) means t frames
    consumed and u labels emitted; a blank at (t, u) consumes frame t, an
    emission at (t, u) outputs target[u] from frame t. Both need t < T',
    so every complete path ends with the final frame's blank.
    """
    logp = np.asarray(logp, dtype=np.float64)
    n_frames, n_rows, n_classes = logp.shape
    tgt = _validate_target(target, blank, n_classes)
    n_labels = tgt.size
    if n_rows != n_labels + 1:
        raise ValueError(f"logp row count {n_rows} != len(target)+1 = {n_labels + 1}")
    if n_frames == 0 and n_labels > 0:
        raise InfeasibleError("cannot emit labels with zero frames")

    alpha = np.full((n_frames + 1, n_labels + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(n_frames + 1):
        for u in range(n_labels + 1):
            acc = alpha[t, u]
            if t > 0:
                acc = np.logaddexp(acc, alpha[t - 1, u] + logp[t - 1, u, blank])
            if u > 0 and t < n_frames:
                acc = np.logaddexp(acc, alpha[t, u - 1] + logp[t, u - 1, tgt[u - 1]])
            alpha[t, u] = acc

    beta = np.full((n_frames + 1, n_labels + 1), NEG_INF)
    beta[n_frames, n_labels] = 0.0
    for t in range(n_frames, -1, -1):
        for u in range(n_labels, -1, -1):
            acc = beta[t, u]
            if t < n_frames:
                acc = np.logaddexp(acc, logp[t, u, blank] + beta[t + 1, u])
                if u < n_labels:
                    acc = np.logaddexp(acc, logp[t, u, tgt[u]] + beta[t, u + 1])
            beta[t, u] = acc

    total_f = float(alpha[n_frames, n_labels])
    total_b = float(beta[0, 0])
    if n_labels > 0 and not np.isfinite(total_f):
        raise EvaluationError("transducer total log-likelihood is -inf")
    return RnntLattice(alpha, beta, total_f, total_b)


def rnnt_loss(
    logits: np.ndarray, target: Sequence[int], blank: int = 0
) -> tuple[float, np.ndarray]:
    """Negative transducer log-likelihood and its gradient w.r.t. ``logits``.

    Normalizes each (t, u) slice with log-softmax, runs the lattice, and
    chains the transition-occupancy gradient back through the softmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lat = rnnt_lattice(logp, target, blank)
    tgt = np.asarray(target, dtype=np.int64)
    n_frames = logits.shape[0]
    n_labels = tgt.size
    total = lat.log_total_forward

    grad_logp = np.zeros_like(logp)
    for t in range(n_frames):
        for u in range(n_labels + 1):
            base = lat.alpha[t, u] - total
            grad_logp[t, u, blank] -= np.exp(base + logp[t, u, blank] + lat.beta[t + 1, u])
            if u < n_labels:
                grad_logp[t, u, tgt[u]] -= np.exp(base + logp[t, u, tgt[u]] + lat.beta[t, u + 1])

    softmax = np.exp(logp)
    grad = grad_logp - softmax * grad_logp.sum(axis=-1, keepdims=True)
    return -total, grad


def rnnt_loss_graph(logits: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Tape-recorded rnnt_loss for a (T', U+1, C) logit tensor."""
    loss, grad = rnnt_loss(logits.data, target, blank)
    return ad.custom_op(loss, (logits,), "rnnt_loss", lambda g: (g * grad,))


def _mean_ctc(taps, target, blank):
    taps = list(taps)
    if not taps:
        raise ValueError("need at least one intermediate tap")
    if isinstance(taps[0], Tensor):
        losses = [ctc_loss_graph(tap, target, blank) for tap in taps]
        return ad.scale(functools.reduce(ad.add, losses), 1.0 / len(losses))
    return float(np.mean([ctc_loss(tap, target, blank)[0] for tap in taps]))


def interctc_loss(tap_logp, target: Sequence[int], blank: int = 0):
    """Mean CTC loss over the intermediate-layer taps."""
    return _mean_ctc(tap_logp, target, blank)


def ib_loss(fused_tap_logp, ib_target: Sequence[int], blank: int = 0):
    """Mean CTC loss over bias-fused taps against a dummy-substituted target.

    Same machinery as interctc_loss; only the target differs (non-bias
    tokens replaced by the dummy placeholder).
    """
    return _mean_ctc(fused_tap_logp, ib_target, blank)


def combine_objectives(ctc_final, interctc, ib, transducer, w: LossWeights):
    """Total objective: encoder-side mix blended with the transducer loss.

    encoder side = (1-lam_ic)*ctc_final + lam_ic*interctc + lam_ib*ib;
    total = lam_ae * encoder side + (1-lam_ae) * transducer. Works on
    floats and on tape tensors alike. ``interctc``/``ib`` may be None only
    when their weight is zero.
    """
    if ib is None:
        if w.lam_ib != 0.0:
            raise ValueError("ib loss missing but lam_ib != 0")
        ib = 0.0
    if interctc is None:
        if w.lam_ic != 0.0:
            raise ValueError("interctc loss missing but lam_ic != 0")
        interctc = 0.0
    for name, val in (("ctc_final", ctc_final), ("interctc", interctc),
                      ("ib", ib), ("transducer", transducer)):
        data = val.data if isinstance(val, Tensor) else val
        if not np.all(np.isfinite(data)):
            raise EvaluationError(f"{name} loss is non-finite")
    encoder_side = (
        (1.0 - w.lam_ic) * ctc_final + w.lam_ic * interctc + w.lam_ib * ib
    )
    return w.lam_ae * encoder_side + (1.0 - w.lam_ae) * transducer
