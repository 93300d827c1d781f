"""Inference: greedy CTC readout, transducer beam search, joint scoring.

The beam search is frame-synchronous. Within a frame it runs up to
``max_symbols_per_frame`` expansion steps: every hypothesis takes blank
(freezing it for the next frame) and may also emit a token and stay
expandable. Frozen hypotheses accumulate; the ``k_beam`` best extension
candidates continue expanding, and expansion stops early once no pending
candidate can still reach the frame's top ``k_beam`` (extensions only
lower a path's probability, so the cut is exact). At beam width 1 this
follows the locally best continuation and keeps its best stopping point,
which coincides with greedy decoding whenever the posteriors are
decisive. Hypotheses with identical token sequences are merged by adding
their path probabilities, so a wide beam carries the total transducer
log-probability of each sequence rather than a single-alignment score.

Joint decoding runs the same search with a CTC prefix score mixed into
the ranking: each hypothesis carries the log-mass of all complete CTC
alignments that begin with its token sequence, updated incrementally per
extension. With ``mu_ctc = 0`` the CTC terms vanish from the very same
code path, so the output is bitwise identical to pure transducer search.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BLANK_ID, DUMMY_ID, N_RESERVED, BiasList
from .model import PredictorState, TransducerModel

NEG_INF = -np.inf


@dataclass
class DecodeConfig:
    k_beam: int = 10
    mu_ctc: float = 0.2
    mu_tr: float = 0.8
    max_symbols_per_frame: int = 3

    def __post_init__(self):
        if self.k_beam < 1:
            raise ValueError("k_beam must be >= 1")
        if self.max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be >= 1")
        if self.mu_ctc < 0 or self.mu_tr < 0 or abs(self.mu_ctc + self.mu_tr - 1.0) > 1e-12:
            raise ValueError("mu_ctc and mu_tr must be nonnegative and sum to 1")


def ctc_greedy(logp: np.ndarray) -> tuple[int, ...]:
    """Per-frame argmax, collapse repeats, drop blanks and dummy tokens."""
    ids = np.asarray(logp).argmax(axis=-1)
    out = []
    prev = None
    for i in ids:
        if i != prev and i != BLANK_ID and i != DUMMY_ID:
            out.append(int(i))
        prev = i
    return tuple(out)


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.exp(x - m).sum()))


@dataclass(frozen=True)
class CtcPrefixState:
    """Per-prefix alignment masses over time, split by how they end."""

    r_n: np.ndarray  # (T',) log mass collapsing to the prefix, last frame non-blank
    r_b: np.ndarray  # (T',) same but last frame blank
    last: int | None  # final token of the prefix (None = empty)
    psi: float  # log prefix mass: all complete alignments beginning with the prefix


class CtcPrefixScorer:
    """Incremental CTC prefix scoring over fixed (T', V) log-posteriors."""

    def __init__(self, logp: np.ndarray, blank: int = BLANK_ID):
        self.logp = np.asarray(logp, dtype=np.float64)
        self.blank = blank
        self.n_frames = self.logp.shape[0]

    def initial(self) -> CtcPrefixState:
        r_b = np.cumsum(self.logp[:, self.blank])
        r_n = np.full(self.n_frames, NEG_INF)
        return CtcPrefixState(r_n=r_n, r_b=r_b, last=None, psi=0.0)

    def extend(self, state: CtcPrefixState, c: int) -> CtcPrefixState:
        """Score appending non-blank token ``c`` to the state's prefix."""
        if c == self.blank:
            raise ValueError("cannot extend a prefix with blank")
        lp_c = self.logp[:, c]
        lp_b = self.logp[:, self.blank]

        # phi[t]: mass of the parent prefix just before c can start at frame t
        head = 0.0 if state.last is None else NEG_INF
        shift_b = np.concatenate(([head], state.r_b[:-1]))
        if c == state.last:
            phi = shift_b  # repeated token needs a separating blank
        else:
            shift_n = np.concatenate(([NEG_INF], state.r_n[:-1]))
            phi = np.logaddexp(shift_b, shift_n)

        # r_n[t] = lp_c[t] + LSE(r_n[t-1], phi[t]) as a log-domain prefix scan
        cum_c = np.cumsum(lp_c)
        cum_c_prev = np.concatenate(([0.0], cum_c[:-1]))
        r_n = cum_c + np.logaddexp.accumulate(phi - cum_c_prev)

        # r_b[t] = lp_b[t] + LSE(r_b[t-1], r_n[t-1]), same scan trick
        cum_b = np.cumsum(lp_b)
        cum_b_prev = np.concatenate(([0.0], cum_b[:-1]))
        r_n_prev = np.concatenate(([NEG_INF], r_n[:-1]))
        r_b = cum_b + np.logaddexp.accumulate(r_n_prev - cum_b_prev)

        psi = _logsumexp(phi + lp_c)
        return CtcPrefixState(r_n=r_n, r_b=r_b, last=int(c), psi=psi)

    def complete_log_prob(self, state: CtcPrefixState) -> float:
        """Log probability that the collapsed output equals the prefix exactly."""
        if state.last is None:
            return float(state.r_b[-1])
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))


def prefix_score_extend(
    scorer: CtcPrefixScorer, state: CtcPrefixState, c: int
) -> tuple[CtcPrefixState, float]:
    """Extend a prefix with token ``c``; returns (new state, log prefix mass)."""
    new = scorer.extend(state, c)
    return new, new.psi


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score_tr: float  # log P_tr summed over all merged alignments
    score_ctc: float  # CTC log prefix mass (0.0 when CTC scoring is off)
    pred_out: Tensor  # (1, S) joiner-ready predictor state (fused if biasing)
    pred_state: PredictorState
    ctc_state: CtcPrefixState | None

    def joint(self, cfg: DecodeConfig) -> float:
        return cfg.mu_tr * self.score_tr + cfg.mu_ctc * self.score_ctc


@dataclass
class _Child:
    """Candidate extension, predictor state not yet materialized."""

    tokens: tuple[int, ...]
    score_tr: float
    score_ctc: float
    ctc_state: CtcPrefixState | None
    parent: Hypothesis
    token: int

    def joint(self, cfg: DecodeConfig) -> float:
        return cfg.mu_tr * self.score_tr + cfg.mu_ctc * self.score_ctc


def _merge(table: dict, hyp) -> None:
    prev = table.get(hyp.tokens)
    if prev is None:
        table[hyp.tokens] = hyp
    else:
        # same tokens => identical predictor and CTC state; add path masses
        table[hyp.tokens] = replace(
            prev, score_tr=float(np.logaddexp(prev.score_tr, hyp.score_tr))
        )


def _sort(hyps, cfg: DecodeConfig) -> list[Hypothesis]:
    return sorted(hyps, key=lambda h: (-h.joint(cfg), h.tokens))


def _process_frame(model, enc_row, ctx, beam, scorer, cfg: DecodeConfig) -> list[Hypothesis]:
    enc_t = Tensor(enc_row)
    frozen: dict[tuple, Hypothesis] = {}
    active = list(beam)

    for step in range(cfg.max_symbols_per_frame + 1):
        children: dict[tuple, _Child] = {}
        for hyp in active:
            logits = model.joiner(enc_t, hyp.pred_out).data[0]
            logp = logits - _logsumexp(logits)
            _merge(frozen, replace(hyp, score_tr=hyp.score_tr + logp[BLANK_ID]))
            if step == cfg.max_symbols_per_frame:
                continue  # symbol cap: blank is the only move left
            cand = logp[N_RESERVED:]
            order = np.argsort(-cand, kind="stable")[: cfg.k_beam]
            for idx in order:
                c = int(idx) + N_RESERVED
                ctc_state, psi = hyp.ctc_state, hyp.score_ctc
                if scorer is not None:
                    ctc_state, psi = prefix_score_extend(scorer, ctc_state, c)
                _merge(
                    children,
                    _Child(
                        tokens=hyp.tokens + (c,),
                        score_tr=hyp.score_tr + logp[c],
                        score_ctc=psi,
                        ctc_state=ctc_state,
                        parent=hyp,
                        token=c,
                    ),
                )
        if not children:
            break

        ranked = sorted(children.values(), key=lambda h: (-h.joint(cfg), h.tokens))[: cfg.k_beam]

        # cut: extensions only lower a path's score, so no descendant of a
        # pending candidate can beat k already-frozen hypotheses
        if len(frozen) >= cfg.k_beam:
            kth = sorted((h.joint(cfg) for h in frozen.values()), reverse=True)[cfg.k_beam - 1]
            if kth >= ranked[0].joint(cfg):
                break

        active = []
        for ch in ranked:
            h_new, p_state = model.predictor_step(ch.token, ch.parent.pred_state)
            active.append(
                Hypothesis(
                    tokens=ch.tokens,
                    score_tr=ch.score_tr,
                    score_ctc=ch.score_ctc,
                    pred_out=model.fuse_predictor(h_new, ctx),
                    pred_state=p_state,
                    ctc_state=ch.ctc_state,
                )
            )

    return _sort(frozen.values(), cfg)[: cfg.k_beam]


def decode_utterance(
    model: TransducerModel,
    features: np.ndarray,
    bias_list: BiasList | None,
    cfg: DecodeConfig,
) -> list[Hypothesis]:
    """Beam-search one utterance; returns hypotheses sorted by joint score."""
    with ad.no_grad():
        if model.cfg.use_biasing and bias_list is None:
            raise ad.ContractError("biasing model decodes against a bias list (use m=0 for none)")
        ctx = model.encode_context(bias_list) if model.cfg.use_biasing else None
        enc_out = model.encode(features, ctx)
        enc = (enc_out.fused_final if model.cfg.use_biasing else enc_out.final).data

        scorer = None
        init_ctc = None
        if cfg.mu_ctc != 0.0:
            scorer = CtcPrefixScorer(model.ctc_head(enc_out.final).data)
            init_ctc = scorer.initial()

        state = model.predictor_init()
        h0, state = model.predictor_step(state.last_token, state)
        beam = [
            Hypothesis(
                tokens=(),
                score_tr=0.0,
                score_ctc=0.0,
                pred_out=model.fuse_predictor(h0, ctx),
                pred_state=state,
                ctc_state=init_ctc,
            )
        ]
        for t in range(enc.shape[0]):
            beam = _process_frame(model, enc[t : t + 1], ctx, beam, scorer, cfg)
        return _sort(beam, cfg)


def rnnt_beam_search(
    model: TransducerModel,
    features: np.ndarray,
    bias_list: BiasList | None,
    cfg: DecodeConfig,
) -> list[Hypothesis]:
    """Pure transducer beam search (CTC weight forced to zero)."""
    pure = replace(cfg, mu_ctc=0.0, mu_tr=1.0)
    hyps = decode_utterance(model, features, bias_list, pure)
    return sorted(hyps, key=lambda h: (-h.score_tr, h.tokens))


def joint_decode(
    model: TransducerModel,
    features: np.ndarray,
    bias_list: BiasList | None,
    cfg: DecodeConfig,
) -> Hypothesis:
    """CTC/transducer joint beam search; returns the best hypothesis."""
    return decode_utterance(model, features, bias_list, cfg)[0]


def write_nbest(handle, utt_id: str, hyps, lexicon, cfg: DecodeConfig) -> None:
    """Append tab-separated n-best rows: id, rank, scores, hypothesis words."""
    for rank, h in enumerate(hyps, start=1):
        words = " ".join(lexicon.tokens_to_words(h.tokens))
        handle.write(
            f"{utt_id}\t{rank}\t{h.joint(cfg):.6f}\t{h.score_tr:.6f}\t"
            f"{h.score_ctc:.6f}\t{words}\n"
        )
