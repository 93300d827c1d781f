"""Synthetic corpus generation, vocabulary, and bias-list construction.

The toy "speech" task is built from two-token words (an initial syllable
token plus a continuation token). A small set of rare words are acoustic
near-homophones of common words: a rare word reuses its twin's
continuation token, and its initial token's feature embedding sits a small
offset away from the twin's. With frame noise larger than that offset the
acoustics alone cannot reliably separate the pair, so recognizing a rare
word correctly requires the bias context — which is what the biasing
criteria measure. A further set of rare-style words never occurs in any
utterance and serves as the distractor pool.

Token ids 0..4 are reserved: CTC blank, the IB dummy token, padding,
start-of-sequence for the prediction network, and the learned <no_bias>
context token.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from collections.abc import Sequence

import numpy as np

BLANK_ID = 0
DUMMY_ID = 1
PAD_ID = 2
SOS_ID = 3
NO_BIAS_ID = 4
RESERVED_TOKENS = ("<blank>", "#", "<pad>", "<sos>", "<no_bias>")
N_RESERVED = len(RESERVED_TOKENS)

CONT_MARK = "-"  # continuation tokens carry this surface prefix


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class DataError(ValueError):
    """Input data violates a documented precondition."""


@dataclass(frozen=True)
class Vocab:
    """Ordered token surfaces; the first five ids are reserved."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:N_RESERVED] != RESERVED_TOKENS:
            raise ConfigError("first five tokens must be the reserved set")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate token surfaces")
        object.__setattr__(
            self, "_index", {t: i for i, t in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index[token]

    def surface(self, token_id: int) -> str:
        return self.tokens[token_id]


@dataclass
class CorpusConfig:
    """Knobs for the synthetic task.

    ``n_rare_words`` rare words occur in utterances; ``n_distractor_words``
    extra rare-style words exist only as bias-list distractors. Both twin
    distinct common words, so ``n_rare + n_distractor <= n_common``.
    """

    n_common_words: int = 140
    n_rare_words: int = 16
    n_distractor_words: int = 110
    n_cont_tokens: int = 30
    min_words: int = 3
    max_words: int = 6
    frames_per_token: int = 2
    feature_dim: int = 16
    noise_sigma: float = 0.35
    homophone_gap: float = 0.4
    rare_utt_fraction: float = 0.3
    rare_word_cap: float = 0.02
    n_utterances: int = 1200

    def __post_init__(self):
        if self.n_common_words < 4:
            raise ConfigError("need at least 4 common words")
        if self.n_rare_words < 1 or self.n_distractor_words < 0:
            raise ConfigError("rare/distractor counts out of range")
        if self.n_rare_words + self.n_distractor_words > self.n_common_words:
            raise ConfigError("every rare-style word needs a distinct common twin")
        if self.n_cont_tokens < 1:
            raise ConfigError("need at least one continuation token")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("bad words-per-utterance range")
        if self.frames_per_token < 1:
            raise ConfigError("frames_per_token must be >= 1")
        if self.noise_sigma < 0 or self.homophone_gap < 0:
            raise ConfigError("noise/gap must be >= 0")
        if not 0.0 <= self.rare_utt_fraction <= 1.0:
            raise ConfigError("rare_utt_fraction must be in [0,1]")
        per_word = self.rare_utt_fraction / self.n_rare_words
        if per_word > self.rare_word_cap + 1e-12:
            raise ConfigError(
                f"each rare word would appear in {100 * per_word:.2f}% of "
                f"utterances, above the {100 * self.rare_word_cap:.2f}% cap"
            )


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    words: tuple[str, ...]
    transcript: tuple[int, ...]
    features: np.ndarray  # (T, D)
    rare_words: tuple[str, ...]
    word_spans: tuple[tuple[int, int], ...]  # token [start, end) per word

    def __post_init__(self):
        if len(self.transcript) < 1:
            raise DataError("empty transcript")
        if not set(self.rare_words) <= set(self.words):
            raise DataError("rare_words must be a subset of words")


@dataclass
class Lexicon:
    vocab: Vocab
    word_to_tokens: dict[str, tuple[int, ...]]
    common_words: tuple[str, ...]
    rare_words: tuple[str, ...]
    distractor_words: tuple[str, ...]
    twin: dict[str, str]  # rare-style surface -> common twin surface
    embeddings: np.ndarray  # (|V|, D), reserved rows all-zero

    def tokens_for(self, words: Sequence[str]) -> tuple[int, ...]:
        out: list[int] = []
        for w in words:
            if w not in self.word_to_tokens:
                raise DataError(f"unknown word {w!r}")
            out.extend(self.word_to_tokens[w])
        return tuple(out)

    def tokens_to_words(self, ids: Sequence[int]) -> list[str]:
        """Deterministic word segmentation of a token stream.

        A word starts at every non-continuation token; continuation tokens
        extend the current word. Valid transcripts round-trip exactly;
        arbitrary decoder output still segments deterministically.
        """
        words: list[str] = []
        for tid in ids:
            if tid < N_RESERVED:
                continue
            s = self.vocab.surface(int(tid))
            if s.startswith(CONT_MARK) and words:
                words[-1] += s[len(CONT_MARK):]
            else:
                words.append(s.removeprefix(CONT_MARK))
        return words


def _syllable_surfaces(count: int, consonants: str) -> list[str]:
    vowels = "aeiou"
    pool = itertools.chain(
        ("".join(p) for p in itertools.product(consonants, vowels)),
        ("".join(p) for p in itertools.product(consonants, vowels, consonants)),
    )
    out = list(itertools.islice(pool, count))
    if len(out) < count:
        raise ConfigError(f"cannot produce {count} distinct syllables")
    return out


def build_lexicon(config: CorpusConfig, seed) -> Lexicon:
    """Deterministically build vocabulary, lexicon, and token embeddings."""
    rng = np.random.default_rng(seed)
    inits = _syllable_surfaces(config.n_common_words, "bdfgjklmnpr")
    conts = [CONT_MARK + s for s in _syllable_surfaces(config.n_cont_tokens, "stvwz")]

    tokens = list(RESERVED_TOKENS) + inits + conts
    word_to_tokens: dict[str, tuple[int, ...]] = {}
    common_words: list[str] = []
    init_id = {s: N_RESERVED + i for i, s in enumerate(inits)}
    cont_id = {s: N_RESERVED + len(inits) + i for i, s in enumerate(conts)}

    cont_choice = rng.integers(0, config.n_cont_tokens, size=config.n_common_words)
    for i, init in enumerate(inits):
        cont = conts[cont_choice[i]]
        surface = init + cont[len(CONT_MARK):]
        word_to_tokens[surface] = (init_id[init], cont_id[cont])
        common_words.append(surface)

    n_style = config.n_rare_words + config.n_distractor_words
    twin_idx = rng.permutation(config.n_common_words)[:n_style]
    rare_words: list[str] = []
    distractor_words: list[str] = []
    twin: dict[str, str] = {}
    for j, ci in enumerate(twin_idx):
        base = common_words[ci]
        base_init = inits[ci]
        rare_init = base_init.capitalize()
        tokens.append(rare_init)
        rare_tid = len(tokens) - 1
        surface = base.capitalize()
        word_to_tokens[surface] = (rare_tid, word_to_tokens[base][1])
        twin[surface] = base
        (rare_words if j < config.n_rare_words else distractor_words).append(surface)

    vocab = Vocab(tuple(tokens))
    emb = np.zeros((len(vocab), config.feature_dim))
    emb[N_RESERVED:] = rng.standard_normal((len(vocab) - N_RESERVED, config.feature_dim))
    # rare-style initial tokens sit a fixed small offset from their twins
    for surface, base in twin.items():
        rare_tid = word_to_tokens[surface][0]
        base_tid = word_to_tokens[base][0]
        direction = rng.standard_normal(config.feature_dim)
        direction /= np.linalg.norm(direction)
        emb[rare_tid] = emb[base_tid] + config.homophone_gap * direction

    return Lexicon(
        vocab=vocab,
        word_to_tokens=word_to_tokens,
        common_words=tuple(common_words),
        rare_words=tuple(rare_words),
        distractor_words=tuple(distractor_words),
        twin=twin,
        embeddings=emb,
    )


def _gen_utterances(
    config: CorpusConfig, lexicon: Lexicon, n: int, rng, prefix: str
) -> list[Utterance]:
    rare_set = set(lexicon.rare_words)
    utts = []
    for k in range(n):
        n_words = int(rng.integers(config.min_words, config.max_words + 1))
        idx = rng.integers(0, len(lexicon.common_words), size=n_words)
        words = [lexicon.common_words[i] for i in idx]
        if rng.random() < config.rare_utt_fraction:
            pos = int(rng.integers(0, n_words))
            words[pos] = lexicon.rare_words[int(rng.integers(0, len(lexicon.rare_words)))]

        ids: list[int] = []
        spans: list[tuple[int, int]] = []
        for w in words:
            toks = lexicon.word_to_tokens[w]
            spans.append((len(ids), len(ids) + len(toks)))
            ids.extend(toks)
        feats = np.repeat(lexicon.embeddings[ids], config.frames_per_token, axis=0)
        if config.noise_sigma > 0:
            feats = feats + config.noise_sigma * rng.standard_normal(feats.shape)
        utts.append(
            Utterance(
                utt_id=f"{prefix}{k:05d}",
                words=tuple(words),
                transcript=tuple(ids),
                features=feats,
                rare_words=tuple(w for w in words if w in rare_set),
                word_spans=tuple(spans),
            )
        )
    return utts


def synth_corpus(config: CorpusConfig, seed) -> list[Utterance]:
    """Generate a corpus of ``config.n_utterances``; pure in (config, seed)."""
    ss = np.random.SeedSequence(seed)
    lex_seed, utt_seed = ss.spawn(2)
    lexicon = build_lexicon(config, lex_seed)
    return _gen_utterances(
        config, lexicon, config.n_utterances, np.random.default_rng(utt_seed), "utt"
    )


@dataclass
class SyntheticTask:
    """A full experiment input: lexicon, train/test splits, distractor pool."""

    config: CorpusConfig
    seed: int
    lexicon: Lexicon
    train: list[Utterance]
    test: list[Utterance]
    distractor_pool: list[str]

    @classmethod
    def generate(cls, config: CorpusConfig, seed: int, n_test: int = 200) -> "SyntheticTask":
        ss = np.random.SeedSequence(seed)
        lex_seed, train_seed, test_seed = ss.spawn(3)
        lexicon = build_lexicon(config, lex_seed)
        train = _gen_utterances(
            config, lexicon, config.n_utterances, np.random.default_rng(train_seed), "train"
        )
        test = _gen_utterances(
            config, lexicon, n_test, np.random.default_rng(test_seed), "test"
        )
        pool = list(lexicon.rare_words) + list(lexicon.distractor_words)
        return cls(config, seed, lexicon, train, test, pool)


@dataclass(frozen=True)
class BiasList:
    """Bias phrases as token-id tuples; index 0 is always <no_bias>."""

    phrases: tuple[tuple[int, ...], ...]
    texts: tuple[str, ...]
    l_max: int = 10

    def __post_init__(self):
        if not self.phrases or self.phrases[0] != (NO_BIAS_ID,):
            raise DataError("index 0 must be the <no_bias> entry")
        if self.texts[0] != RESERVED_TOKENS[NO_BIAS_ID]:
            raise DataError("index 0 text must be <no_bias>")
        if len(self.phrases) != len(self.texts):
            raise DataError("phrases/texts length mismatch")
        if len(set(self.phrases)) != len(self.phrases):
            raise DataError("duplicate bias phrases")
        if any(len(p) > self.l_max for p in self.phrases):
            raise DataError(f"phrase longer than L_max={self.l_max}")

    @property
    def m(self) -> int:
        return len(self.phrases) - 1

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """(M+1, L_max) id matrix padded with the pad id, plus true lengths."""
        mat = np.full((len(self.phrases), self.l_max), PAD_ID, dtype=np.int64)
        lengths = np.zeros(len(self.phrases), dtype=np.int64)
        for i, p in enumerate(self.phrases):
            mat[i, : len(p)] = p
            lengths[i] = len(p)
        return mat, lengths

    def real_texts(self) -> tuple[str, ...]:
        return self.texts[1:]


def make_bias_list(
    phrases: Sequence[tuple[int, ...]], texts: Sequence[str], l_max: int = 10
) -> BiasList:
    """Assemble a BiasList from real entries, prepending <no_bias>."""
    return BiasList(
        phrases=((NO_BIAS_ID,),) + tuple(phrases),
        texts=(RESERVED_TOKENS[NO_BIAS_ID],) + tuple(texts),
        l_max=l_max,
    )


def find_covered_spans(
    transcript: Sequence[int], phrases: Sequence[tuple[int, ...]]
) -> list[tuple[int, int]]:
    """Non-overlapping occurrences of any phrase, longest first, leftmost first."""
    transcript = tuple(transcript)
    covered = [False] * len(transcript)
    spans: list[tuple[int, int]] = []
    for phrase in sorted(set(phrases), key=lambda p: (-len(p), p)):
        size = len(phrase)
        if size == 0:
            continue
        for start in range(len(transcript) - size + 1):
            if transcript[start : start + size] == phrase and not any(
                covered[start : start + size]
            ):
                covered[start : start + size] = [True] * size
                spans.append((start, start + size))
    return sorted(spans)


def sample_training_bias(
    batch: Sequence[Utterance], rng, l_max: int = 10
) -> tuple[BiasList, list[list[tuple[int, int]]]]:
    """Draw 0-2 contiguous word spans per utterance and pool them batch-wide.

    Returns the deduplicated batch-shared BiasList and, per utterance, the
    token spans covered by any pooled phrase (inputs to the IB target).
    """
    if not batch:
        raise DataError("empty batch")
    phrases: list[tuple[int, ...]] = []
    texts: list[str] = []
    seen: set[tuple[int, ...]] = set()
    for utt in batch:
        n_draws = int(rng.integers(0, 3))
        for _ in range(n_draws):
            max_span = min(2, len(utt.words))
            span_words = int(rng.integers(1, max_span + 1))
            start = int(rng.integers(0, len(utt.words) - span_words + 1))
            end = start + span_words
            # shrink at word boundaries until the tokenized span fits L_max
            while end > start + 1 and (
                utt.word_spans[end - 1][1] - utt.word_spans[start][0] > l_max
            ):
                end -= 1
            tok_start = utt.word_spans[start][0]
            tok_end = utt.word_spans[end - 1][1]
            phrase = utt.transcript[tok_start:tok_end]
            if len(phrase) > l_max:
                continue  # a single word longer than L_max; skip the draw
            if phrase not in seen:
                seen.add(phrase)
                phrases.append(phrase)
                texts.append(" ".join(utt.words[start:end]))
    bias = make_bias_list(phrases, texts, l_max)
    spans = [find_covered_spans(utt.transcript, phrases) for utt in batch]
    return bias, spans


def build_test_bias_list(
    utt: Utterance,
    distractor_pool: Sequence[str],
    m: int,
    lexicon: Lexicon,
    rng,
    l_max: int = 10,
) -> BiasList:
    """Evaluation list: the utterance's rare words plus sampled distractors.

    ``m`` = 0 produces the no-bias list regardless of the utterance's
    content; otherwise the list holds exactly ``m`` real entries and always
    includes every rare word of the utterance.
    """
    if m < 0:
        raise ConfigError("m must be >= 0")
    if m == 0:
        return make_bias_list((), (), l_max)
    rare = list(dict.fromkeys(utt.rare_words))
    if len(rare) > m:
        raise ConfigError(f"utterance has {len(rare)} rare words but m={m}")
    candidates = [w for w in dict.fromkeys(distractor_pool) if w not in rare]
    need = m - len(rare)
    if need > len(candidates):
        raise ConfigError(f"distractor pool too small: need {need}, have {len(candidates)}")
    order = rng.permutation(len(candidates))
    chosen = rare + [candidates[i] for i in order[:need]]
    phrases = [lexicon.tokens_for([w]) for w in chosen]
    return make_bias_list(phrases, chosen, l_max)


def save_distractors(path, pool: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in pool), encoding="utf-8")


def load_distractors(path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def _pack_utts(utts: list[Utterance], prefix: str) -> dict[str, np.ndarray]:
    flat_tokens = np.concatenate([np.array(u.transcript, dtype=np.int64) for u in utts])
    tok_lens = np.array([len(u.transcript) for u in utts], dtype=np.int64)
    flat_feats = np.concatenate([u.features for u in utts], axis=0)
    frame_lens = np.array([u.features.shape[0] for u in utts], dtype=np.int64)
    return {
        f"{prefix}_ids": np.array([u.utt_id for u in utts]),
        f"{prefix}_words": np.array([" ".join(u.words) for u in utts]),
        f"{prefix}_tokens": flat_tokens,
        f"{prefix}_token_lens": tok_lens,
        f"{prefix}_features": flat_feats,
        f"{prefix}_frame_lens": frame_lens,
    }


def _unpack_utts(data, prefix: str, lexicon: Lexicon) -> list[Utterance]:
    tok_offsets = np.concatenate([[0], np.cumsum(data[f"{prefix}_token_lens"])])
    frame_offsets = np.concatenate([[0], np.cumsum(data[f"{prefix}_frame_lens"])])
    rare_set = set(lexicon.rare_words)
    utts = []
    for k, utt_id in enumerate(data[f"{prefix}_ids"]):
        words = tuple(str(data[f"{prefix}_words"][k]).split())
        ids = tuple(
            int(t) for t in data[f"{prefix}_tokens"][tok_offsets[k] : tok_offsets[k + 1]]
        )
        spans: list[tuple[int, int]] = []
        pos = 0
        for w in words:
            n = len(lexicon.word_to_tokens[w])
            spans.append((pos, pos + n))
            pos += n
        utts.append(
            Utterance(
                utt_id=str(utt_id),
                words=words,
                transcript=ids,
                features=data[f"{prefix}_features"][frame_offsets[k] : frame_offsets[k + 1]],
                rare_words=tuple(w for w in words if w in rare_set),
                word_spans=tuple(spans),
            )
        )
    return utts


def save_task(path, task: SyntheticTask) -> None:
    """Persist a task as one .npz archive (layout documented in the README)."""
    lex = task.lexicon
    word_list = list(lex.word_to_tokens)
    word_tok_flat = np.concatenate(
        [np.array(lex.word_to_tokens[w], dtype=np.int64) for w in word_list]
    )
    word_tok_lens = np.array([len(lex.word_to_tokens[w]) for w in word_list], dtype=np.int64)
    payload = {
        "meta": np.array(json.dumps({"config": asdict(task.config), "seed": task.seed})),
        "vocab": np.array(lex.vocab.tokens),
        "word_list": np.array(word_list),
        "word_tok_flat": word_tok_flat,
        "word_tok_lens": word_tok_lens,
        "common_words": np.array(lex.common_words),
        "rare_words": np.array(lex.rare_words),
        "distractor_words": np.array(lex.distractor_words),
        "twin_keys": np.array(list(lex.twin)),
        "twin_vals": np.array(list(lex.twin.values())),
        "embeddings": lex.embeddings,
        "distractor_pool": np.array(task.distractor_pool),
    }
    payload.update(_pack_utts(task.train, "train"))
    payload.update(_pack_utts(task.test, "test"))
    np.savez_compressed(path, **payload)


def load_task(path) -> SyntheticTask:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    config = CorpusConfig(**meta["config"])
    offsets = np.concatenate([[0], np.cumsum(data["word_tok_lens"])])
    word_to_tokens = {
        str(w): tuple(int(t) for t in data["word_tok_flat"][offsets[i] : offsets[i + 1]])
        for i, w in enumerate(data["word_list"])
    }
    lexicon = Lexicon(
        vocab=Vocab(tuple(str(t) for t in data["vocab"])),
        word_to_tokens=word_to_tokens,
        common_words=tuple(str(w) for w in data["common_words"]),
        rare_words=tuple(str(w) for w in data["rare_words"]),
        distractor_words=tuple(str(w) for w in data["distractor_words"]),
        twin={str(k): str(v) for k, v in zip(data["twin_keys"], data["twin_vals"])},
        embeddings=data["embeddings"],
    )
    return SyntheticTask(
        config=config,
        seed=meta["seed"],
        lexicon=lexicon,
        train=_unpack_utts(data, "train", lexicon),
        test=_unpack_utts(data, "test", lexicon),
        distractor_pool=[str(p) for p in data["distractor_pool"]],
    )
