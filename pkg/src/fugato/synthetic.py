"""Synthetic data with exactly known statistics.

Three generators:

- ``random_piece``: vocabulary-canonical random pieces (velocities/tempos
  on bin representatives, instrument-class-representative programs, at
  least one note per measure) used by round-trip and property tests.
- ``NoteProcess``: a tiny generative note process whose piece
  probabilities are computed alongside sampling, plus exact per-token
  scorers for both its note-based and flattened encodings. Scoring a
  sampled piece with these oracles reproduces the generative
  log-likelihood, which is what makes cross-encoding comparisons testable
  to machine precision.
- ``synth_corpus``: compound-token streams over abstract features with
  independent, intra-token, or inter-token dependencies and exact
  per-feature entropies by enumeration. The four-feature shared-vocab
  configuration mimics multi-codebook audio token streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import encoding
from .errors import ConfigError
from .midi import NoteEvent, Piece
from .vocab import BASE_SPECIALS, IGNORE, FeatureConfig, FeatureVocab

MAX_ENUMERATION = 10**6


# ---------------------------------------------------------------------------
# Canonical random pieces


def random_piece(
    rng: np.random.Generator,
    vocab: FeatureVocab,
    n_notes: int = 100,
    n_instruments: int = 3,
    with_drums: bool = False,
    n_tempo_changes: int = 2,
    pitch_range: tuple[int, int] = (24, 108),
    source_id: str = "",
) -> Piece:
    """A random quantized piece drawn from the vocabulary's value sets.

    Every measure containing the piece gets at least one note (the
    note-based encoding cannot represent interior empty measures), and a
    fraction of notes share onsets so the flattened encodings have
    repeats to omit.
    """
    from .instruments import REPRESENTATIVE_PROGRAM

    mlen = vocab.measure_length
    n_measures = max(1, n_notes // 4)
    programs = sorted(set(REPRESENTATIVE_PROGRAM.values()))
    chosen = rng.choice(programs, size=min(n_instruments, len(programs)), replace=False)
    insts = [(False, int(p)) for p in chosen]
    if with_drums:
        insts.append((True, 0))

    velocities = vocab["velocity"].values
    onsets = sorted(
        {m * mlen + int(rng.integers(0, mlen)) for m in range(n_measures)}
    )
    while len(onsets) < max(2, n_notes // 2):
        onsets.append(int(rng.integers(0, n_measures * mlen)))
        onsets = sorted(set(onsets))

    notes: dict[tuple, tuple] = {}
    attempts = 0
    while len(notes) < n_notes and attempts < n_notes * 50:
        attempts += 1
        onset = onsets[int(rng.integers(0, len(onsets)))]
        is_drum, program = insts[int(rng.integers(0, len(insts)))]
        pitch = int(rng.integers(pitch_range[0], pitch_range[1] + 1))
        duration = int(rng.integers(1, min(vocab.duration_cap, 2 * mlen) + 1))
        velocity = int(velocities[int(rng.integers(0, len(velocities)))])
        key = (onset, is_drum, program, pitch)
        if key not in notes:
            notes[key] = key + (duration, velocity)

    # guarantee measure density even if the random draw missed one
    covered = {key[0] // mlen for key in notes}
    for m in range(n_measures):
        if m not in covered:
            is_drum, program = insts[0]
            key = (m * mlen, is_drum, program, 60)
            notes.setdefault(key, key + (1, int(velocities[0])))

    tempo_values = vocab["tempo"].values
    note_list = sorted(notes.values())
    tempo_changes = [(0, float(tempo_values[int(rng.integers(0, len(tempo_values)))]))]
    # changes land on note beats after the first note's beat, so every map
    # entry is the active tempo of some note and survives encoding
    first_beat = (note_list[0][0] // vocab.resolution) * vocab.resolution
    beat_ticks = sorted({(o // vocab.resolution) * vocab.resolution
                         for o, *_ in note_list
                         if (o // vocab.resolution) * vocab.resolution > first_beat})
    rng.shuffle(beat_ticks)
    for tick in sorted(beat_ticks[:n_tempo_changes]):
        bpm = float(tempo_values[int(rng.integers(0, len(tempo_values)))])
        if bpm != tempo_changes[-1][1]:
            tempo_changes.append((tick, bpm))

    return Piece(
        notes=[
            NoteEvent(onset_tick=o, is_drum=d, program=pr, pitch=pi,
                      duration_ticks=du, velocity=v)
            for o, d, pr, pi, du, v in note_list
        ],
        time_signature=vocab.time_signature,
        tempo_changes=tempo_changes,
        resolution=vocab.resolution,
        source_id=source_id or f"random-{rng.integers(1 << 30)}",
    )


# ---------------------------------------------------------------------------
# Exactly-scored note process


def _entropy(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class NoteProcess:
    """Markov note generator on a single-instrument grid.

    Each note after the first stays at the current grid position with
    probability ``q_same`` or advances by d steps with probability
    (1 - q_same) * advance[d-1], wrapping into the next measure. Pitches
    are drawn independently from ``pitch_probs`` over ``pitch_values``.
    Durations are fixed at one grid unit. The matching vocabulary uses
    only the always-on features (beat, pitch, duration + metric).
    """

    resolution: int = 4
    time_signature: tuple[int, int] = (4, 4)
    q_same: float = 0.35
    advance: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.3, 0.2]))
    pitch_values: tuple[int, ...] = (60, 62, 64, 65, 67)
    pitch_probs: np.ndarray = field(
        default_factory=lambda: np.array([0.3, 0.25, 0.2, 0.15, 0.1])
    )

    def __post_init__(self):
        self.advance = np.asarray(self.advance, dtype=np.float64)
        self.pitch_probs = np.asarray(self.pitch_probs, dtype=np.float64)
        if abs(self.advance.sum() - 1.0) > 1e-12:
            raise ConfigError("advance probabilities must sum to 1")
        if abs(self.pitch_probs.sum() - 1.0) > 1e-12:
            raise ConfigError("pitch probabilities must sum to 1")
        if len(self.advance) > self.measure_length:
            raise ConfigError("advance support must fit within one measure")

    @property
    def measure_length(self) -> int:
        return self.time_signature[0] * self.resolution

    def vocab(self) -> FeatureVocab:
        return FeatureVocab(
            self.resolution,
            self.time_signature,
            FeatureConfig(instrument=False, chord=False, tempo=False, velocity=False),
        )

    def sample(self, rng: np.random.Generator, n_notes: int,
               source_id: str = "") -> tuple[Piece, float]:
        """Draw one piece; returns (piece, exact log-probability)."""
        logp = 0.0
        onset = 0
        notes = []
        for i in range(n_notes):
            if i > 0:
                if rng.random() < self.q_same:
                    logp += math.log(self.q_same)
                else:
                    d = int(rng.choice(len(self.advance), p=self.advance)) + 1
                    logp += math.log1p(-self.q_same) + math.log(self.advance[d - 1])
                    onset += d
            pitch_i = int(rng.choice(len(self.pitch_values), p=self.pitch_probs))
            logp += math.log(self.pitch_probs[pitch_i])
            notes.append(
                NoteEvent(onset_tick=onset, is_drum=False, program=0,
                          pitch=self.pitch_values[pitch_i], duration_ticks=1,
                          velocity=64)
            )
        piece = Piece(
            notes=notes,
            time_signature=self.time_signature,
            tempo_changes=[(0, 120.0)],
            resolution=self.resolution,
            source_id=source_id,
        )
        return piece, logp

    def corpus(self, rng: np.random.Generator, n_pieces: int,
               n_notes: int) -> tuple[list[Piece], list[float]]:
        pieces, logps = [], []
        for i in range(n_pieces):
            piece, logp = self.sample(rng, n_notes, source_id=f"note-process-{i:03d}")
            pieces.append(piece)
            logps.append(logp)
        return pieces, logps

    def entropy_per_note(self) -> float:
        """Expected nats per note after the first: position decision + pitch."""
        decision = np.concatenate(([self.q_same], (1 - self.q_same) * self.advance))
        return _entropy(decision) + _entropy(self.pitch_probs)

    # -- exact conditional scorers -----------------------------------------

    def _position_distribution(self, position: int | None) -> dict:
        """Distribution over (kind, value) moves from a position state."""
        if position is None:
            # the first note always opens measure 0 at position 0
            return {("bar", 0): 1.0}
        mlen = self.measure_length
        moves: dict = {("same", position): self.q_same}
        for d in range(1, len(self.advance) + 1):
            p = (1 - self.q_same) * self.advance[d - 1]
            target = position + d
            if target < mlen:
                moves[("beat", target)] = moves.get(("beat", target), 0.0) + p
            else:
                moves[("bar", target - mlen)] = moves.get(("bar", target - mlen), 0.0) + p
        return moves

    def nb_scorer(self, seq: "encoding.TokenSequence") -> np.ndarray:
        """Exact log-probability of every slot of an nb-mf/nb-pf sequence.

        Ignore slots get 0. Works on either grouping because the
        flattened conditional chain is the same.
        """
        out = np.zeros(seq.tokens.shape, dtype=np.float64)
        position = None
        pitch_index = {v: i for i, v in enumerate(self.pitch_values)}
        pending_move = None
        for sv in encoding.flatten(seq):
            if sv.value == IGNORE:
                continue
            lp = 0.0
            if sv.feature == "metric":
                moves = self._position_distribution(position)
                if sv.value in ("SSS", "NSS"):
                    kind = "bar"
                elif sv.value == "NNS":
                    kind = "beat"
                else:
                    kind = "same"
                mass = sum(p for (k, _), p in moves.items() if k == kind)
                lp = math.log(mass)
                pending_move = kind
            elif sv.feature == "beat":
                moves = self._position_distribution(position)
                mass = sum(p for (k, _), p in moves.items() if k == pending_move)
                lp = math.log(moves[(pending_move, sv.value)] / mass)
                position = sv.value
            elif sv.feature == "pitch":
                lp = math.log(self.pitch_probs[pitch_index[sv.value]])
            elif sv.feature == "duration":
                lp = 0.0  # always one grid unit
            out[sv.token_index, sv.slot_index] = lp
        return out

    def remi_scorer(self, seq: "encoding.TokenSequence") -> np.ndarray:
        """Exact log-probability of every token of a remi sequence."""
        rvocab = encoding._remi_vocab(seq.vocab)
        out = np.zeros(seq.tokens.shape, dtype=np.float64)
        position = None
        in_bar = False
        pitch_index = {v: i for i, v in enumerate(self.pitch_values)}
        moves = None
        for t, row in enumerate(seq.tokens):
            feature, value = rvocab.entry(int(row[0]))
            if feature == "bar":
                moves = self._position_distribution(position)
                lp = math.log(sum(p for (k, _), p in moves.items() if k == "bar"))
                in_bar = True
            elif feature == "beat":
                if in_bar:
                    mass = sum(p for (k, _), p in moves.items() if k == "bar")
                    lp = math.log(moves[("bar", value)] / mass)
                else:
                    moves = self._position_distribution(position)
                    lp = math.log(moves[("beat", value)])
                position = value
                in_bar = False
            elif feature == "pitch":
                lp = math.log(self.pitch_probs[pitch_index[value]])
                prev_feature = rvocab.entry(int(seq.tokens[t - 1, 0]))[0]
                if prev_feature == "duration":
                    # same-position note: the pitch token itself carries
                    # the stay-here decision REMI never spells out
                    lp += math.log(self.q_same)
            elif feature == "duration":
                lp = 0.0
            else:
                raise ConfigError(f"unexpected REMI feature {feature}")
            out[t, 0] = lp
        return out


# ---------------------------------------------------------------------------
# Abstract compound-token streams


@dataclass
class SyntheticCorpus:
    scheme: encoding.SchemeSpec
    sequences: list[np.ndarray]          # [T, F] int arrays, specials reserved
    entropies: dict[str, float]          # per-feature conditional entropy (nats)
    marginal_entropies: dict[str, float]
    mode: str

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(list(self.entropies.values())))


def _random_conditional(rng: np.random.Generator, size: int,
                        concentration: float = 0.6) -> np.ndarray:
    """Rows are random distributions; low concentration makes them peaky."""
    table = rng.gamma(concentration, size=(size, size))
    return table / table.sum(axis=1, keepdims=True)


def _stationary(transition: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(values - 1.0)))
    pi = np.real(vectors[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def synth_corpus(
    n_features: int,
    vocab_size: int,
    mode: str,
    length: int,
    n_sequences: int,
    seed: int,
) -> SyntheticCorpus:
    """Sample compound-token streams from a fully specified distribution.

    Modes:
    - ``independent``: every feature iid from a random marginal.
    - ``intra``: feature 0 uniform iid per token; feature 1 copies feature
      0 deterministically; each later feature depends on its predecessor
      within the token through a random conditional table.
    - ``inter``: feature 0 follows a first-order Markov chain across
      tokens (started at its stationary distribution); later features
      chain within the token as in ``intra`` (without the copy).

    Reported entropies are the exact conditional entropies of each
    feature given its parents, computed from the generating tables.
    Special indices 0..3 are reserved; values occupy indices 4..vocab+3.
    """
    if mode not in ("independent", "intra", "inter"):
        raise ConfigError(f"unknown dependency mode {mode!r}")
    if n_features < 1 or vocab_size < 2:
        raise ConfigError("need at least 1 feature and 2 values")
    if vocab_size**2 > MAX_ENUMERATION:
        raise ConfigError(
            f"vocab {vocab_size} needs {vocab_size**2} table states "
            f"(> {MAX_ENUMERATION}); the oracle must stay exact"
        )
    rng = np.random.default_rng(seed)
    names = tuple(f"f{j}" for j in range(n_features))
    offset = len(BASE_SPECIALS)
    scheme = encoding.SchemeSpec(
        f"synth-{mode}", names, tuple(vocab_size + offset for _ in names)
    )

    entropies: dict[str, float] = {}
    marginals: dict[str, float] = {}
    uniform = np.full(vocab_size, 1.0 / vocab_size)

    if mode == "independent":
        tables = [rng.gamma(1.0, size=vocab_size) for _ in names]
        tables = [t / t.sum() for t in tables]
        for name, t in zip(names, tables):
            entropies[name] = _entropy(t)
            marginals[name] = _entropy(t)

        def draw(r):
            seqs = []
            for _ in range(n_sequences):
                cols = [r.choice(vocab_size, size=length, p=t) for t in tables]
                seqs.append(np.stack(cols, axis=1).astype(np.int32) + offset)
            return seqs

        sequences = draw(rng)

    elif mode == "intra":
        chain_tables = {
            j: _random_conditional(rng, vocab_size) for j in range(2, n_features)
        }
        entropies[names[0]] = _entropy(uniform)
        marginals[names[0]] = _entropy(uniform)
        if n_features > 1:
            entropies[names[1]] = 0.0
            marginals[names[1]] = _entropy(uniform)
        marginal = uniform
        for j in range(2, n_features):
            table = chain_tables[j]
            entropies[names[j]] = float(
                sum(marginal[a] * _entropy(table[a]) for a in range(vocab_size))
            )
            marginal = marginal @ table
            marginals[names[j]] = _entropy(marginal)

        sequences = []
        for _ in range(n_sequences):
            rows = np.empty((length, n_features), dtype=np.int32)
            f0 = rng.integers(0, vocab_size, size=length)
            rows[:, 0] = f0
            if n_features > 1:
                rows[:, 1] = f0
            for j in range(2, n_features):
                table = chain_tables[j]
                rows[:, j] = [
                    rng.choice(vocab_size, p=table[rows[t, j - 1]])
                    for t in range(length)
                ]
            sequences.append(rows + offset)

    else:  # inter
        markov = _random_conditional(rng, vocab_size, concentration=0.4)
        pi = _stationary(markov)
        chain_tables = {
            j: _random_conditional(rng, vocab_size) for j in range(1, n_features)
        }
        entropies[names[0]] = float(
            sum(pi[a] * _entropy(markov[a]) for a in range(vocab_size))
        )
        marginals[names[0]] = _entropy(pi)
        marginal = pi
        for j in range(1, n_features):
            table = chain_tables[j]
            entropies[names[j]] = float(
                sum(marginal[a] * _entropy(table[a]) for a in range(vocab_size))
            )
            marginal = marginal @ table
            marginals[names[j]] = _entropy(marginal)

        sequences = []
        for _ in range(n_sequences):
            rows = np.empty((length, n_features), dtype=np.int32)
            state = rng.choice(vocab_size, p=pi)
            for t in range(length):
                if t > 0:
                    state = rng.choice(vocab_size, p=markov[state])
                rows[t, 0] = state
                for j in range(1, n_features):
                    rows[t, j] = rng.choice(vocab_size, p=chain_tables[j][rows[t, j - 1]])
            sequences.append(rows + offset)

    return SyntheticCorpus(scheme, sequences, entropies, marginals, mode)
