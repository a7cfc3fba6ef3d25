"""Utterance data model, synthetic corpus generation, mel extraction, corpus file I/O.

The synthetic generator plants three recoverable kinds of structure:

* phoneme identity: each phoneme type owns a feature template, so frames
  identify the type (drives the "diff" retrieval family);
* prosodic context: each phoneme's prosodic class is a deterministic hash of
  its phoneme-type neighborhood and within-word position, and each class owns
  an additive modulation plus a duration factor (drives the "sim" family,
  recoverable only by a contextual text model);
* speaker identity: each speaker owns an additive offset vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
N_SPECIALS = 3
_SPECIAL_SYMBOLS = ["<pad>", "<mask>", "<unk>"]

# Fixed number of synthetic subword tokens (prime, spreads the word hashes).
N_SYNTH_SUBWORDS = 241

_CORPUS_MAGIC = b"PKCORP1\n"

# Scales of the planted additive structure, relative to unit-variance templates.
# Small enough that a nearest-template classifier on clean mean frames never
# confuses phoneme types, large enough to be learnable from features.
PROSODY_MOD_STD = 0.25
SPEAKER_OFFSET_STD = 0.25
MAX_DURATION_FACTOR = 4


class CorpusFormatError(ValueError):
    """Raised when a corpus container file is malformed."""


@dataclass(frozen=True)
class PhonemeVocab:
    """Ordered phoneme symbol inventory with reserved PAD/MASK/UNK slots."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(self.symbols) < N_SPECIALS + 1:
            raise ValueError("vocab needs at least one non-special symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocab symbols must be unique")
        if list(self.symbols[:N_SPECIALS]) != _SPECIAL_SYMBOLS:
            raise ValueError(f"first {N_SPECIALS} symbols must be {_SPECIAL_SYMBOLS}")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def mask_id(self) -> int:
        return MASK_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @classmethod
    def from_plain_symbols(cls, plain: list[str]) -> "PhonemeVocab":
        return cls(tuple(_SPECIAL_SYMBOLS) + tuple(plain))


@dataclass(frozen=True)
class BpeVocab:
    """Ordered subword token inventory with reserved PAD/MASK/UNK slots."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < N_SPECIALS + 1:
            raise ValueError("vocab needs at least one non-special token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")
        if list(self.tokens[:N_SPECIALS]) != _SPECIAL_SYMBOLS:
            raise ValueError(f"first {N_SPECIALS} tokens must be {_SPECIAL_SYMBOLS}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def mask_id(self) -> int:
        return MASK_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID


@dataclass(eq=False)
class Utterance:
    """One utterance: token streams, word maps, features, phoneme alignment.

    alignment holds one half-open frame span [start, end) per phoneme;
    spans are ordered, non-overlapping and each has length >= 1.
    """

    id: str
    speaker_id: int
    phonemes: np.ndarray        # int64 [T_ph]
    bpe: np.ndarray             # int64 [T_bpe]
    phoneme_word: np.ndarray    # int64 [T_ph], non-decreasing word index
    bpe_word: np.ndarray        # int64 [T_bpe], non-decreasing word index
    features: np.ndarray        # float32 [T_frames, F]
    alignment: np.ndarray       # int64 [T_ph, 2], half-open spans

    @property
    def n_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def n_words(self) -> int:
        return int(self.phoneme_word.max()) + 1

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def validate(self):
        if int(self.phoneme_word.max()) != int(self.bpe_word.max()):
            raise ValueError(f"{self.id}: word counts differ between streams")
        for m in (self.phoneme_word, self.bpe_word):
            if np.any(np.diff(m) < 0):
                raise ValueError(f"{self.id}: word map must be non-decreasing")
        if self.alignment.shape != (self.n_phonemes, 2):
            raise ValueError(f"{self.id}: alignment shape mismatch")
        starts, ends = self.alignment[:, 0], self.alignment[:, 1]
        if np.any(ends - starts < 1):
            raise ValueError(f"{self.id}: empty alignment span")
        if np.any(starts[1:] < ends[:-1]):
            raise ValueError(f"{self.id}: overlapping alignment spans")
        if starts[0] < 0 or ends[-1] > self.n_frames:
            raise ValueError(f"{self.id}: alignment outside feature range")

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.speaker_id == other.speaker_id
            and np.array_equal(self.phonemes, other.phonemes)
            and np.array_equal(self.bpe, other.bpe)
            and np.array_equal(self.phoneme_word, other.phoneme_word)
            and np.array_equal(self.bpe_word, other.bpe_word)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.alignment, other.alignment)
        )


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_phoneme_types: int = 40
    n_speakers: int = 8
    n_utterances: int = 2000
    utterance_length_range: tuple[int, int] = (6, 14)
    word_length_range: tuple[int, int] = (2, 4)
    prosody_context_window: int = 2
    n_prosody_classes: int = 8
    feature_dim: int = 32
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.n_phoneme_types, self.n_speakers, self.n_utterances,
            self.prosody_context_window, self.feature_dim,
            self.utterance_length_range[0], self.word_length_range[0],
        )
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        # n_prosody_classes == 1 is allowed as an explicitly degenerate corpus
        # (collapses all prosodic variation); useful for calibration tests.
        if self.n_prosody_classes < 1:
            raise ValueError("n_prosody_classes must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for lo, hi in (self.utterance_length_range, self.word_length_range):
            if hi < lo:
                raise ValueError("range max must be >= min")


@dataclass(eq=False)
class Corpus:
    """List-like container of utterances plus vocabularies and planted metadata.

    speaker_offsets and phoneme_templates are populated for synthetic corpora
    and preserved across save/load; speaker_offsets back the "planted" speaker
    conditioning mode.
    """

    utterances: list[Utterance]
    phoneme_vocab: PhonemeVocab
    bpe_vocab: BpeVocab
    speaker_offsets: np.ndarray | None = None     # float32 [n_speakers, F]
    phoneme_templates: np.ndarray | None = None   # float32 [n_types, F]
    prosody_modulations: np.ndarray | None = None  # float32 [n_classes, F]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def __iter__(self):
        return iter(self.utterances)

    @property
    def n_speakers(self) -> int:
        if self.speaker_offsets is not None:
            return self.speaker_offsets.shape[0]
        return max(u.speaker_id for u in self.utterances) + 1

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented

        def arr_eq(a, b):
            if a is None or b is None:
                return (a is None) == (b is None)
            return np.array_equal(a, b)

        return (
            self.utterances == other.utterances
            and self.phoneme_vocab == other.phoneme_vocab
            and self.bpe_vocab == other.bpe_vocab
            and arr_eq(self.speaker_offsets, other.speaker_offsets)
            and arr_eq(self.phoneme_templates, other.phoneme_templates)
            and arr_eq(self.prosody_modulations, other.prosody_modulations)
            and self.meta == other.meta
        )


def stable_hash(values) -> int:
    """64-bit FNV-1a over a sequence of small integers; platform independent."""
    h = 0xCBF29CE484222325
    for v in values:
        h ^= (int(v) + 4) & 0xFFFFFFFFFFFFFFFF
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def prosody_class_of(types, position, within_word_pos, window, n_classes) -> int:
    """Deterministic prosodic class of one phoneme position.

    Hashes the phoneme types in the +-window neighborhood (out-of-range
    positions padded with -1) together with the within-word position.
    """
    lo, hi = position - window, position + window
    neigh = [types[i] if 0 <= i < len(types) else -1 for i in range(lo, hi + 1)]
    return stable_hash(neigh + [within_word_pos]) % n_classes


def _segment_words(length: int, lo: int, hi: int, rng) -> np.ndarray:
    """Word index per phoneme position; word lengths uniform in [lo, hi]."""
    word_of = np.empty(length, dtype=np.int64)
    pos = 0
    w = 0
    while pos < length:
        wl = int(rng.integers(lo, hi + 1))
        wl = min(wl, length - pos)
        word_of[pos:pos + wl] = w
        pos += wl
        w += 1
    return word_of


def _word_subword_ids(word_types: tuple[int, ...]) -> list[int]:
    """1-2 synthetic subword token ids derived from a word's phoneme content."""
    if len(word_types) >= 3:
        half = len(word_types) // 2
        parts = [word_types[:half], word_types[half:]]
    else:
        parts = [word_types]
    return [N_SPECIALS + stable_hash(p) % N_SYNTH_SUBWORDS for p in parts]


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    """Generate a corpus with planted phoneme/prosody/speaker structure.

    Deterministic given spec.seed. Frames of a phoneme occurrence are
    template[type] + modulation[prosody class] + offset[speaker], repeated for
    the class's duration factor, plus iid Gaussian noise.
    """
    rng = np.random.default_rng(spec.seed)
    F = spec.feature_dim

    templates = rng.normal(0.0, 1.0, size=(spec.n_phoneme_types, F))
    modulations = rng.normal(0.0, PROSODY_MOD_STD, size=(spec.n_prosody_classes, F))
    durations = rng.integers(1, MAX_DURATION_FACTOR + 1, size=spec.n_prosody_classes)
    offsets = rng.normal(0.0, SPEAKER_OFFSET_STD, size=(spec.n_speakers, F))

    phon_vocab = PhonemeVocab.from_plain_symbols(
        [f"p{i:02d}" for i in range(spec.n_phoneme_types)]
    )
    bpe_vocab = BpeVocab(
        tuple(_SPECIAL_SYMBOLS) + tuple(f"w{i:03d}" for i in range(N_SYNTH_SUBWORDS))
    )

    lo_u, hi_u = spec.utterance_length_range
    lo_w, hi_w = spec.word_length_range
    utterances = []
    for ui in range(spec.n_utterances):
        speaker = int(rng.integers(0, spec.n_speakers))
        T_ph = int(rng.integers(lo_u, hi_u + 1))
        types = rng.integers(0, spec.n_phoneme_types, size=T_ph)
        word_of = _segment_words(T_ph, lo_w, hi_w, rng)

        classes = np.empty(T_ph, dtype=np.int64)
        within = np.empty(T_ph, dtype=np.int64)
        for i in range(T_ph):
            within[i] = i - int(np.argmax(word_of == word_of[i]))
            classes[i] = prosody_class_of(
                types, i, int(within[i]),
                spec.prosody_context_window, spec.n_prosody_classes,
            )

        durs = durations[classes]
        total = int(durs.sum())
        ends = np.cumsum(durs)
        alignment = np.stack([ends - durs, ends], axis=1).astype(np.int64)

        rows = templates[types] + modulations[classes] + offsets[speaker]
        feats = np.repeat(rows, durs, axis=0)
        if spec.noise_std > 0:
            feats = feats + rng.normal(0.0, spec.noise_std, size=(total, F))

        bpe_ids, bpe_word = [], []
        n_words = int(word_of.max()) + 1
        for w in range(n_words):
            word_types = tuple(int(t) for t in types[word_of == w])
            for tok in _word_subword_ids(word_types):
                bpe_ids.append(tok)
                bpe_word.append(w)

        utterances.append(Utterance(
            id=f"utt{ui:05d}",
            speaker_id=speaker,
            phonemes=types.astype(np.int64) + N_SPECIALS,
            bpe=np.asarray(bpe_ids, dtype=np.int64),
            phoneme_word=word_of,
            bpe_word=np.asarray(bpe_word, dtype=np.int64),
            features=feats.astype(np.float32),
            alignment=alignment,
        ))

    return Corpus(
        utterances=utterances,
        phoneme_vocab=phon_vocab,
        bpe_vocab=bpe_vocab,
        speaker_offsets=offsets.astype(np.float32),
        phoneme_templates=templates.astype(np.float32),
        prosody_modulations=modulations.astype(np.float32),
        meta={
            "spec": {
                "n_phoneme_types": spec.n_phoneme_types,
                "n_speakers": spec.n_speakers,
                "n_utterances": spec.n_utterances,
                "utterance_length_range": list(spec.utterance_length_range),
                "word_length_range": list(spec.word_length_range),
                "prosody_context_window": spec.prosody_context_window,
                "n_prosody_classes": spec.n_prosody_classes,
                "feature_dim": spec.feature_dim,
                "noise_std": spec.noise_std,
                "seed": spec.seed,
            },
            "duration_factors": [int(d) for d in durations],
        },
    )


# --- mel extraction ---------------------------------------------------------

@dataclass(frozen=True)
class MelParams:
    sample_rate: int = 22050
    n_mels: int = 80
    f_max: float = 8000.0
    hop_length: int = 256

    def __post_init__(self):
        if min(self.sample_rate, self.n_mels, self.hop_length) <= 0 or self.f_max <= 0:
            raise ValueError("all mel parameters must be positive")
        if self.f_max > self.sample_rate / 2:
            raise ValueError("f_max above Nyquist")

    @property
    def n_fft(self) -> int:
        # Convention: FFT size is four hops (1024 for the default 256 hop).
        return 4 * self.hop_length


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(params: MelParams) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel band."""
    pts = np.linspace(0.0, _hz_to_mel(params.f_max), params.n_mels + 2)
    return _mel_to_hz(pts[1:-1])


def mel_filterbank(params: MelParams) -> np.ndarray:
    """Unnormalized triangular filters on FFT bin frequencies, [n_mels, n_bins]."""
    n_bins = params.n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * params.sample_rate / params.n_fft
    pts = _mel_to_hz(np.linspace(0.0, _hz_to_mel(params.f_max), params.n_mels + 2))
    fb = np.zeros((params.n_mels, n_bins))
    for m in range(params.n_mels):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        up = (bin_freqs - left) / max(center - left, 1e-12)
        down = (right - bin_freqs) / max(right - center, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def compute_mel(waveform: np.ndarray, params: MelParams) -> np.ndarray:
    """Log mel spectrogram [T_frames, n_mels] of a 1-D waveform.

    Center padding: the signal is zero-padded by n_fft//2 on both sides, so the
    frame count is floor(len(waveform) / hop_length) + 1. Power spectra go
    through unnormalized triangular mel filters and log(x + 1e-10).
    """
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if waveform.size == 0:
        raise ValueError("empty waveform")
    n_fft, hop = params.n_fft, params.hop_length

    padded = np.pad(waveform, n_fft // 2, mode="constant")
    n_frames = waveform.size // hop + 1

    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    starts = np.arange(n_frames) * hop
    frames = np.stack([padded[s:s + n_fft] for s in starts]) * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2

    fb = mel_filterbank(params)
    mel = power @ fb.T
    return np.log(mel + 1e-10).astype(np.float32)


# --- container I/O ----------------------------------------------------------

def save_corpus(corpus: Corpus, path):
    """Write a corpus container: magic, JSON manifest, float32 LE blob."""
    arrays = []   # (name, np.float32 array)
    offset = 0

    def register(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f4")
        rec = {"name": name, "shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
        arrays.append((rec, arr))
        return rec

    # Extra arrays go first in the blob so that a truncated file is reported
    # against the utterance record whose features fall outside the data.
    extra = {}
    for name in ("speaker_offsets", "phoneme_templates", "prosody_modulations"):
        arr = getattr(corpus, name)
        if arr is not None:
            extra[name] = register(name, arr)

    utt_records = []
    for u in corpus.utterances:
        feat = register(f"utt/{u.id}/features", u.features)
        utt_records.append({
            "id": u.id,
            "speaker_id": int(u.speaker_id),
            "phonemes": [int(x) for x in u.phonemes],
            "bpe": [int(x) for x in u.bpe],
            "phoneme_word": [int(x) for x in u.phoneme_word],
            "bpe_word": [int(x) for x in u.bpe_word],
            "alignment": [[int(s), int(e)] for s, e in u.alignment],
            "features": feat,
        })

    manifest = {
        "format": "prosodykit-corpus",
        "version": 1,
        "phoneme_vocab": list(corpus.phoneme_vocab.symbols),
        "bpe_vocab": list(corpus.bpe_vocab.tokens),
        "utterances": utt_records,
        "extra_arrays": extra,
        "meta": corpus.meta,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(_CORPUS_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, arr in arrays:
            fh.write(arr.tobytes())


def load_corpus(path) -> Corpus:
    """Read a corpus container written by save_corpus."""
    with open(path, "rb") as fh:
        data = fh.read()

    if data[:8] != _CORPUS_MAGIC:
        raise CorpusFormatError("bad magic: not a prosodykit corpus file")
    if len(data) < 16:
        raise CorpusFormatError("truncated header length field")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CorpusFormatError("truncated JSON manifest")
    try:
        manifest = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorpusFormatError(f"unparseable manifest: {e}") from e
    if manifest.get("format") != "prosodykit-corpus":
        raise CorpusFormatError("manifest is not a prosodykit corpus manifest")

    blob = data[16 + hlen:]

    def read_array(rec, where):
        shape = tuple(rec["shape"])
        nbytes = int(np.prod(shape)) * 4
        start = rec["offset"]
        if start + nbytes > len(blob):
            raise CorpusFormatError(f"{where}: feature data out of range (truncated blob)")
        return np.frombuffer(blob[start:start + nbytes], dtype="<f4").reshape(shape).copy()

    utterances = []
    for i, rec in enumerate(manifest["utterances"]):
        try:
            utterances.append(Utterance(
                id=rec["id"],
                speaker_id=int(rec["speaker_id"]),
                phonemes=np.asarray(rec["phonemes"], dtype=np.int64),
                bpe=np.asarray(rec["bpe"], dtype=np.int64),
                phoneme_word=np.asarray(rec["phoneme_word"], dtype=np.int64),
                bpe_word=np.asarray(rec["bpe_word"], dtype=np.int64),
                features=read_array(rec["features"], f"record {i}"),
                alignment=np.asarray(rec["alignment"], dtype=np.int64).reshape(-1, 2),
            ))
        except KeyError as e:
            raise CorpusFormatError(f"record {i}: missing field {e}") from e

    extra = {}
    for name, rec in manifest.get("extra_arrays", {}).items():
        extra[name] = read_array(rec, f"extra array '{name}'")

    return Corpus(
        utterances=utterances,
        phoneme_vocab=PhonemeVocab(tuple(manifest["phoneme_vocab"])),
        bpe_vocab=BpeVocab(tuple(manifest["bpe_vocab"])),
        speaker_offsets=extra.get("speaker_offsets"),
        phoneme_templates=extra.get("phoneme_templates"),
        prosody_modulations=extra.get("prosody_modulations"),
        meta=manifest.get("meta", {}),
    )
