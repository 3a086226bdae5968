"""
Binary tensor encoding of parsed scores.

A score becomes x in {0,1}^(T x P x (N+D+1)): N pitch channels, D note-value
channels and one continuation channel per spine and data row. Models see the
fixed-length 3s form built by `subsample`.
"""

import os
import glob
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from tqdm import tqdm

from artifacts import atomic_write_text, read_container, sha256_bytes, write_container
from composers import get_composer, slugify
from errors import (
    CacheFormatError,
    CorpusParseError,
    KernClassifierError,
    ManifestError,
    SpineOverflow,
    UnknownComposer,
    UnknownValue,
    VocabFormatError,
)
from kern_parser import CellKind, ParsedScore, parse_file

logger = logging.getLogger(__name__)

SAMPLE_SIZE = int(os.getenv("SAMPLE_SIZE", 500))

VOCAB_FORMAT = "kernclf-vocab"
VOCAB_VERSION = 1
CACHE_MAGIC = "KERNCLF-CACHE"
CACHE_VERSION = 1

MANIFEST_COLUMNS = ["path", "composer", "duration_scale", "collection"]


# ========== Manifest ==========

class ManifestEntry(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    path: str
    composer: str
    collection: str = ""
    duration_scale: Fraction = Fraction(1)

    @field_validator("composer", "collection", mode="before")
    @classmethod
    def _slug(cls, v):
        return slugify(v or "")

    @field_validator("duration_scale", mode="before")
    @classmethod
    def _rational(cls, v):
        try:
            value = Fraction(str(v).strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"duration_scale {v!r} is not a rational") from e
        if value <= 0:
            raise ValueError("duration_scale must be positive")
        return value


def load_manifest(path) -> List[ManifestEntry]:
    """
    Read a tab-separated manifest. Paths are relative to the manifest and may
    be glob patterns; matches are expanded in sorted order. Lines starting
    with '#' are comments. A header row naming the columns is optional.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")

    rows = [
        (lineno, line.rstrip("\n"))
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not rows:
        raise ManifestError(f"manifest {path} lists no scores")

    header = MANIFEST_COLUMNS
    first = rows[0][1].split("\t")
    if first[0].strip().lower() == "path":
        header = [h.strip().lower() for h in first]
        rows = rows[1:]
        if "composer" not in header:
            raise ManifestError(f"manifest {path} header has no composer column")

    entries: List[ManifestEntry] = []
    seen = set()
    for lineno, line in rows:
        cols = [c.strip() for c in line.split("\t")]
        if len(cols) < 2:
            raise ManifestError(f"{path}:{lineno}: expected at least path and composer")
        fields = dict(zip(header, cols))

        composer = fields.get("composer", "")
        scale = fields.get("duration_scale")
        if not scale:
            info = get_composer(composer)
            scale = info.duration_scale if info else "1"

        pattern = fields["path"]
        full = pattern if os.path.isabs(pattern) else str(path.parent / pattern)
        if glob.has_magic(full):
            matches = sorted(glob.glob(full))
            if not matches:
                logger.warning(f"⚠️ {path}:{lineno}: pattern {pattern!r} matched no files")
        else:
            if not os.path.exists(full):
                raise ManifestError(f"{path}:{lineno}: score {full} does not exist")
            matches = [full]

        for match in matches:
            if match in seen:
                logger.warning(f"⚠️ {match} listed twice in {path}, keeping the first")
                continue
            seen.add(match)
            try:
                entries.append(ManifestEntry(
                    path=match,
                    composer=composer,
                    collection=fields.get("collection", ""),
                    duration_scale=scale,
                ))
            except ValueError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e

    if not entries:
        raise ManifestError(f"manifest {path} lists no scores")
    return entries


def parse_corpus(entries: Sequence[ManifestEntry], progress: bool = False) -> List[ParsedScore]:
    """Parse every manifest score; all failures are reported together."""
    parsed, failures = [], []
    for entry in tqdm(entries, desc="parsing", unit="score", disable=not progress):
        try:
            parsed.append(parse_file(entry.path))
        except KernClassifierError as e:
            failures.append((entry.path, e))
    if failures:
        raise CorpusParseError(failures)
    return parsed


# ========== Vocabulary ==========

@dataclass
class NoteValueVocab:
    value_to_index: dict
    N: int
    pitch_base: int = 0
    P: int = 6

    def __post_init__(self):
        if sorted(self.value_to_index.values()) != list(range(len(self.value_to_index))):
            raise VocabFormatError("note-value indices must be exactly 0..D-1")
        if self.D < 1 or self.N < 1 or self.P < 1:
            raise VocabFormatError(f"vocabulary sizes must be positive (N={self.N}, D={self.D}, P={self.P})")

    @property
    def D(self) -> int:
        return len(self.value_to_index)

    @property
    def F(self) -> int:
        """Channels per (t, p): pitches, note-values, continuation."""
        return self.N + self.D + 1

    @property
    def continuation_channel(self) -> int:
        return self.N + self.D

    @property
    def values(self) -> List[Fraction]:
        return sorted(self.value_to_index, key=self.value_to_index.get)

    def duration_index(self, value: Fraction, permissive: bool = False) -> int:
        idx = self.value_to_index.get(value)
        if idx is not None:
            return idx
        if not permissive:
            raise UnknownValue(f"note-value {value} is not in the vocabulary")
        # Nearest value, lowest index on ties.
        nearest = min(self.value_to_index.items(), key=lambda kv: (abs(kv[0] - value), kv[1]))
        return nearest[1]

    def pitch_index(self, pitch: int, permissive: bool = False) -> int:
        idx = pitch - self.pitch_base
        if 0 <= idx < self.N:
            return idx
        if not permissive:
            raise UnknownValue(f"pitch {pitch} lies outside the vocabulary range [{self.pitch_base}, {self.pitch_base + self.N - 1}]")
        return min(max(idx, 0), self.N - 1)

    def to_json(self) -> str:
        doc = {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "N": self.N,
            "D": self.D,
            "P": self.P,
            "pitch_base": self.pitch_base,
            "values": [[f"{v.numerator}/{v.denominator}", i] for v, i in sorted(self.value_to_index.items(), key=lambda kv: kv[1])],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NoteValueVocab":
        try:
            doc = json.loads(text)
            if doc.get("format") != VOCAB_FORMAT:
                raise VocabFormatError("not a vocabulary file")
            if doc.get("version") != VOCAB_VERSION:
                raise VocabFormatError(f"unsupported vocabulary version {doc.get('version')}")
            table = {Fraction(v): int(i) for v, i in doc["values"]}
            vocab = cls(value_to_index=table, N=int(doc["N"]), pitch_base=int(doc["pitch_base"]), P=int(doc["P"]))
        except (KeyError, TypeError, ValueError, ZeroDivisionError) as e:
            raise VocabFormatError(f"malformed vocabulary: {e}") from e
        if vocab.D != int(doc["D"]):
            raise VocabFormatError(f"vocabulary declares D={doc['D']} but lists {vocab.D} values")
        return vocab

    def digest(self) -> str:
        return sha256_bytes(self.to_json().encode("utf-8"))


def build_vocab_from_scores(scores: Iterable[Tuple[ParsedScore, Fraction]]) -> NoteValueVocab:
    """Fold over (parsed score, duration scale) pairs in manifest order."""
    table: dict = {}
    lo, hi = None, None
    widest = 0
    count = 0
    for parsed, scale in scores:
        count += 1
        widest = max(widest, parsed.spine_count)
        for value in parsed.durations():
            scaled = value * scale
            if scaled not in table:
                table[scaled] = len(table)
        for pitch in parsed.pitches():
            lo = pitch if lo is None else min(lo, pitch)
            hi = pitch if hi is None else max(hi, pitch)

    if count == 0:
        raise ManifestError("cannot build a vocabulary from an empty corpus")
    if not table:
        raise ManifestError("corpus contains no notes or rests")

    if lo is None:
        lo, hi = 0, 0
    return NoteValueVocab(value_to_index=table, N=hi - lo + 1, pitch_base=lo, P=max(widest, 1))


def build_vocab(manifest: Sequence[ManifestEntry], progress: bool = False) -> NoteValueVocab:
    parsed = parse_corpus(manifest, progress=progress)
    vocab = build_vocab_from_scores(zip(parsed, (e.duration_scale for e in manifest)))
    logger.info(f"📊 vocabulary: N={vocab.N} D={vocab.D} P={vocab.P} pitch_base={vocab.pitch_base}")
    return vocab


def save_vocab(vocab: NoteValueVocab, path):
    atomic_write_text(path, vocab.to_json())


def load_vocab(path) -> NoteValueVocab:
    path = Path(path)
    if not path.exists():
        raise VocabFormatError(f"vocabulary {path} does not exist")
    return NoteValueVocab.from_json(path.read_text(encoding="utf-8"))


# ========== Tensors ==========

@dataclass
class ScoreTensor:
    data: np.ndarray
    label: Optional[int] = None

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def P(self) -> int:
        return self.data.shape[1]

    @property
    def F(self) -> int:
        return self.data.shape[2]


@dataclass
class SampledTensor:
    data: np.ndarray
    s: int
    source_T: int
    label: Optional[int] = None


def encode_score(
    parsed: ParsedScore,
    vocab: NoteValueVocab,
    duration_scale: Fraction = Fraction(1),
    permissive: bool = False,
    label: Optional[int] = None,
) -> ScoreTensor:
    if parsed.spine_count > vocab.P:
        raise SpineOverflow(f"{parsed.source_path or 'score'} has {parsed.spine_count} spines, vocabulary allows {vocab.P}")

    x = np.zeros((len(parsed.rows), vocab.P, vocab.F), dtype=np.uint8)
    cont = vocab.continuation_channel
    for t, row in enumerate(parsed.rows):
        for p, cell in enumerate(row.cells):
            if cell.kind == CellKind.CONTINUATION:
                x[t, p, cont] = 1
            elif cell.kind in (CellKind.NOTES, CellKind.REST):
                d = vocab.duration_index(cell.duration * duration_scale, permissive)
                x[t, p, vocab.N + d] = 1
                for pitch in cell.pitches:
                    x[t, p, vocab.pitch_index(pitch, permissive)] = 1
    return ScoreTensor(data=x, label=label)


class DecodedCell(NamedTuple):
    kind: CellKind
    pitches: Tuple[int, ...]
    duration_index: Optional[int]


def decode_score(tensor: ScoreTensor, vocab: NoteValueVocab) -> List[List[DecodedCell]]:
    """Recover (kind, absolute pitches, note-value index) for every cell."""
    rows = []
    N, cont = vocab.N, vocab.continuation_channel
    for t in range(tensor.T):
        cells = []
        for p in range(tensor.P):
            bits = tensor.data[t, p]
            if bits[cont]:
                cells.append(DecodedCell(CellKind.CONTINUATION, (), None))
                continue
            durations = np.flatnonzero(bits[N:cont])
            if durations.size == 0:
                cells.append(DecodedCell(CellKind.EMPTY, (), None))
                continue
            pitches = tuple(int(i) + vocab.pitch_base for i in np.flatnonzero(bits[:N]))
            kind = CellKind.NOTES if pitches else CellKind.REST
            cells.append(DecodedCell(kind, pitches, int(durations[0])))
        rows.append(cells)
    return rows


def decode_parsed(parsed: ParsedScore, vocab: NoteValueVocab, duration_scale: Fraction = Fraction(1)) -> List[List[DecodedCell]]:
    """The same view as decode_score, computed straight from the parse."""
    rows = []
    for row in parsed.rows:
        cells = []
        for cell in row.cells:
            d = None if cell.duration is None else vocab.duration_index(cell.duration * duration_scale)
            cells.append(DecodedCell(cell.kind, tuple(sorted(cell.pitches)), d))
        cells += [DecodedCell(CellKind.EMPTY, (), None)] * (vocab.P - len(cells))
        rows.append(cells)
    return rows


def subsample(tensor: ScoreTensor, s: int = SAMPLE_SIZE) -> SampledTensor:
    """
    Concatenate the first, middle and last s rows into a 3s-row tensor.
    Windows shorter than s are zero-padded on the right.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    T = tensor.T
    out = np.zeros((3 * s,) + tensor.data.shape[1:], dtype=tensor.data.dtype)
    starts = (0, max(0, (T - s) // 2), max(0, T - s))
    for w, start in enumerate(starts):
        chunk = tensor.data[start:start + s]
        out[w * s:w * s + chunk.shape[0]] = chunk
    return SampledTensor(data=out, s=s, source_T=T, label=tensor.label)


# ========== Encoded corpus ==========

@dataclass
class EncodedCorpus:
    tensors: List[ScoreTensor]
    labels: np.ndarray
    class_names: List[str]
    paths: List[str] = field(default_factory=list)
    composers: List[str] = field(default_factory=list)
    collections: List[str] = field(default_factory=list)
    vocab_digest: str = ""

    def __len__(self):
        return len(self.tensors)

    @property
    def C(self) -> int:
        return len(self.class_names)

    @property
    def P(self) -> int:
        return self.tensors[0].P

    @property
    def F(self) -> int:
        return self.tensors[0].F

    def class_counts(self) -> dict:
        counts = np.bincount(self.labels, minlength=self.C)
        return {name: int(n) for name, n in zip(self.class_names, counts)}

    def subset(self, indices: Sequence[int]) -> "EncodedCorpus":
        idx = list(indices)
        return EncodedCorpus(
            tensors=[self.tensors[i] for i in idx],
            labels=self.labels[idx],
            class_names=list(self.class_names),
            paths=[self.paths[i] for i in idx] if self.paths else [],
            composers=[self.composers[i] for i in idx] if self.composers else [],
            collections=[self.collections[i] for i in idx] if self.collections else [],
            vocab_digest=self.vocab_digest,
        )

    def select(self, selectors: Sequence[Tuple[str, Optional[str]]]) -> "EncodedCorpus":
        """
        Keep scores matching any (composer, collection) selector and relabel
        classes densely in selector order.
        """
        class_names: List[str] = []
        for composer, _ in selectors:
            if composer not in class_names:
                class_names.append(composer)

        present = set(self.composers)
        for composer, collection in selectors:
            if composer not in present:
                raise UnknownComposer(f"composer {composer!r} is not in the corpus")
            if collection and not any(
                c == composer and k == collection for c, k in zip(self.composers, self.collections)
            ):
                raise UnknownComposer(f"collection {composer}:{collection} is not in the corpus")

        keep = [
            i for i, (c, k) in enumerate(zip(self.composers, self.collections))
            if any(c == sc and (sk is None or k == sk) for sc, sk in selectors)
        ]
        sub = self.subset(keep)
        sub.class_names = class_names
        sub.labels = np.array([class_names.index(c) for c in sub.composers], dtype=np.int64)
        return sub

    def batch(self, indices: Sequence[int], s: int) -> Tuple[np.ndarray, np.ndarray]:
        """Float64 [B, 3s, P, F] inputs and int labels for the given scores."""
        X = np.stack([subsample(self.tensors[i], s).data for i in indices]).astype(np.float64)
        return X, self.labels[list(indices)]


def encode_corpus(
    entries: Sequence[ManifestEntry],
    vocab: NoteValueVocab,
    parsed: Optional[Sequence[ParsedScore]] = None,
    permissive: bool = False,
    progress: bool = False,
) -> EncodedCorpus:
    if parsed is None:
        parsed = parse_corpus(entries, progress=progress)

    class_names: List[str] = []
    for e in entries:
        if e.composer not in class_names:
            class_names.append(e.composer)

    tensors, failures = [], []
    for entry, score in tqdm(list(zip(entries, parsed)), desc="encoding", unit="score", disable=not progress):
        try:
            label = class_names.index(entry.composer)
            tensors.append(encode_score(score, vocab, entry.duration_scale, permissive=permissive, label=label))
        except KernClassifierError as e:
            failures.append((entry.path, e))
    if failures:
        raise CorpusParseError(failures)

    return EncodedCorpus(
        tensors=tensors,
        labels=np.array([t.label for t in tensors], dtype=np.int64),
        class_names=class_names,
        paths=[e.path for e in entries],
        composers=[e.composer for e in entries],
        collections=[e.collection for e in entries],
        vocab_digest=vocab.digest(),
    )


def save_cache(corpus: EncodedCorpus, path):
    lengths = np.array([t.T for t in corpus.tensors], dtype=np.int64)
    flat = np.concatenate([t.data.reshape(-1) for t in corpus.tensors]) if corpus.tensors else np.zeros(0, np.uint8)
    write_container(path, CACHE_MAGIC, CACHE_VERSION, {
        "bits": np.packbits(flat),
        "nbits": np.array(flat.size, dtype=np.int64),
        "lengths": lengths,
        "shape": np.array([corpus.P, corpus.F], dtype=np.int64),
        "labels": corpus.labels.astype(np.int64),
        "class_names": np.array(corpus.class_names, dtype=str),
        "paths": np.array(corpus.paths, dtype=str),
        "composers": np.array(corpus.composers, dtype=str),
        "collections": np.array(corpus.collections, dtype=str),
        "vocab_digest": np.array(corpus.vocab_digest),
    })


def load_cache(path) -> EncodedCorpus:
    z = read_container(path, CACHE_MAGIC, CACHE_VERSION, CacheFormatError)
    try:
        P, F = (int(v) for v in z["shape"])
        lengths = z["lengths"]
        nbits = int(z["nbits"])
        if nbits != int(lengths.sum()) * P * F:
            raise CacheFormatError(f"{path}: bit count does not match score lengths")
        flat = np.unpackbits(z["bits"], count=nbits)
        labels = z["labels"].astype(np.int64)
        tensors, offset = [], 0
        for T, y in zip(lengths, labels):
            size = int(T) * P * F
            tensors.append(ScoreTensor(data=flat[offset:offset + size].reshape(int(T), P, F), label=int(y)))
            offset += size
        return EncodedCorpus(
            tensors=tensors,
            labels=labels,
            class_names=[str(c) for c in z["class_names"]],
            paths=[str(p) for p in z["paths"]],
            composers=[str(c) for c in z["composers"]],
            collections=[str(c) for c in z["collections"]],
            vocab_digest=str(z["vocab_digest"]),
        )
    except KeyError as e:
        raise CacheFormatError(f"{path}: missing field {e}") from e
