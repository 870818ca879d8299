"""Desk-scale data sources: synthetic key-value recall and byte-level text.

The recall task lays key-value bindings at the front of the sequence and
queries at the end, with neutral filler between -- each query repeats a bound
key and the model must produce its value at the next position. Loss and
accuracy count answer positions only. A dictionary-replay solver provides the
ground-truth oracle: the task itself is never ambiguous.

Text corpora are consumed at byte level (ids 0..255) with one reserved pad id,
split into disjoint train/test regions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

from .rng import RngTree

__all__ = [
    "MqarVocab",
    "MqarInstance",
    "MqarDataset",
    "mqar_generate",
    "mqar_dataset",
    "mqar_replay_answers",
    "mqar_accuracy",
    "save_mqar",
    "load_mqar",
    "CorpusDataset",
    "load_corpus",
    "corpus_batches",
    "unigram_entropy",
    "write_synthetic_corpus",
    "BYTE_VOCAB_SIZE",
    "BYTE_PAD_ID",
]


# -- synthetic multi-query recall ---------------------------------------------


@dataclass(frozen=True)
class MqarVocab:
    """Disjoint id ranges: pad 0, filler 1, then keys, then values."""

    num_keys: int
    num_values: int

    @property
    def pad(self) -> int:
        return 0

    @property
    def filler(self) -> int:
        return 1

    @property
    def key_base(self) -> int:
        return 2

    @property
    def value_base(self) -> int:
        return 2 + self.num_keys

    @property
    def size(self) -> int:
        return 2 + self.num_keys + self.num_values

    def is_value(self, token: int) -> bool:
        return self.value_base <= token < self.size


@dataclass
class MqarInstance:
    sequence: np.ndarray          # (seq_len,) int64
    query_positions: np.ndarray   # positions of the answer tokens
    answers: np.ndarray           # the bound values, aligned with query_positions
    num_pairs: int
    vocab: MqarVocab

    @property
    def loss_mask(self) -> np.ndarray:
        m = np.zeros(len(self.sequence), dtype=bool)
        m[self.query_positions] = True
        return m


def mqar_generate(num_pairs: int, seq_len: int, vocab: MqarVocab, seed,
                  num_queries: Optional[int] = None) -> MqarInstance:
    """One recall instance: bindings, filler, then (key, value) query pairs.

    Keys are drawn without replacement so every queried key has exactly one
    binding; values are drawn with replacement from the value range. Queried
    pairs are sampled with replacement: knowing which values answered earlier
    queries says nothing about the next answer, so the only circuit that
    reaches full accuracy is genuine key-value retrieval (querying each pair
    exactly once admits a process-of-elimination shortcut instead).
    """
    rng = seed if isinstance(seed, RngTree) else RngTree(seed)
    num_queries = num_pairs if num_queries is None else num_queries
    if num_pairs < 1 or num_queries < 1:
        raise ValueError("num_pairs and num_queries must be >= 1")
    if num_pairs > vocab.num_keys:
        raise ValueError(f"{num_pairs} pairs exceed key vocab of {vocab.num_keys}")
    needed = 2 * num_pairs + 2 * num_queries
    if needed > seq_len:
        raise ValueError(
            f"infeasible packing: {num_pairs} pairs + {num_queries} queries "
            f"need {needed} tokens, sequence holds {seq_len}")
    keys = vocab.key_base + rng.child("keys").choice(
        vocab.num_keys, size=num_pairs, replace=False)
    values = vocab.value_base + rng.child("values").integers(
        0, vocab.num_values, size=num_pairs)
    which = rng.child("which").integers(0, num_pairs, size=num_queries)
    seq = np.full(seq_len, vocab.filler, dtype=np.int64)
    seq[0:2 * num_pairs:2] = keys
    seq[1:2 * num_pairs:2] = values
    q_start = seq_len - 2 * num_queries
    seq[q_start::2] = keys[which]
    seq[q_start + 1::2] = values[which]
    query_positions = np.arange(q_start + 1, seq_len, 2)
    return MqarInstance(sequence=seq, query_positions=query_positions,
                        answers=values[which].copy(), num_pairs=num_pairs, vocab=vocab)


def mqar_replay_answers(instance: MqarInstance) -> np.ndarray:
    """Symbolic solver: replay bindings into a dict, read off the queries.

    The answer to each query is the value most recently bound to its key.
    """
    bindings: dict[int, int] = {}
    seq = instance.sequence
    v = instance.vocab
    out = np.zeros(len(instance.query_positions), dtype=np.int64)
    for qi, pos in enumerate(instance.query_positions):
        bindings.clear()
        for p in range(pos - 1):  # bindings visible strictly before the query key
            tok = int(seq[p])
            if v.key_base <= tok < v.value_base and p + 1 < len(seq) \
                    and v.is_value(int(seq[p + 1])):
                bindings[tok] = int(seq[p + 1])
        out[qi] = bindings[int(seq[pos - 1])]
    return out


@dataclass
class MqarDataset:
    tokens: np.ndarray       # (M, seq_len)
    loss_mask: np.ndarray    # (M, seq_len) True at answer positions
    vocab: MqarVocab
    num_pairs: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.tokens[idx], self.loss_mask[idx]


def mqar_dataset(num_instances: int, num_pairs: int, seq_len: int,
                 vocab: MqarVocab, rng: RngTree,
                 num_queries: Optional[int] = None) -> MqarDataset:
    instances = [mqar_generate(num_pairs, seq_len, vocab, rng.child(i), num_queries)
                 for i in range(num_instances)]
    tokens = np.stack([inst.sequence for inst in instances])
    mask = np.stack([inst.loss_mask for inst in instances])
    return MqarDataset(tokens=tokens, loss_mask=mask, vocab=vocab, num_pairs=num_pairs)


def mqar_accuracy(forward_fn, dataset: MqarDataset, batch_size: int = 64) -> float:
    """Greedy-argmax accuracy over answer positions only.

    ``forward_fn(tokens)`` must return target-aligned logits: row t scores the
    token at position t.
    """
    hits = 0
    total = 0
    for start in range(0, len(dataset), batch_size):
        toks = dataset.tokens[start:start + batch_size]
        mask = dataset.loss_mask[start:start + batch_size]
        logits = forward_fn(toks)
        pred = np.argmax(logits[..., :toks.shape[1], :], axis=-1)
        hits += int((pred[mask] == toks[mask]).sum())
        total += int(mask.sum())
    return hits / total if total else 0.0


def save_mqar(path, dataset: MqarDataset) -> None:
    """Line-oriented numeric dump: header then one instance per line."""
    with open(path, "w") as fh:
        fh.write(f"mqar {len(dataset)} {dataset.seq_len} {dataset.num_pairs} "
                 f"{dataset.vocab.num_keys} {dataset.vocab.num_values}\n")
        for i in range(len(dataset)):
            toks = " ".join(map(str, dataset.tokens[i]))
            qpos = " ".join(map(str, np.flatnonzero(dataset.loss_mask[i])))
            fh.write(f"{toks} | {qpos}\n")


def load_mqar(path) -> MqarDataset:
    with open(path) as fh:
        header = fh.readline().split()
        if header[0] != "mqar":
            raise ValueError(f"{path} is not an mqar dump")
        count, seq_len, num_pairs, nk, nv = map(int, header[1:])
        vocab = MqarVocab(nk, nv)
        tokens = np.zeros((count, seq_len), dtype=np.int64)
        mask = np.zeros((count, seq_len), dtype=bool)
        for i in range(count):
            tok_part, q_part = fh.readline().split("|")
            tokens[i] = np.array(tok_part.split(), dtype=np.int64)
            mask[i, np.array(q_part.split(), dtype=np.int64)] = True
    return MqarDataset(tokens=tokens, loss_mask=mask, vocab=vocab, num_pairs=num_pairs)


# -- byte-level corpus --------------------------------------------------------


BYTE_VOCAB_SIZE = 257   # 256 byte values + pad
BYTE_PAD_ID = 256


@dataclass
class CorpusDataset:
    data: np.ndarray       # uint8 bytes of the whole corpus
    train_end: int         # train region is [0, train_end), test is the rest
    seq_len: int

    @property
    def vocab_size(self) -> int:
        return BYTE_VOCAB_SIZE

    @property
    def pad_id(self) -> int:
        return BYTE_PAD_ID

    def region(self, split: str) -> np.ndarray:
        if split == "train":
            return self.data[:self.train_end]
        if split == "test":
            return self.data[self.train_end:]
        raise ValueError(f"unknown split {split!r}")

    def num_windows(self, split: str) -> int:
        return len(self.region(split)) // self.seq_len


def load_corpus(path, seq_len: int, train_frac: float = 0.9) -> CorpusDataset:
    raw = Path(path).read_bytes()
    data = np.frombuffer(raw, dtype=np.uint8)
    if len(data) < 2 * seq_len:
        raise ValueError(f"corpus of {len(data)} bytes too small for seq_len {seq_len}")
    train_end = int(len(data) * train_frac)
    ds = CorpusDataset(data=data, train_end=train_end, seq_len=seq_len)
    if ds.num_windows("train") < 1 or ds.num_windows("test") < 1:
        raise ValueError("train/test split leaves an empty side; adjust train_frac")
    return ds


def corpus_batches(ds: CorpusDataset, batch_size: int, seed: int,
                   split: str = "train", epochs: Optional[int] = None,
                   ) -> Iterator[np.ndarray]:
    """Deterministic shuffled non-overlapping windows from one split.

    Each epoch visits every window of the split exactly once (trailing partial
    batch dropped only if smaller than one window). Windows never cross the
    split boundary, so train and test content stay disjoint.
    """
    region = ds.region(split)
    n_win = len(region) // ds.seq_len
    if n_win < 1:
        raise ValueError(f"corpus split {split!r} smaller than one window")
    rng = RngTree(seed).child("corpus").child(split)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.child(epoch).permutation(n_win)
        for start in range(0, n_win, batch_size):
            idx = order[start:start + batch_size]
            batch = np.stack([
                region[w * ds.seq_len:(w + 1) * ds.seq_len] for w in idx])
            yield batch.astype(np.int64)
        epoch += 1


def unigram_entropy(ds: CorpusDataset, split: str = "train") -> float:
    """Entropy (nats/byte) of the split's byte unigram distribution."""
    counts = np.bincount(ds.region(split), minlength=256).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# -- synthetic corpus ----------------------------------------------------------

_WORDS = (
    "the of and to in is was he for it with as his on be at by had not are but "
    "from or have an they which one you were all her she there would their we "
    "him been has when who will no more if out so up said what its about than "
    "into them can only other time new some could these two may first then do "
    "any like my now over such our man me even most made after also did many "
    "before must through years where much your way well down should because "
    "each just those people how too little good world make very year still see "
    "own work men day get here old life both between being under never same "
    "another know while last might great since against right three next came "
    "found house part took water room light jumped small large river stone "
    "mountain forest winter summer morning evening silver golden garden window "
    "letter answer question story music silence journey shadow harbor candle "
    "meadow village thunder whisper lantern orchard bridge castle feather "
    "marble copper wooden ancient quiet broken hollow distant gentle curious"
).split()


def write_synthetic_corpus(path, num_bytes: int, seed: int = 0) -> Path:
    """Deterministic English-like filler text of at least ``num_bytes`` bytes.

    Zipf-weighted words composed into sentences and paragraphs; enough
    intra-word and word-order structure that a sequence model beats the byte
    unigram baseline by a wide margin. Self-generated, so the fixture ships
    with no licensing strings attached.
    """
    gen = RngTree(seed).child("corpus-text").generator()
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    pieces: List[str] = []
    size = 0
    while size < num_bytes:
        n_words = int(gen.integers(4, 15))
        words = [_WORDS[i] for i in gen.choice(len(_WORDS), size=n_words, p=probs)]
        if gen.random() < 0.18 and n_words > 5:
            comma_at = int(gen.integers(2, n_words - 2))
            words[comma_at] = words[comma_at] + ","
        closer = "." if gen.random() < 0.92 else "?"
        sentence = words[0].capitalize() + " " + " ".join(words[1:]) + closer
        sep = "\n\n" if gen.random() < 0.08 else " "
        pieces.append(sentence + sep)
        size += len(sentence) + len(sep)
    text = "".join(pieces)
    out = Path(path)
    out.write_bytes(text.encode("ascii"))
    return out
