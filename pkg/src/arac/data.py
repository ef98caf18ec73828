"""Tensor archives, padding/batching, word embeddings and the synthetic toy task.

Tensor archive layout (all integers little-endian)::

    b"ARAC"  u32 version(=1)
    u32 header_len  header_len bytes of UTF-8 JSON (an object)
    u32 n_entries
    n_entries x { u16 name_len, name (UTF-8), u8 dtype(=1: f32), u8 rank,
                  rank x u32 extent, u64 payload_len }
    u32 crc32 of every byte above
    n_entries x { payload_len bytes row-major f32, u32 crc32 of the payload }

Readers reject bad magic/version, a table checksum mismatch, payload lengths
that disagree with the declared shape, truncated or trailing bytes, and any
payload checksum mismatch (naming the entry).
"""
import json
from collections import Counter
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, CorruptFileError, ValidationError

MAGIC = b"ARAC"
VERSION = 1
DTYPE_F32 = 1


# -- archives ----------------------------------------------------------------

def write_archive(path, tensors, header=None):
    """Write ``{name: array}`` as f32. Returns the path."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    arrays = []
    for name in names:
        v = tensors[name]
        v = getattr(v, "data", v)
        arrays.append(np.array(v, dtype="<f4", order="C"))
    head = json.dumps(header or {}, sort_keys=True).encode()
    meta = bytearray(MAGIC)
    meta += struct.pack("<II", VERSION, len(head)) + head
    meta += struct.pack("<I", len(names))
    for name, arr in zip(names, arrays):
        raw = name.encode()
        meta += struct.pack("<HBB", len(raw), DTYPE_F32, arr.ndim) + raw
        meta += struct.pack(f"<{arr.ndim}I", *arr.shape)
        meta += struct.pack("<Q", arr.nbytes)
    meta += struct.pack("<I", zlib.crc32(meta))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(meta)
        for arr in arrays:
            payload = arr.tobytes()
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))
    return path


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptFileError(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_archive(path, with_header=False):
    """Read an archive into ``{name: float32 array}`` (plus the header dict if asked)."""
    path = Path(path)
    buf = path.read_bytes()
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CorruptFileError(f"{path}: bad magic")
    version, head_len = r.unpack("<II")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    head_raw = r.take(head_len)
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        name_len, dtype, rank = r.unpack("<HBB")
        name_raw = r.take(name_len)
        shape = r.unpack(f"<{rank}I")
        (nbytes,) = r.unpack("<Q")
        entries.append((name_raw, dtype, shape, nbytes))
    table_end = r.pos
    (crc,) = r.unpack("<I")
    if zlib.crc32(buf[:table_end]) != crc:
        raise CorruptFileError(f"{path}: header/entry table checksum mismatch")
    try:
        header = json.loads(head_raw.decode())
    except ValueError:
        raise CorruptFileError(f"{path}: unreadable header") from None
    out = {}
    for name_raw, dtype, shape, nbytes in entries:
        name = name_raw.decode()
        if dtype != DTYPE_F32:
            raise CorruptFileError(f"{path}: entry {name!r} has unknown dtype code {dtype}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptFileError(f"{path}: entry {name!r} declares {nbytes} bytes for shape {shape}")
        if name in out:
            raise CorruptFileError(f"{path}: duplicate entry {name!r}")
        payload = r.take(nbytes)
        (pcrc,) = r.unpack("<I")
        if zlib.crc32(payload) != pcrc:
            raise CorruptFileError(f"{path}: checksum mismatch in entry {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return (out, header) if with_header else out


# -- samples and batches -----------------------------------------------------

@dataclass
class Sample:
    question: np.ndarray   # [n_q, word_emb_dim]
    image: np.ndarray      # [n_i, image_feat_dim]
    boxes: np.ndarray      # [n_i, 4] normalized (x_min, y_min, x_max, y_max)
    targets: np.ndarray    # [n_answers] soft scores


@dataclass
class Batch:
    question: np.ndarray       # [B, n_q_max, w]
    question_mask: np.ndarray  # [B, n_q_max] bool
    image: np.ndarray          # [B, n_i_max, f]
    image_mask: np.ndarray     # [B, n_i_max] bool
    boxes: np.ndarray          # [B, n_i_max, 4]
    targets: np.ndarray = None  # [B, n_answers]

    def __len__(self):
        return self.question.shape[0]

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return Batch(**values)


def normalize_boxes(boxes, width, height):
    """Pixel ``(x_min, y_min, x_max, y_max)`` boxes to the unit square."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return boxes / np.array([width, height, width, height], dtype=np.float64)


def _validate_sample(s, n_i_max):
    if s.question.ndim != 2 or s.question.shape[0] < 1:
        raise ValidationError(f"question needs shape [n_q >= 1, dim], got {s.question.shape}")
    n_i = s.image.shape[0] if s.image.ndim == 2 else 0
    if n_i < 1:
        raise ValidationError(f"image needs at least one region, got shape {s.image.shape}")
    if n_i > n_i_max:
        raise ValidationError(f"image has {n_i} regions, more than {n_i_max}")
    if s.boxes.shape != (n_i, 4):
        raise ValidationError(f"boxes shape {s.boxes.shape} does not match {n_i} regions")
    t = np.asarray(s.targets)
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValidationError("target scores must lie in [0, 1]")


def pad_and_batch(samples, n_q_max=14, n_i_max=100, dtype=np.float64):
    """Zero-pad questions to ``n_q_max`` words (truncating longer ones) and images to ``n_i_max`` regions."""
    samples = list(samples)
    if not samples:
        raise ValidationError("cannot batch zero samples")
    for s in samples:
        _validate_sample(s, n_i_max)
    b = len(samples)
    w = samples[0].question.shape[1]
    f = samples[0].image.shape[1]
    question = np.zeros((b, n_q_max, w), dtype)
    q_mask = np.zeros((b, n_q_max), bool)
    image = np.zeros((b, n_i_max, f), dtype)
    i_mask = np.zeros((b, n_i_max), bool)
    boxes = np.zeros((b, n_i_max, 4), dtype)
    targets = np.stack([np.asarray(s.targets, dtype) for s in samples])
    for k, s in enumerate(samples):
        n_q = min(s.question.shape[0], n_q_max)
        question[k, :n_q] = s.question[:n_q]
        q_mask[k, :n_q] = True
        n_i = s.image.shape[0]
        image[k, :n_i] = s.image
        i_mask[k, :n_i] = True
        boxes[k, :n_i] = s.boxes
    return Batch(question, q_mask, image, i_mask, boxes, targets)


def unbatch(batch):
    """Inverse of :func:`pad_and_batch` (truncated words stay truncated)."""
    out = []
    for k in range(len(batch)):
        qm, im = batch.question_mask[k], batch.image_mask[k]
        out.append(Sample(batch.question[k][qm], batch.image[k][im], batch.boxes[k][im],
                          None if batch.targets is None else batch.targets[k]))
    return out


class Dataset:
    """Padded sample store, float32 in memory and on disk."""

    ARRAYS = ("question", "question_len", "image", "image_len", "boxes", "targets")

    def __init__(self, question, question_len, image, image_len, boxes, targets):
        self.question = np.asarray(question, np.float32)
        self.question_len = np.asarray(question_len).astype(np.int64)
        self.image = np.asarray(image, np.float32)
        self.image_len = np.asarray(image_len).astype(np.int64)
        self.boxes = np.asarray(boxes, np.float32)
        self.targets = np.asarray(targets, np.float32)
        n = self.question.shape[0]
        if any(getattr(self, a).shape[0] != n for a in self.ARRAYS):
            raise ValidationError("dataset arrays disagree on the sample count")
        if n == 0:
            raise ValidationError("dataset is empty")

    def __len__(self):
        return self.question.shape[0]

    @property
    def n_q_max(self):
        return self.question.shape[1]

    @property
    def n_i_max(self):
        return self.image.shape[1]

    @classmethod
    def from_samples(cls, samples, n_q_max=14, n_i_max=100):
        b = pad_and_batch(samples, n_q_max, n_i_max, np.float32)
        return cls(b.question, b.question_mask.sum(1), b.image, b.image_mask.sum(1), b.boxes, b.targets)

    def batch(self, idx=None):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        ql, il = self.question_len[idx], self.image_len[idx]
        return Batch(self.question[idx], np.arange(self.n_q_max) < ql[:, None],
                     self.image[idx], np.arange(self.n_i_max) < il[:, None],
                     self.boxes[idx], self.targets[idx])

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(*(getattr(self, a)[idx] for a in self.ARRAYS))

    def samples(self):
        return unbatch(self.batch())

    def save(self, path, header=None):
        tensors = {a: getattr(self, a) for a in self.ARRAYS}
        return write_archive(path, tensors, dict(header or {}, kind="dataset"))

    @classmethod
    def load(cls, path):
        tensors, header = read_archive(path, with_header=True)
        missing = [a for a in cls.ARRAYS if a not in tensors]
        if header.get("kind") != "dataset" or missing:
            raise ValidationError(f"{path}: not a dataset archive (missing {missing})")
        return cls(*(tensors[a] for a in cls.ARRAYS))


# -- candidate answers -------------------------------------------------------

class AnswerVocab:
    """Ordered candidate-answer list; index ``k`` is logit ``k``."""

    def __init__(self, answers):
        self.answers = list(answers)
        self.index = {a: i for i, a in enumerate(self.answers)}
        if len(self.index) != len(self.answers):
            raise ValidationError("candidate answers must be unique")

    def __len__(self):
        return len(self.answers)

    @classmethod
    def build(cls, annotations, min_count=1, max_size=None):
        """Most frequent answers over ``annotations`` (one list of strings per question).

        Ties break alphabetically so the order is reproducible.
        """
        counts = Counter(a for answers in annotations for a in answers)
        ranked = sorted((a for a, n in counts.items() if n >= min_count), key=lambda a: (-counts[a], a))
        return cls(ranked[:max_size])

    def soft_scores(self, answers, full_credit=3):
        """Target row: ``min(1, votes / full_credit)`` per candidate; unknown answers are dropped."""
        row = np.zeros(len(self), np.float32)
        for a, n in Counter(answers).items():
            if a in self.index:
                row[self.index[a]] = min(1.0, n / full_credit)
        return row

    def save(self, path):
        Path(path).write_text("".join(a + "\n" for a in self.answers))

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text().splitlines())


# -- word embeddings ---------------------------------------------------------

def load_word_embeddings(path, vocab, dim=None, seed=0):
    """Build a ``[len(vocab), dim]`` table from a text or archive embedding file.

    Text files hold ``token v1 ... vD`` lines. Archives hold an ``embeddings``
    tensor with the token list under ``header["vocab"]``. Words absent from the
    file get a seeded N(0, 0.1^2) row. Returns ``(table, missing_words)``.
    """
    path = Path(path)
    known = {}
    if path.suffix == ".arc":
        tensors, header = read_archive(path, with_header=True)
        words = header.get("vocab")
        if "embeddings" not in tensors or words is None:
            raise ValidationError(f"{path}: embedding archive needs 'embeddings' and header vocab")
        known = dict(zip(words, tensors["embeddings"]))
    else:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if not parts[0] and len(parts) == 1:
                    continue
                try:
                    vec = np.array([float(v) for v in parts[1:]], dtype=np.float32)
                except ValueError:
                    raise ValidationError(f"{path}:{lineno}: non-numeric embedding value") from None
                if vec.size == 0 or (dim is not None and vec.size != dim):
                    raise ValidationError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
                dim = vec.size
                known[parts[0]] = vec
    if known:
        dim = len(next(iter(known.values())))
    if dim is None:
        raise ValidationError(f"{path}: no vectors and no dimension given")
    rng = np.random.default_rng(seed)
    table = np.zeros((len(vocab), dim), np.float32)
    missing = []
    for i, word in enumerate(vocab):
        if word in known:
            table[i] = known[word]
        else:
            table[i] = rng.normal(0.0, 0.1, dim)
            missing.append(word)
    return table, missing


def save_word_embeddings(path, vocab, table):
    return write_archive(path, {"embeddings": table}, {"vocab": list(vocab)})


# -- synthetic toy task ------------------------------------------------------

@dataclass
class ToyTaskSpec:
    """Cross-modal lookup: "what value does the region with attribute *a* carry?".

    Word ids ``0..n_attributes-1`` name attributes, the remaining ids are
    filler words; questions are one-hot word rows (``word_emb_dim ==
    vocab_size``). Each region feature holds a one-hot attribute segment, a
    one-hot value segment and Gaussian noise. ``distractors`` is the
    inclusive range of non-matching regions per image and ``regions`` the
    padded region extent.
    """
    vocab_size: int = 12
    n_attributes: int = 8
    n_values: int = 8
    regions: int = 6
    distractors: tuple = (1, 4)
    question_len: tuple = (2, 6)
    feature_dim: int = 64
    noise: float = 0.1
    seed: int = 0

    def validate(self):
        dmin, dmax = self.distractors
        qmin, qmax = self.question_len
        if self.n_attributes + self.n_values > self.feature_dim:
            raise ConfigError("attribute and value segments exceed feature_dim")
        if not 0 <= dmin <= dmax:
            raise ConfigError("distractors must be an increasing range >= 0")
        if dmax + 1 > self.n_attributes:
            raise ConfigError("need at least as many attributes as regions per image")
        if dmax + 1 > self.regions:
            raise ConfigError("distractors + 1 exceeds the padded region count")
        if not 1 <= qmin <= qmax:
            raise ConfigError("question_len must be an increasing range >= 1")
        if qmax > 1 and self.vocab_size <= self.n_attributes:
            raise ConfigError("vocab_size leaves no filler words")
        if self.n_values < 2:
            raise ConfigError("need at least two value classes")

    def model_overrides(self):
        """ModelConfig fields implied by this task."""
        return dict(word_emb_dim=self.vocab_size, image_feat_dim=self.feature_dim,
                    n_q_max=self.question_len[1], n_i_max=self.regions, n_answers=self.n_values)

    def model_config(self, **overrides):
        """ARAC-2 at ``d_c=32`` sized for this task, float32, 25 epochs."""
        base = dict(read_layers=2, answer_layers=2, check_layers=2, d_c=32, heads=8, epochs=25)
        base.update(self.model_overrides())
        base.update(overrides)
        return ModelConfig(**base)


def generate_toy_dataset(spec, n_samples, seed=None):
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    dmin, dmax = spec.distractors
    qmin, qmax = spec.question_len
    a, v = spec.n_attributes, spec.n_values
    question = np.zeros((n_samples, qmax, spec.vocab_size), np.float32)
    q_len = np.zeros(n_samples, np.int64)
    image = np.zeros((n_samples, spec.regions, spec.feature_dim), np.float32)
    i_len = np.zeros(n_samples, np.int64)
    boxes = np.zeros((n_samples, spec.regions, 4), np.float32)
    targets = np.zeros((n_samples, v), np.float32)
    for k in range(n_samples):
        n_reg = int(rng.integers(dmin, dmax + 1)) + 1
        attrs = rng.choice(a, n_reg, replace=False)
        vals = rng.integers(0, v, n_reg)
        hit = int(rng.integers(n_reg))
        n_words = int(rng.integers(qmin, qmax + 1))
        words = rng.integers(a, spec.vocab_size, n_words) if spec.vocab_size > a else np.zeros(n_words, int)
        words[rng.integers(n_words)] = attrs[hit]
        question[k, np.arange(n_words), words] = 1.0
        q_len[k] = n_words
        feat = spec.noise * rng.standard_normal((n_reg, spec.feature_dim))
        feat[np.arange(n_reg), attrs] += 1.0
        feat[np.arange(n_reg), a + vals] += 1.0
        image[k, :n_reg] = feat
        i_len[k] = n_reg
        lo = rng.uniform(0.0, 0.8, (n_reg, 2))
        size = rng.uniform(0.05, 0.2, (n_reg, 2))
        boxes[k, :n_reg] = np.concatenate([lo, np.minimum(lo + size, 1.0)], axis=1)
        targets[k, vals[hit]] = 1.0
    return Dataset(question, q_len, image, i_len, boxes, targets)


def brute_force_answer(sample, spec):
    """Non-neural matcher: read the attribute word, find its region, return the value class."""
    a = spec.n_attributes
    words = sample.question.argmax(axis=1)
    queried = [w for w in words if w < a]
    region_attr = sample.image[:, :a].argmax(axis=1)
    for q in queried:
        hits = np.flatnonzero(region_attr == q)
        if hits.size == 1:
            return int(sample.image[hits[0], a:a + spec.n_values].argmax())
    return -1


def random_batch(config, batch_size=2, seed=0, targets=True):
    """Gaussian features with random valid lengths, shaped for ``config``.

    Sample 0 is always full length; the others get at least one word and
    one region. Targets are uniform soft scores.
    """
    rng = np.random.default_rng(seed)
    c = config
    dt = np.dtype(c.dtype)
    q_len = rng.integers(1, c.n_q_max + 1, batch_size)
    i_len = rng.integers(1, c.n_i_max + 1, batch_size)
    q_len[0], i_len[0] = c.n_q_max, c.n_i_max
    q_mask = np.arange(c.n_q_max) < q_len[:, None]
    i_mask = np.arange(c.n_i_max) < i_len[:, None]
    question = rng.standard_normal((batch_size, c.n_q_max, c.word_emb_dim)) * q_mask[..., None]
    image = rng.standard_normal((batch_size, c.n_i_max, c.image_feat_dim)) * i_mask[..., None]
    lo = rng.uniform(0.0, 0.7, (batch_size, c.n_i_max, 2))
    boxes = np.concatenate([lo, lo + rng.uniform(0.05, 0.3, lo.shape)], axis=2) * i_mask[..., None]
    tgt = rng.uniform(size=(batch_size, c.n_answers)).astype(dt) if targets else None
    return Batch(question.astype(dt), q_mask, image.astype(dt), i_mask, boxes.astype(dt), tgt)
