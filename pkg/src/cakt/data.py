"""Dataset ingestion, encoding, folding, splitting and synthesis.

Sequences are per-student lists of (concept, correctness) interactions.
Each interaction is one-hot encoded into a vector of length 2M: index
``concept`` for an incorrect response, index ``M + concept`` for a correct
one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np


class DataError(ValueError):
    """Raised on malformed input files or invalid field values."""


@dataclass(frozen=True)
class Interaction:
    student_id: str
    concept_id: int
    correct: int
    step_index: int


@dataclass
class EncodedSequence:
    """One student's interaction sequence with dense concept ids."""

    student: str
    concepts: list
    responses: list
    M: int

    def __post_init__(self):
        if len(self.concepts) != len(self.responses):
            raise DataError(
                f"student {self.student}: {len(self.concepts)} concepts vs "
                f"{len(self.responses)} responses"
            )
        if len(self.concepts) == 0:
            raise DataError(f"student {self.student}: empty sequence")

    def __len__(self) -> int:
        return len(self.concepts)

    @property
    def onehots(self) -> np.ndarray:
        """(T, 2M) one-hot matrix; computed on demand to keep memory flat."""
        T = len(self)
        out = np.zeros((T, 2 * self.M), dtype=np.float32)
        idx = np.asarray(self.concepts) + self.M * np.asarray(self.responses)
        out[np.arange(T), idx] = 1.0
        return out


@dataclass
class SequenceDataset:
    M: int
    sequences: list
    provenance: str = ""
    concept_map: Optional[dict] = None  # original id -> dense id, when re-indexed

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[EncodedSequence]:
        return iter(self.sequences)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)


def encode_one_hot(concept_id: int, correct: int, M: int) -> np.ndarray:
    """One-hot of length 2M: slot ``concept_id`` if incorrect, ``M+concept_id`` if correct."""
    if not 0 <= concept_id < M:
        raise DataError(f"concept_id {concept_id} out of range [0, {M})")
    if correct not in (0, 1):
        raise DataError(f"correct must be 0 or 1, got {correct}")
    v = np.zeros(2 * M, dtype=np.float32)
    v[concept_id + M * correct] = 1.0
    return v


def decode_one_hot(onehot: np.ndarray) -> tuple:
    """Inverse of :func:`encode_one_hot`; returns (concept_id, correct)."""
    onehot = np.asarray(onehot)
    (nz,) = np.nonzero(onehot)
    if len(nz) != 1 or onehot.shape[0] % 2 != 0:
        raise DataError("not a valid interaction one-hot")
    M = onehot.shape[0] // 2
    i = int(nz[0])
    return (i, 0) if i < M else (i - M, 1)


def _parse_assistments_csv(path: str) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        expected = ["student_id", "concept_id", "correct"]
        if header[: len(expected)] != expected:
            raise DataError(
                f"{path}: bad header {header}; expected student_id,concept_id,correct[,timestamp]"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise DataError(f"{path}:{lineno}: expected >= 3 fields, got {len(row)}")
            student = row[0].strip()
            try:
                concept = int(row[1])
                correct = int(row[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer concept or response") from None
            if concept < 0:
                raise DataError(f"{path}:{lineno}: negative concept id {concept}")
            if correct not in (0, 1):
                raise DataError(f"{path}:{lineno}: response must be 0 or 1, got {correct}")
            # timestamp column, when present, is parsed but unused by the model
            rows.append((student, concept, correct))
    if not rows:
        raise DataError(f"{path}: no interaction rows")
    return rows


def _parse_canonical_jsonl(path: str) -> tuple:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in (l.strip() for l in f) if ln]
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:1: invalid JSON metadata line: {e}") from None
    if "M" not in meta:
        raise DataError(f"{path}:1: metadata line must declare M")
    M = int(meta["M"])
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
        for key in ("student", "concepts", "responses"):
            if key not in obj:
                raise DataError(f"{path}:{lineno}: missing key {key!r}")
        student = str(obj["student"])
        for i, (c, r) in enumerate(zip(obj["concepts"], obj["responses"])):
            c, r = int(c), int(r)
            if not 0 <= c < M:
                raise DataError(f"{path}:{lineno}: concept {c} out of range [0, {M})")
            if r not in (0, 1):
                raise DataError(f"{path}:{lineno}: response must be 0 or 1, got {r}")
            rows.append((student, c, r))
        if len(obj["concepts"]) != len(obj["responses"]):
            raise DataError(f"{path}:{lineno}: concepts/responses length mismatch")
    if not rows:
        raise DataError(f"{path}: no student records")
    return M, rows


def parse_dataset(path: str, format: str = "assistments_csv") -> SequenceDataset:
    """Parse a raw interaction file into a dataset grouped by student.

    CSV concept ids are densely re-indexed to [0, M) in ascending original-id
    order; the mapping is attached as ``dataset.concept_map``.  The canonical
    JSONL format declares M on its first line and is assumed dense already.
    """
    if format == "assistments_csv":
        rows = _parse_assistments_csv(path)
        original_ids = sorted({c for _, c, _ in rows})
        concept_map = {orig: dense for dense, orig in enumerate(original_ids)}
        M = len(original_ids)
        rows = [(s, concept_map[c], r) for s, c, r in rows]
    elif format == "canonical_jsonl":
        M, rows = _parse_canonical_jsonl(path)
        concept_map = None
    else:
        raise DataError(f"unknown format {format!r}")

    by_student: dict = {}
    for student, concept, correct in rows:
        by_student.setdefault(student, ([], []))
        by_student[student][0].append(concept)
        by_student[student][1].append(correct)
    sequences = [
        EncodedSequence(student=s, concepts=cs, responses=rs, M=M)
        for s, (cs, rs) in by_student.items()
    ]
    return SequenceDataset(M=M, sequences=sequences, provenance=path, concept_map=concept_map)


def write_canonical_jsonl(ds: SequenceDataset, path: str) -> None:
    """Write the toolkit's interchange format (metadata first line, one student per line)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"M": ds.M}) + "\n")
        for seq in ds.sequences:
            f.write(
                json.dumps(
                    {
                        "student": seq.student,
                        "concepts": [int(c) for c in seq.concepts],
                        "responses": [int(r) for r in seq.responses],
                    }
                )
                + "\n"
            )


def fold_long_sequences(ds: SequenceDataset, max_len: int = 200) -> SequenceDataset:
    """Greedily split sequences longer than ``max_len`` into left-to-right chunks.

    The resulting sub-sequences are treated as independent students downstream.
    """
    if max_len < 2:
        raise DataError(f"max_len must be >= 2, got {max_len}")
    out = []
    for seq in ds.sequences:
        if len(seq) <= max_len:
            out.append(seq)
            continue
        for part, start in enumerate(range(0, len(seq), max_len)):
            out.append(
                EncodedSequence(
                    student=f"{seq.student}#{part}",
                    concepts=seq.concepts[start : start + max_len],
                    responses=seq.responses[start : start + max_len],
                    M=seq.M,
                )
            )
    return SequenceDataset(
        M=ds.M, sequences=out, provenance=ds.provenance, concept_map=ds.concept_map
    )


def split_train_test(
    ds: SequenceDataset, test_frac: float = 0.2, folds: int = 5, seed: int = 0
) -> dict:
    """Hold out whole sequences for testing and partition the rest into CV folds.

    Returns ``{"test": SequenceDataset, "cv_folds": [(train, val), ...]}``.
    Deterministic for a fixed seed.
    """
    n = len(ds.sequences)
    n_test = int(round(test_frac * n))
    if n - n_test < folds:
        raise DataError(
            f"need >= {folds} sequences after holding out {n_test} for test, have {n - n_test}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    test_idx = order[:n_test]
    rest = order[n_test:]

    def subset(indices) -> SequenceDataset:
        return SequenceDataset(
            M=ds.M,
            sequences=[ds.sequences[i] for i in indices],
            provenance=ds.provenance,
            concept_map=ds.concept_map,
        )

    fold_chunks = np.array_split(rest, folds)
    cv_folds = []
    for i in range(folds):
        val_idx = fold_chunks[i]
        train_idx = np.concatenate([fold_chunks[j] for j in range(folds) if j != i])
        cv_folds.append((subset(train_idx), subset(val_idx)))
    return {"test": subset(test_idx), "cv_folds": cv_folds}


def generate_synthetic(
    num_students: int,
    M: int,
    seq_len: int,
    seed: int = 0,
    difficulty_range: tuple = (0.3, 0.9),
    learn_rate_range: tuple = (0.2, 1.0),
) -> SequenceDataset:
    """Simulate students whose per-concept error rate follows a power law.

    For each concept a difficulty ``a`` and learning rate ``b`` are drawn
    uniformly from the given ranges.  A student's probability of error on her
    n-th attempt at that concept is ``clamp(a * n**-b, 0.01, 0.99)``; concepts
    are assigned to steps uniformly at random.
    """
    if num_students < 1 or M < 1 or seq_len < 1:
        raise DataError("num_students, M and seq_len must all be positive")
    a_lo, a_hi = difficulty_range
    b_lo, b_hi = learn_rate_range
    if not (0 < a_lo <= a_hi):
        raise DataError(f"difficulty_range must lie in (0, inf), got {difficulty_range}")
    if not (0 < b_lo <= b_hi <= 2):
        raise DataError(f"learn_rate_range must lie in (0, 2], got {learn_rate_range}")

    rng = np.random.default_rng(seed)
    a = rng.uniform(a_lo, a_hi, size=M)
    b = rng.uniform(b_lo, b_hi, size=M)
    sequences = []
    for s in range(num_students):
        concepts = rng.integers(0, M, size=seq_len)
        attempts = np.zeros(M, dtype=np.int64)
        responses = []
        for c in concepts:
            attempts[c] += 1
            p_err = float(np.clip(a[c] * attempts[c] ** -b[c], 0.01, 0.99))
            responses.append(int(rng.random() >= p_err))
        sequences.append(
            EncodedSequence(
                student=f"synthetic-{s}",
                concepts=[int(c) for c in concepts],
                responses=responses,
                M=M,
            )
        )
    return SequenceDataset(M=M, sequences=sequences, provenance=f"synthetic(seed={seed})")
