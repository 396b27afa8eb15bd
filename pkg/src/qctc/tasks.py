"""Seeded synthetic seq2seq tasks and their on-disk format.

Four generators, each isolating one behaviour:

* ``copy``      -- target equals the input.
* ``grounding`` -- pick the box of the queried label out of several
  ``(label, x1, y1, x2, y2)`` records; target is exactly 4 coordinate tokens.
* ``jitter``    -- copy, but each target gets 0..2 leading filler tokens;
  evaluation strips filler, so every jitter is equally correct.
* ``multiref``  -- the input is an unordered set of symbols; any of up to
  ``k_refs`` orderings is a correct output.

Splits are carved from one stream of unique inputs, so they never overlap.
A dataset directory holds ``header.json`` plus one ``<split>.jsonl`` per split.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

from qctc.ctc import Vocab, min_path_length
from qctc.errors import InfeasibleAlignmentError, UsageError
from qctc.numerics import Rng

TASK_KINDS = ("copy", "grounding", "jitter", "multiref")
SPLITS = ("train", "val", "test")
DATASET_FORMAT = "qctc-dataset/1"


@dataclass
class TaskSpec:
    kind: str = "copy"
    seed: int = 0
    n_train: int = 2000
    n_val: int = 0
    n_test: int = 200
    n_symbols: int = 10
    min_len: int = 2
    max_len: int = 6
    allow_repeats: bool = False
    max_jitter: int = 2
    k_refs: int = 4
    grid: int = 16
    n_labels: int = 8
    min_records: int = 2
    max_records: int = 3
    n_queries: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise UsageError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise UsageError("split sizes must be non-negative")
        if not 1 <= self.min_len <= self.max_len <= 12:
            raise UsageError("length range must lie within [1, 12]")
        if self.n_symbols < 2:
            raise UsageError("need at least 2 symbols")
        if not 0 <= self.max_jitter <= 2:
            raise UsageError("jitter range must lie within [0, 2]")
        if not 2 <= self.k_refs <= 6:
            raise UsageError("k_refs must lie within [2, 6]")
        if self.grid < 2:
            raise UsageError("grid must be >= 2")
        if not 1 <= self.min_records <= self.max_records <= self.n_labels:
            raise UsageError("record count range must lie within [1, n_labels]")


@dataclass
class Sample:
    input: list[int]
    target: list[int]
    valid_refs: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.valid_refs:
            self.valid_refs = [list(self.target)]

    def to_json(self) -> str:
        return json.dumps({"input": self.input, "target": self.target, "valid_refs": self.valid_refs})

    @classmethod
    def from_json(cls, line: str) -> "Sample":
        d = json.loads(line)
        return cls(list(d["input"]), list(d["target"]), [list(r) for r in d["valid_refs"]])


@dataclass
class Dataset:
    spec: TaskSpec
    vocab_in: Vocab
    vocab_out: Vocab
    splits: dict[str, list[Sample]]
    filler_id: int | None = None
    distilled: bool = False
    distill_fallbacks: int = 0

    @property
    def resample_targets(self) -> bool:
        """Raw multi-reference training draws a fresh reference every epoch."""
        return self.spec.kind == "multiref" and not self.distilled

    def normalize(self, seq) -> list[int]:
        """Canonical form used for scoring (filler removed)."""
        return [t for t in seq if t != self.filler_id]

    def is_correct(self, pred, sample: Sample) -> bool:
        p = self.normalize(pred)
        return any(p == self.normalize(r) for r in sample.valid_refs)

    def max_min_path_length(self, splits=SPLITS) -> int:
        return max(
            (min_path_length(r) for s in splits for smp in self.splits.get(s, []) for r in smp.valid_refs + [smp.target]),
            default=0,
        )

    def max_src_len(self) -> int:
        return max((len(smp.input) for ss in self.splits.values() for smp in ss), default=1)

    def max_tgt_len(self) -> int:
        return max((len(r) for ss in self.splits.values() for smp in ss for r in smp.valid_refs + [smp.target]),
                   default=0)

    def header(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "spec": asdict(self.spec),
            "vocab_in": self.vocab_in.to_dict(),
            "vocab_out": self.vocab_out.to_dict(),
            "filler_id": self.filler_id,
            "distilled": self.distilled,
            "distill_fallbacks": self.distill_fallbacks,
            "counts": {k: len(v) for k, v in self.splits.items()},
        }


def check_feasible(samples: list[Sample], n_positions: int) -> None:
    """Raise naming the first sample whose target cannot fit ``n_positions``."""
    for i, smp in enumerate(samples):
        for ref in [smp.target] + smp.valid_refs:
            need = min_path_length(ref)
            if need > n_positions:
                raise InfeasibleAlignmentError(
                    f"sample #{i} target {ref} needs {need} positions, n_queries is {n_positions}",
                    sample_index=i, required=need, available=n_positions,
                )


def _symbol_vocabs(n: int, extra_out: tuple[str, ...] = ()) -> tuple[Vocab, Vocab]:
    syms = tuple(f"s{i}" for i in range(1, n + 1))
    return Vocab.from_names(("<pad>",) + syms), Vocab.from_names(("-",) + syms + extra_out)


def _unique_stream(make, rng: Rng, total: int, key=lambda s: tuple(s.input)) -> list[Sample]:
    seen = set()
    out = []
    misses = 0
    while len(out) < total:
        smp = make(rng)
        k = key(smp)
        if k in seen:
            misses += 1
            if misses > 50 * total + 10_000:
                raise UsageError(f"input space too small for {total} distinct samples")
            continue
        seen.add(k)
        out.append(smp)
    return out


def _split(spec: TaskSpec, samples: list[Sample]) -> dict[str, list[Sample]]:
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {"train": samples[:a], "val": samples[a:b], "test": samples[b:]}


def _total(spec: TaskSpec) -> int:
    return spec.n_train + spec.n_val + spec.n_test


def _random_seq(spec: TaskSpec, rng: Rng) -> list[int]:
    n = rng.integers(spec.min_len, spec.max_len + 1)
    seq = [rng.integers(1, spec.n_symbols + 1)]
    while len(seq) < n:
        tok = rng.integers(1, spec.n_symbols + 1)
        if spec.allow_repeats or tok != seq[-1]:
            seq.append(tok)
    return seq


def gen_copy(spec: TaskSpec) -> Dataset:
    vin, vout = _symbol_vocabs(spec.n_symbols)

    def make(rng):
        seq = _random_seq(spec, rng)
        return Sample(seq, list(seq))

    samples = _unique_stream(make, Rng(spec.seed), _total(spec))
    return _finish(Dataset(spec, vin, vout, _split(spec, samples)))


def gen_jitter(spec: TaskSpec) -> Dataset:
    vin, vout = _symbol_vocabs(spec.n_symbols, ("<f>",))
    filler = vout.size - 1

    def make(rng):
        seq = _random_seq(spec, rng)
        j = rng.integers(0, spec.max_jitter + 1)
        return Sample(seq, [filler] * j + seq)

    samples = _unique_stream(make, Rng(spec.seed), _total(spec))
    return _finish(Dataset(spec, vin, vout, _split(spec, samples), filler_id=filler))


def multiref_orderings(content: list[int], k_refs: int) -> list[list[int]]:
    """The first ``k_refs`` distinct orderings of ``sorted(content)`` in lexicographic order."""
    refs: list[list[int]] = []
    seen = set()
    for p in itertools.permutations(sorted(content)):
        if p not in seen:
            seen.add(p)
            refs.append(list(p))
            if len(refs) == k_refs:
                break
    return refs


def gen_multiref(spec: TaskSpec) -> Dataset:
    vin, vout = _symbol_vocabs(spec.n_symbols)
    hi = min(spec.max_len, spec.n_symbols)

    def make(rng):
        n = rng.integers(spec.min_len, hi + 1)
        content = sorted(int(t) + 1 for t in rng.choice(spec.n_symbols, n, replace=False))
        order = rng.permutation(n)
        refs = multiref_orderings(content, spec.k_refs)
        target = refs[rng.integers(0, len(refs))]
        return Sample([content[i] for i in order], list(target), refs)

    samples = _unique_stream(make, Rng(spec.seed), _total(spec))
    return _finish(Dataset(spec, vin, vout, _split(spec, samples)))


def grounding_vocabs(spec: TaskSpec) -> tuple[Vocab, Vocab]:
    """Separate x and y coordinate tokens, so a box never repeats a token back to back."""
    labels = tuple(f"L{i}" for i in range(1, spec.n_labels + 1))
    coords = tuple(f"x{i}" for i in range(spec.grid)) + tuple(f"y{i}" for i in range(spec.grid))
    return Vocab.from_names(("<pad>",) + labels + coords + ("?",)), Vocab.from_names(("-",) + coords)


def box_tokens(box: tuple[int, int, int, int], grid: int) -> list[int]:
    """Output ids of ``(x1, y1, x2, y2)``; add ``n_labels`` to get input ids."""
    x1, y1, x2, y2 = box
    return [1 + x1, 1 + grid + y1, 1 + x2, 1 + grid + y2]


def coordinate_value(token: int, grid: int) -> int:
    """Grid coordinate carried by an output token (x or y alike)."""
    return (token - 1) % grid


def gen_grounding(spec: TaskSpec) -> Dataset:
    vin, vout = grounding_vocabs(spec)
    query_tok = vin.size - 1

    def make(rng):
        r = rng.integers(spec.min_records, spec.max_records + 1)
        labels = [int(x) + 1 for x in rng.choice(spec.n_labels, r, replace=False)]
        boxes = []
        for _ in range(r):
            xs = sorted(rng.integers(0, spec.grid, size=2).tolist())
            ys = sorted(rng.integers(0, spec.grid, size=2).tolist())
            boxes.append((xs[0], ys[0], xs[1], ys[1]))
        q = rng.integers(0, r)
        src = []
        for lab, box in zip(labels, boxes):
            src += [lab] + [spec.n_labels + t for t in box_tokens(box, spec.grid)]
        src += [query_tok, labels[q]]
        return Sample(src, box_tokens(boxes[q], spec.grid))

    samples = _unique_stream(make, Rng(spec.seed), _total(spec))
    return _finish(Dataset(spec, vin, vout, _split(spec, samples)))


def grounding_answer(src: list[int], spec: TaskSpec) -> list[int]:
    """Recompute the target of a grounding input from its records (order-free)."""
    query = src[-1]
    for i in range(0, len(src) - 2, 5):
        if src[i] == query:
            return [t - spec.n_labels for t in src[i + 1 : i + 5]]
    raise UsageError("query label not present in records")


GENERATORS = {"copy": gen_copy, "grounding": gen_grounding, "jitter": gen_jitter, "multiref": gen_multiref}


def generate(spec: TaskSpec) -> Dataset:
    return GENERATORS[spec.kind](spec)


def _finish(ds: Dataset) -> Dataset:
    for split in ds.splits.values():
        for smp in split:
            for ref in smp.valid_refs:
                if any(t == ds.vocab_out.blank_id or not 0 < t < ds.vocab_out.size for t in ref):
                    raise UsageError(f"generated target {ref} violates vocabulary bounds")
    if ds.spec.n_queries is not None:
        for split in ds.splits.values():
            check_feasible(split, ds.spec.n_queries)
    return ds


def iter_samples(path: Path) -> Iterator[Sample]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield Sample.from_json(line)


def save_dataset(ds: Dataset, directory: str | Path, force: bool = False) -> Path:
    directory = Path(directory)
    files = [directory / "header.json"] + [directory / f"{s}.jsonl" for s in ds.splits]
    if not force and any(f.exists() for f in files):
        raise UsageError(f"{directory} already holds a dataset; pass --force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)
    for name, samples in ds.splits.items():
        (directory / f"{name}.jsonl").write_text("".join(s.to_json() + "\n" for s in samples))
    (directory / "header.json").write_text(json.dumps(ds.header(), indent=1) + "\n")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    try:
        header = json.loads((directory / "header.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read dataset header in {directory}: {exc}") from exc
    if header.get("format") != DATASET_FORMAT:
        raise UsageError(f"{directory} is not a {DATASET_FORMAT} dataset")
    splits = {name: list(iter_samples(directory / f"{name}.jsonl")) for name in header["counts"]}
    return Dataset(
        TaskSpec(**header["spec"]),
        Vocab.from_dict(header["vocab_in"]),
        Vocab.from_dict(header["vocab_out"]),
        splits,
        filler_id=header.get("filler_id"),
        distilled=header.get("distilled", False),
        distill_fallbacks=header.get("distill_fallbacks", 0),
    )


def with_targets(ds: Dataset, split: str, targets: list[list[int]], fallbacks: int) -> Dataset:
    """Copy of ``ds`` with ``split`` targets replaced and the distilled flag set."""
    new_split = [Sample(list(s.input), list(t), [list(r) for r in s.valid_refs])
                 for s, t in zip(ds.splits[split], targets)]
    splits = dict(ds.splits)
    splits[split] = new_split
    return replace(ds, splits=splits, distilled=True, distill_fallbacks=fallbacks)
