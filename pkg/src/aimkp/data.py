"""Synthetic paired grid/text keyphrase data, JSONL IO and modality ablation.

Every gold keyphrase has a provenance:

* ``visual``: cued only by a 2x2 block of its concept token in the grid
* ``text``: cued only by one cue token in the text
* ``aligned``: cued in both modalities (the redundant, shortcut-prone case);
  for some of these concepts the text cue is repeated, making text the easy route
* ``joint``: needs a visual attribute block and a text attribute token

Grid and text are otherwise filled with distractor tokens.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .model.params import EOS_ID, SEP_ID, ModelConfig, Sample

PROVENANCES = ("visual", "text", "aligned", "joint")
SPLITS = ("train", "valid", "test")
PAD_ID = 0


class DataError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


_ONSETS = "b d f g k l m n p r s t v z".split()
_NUCLEI = ["a", "o", "u", "i"]
_CODAS = ["", "n", "m", "k", "r", "t"]


def pseudo_words(n: int) -> list[str]:
    """Deterministic pronounceable words that are their own Porter stem."""
    from .metrics.porter import porter_stem

    out, seen = [], set()
    for c2 in _CODAS:
        for o1 in _ONSETS:
            for v1 in _NUCLEI:
                for o2 in _ONSETS:
                    for v2 in _NUCLEI:
                        w = o1 + v1 + o2 + v2 + c2
                        if w in seen or porter_stem(w) != w:
                            continue
                        seen.add(w)
                        out.append(w)
                        if len(out) == n:
                            return out
    raise DataError(f"cannot build {n} distinct words")


@dataclass(frozen=True)
class GenSpec:
    n_samples: int = 2000
    grid_dims: tuple[int, int] = (6, 6)
    text_len: int = 12
    n_visual_concepts: int = 8
    n_text_concepts: int = 8
    n_aligned_concepts: int = 8
    n_joint_visual: int = 3
    n_joint_text: int = 3
    n_visual_distractors: int = 8
    n_text_distractors: int = 24
    text_salient_aligned: int = 4
    salient_text_repeats: int = 3
    kp_count_probs: tuple[float, ...] = (0.75, 0.18, 0.06, 0.01)
    provenance_probs: tuple[float, float, float, float] = (0.25, 0.25, 0.3, 0.2)
    phrase_len_probs: tuple[float, ...] = (0.3, 0.55, 0.15)
    split_ratio: tuple[int, int, int] = (8, 1, 1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_dims", tuple(int(d) for d in self.grid_dims))
        for name in ("kp_count_probs", "provenance_probs", "phrase_len_probs", "split_ratio"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_samples < 1:
            raise DataError("n_samples must be >= 1")
        if len(self.grid_dims) != 2 or min(self.grid_dims) < 2:
            raise DataError("grid needs both sides >= 2 to hold 2x2 concept blocks")
        if not 1 <= len(self.kp_count_probs) <= 4:
            raise DataError("keyphrase counts range over 1..4")
        for name in ("kp_count_probs", "provenance_probs", "phrase_len_probs"):
            probs = np.asarray(getattr(self, name))
            if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
                raise DataError(f"{name} must be a probability vector")
        if len(self.provenance_probs) != 4:
            raise DataError("provenance_probs covers visual, text, aligned, joint")
        max_k = len(self.kp_count_probs)
        H, W = self.grid_dims
        if max_k > (H // 2) * (W // 2):
            raise DataError(f"{max_k} concept blocks do not fit a {H}x{W} grid")
        if max_k * max(1, self.salient_text_repeats) > self.text_len:
            raise DataError(f"text cues of {max_k} keyphrases exceed text length {self.text_len}")
        if not 0 <= self.text_salient_aligned <= self.n_aligned_concepts:
            raise DataError("text_salient_aligned must lie within the aligned pool")
        if self.n_text_distractors < 1 or self.n_visual_distractors < 1:
            raise DataError("need at least one distractor token per modality")
        pools = {
            "visual": self.n_visual_concepts,
            "text": self.n_text_concepts,
            "aligned": self.n_aligned_concepts,
            "joint": self.n_joint_visual * self.n_joint_text,
        }
        for prov, p in zip(PROVENANCES, self.provenance_probs):
            if p > 0 and pools[prov] < max_k:
                raise DataError(f"{prov} pool of {pools[prov]} concepts is smaller than {max_k}")

    @property
    def mean_keyphrases(self) -> float:
        return float(np.dot(np.arange(1, len(self.kp_count_probs) + 1), self.kp_count_probs))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class Vocab:
    """Token tables and the concept inventory behind the keyphrases."""

    visual: list[str]
    text: list[str]
    output: list[str]
    prompt: list[int]
    concepts: list[dict]  # provenance, phrase, visual token, text token

    @property
    def word_ids(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.output)}

    def encode_keyphrases(self, phrases) -> np.ndarray:
        ids = self.word_ids
        out = []
        for i, phrase in enumerate(phrases):
            if i:
                out.append(SEP_ID)
            for w in phrase.split():
                if w not in ids:
                    raise DataError(f"word {w!r} is not in the output vocabulary")
                out.append(ids[w])
        out.append(EOS_ID)
        return np.asarray(out, dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "visual": self.visual,
            "text": self.text,
            "output": self.output,
            "prompt": self.prompt,
            "concepts": self.concepts,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(d["visual"], d["text"], d["output"], list(d["prompt"]), d.get("concepts", []))


def build_vocab(spec: GenSpec) -> Vocab:
    """Concept inventory; depends on the pool sizes only, never on the seed."""
    visual = ["<pad>"] + [f"vd{i}" for i in range(spec.n_visual_distractors)]
    text = ["<pad>", "<tag>", "<media>"] + [f"td{i}" for i in range(spec.n_text_distractors)]
    prompt = [1, 2]
    concepts = []
    for i in range(spec.n_visual_concepts):
        visual.append(f"v{i}")
        concepts.append({"provenance": "visual", "visual_token": len(visual) - 1, "text_token": None})
    for i in range(spec.n_text_concepts):
        text.append(f"t{i}")
        concepts.append({"provenance": "text", "visual_token": None, "text_token": len(text) - 1})
    for i in range(spec.n_aligned_concepts):
        visual.append(f"av{i}")
        text.append(f"at{i}")
        repeats = spec.salient_text_repeats if i < spec.text_salient_aligned else 1
        concepts.append(
            {
                "provenance": "aligned",
                "visual_token": len(visual) - 1,
                "text_token": len(text) - 1,
                "text_repeats": repeats,
            }
        )
    jv0 = len(visual)
    visual += [f"jv{i}" for i in range(spec.n_joint_visual)]
    jt0 = len(text)
    text += [f"jt{i}" for i in range(spec.n_joint_text)]
    for a in range(spec.n_joint_visual):
        for b in range(spec.n_joint_text):
            concepts.append({"provenance": "joint", "visual_token": jv0 + a, "text_token": jt0 + b})

    rng = np.random.default_rng(0x70CAB)
    lens = rng.choice(
        np.arange(1, len(spec.phrase_len_probs) + 1), size=len(concepts), p=spec.phrase_len_probs
    )
    words = pseudo_words(int(lens.sum()))
    pos = 0
    for c, n in zip(concepts, lens):
        c["phrase"] = " ".join(words[pos : pos + n])
        pos += n
    output = ["<sep>", "<eos>"] + words
    return Vocab(visual, text, output, prompt, concepts)


@dataclass
class Dataset:
    samples: list[Sample]
    splits: list[str]
    vocab: Vocab
    provenance: list[list[str]] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return [s for s, t in zip(self.samples, self.splits) if t == name]

    def model_config(self, **overrides) -> ModelConfig:
        s = self.samples[0]
        base = dict(
            visual_vocab=len(self.vocab.visual),
            text_vocab=len(self.vocab.text),
            output_vocab=len(self.vocab.output),
            grid_height=s.grid.shape[0],
            grid_width=s.grid.shape[1],
            text_len=s.text.size,
            prompt=tuple(self.vocab.prompt),
            max_target_len=max(16, max(x.target.size for x in self.samples)),
        )
        base.update(overrides)
        return ModelConfig(**base)


def _place_blocks(rng, H, W, n):
    """Top-left corners of ``n`` non-overlapping 2x2 blocks."""
    while True:
        taken = np.zeros((H, W), dtype=bool)
        corners = []
        for _ in range(n):
            free = [
                (r, c)
                for r in range(H - 1)
                for c in range(W - 1)
                if not taken[r : r + 2, c : c + 2].any()
            ]
            if not free:
                break
            r, c = free[rng.integers(len(free))]
            taken[r : r + 2, c : c + 2] = True
            corners.append((r, c))
        if len(corners) == n:
            return corners


def split_tags(n: int, ratio, rng) -> list[str]:
    counts = np.floor(np.asarray(ratio, dtype=float) / sum(ratio) * n).astype(int)
    counts[0] += n - counts.sum()
    tags = np.repeat(np.arange(3), counts)
    rng.shuffle(tags)
    return [SPLITS[t] for t in tags]


def generate_synthetic(spec: GenSpec) -> Dataset:
    """Pure function of ``spec`` (seed included)."""
    vocab = build_vocab(spec)
    H, W = spec.grid_dims
    by_prov = {p: [i for i, c in enumerate(vocab.concepts) if c["provenance"] == p] for p in PROVENANCES}
    vis_distract = np.arange(1, 1 + spec.n_visual_distractors)
    txt_distract = np.arange(3, 3 + spec.n_text_distractors)
    counts = np.arange(1, len(spec.kp_count_probs) + 1)
    samples, provenance = [], []
    for idx in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, idx])
        k = int(rng.choice(counts, p=spec.kp_count_probs))
        chosen: list[int] = []
        joint_vis_used: set[int] = set()
        joint_txt_used: set[int] = set()
        while len(chosen) < k:
            prov = PROVENANCES[int(rng.choice(4, p=spec.provenance_probs))]
            cid = int(rng.choice(by_prov[prov]))
            c = vocab.concepts[cid]
            if cid in chosen:
                continue
            if prov == "joint":
                # one attribute value per joint slot keeps the pairing unambiguous
                if c["visual_token"] in joint_vis_used or c["text_token"] in joint_txt_used:
                    continue
                if any(vocab.concepts[o]["provenance"] == "joint" for o in chosen):
                    continue
                joint_vis_used.add(c["visual_token"])
                joint_txt_used.add(c["text_token"])
            chosen.append(cid)
        chosen.sort()
        grid = rng.choice(vis_distract, size=(H, W))
        text = rng.choice(txt_distract, size=spec.text_len)
        vis_tokens = [vocab.concepts[c]["visual_token"] for c in chosen]
        vis_tokens = [t for t in vis_tokens if t is not None]
        for (r, cc), tok in zip(_place_blocks(rng, H, W, len(vis_tokens)), vis_tokens):
            grid[r : r + 2, cc : cc + 2] = tok
        txt_tokens = [
            vocab.concepts[c]["text_token"]
            for c in chosen
            for _ in range(vocab.concepts[c].get("text_repeats", 1))
        ]
        txt_tokens = [t for t in txt_tokens if t is not None]
        slots = rng.choice(spec.text_len, size=len(txt_tokens), replace=False)
        text[slots] = txt_tokens
        phrases = tuple(vocab.concepts[c]["phrase"] for c in chosen)
        samples.append(
            Sample(
                grid=grid,
                text=text,
                target=vocab.encode_keyphrases(phrases),
                sample_id=f"s{spec.seed}-{idx:05d}",
                keyphrases=phrases,
            )
        )
        provenance.append([vocab.concepts[c]["provenance"] for c in chosen])
    tags = split_tags(spec.n_samples, spec.split_ratio, np.random.default_rng([spec.seed, 0x5917]))
    return Dataset(samples, tags, vocab, provenance)


def _concepts_by_token(vocab: Vocab, key: str, provenances) -> dict[int, dict]:
    return {c[key]: c for c in vocab.concepts if c["provenance"] in provenances and c[key] is not None}


def visual_oracle(grid: np.ndarray, vocab: Vocab) -> set[str]:
    """Keyphrases of visual-only and aligned concepts readable from the grid alone."""
    table = _concepts_by_token(vocab, "visual_token", ("visual", "aligned"))
    return {table[t]["phrase"] for t in np.unique(grid) if int(t) in table}


def text_oracle(text: np.ndarray, vocab: Vocab) -> set[str]:
    table = _concepts_by_token(vocab, "text_token", ("text", "aligned"))
    return {table[t]["phrase"] for t in np.unique(text) if int(t) in table}


def joint_oracle(grid: np.ndarray, text: np.ndarray, vocab: Vocab) -> set[str]:
    vis, txt = set(np.unique(grid).tolist()), set(np.unique(text).tolist())
    return {
        c["phrase"]
        for c in vocab.concepts
        if c["provenance"] == "joint" and c["visual_token"] in vis and c["text_token"] in txt
    }


def ablate_modality(sample: Sample, which: Literal["drop-visual", "drop-text"]) -> Sample:
    """Blank one modality with placeholders that attention never sees."""
    if which == "drop-visual":
        return replace(sample, grid=np.full_like(sample.grid, PAD_ID), visual_visible=False)
    if which == "drop-text":
        return replace(sample, text=np.full_like(sample.text, PAD_ID), text_visible=False)
    raise DataError(f"unknown ablation {which!r}")


CONDITION_ABLATIONS = {
    "multimodal": (),
    "text-only": ("drop-visual",),
    "image-only": ("drop-text",),
}


def apply_condition(sample: Sample, condition: str) -> Sample:
    if condition not in CONDITION_ABLATIONS:
        raise DataError(f"unknown condition {condition!r}")
    for which in CONDITION_ABLATIONS[condition]:
        sample = ablate_modality(sample, which)
    return sample


# -- file IO ---------------------------------------------------------------

REQUIRED_FIELDS = ("id", "grid", "text", "keyphrases", "split")


def _record(sample: Sample, split: str, provenance=None) -> dict:
    rec = {
        "id": sample.sample_id,
        "grid": sample.grid.tolist(),
        "text": sample.text.tolist(),
        "keyphrases": list(sample.keyphrases),
        "split": split,
    }
    if provenance is not None:
        rec["provenance"] = provenance
    return rec


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write train/valid/test JSONL plus vocab.json; all-or-nothing."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=out_dir.parent))
    try:
        handles = {s: open(tmp / f"{s}.jsonl", "w") for s in SPLITS}
        try:
            prov = dataset.provenance or [None] * len(dataset.samples)
            for sample, split, p in zip(dataset.samples, dataset.splits, prov):
                handles[split].write(json.dumps(_record(sample, split, p), separators=(",", ":")) + "\n")
        finally:
            for h in handles.values():
                h.close()
        with open(tmp / "vocab.json", "w") as fh:
            json.dump(dataset.vocab.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        out_dir.mkdir(exist_ok=True)
        for name in os.listdir(tmp):
            os.replace(tmp / name, out_dir / name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def parse_record(line: str, lineno: int, vocab: Vocab) -> tuple[Sample, str, list | None]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", lineno) from exc
    if not isinstance(rec, dict):
        raise DataError("record must be a JSON object", lineno)
    missing = [f for f in REQUIRED_FIELDS if f not in rec]
    if missing:
        raise DataError(f"missing field(s) {', '.join(repr(m) for m in missing)}", lineno)
    if rec["split"] not in SPLITS:
        raise DataError(f"unknown split {rec['split']!r}", lineno)
    try:
        grid = np.asarray(rec["grid"], dtype=np.int64)
        text = np.asarray(rec["text"], dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"grid/text must be integer arrays ({exc})", lineno) from exc
    if grid.ndim != 2 or text.ndim != 1:
        raise DataError("grid must be 2D and text 1D", lineno)
    if grid.size and (grid.min() < 0 or grid.max() >= len(vocab.visual)):
        raise DataError("grid token outside the visual vocabulary", lineno)
    if text.size and (text.min() < 0 or text.max() >= len(vocab.text)):
        raise DataError("text token outside the text vocabulary", lineno)
    phrases = rec["keyphrases"]
    if not isinstance(phrases, list) or not phrases or not all(isinstance(p, str) for p in phrases):
        raise DataError("keyphrases must be a non-empty list of strings", lineno)
    try:
        target = vocab.encode_keyphrases(phrases)
    except DataError as exc:
        raise DataError(str(exc), lineno) from exc
    sample = Sample(grid, text, target, sample_id=str(rec["id"]), keyphrases=tuple(phrases))
    return sample, rec["split"], rec.get("provenance")


def load_split_file(path, vocab: Vocab):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                out.append(parse_record(line, lineno, vocab))
    return out


def load_dataset(path) -> Dataset:
    """Load a directory written by :func:`save_dataset` (or one split file beside vocab.json)."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    vocab_path = root / "vocab.json"
    if not vocab_path.exists():
        raise DataError(f"{vocab_path} not found")
    with open(vocab_path) as fh:
        vocab = Vocab.from_json(json.load(fh))
    files = [root / f"{s}.jsonl" for s in SPLITS] if path.is_dir() else [path]
    records = []
    for f in files:
        if f.exists():
            try:
                records += load_split_file(f, vocab)
            except DataError as exc:
                raise DataError(f"{f.name}: {exc}") from exc
    if not records:
        raise DataError(f"no samples under {path}")
    shapes = {r[0].grid.shape for r in records}
    lens = {r[0].text.size for r in records}
    if len(shapes) > 1 or len(lens) > 1:
        raise DataError("all samples must share one grid shape and text length")
    samples = [r[0] for r in records]
    splits = [r[1] for r in records]
    prov = [r[2] for r in records]
    return Dataset(samples, splits, vocab, prov if all(p is not None for p in prov) else [])
