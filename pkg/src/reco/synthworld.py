"""Synthetic frozen-encoder worlds.

A world has ``n_coarse`` coarse concepts, each split into ``n_fine`` fine
classes. Coarse prototypes are shared by both modalities, so coarse concepts
are well aligned. Fine prototypes are modality-specific: the text-side fine
direction only partially agrees with the image-side one
(``fine_alignment``), and text queries carry an attenuated fine signal
(``text_fine_signal``). Memory captions carry the full fine signal, so the
memory holds cleaner paired evidence than the frozen encoders provide.
Class-name embeddings get their own, smaller noise (``class_noise``), and a
``memory_mismatch`` fraction of memory captions can describe a different
class than their image.

Most of a web-scale memory is off-task: ``n_distractor_fine`` extra fine
classes per coarse concept fill all but a ``memory_on_task`` share of the
memory. They share the coarse structure but never match an evaluation class,
so a small random slice of the memory rarely holds a same-class neighbour.
When distractors exist, all but a ``train_on_task`` share of the training
pairs come from them. At the default of zero, evaluation stays zero-shot
and the fusion never sees an evaluation class during training.

Samples::

    image  = normalize(coarse_signal * c + fine_signal * f_img + noise)
    text   = normalize(coarse_signal * c + text_fine_signal * f_txt + noise)
    memory text uses memory_text_fine_signal instead of text_fine_signal
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from reco.exceptions import ConfigError
from reco.memory import MemoryStore, build_store, normalize_rows, save_bank

LABEL_ID_STRIDE = 10**6


@dataclass(frozen=True)
class WorldSpec:
    n_coarse: int = 8
    n_fine: int = 8
    dim: int = 64
    coarse_signal: float = 1.2
    fine_signal: float = 1.0
    text_fine_signal: float = 0.8
    memory_text_fine_signal: float = 1.0
    fine_alignment: float = 0.45
    memory_mismatch: float = 0.0
    n_distractor_fine: int = 0
    memory_on_task: float = 1.0
    train_on_task: float = 0.0
    image_noise: float = 2.2
    text_noise: float = 1.0
    class_noise: float = 0.6
    memory_size: int = 20000
    train_size: int = 8192
    eval_size: int = 2048
    seed: int = 0

    def validate(self) -> None:
        counts = ("n_coarse", "n_fine", "dim", "memory_size", "train_size", "eval_size")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_distractor_fine < 0:
            raise ConfigError("n_distractor_fine must be >= 0")
        if not 0.0 < self.memory_on_task <= 1.0:
            raise ConfigError("memory_on_task must lie in (0, 1]")
        if not 0.0 <= self.train_on_task <= 1.0:
            raise ConfigError("train_on_task must lie in [0, 1]")
        if self.n_fine < 2:
            raise ConfigError("n_fine must be >= 2: with one fine class per concept there is no fine-grained task")
        signals = ("coarse_signal", "fine_signal", "text_fine_signal", "memory_text_fine_signal",
                   "image_noise", "text_noise", "class_noise")
        for name in signals:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.fine_alignment <= 1.0:
            raise ConfigError("fine_alignment must lie in [0, 1]")
        if not 0.0 <= self.memory_mismatch < 1.0:
            raise ConfigError("memory_mismatch must lie in [0, 1)")
        if self.dim < self.n_coarse + 2:
            raise ConfigError(f"dim={self.dim} too small for {self.n_coarse} coarse concepts")

    @property
    def n_classes(self) -> int:
        return self.n_coarse * self.n_fine

    @property
    def n_memory_classes(self) -> int:
        return self.n_coarse * (self.n_fine + self.n_distractor_fine)

    def with_updates(self, **changes) -> "WorldSpec":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class TrainDataset:
    """Aligned (image, text) embedding pairs used to train the fusion."""

    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray | None = None
    provenance: str = ""

    def __len__(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True, eq=False)
class LabeledEvalTask:
    """Zero-shot classification task: image-like queries vs class-name texts."""

    queries: np.ndarray
    labels: np.ndarray
    class_embeddings: np.ndarray
    query_text: np.ndarray | None = None
    query_modality: str = "image"
    class_modality: str = "text"

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]


@dataclass(frozen=True, eq=False)
class World:
    spec: WorldSpec
    train: TrainDataset
    memory: MemoryStore
    task: LabeledEvalTask
    ground_truth: dict = field(default_factory=dict)

    @property
    def same_provenance(self) -> bool:
        return self.train.provenance == self.ground_truth.get("memory_provenance")


def _unit_gaussian(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


def _orthogonal_to(vectors, basis_rows):
    """Remove from each row its component along the matching rows of ``basis_rows``."""
    out = vectors.copy()
    for b in basis_rows:
        out -= (out * b).sum(axis=1, keepdims=True) * b
    return normalize_rows(out)


def _prototypes(spec: WorldSpec, rng: np.random.Generator):
    coarse = _unit_gaussian(rng, spec.n_coarse, spec.dim)
    gram = coarse @ coarse.T - np.eye(spec.n_coarse)
    if np.abs(gram).max(initial=0.0) > 0.99:
        raise ConfigError("coarse prototypes came out collinear; change the seed")
    parent = np.concatenate([np.repeat(np.arange(spec.n_coarse), spec.n_fine),
                             np.repeat(np.arange(spec.n_coarse), spec.n_distractor_fine)])
    c = coarse[parent]
    n = spec.n_memory_classes
    fine_img = _orthogonal_to(_unit_gaussian(rng, n, spec.dim), [c])
    other = _orthogonal_to(_unit_gaussian(rng, n, spec.dim), [c, fine_img])
    rho = spec.fine_alignment
    fine_txt = normalize_rows(rho * fine_img + np.sqrt(1.0 - rho**2) * other)
    return coarse, parent, fine_img, fine_txt


def _samples(rng, labels, spec, parent, coarse, fine, fine_scale, noise):
    c = coarse[parent[labels]]
    f = fine[labels]
    eps = rng.standard_normal((labels.size, spec.dim)) * (noise / np.sqrt(spec.dim))
    return normalize_rows(spec.coarse_signal * c + fine_scale * f + eps)


def generate_world(spec: WorldSpec) -> World:
    """Draw prototypes, the training pairs, the memory, and the evaluation task."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    coarse, parent, fine_img, fine_txt = _prototypes(spec, rng)
    C = spec.n_classes

    def pairs(n, text_fine, mismatch=0.0, lo=0, hi=C, on_task=0.0):
        labels = rng.integers(lo, hi, size=n)
        if on_task > 0:
            labels = np.where(rng.random(n) < on_task, rng.integers(0, C, size=n), labels)
        text_labels = labels
        if mismatch > 0:
            swap = rng.random(n) < mismatch
            shift = rng.integers(1, hi - lo, size=n)
            text_labels = np.where(swap, lo + (labels - lo + shift) % (hi - lo), labels)
        v = _samples(rng, labels, spec, parent, coarse, fine_img, spec.fine_signal, spec.image_noise)
        t = _samples(rng, text_labels, spec, parent, coarse, fine_txt, text_fine, spec.text_noise)
        return labels, v, t

    M = spec.n_memory_classes
    lo = C if M > C else 0
    train_labels, train_v, train_t = pairs(spec.train_size, spec.text_fine_signal, lo=lo, hi=M,
                                           on_task=spec.train_on_task if M > C else 0.0)
    mem_labels, mem_v, mem_t = pairs(spec.memory_size, spec.memory_text_fine_signal, spec.memory_mismatch,
                                   lo=lo, hi=M, on_task=spec.memory_on_task if M > C else 0.0)
    eval_labels, eval_v, eval_t = pairs(spec.eval_size, spec.text_fine_signal)
    class_emb = _samples(rng, np.arange(C), spec, parent, coarse, fine_txt,
                         spec.text_fine_signal, spec.class_noise)

    ids = mem_labels.astype(np.int64) * LABEL_ID_STRIDE + np.arange(spec.memory_size)
    memory = build_store(mem_v, mem_t, ids)
    provenance = f"synthworld:seed={spec.seed}"
    train = TrainDataset(train_v, train_t, train_labels, provenance)
    task = LabeledEvalTask(eval_v, eval_labels, class_emb, query_text=eval_t)
    truth = {
        "coarse_prototypes": coarse,
        "fine_image_prototypes": fine_img,
        "fine_text_prototypes": fine_txt,
        "coarse_of_fine": parent,
        "memory_labels": mem_labels,
        "memory_provenance": provenance,
    }
    return World(spec, train, memory, task, truth)


def label_of_id(ident: int) -> int:
    return int(ident) // LABEL_ID_STRIDE


# ---------------------------------------------------------------- diagnostics


def _cos_stats(a: np.ndarray, b: np.ndarray, la: np.ndarray, lb: np.ndarray, limit: int = 2000) -> dict:
    a, b, la, lb = a[:limit], b[:limit], la[:limit], lb[:limit]
    sims = a @ b.T
    same = la[:, None] == lb[None, :]
    if a is b or (a.shape == b.shape and np.array_equal(a, b)):
        np.fill_diagonal(same, False)
        off = ~np.eye(len(a), dtype=bool)
        diff = ~same & off
    else:
        diff = ~same
    return {
        "intra_mean": float(sims[same].mean()) if same.any() else float("nan"),
        "inter_mean": float(sims[diff].mean()) if diff.any() else float("nan"),
    }


def memory_hit_rate(world: World, k: int = 10, modality: str = "image", limit: int = 1000) -> float:
    """Fraction of top-``k`` uni-modal memory neighbours that share the query's fine label.

    Queries are evaluation images (``modality="image"``) or the paired
    evaluation captions (``"text"``).
    """
    from reco.retrieval import search_matrix

    task = world.task
    queries = task.queries if modality == "image" else task.query_text
    queries, labels = queries[:limit], task.labels[:limit]
    idx, _ = search_matrix(queries, world.memory.matrix(modality), k)
    mem_labels = world.ground_truth["memory_labels"]
    return float((mem_labels[idx] == labels[:, None]).mean())


def world_report(world: World, k: int = 10) -> dict:
    """Cosine statistics per modality pair and memory hit rates."""
    task = world.task
    v, t, y = task.queries, task.query_text, task.labels
    return {
        "spec": asdict(world.spec),
        "image_image": _cos_stats(v, v, y, y),
        "text_text": _cos_stats(t, t, y, y),
        "image_text": _cos_stats(v, t, y, y),
        "memory_hit_rate_image": memory_hit_rate(world, k, "image"),
        "memory_hit_rate_text": memory_hit_rate(world, k, "text"),
        "chance_hit_rate": 1.0 / world.spec.n_classes,
    }


# ---------------------------------------------------------------- archives


def _write_split(path: Path, v, t, labels, parent) -> None:
    with path.open("w") as fh:
        for i in range(v.shape[0]):
            fh.write(json.dumps({
                "v": v[i].tolist(), "t": t[i].tolist(),
                "fine_label": int(labels[i]), "coarse_label": int(parent[labels[i]]),
            }) + "\n")


def _read_split(path: Path):
    v, t, labels = [], [], []
    with path.open() as fh:
        for line in fh:
            rec = json.loads(line)
            v.append(rec["v"])
            t.append(rec["t"])
            labels.append(rec["fine_label"])
    return np.array(v), np.array(t), np.array(labels, dtype=np.int64)


def save_world(world: World, out_dir) -> Path:
    """Write ``memory.bank`` (+manifest), JSON-lines splits, and ``world.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parent = world.ground_truth["coarse_of_fine"]
    save_bank(world.memory, out / "memory.bank", source=world.train.provenance)
    _write_split(out / "train.jsonl", world.train.image, world.train.text, world.train.labels, parent)
    _write_split(out / "eval.jsonl", world.task.queries, world.task.query_text, world.task.labels, parent)
    classes = np.arange(world.task.n_classes)
    _write_split(out / "classes.jsonl", world.task.class_embeddings, world.task.class_embeddings, classes, parent)
    meta = {
        "spec": asdict(world.spec),
        "provenance": world.train.provenance,
        "coarse_of_fine": parent.tolist(),
    }
    (out / "world.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_world(path) -> World:
    from reco.memory import load_bank

    root = Path(path)
    meta = json.loads((root / "world.json").read_text())
    spec = WorldSpec(**meta["spec"])
    memory = load_bank(root / "memory.bank")
    tv, tt, tl = _read_split(root / "train.jsonl")
    ev, et, el = _read_split(root / "eval.jsonl")
    cv, _, _ = _read_split(root / "classes.jsonl")
    mem_labels = np.array([label_of_id(i) for i in memory.ids]) if memory.ids is not None else None
    truth = {
        "coarse_of_fine": np.array(meta["coarse_of_fine"]),
        "memory_labels": mem_labels,
        "memory_provenance": meta["provenance"],
    }
    train = TrainDataset(tv, tt, tl, meta["provenance"])
    task = LabeledEvalTask(ev, el, cv, query_text=et)
    return World(spec, train, memory, task, truth)
