"""Zero-shot evaluation under the inference modes, plus ablation runners."""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from reco.fusion import FusionParams, fuse_mean_batch, refine_batch
from reco.retrieval import RetrievalConfig, search_batch, search_matrix, store_of
from reco.synthworld import World, label_of_id

log = logging.getLogger(__name__)
_CHUNK = 512


class InferenceMode(str, Enum):
    NONE = "none"
    IMAGE = "image"
    TEXT = "text"
    BOTH = "both"

    @classmethod
    def parse(cls, value) -> "InferenceMode":
        if isinstance(value, cls):
            return value
        aliases = {"refine_image_only": "image", "refine_text_only": "text", "refine_both": "both"}
        return cls(aliases.get(value, value))

    @property
    def refines_image(self) -> bool:
        return self in (InferenceMode.IMAGE, InferenceMode.BOTH)

    @property
    def refines_text(self) -> bool:
        return self in (InferenceMode.TEXT, InferenceMode.BOTH)


def refine(embeddings: np.ndarray, modality: str, memory, rcfg: RetrievalConfig, k_prime: int,
           params: FusionParams | None = None, fusion: str = "transformer",
           n_probe: int | None = None) -> np.ndarray:
    """Refined copies of ``embeddings`` using ``k_prime`` retrieved rows each.

    ``fusion`` is ``"transformer"`` (needs ``params``) or ``"mean"``. With
    ``k_prime == 0`` nothing is retrieved and the embeddings come back
    unchanged, so a zero-neighbour sweep column equals the frozen baseline.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if fusion not in ("transformer", "mean"):
        raise ValueError(f"fusion must be 'transformer' or 'mean', got {fusion!r}")
    if k_prime == 0:
        return x.copy()
    idx, _, fetch = search_batch(x, memory, rcfg, modality, k=k_prime, n_probe=n_probe)
    fetched = store_of(memory).matrix(fetch)[idx]
    if fusion == "mean":
        return fuse_mean_batch(x, fetched)
    if params is None:
        raise ValueError("transformer fusion needs trained parameters")
    n = x.shape[0]
    out = np.empty_like(x)
    for lo in range(0, n, _CHUNK):
        out[lo:lo + _CHUNK] = refine_batch(x[lo:lo + _CHUNK], fetched[lo:lo + _CHUNK], params, modality).data
    return out


def _apply_mode(queries, classes, params, memory, mode: InferenceMode, rcfg, k_prime, fusion,
                query_modality="image", class_modality="text"):
    if mode is not InferenceMode.NONE and params is None and fusion == "transformer":
        warnings.warn("refining with untrained fusion parameters", stacklevel=3)
    if mode.refines_image:
        queries = refine(queries, query_modality, memory, rcfg, k_prime, params, fusion)
    if mode.refines_text:
        classes = refine(classes, class_modality, memory, rcfg, k_prime, params, fusion)
    return queries, classes


def predict_classes(queries: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar class per query (lowest index on ties)."""
    return np.argmax(queries @ classes.T, axis=1)


def zero_shot_classify(task, params: FusionParams | None, memory, mode="none", k_prime: int = 10,
                       rcfg: RetrievalConfig | None = None, fusion: str = "transformer",
                       return_predictions: bool = False):
    """Top-1 accuracy of nearest-class-by-cosine after refining per ``mode``."""
    mode = InferenceMode.parse(mode)
    rcfg = rcfg or RetrievalConfig(k=max(k_prime, 1))
    if params is None and mode is not InferenceMode.NONE and fusion == "transformer":
        warnings.warn("refine mode requested without parameters; using a fresh initialization", stacklevel=2)
        from reco.fusion import FusionConfig

        params = FusionParams.init(FusionConfig(dim=task.queries.shape[1]))
    q, c = _apply_mode(task.queries, task.class_embeddings, params, memory, mode, rcfg, k_prime, fusion,
                       task.query_modality, task.class_modality)
    pred = predict_classes(q, c)
    acc = float((pred == task.labels).mean())
    return (acc, pred) if return_predictions else acc


def recall_at(sims: np.ndarray, r: int) -> float:
    """Fraction of rows whose diagonal entry ranks within the top ``r`` (index tie-break)."""
    n = sims.shape[0]
    diag = np.diagonal(sims)[:, None]
    cols = np.arange(n)
    better = (sims > diag) | ((sims == diag) & (cols[None, :] < cols[:, None]))
    rank = better.sum(axis=1)
    return float((rank < r).mean())


def retrieval_eval(V: np.ndarray, T: np.ndarray, params: FusionParams | None, memory, mode="none",
                   R: int = 1, k_prime: int = 10, rcfg: RetrievalConfig | None = None) -> dict:
    """Recall@R for text->image and image->text over aligned pairs."""
    n = V.shape[0]
    if R > n:
        raise ValueError(f"R={R} exceeds the number of pairs {n}")
    mode = InferenceMode.parse(mode)
    rcfg = rcfg or RetrievalConfig(k=max(k_prime, 1))
    v, t = _apply_mode(V, T, params, memory, mode, rcfg, k_prime, "transformer")
    sims = v @ t.T
    return {"image_to_text": recall_at(sims, R), "text_to_image": recall_at(sims.T, R)}


def best_mode_report(scores: dict) -> dict:
    """Per task, the mode with the highest score (first listed wins ties)."""
    return {task: max(per_mode, key=per_mode.get) for task, per_mode in scores.items()}


# ---------------------------------------------------------------- ablations


@dataclass(frozen=True)
class AblationCell:
    search_mode: str
    fusion_mode: str
    fusion_fn: str
    value: float
    delta: float

    @classmethod
    def make(cls, search_mode, fusion_mode, fusion_fn, value, baseline):
        return cls(search_mode, fusion_mode, fusion_fn, value, value - baseline)


FETCH_OF_FUSION = {"cross": "opposite", "uni": "same"}
TABLE3_GRID = [("uni", "cross"), ("cross", "cross"), ("uni", "uni"), ("cross", "uni")]


def run_table3(world: World, train_cfg, fusion_cfg, k_prime: int | None = None, mode="both"):
    """Search x fetch grid under transformer (trained per cell) and mean fusion.

    Returns ``(baseline, cells)`` with cells in the row order of the grid:
    four transformer cells, then the four mean-fusion cells.
    """
    from reco.training import train_fusion

    k_prime = train_cfg.k if k_prime is None else k_prime
    baseline = zero_shot_classify(world.task, None, world.memory, "none")
    cells = []
    for fn in ("transformer", "mean"):
        for search, fusion_mode in TABLE3_GRID:
            cfg = replace(train_cfg, search_mode=search, fetch_modality=FETCH_OF_FUSION[fusion_mode])
            rcfg = cfg.retrieval(exclude_self=False)
            params = None
            if fn == "transformer":
                params = train_fusion(world.train, world.memory, cfg, fusion_cfg,
                                      same_provenance=world.same_provenance).params
            acc = zero_shot_classify(world.task, params, world.memory, mode, k_prime, rcfg, fusion=fn)
            cells.append(AblationCell.make(search, fusion_mode, fn, acc, baseline))
            log.info("table3 %s/%s/%s: %.4f", search, fusion_mode, fn, acc)
    return baseline, cells


def run_k_sweep(world: World, trained: dict, k_prime_values, mode="both") -> dict:
    """Accuracy for every trained ``k`` (dict k -> params) and inference ``k'``."""
    out = {}
    for k, params in trained.items():
        out[k] = {}
        for kp in k_prime_values:
            rcfg = RetrievalConfig(k=max(kp, 1))
            out[k][kp] = zero_shot_classify(world.task, params, world.memory, mode, kp, rcfg)
    return out


def memory_fraction(store, fraction: float, seed: int):
    """Random subset holding ``fraction`` of the rows (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return store
    rng = np.random.default_rng(seed)
    m = max(1, int(round(fraction * len(store))))
    rows = np.sort(rng.choice(len(store), size=m, replace=False))
    return store.subset(rows)


def run_memory_update(world: World, fractions, train_cfg, fusion_cfg, mode="both", k_prime=None) -> list:
    """Train with a memory subset, evaluate with that subset and with the full memory."""
    from reco.training import train_fusion

    k_prime = train_cfg.k if k_prime is None else k_prime
    rows = []
    for f in fractions:
        sub = memory_fraction(world.memory, f, seed=train_cfg.seed + 7919)
        params = train_fusion(world.train, sub, train_cfg, fusion_cfg,
                              same_provenance=world.same_provenance).params
        rcfg = RetrievalConfig(k=k_prime)
        acc_sub = zero_shot_classify(world.task, params, sub, mode, k_prime, rcfg)
        acc_full = acc_sub if f == 1.0 else zero_shot_classify(world.task, params, world.memory, mode, k_prime, rcfg)
        rows.append({"fraction": f, "memory_size": len(sub), "subset_memory": acc_sub, "full_memory": acc_full})
    return rows


def dump_neighbors(queries, labels, memory, cfg: RetrievalConfig, path=None, query_modality="image",
                   query_ids=None) -> list:
    """Uni- and cross-search neighbour ids with label-match flags, one record per query."""
    queries = np.asarray(queries, dtype=np.float64)
    records = []
    if queries.shape[0]:
        if memory.ids is None:
            raise ValueError("neighbour dumps need memory ids")
        found = {}
        for search in ("uni", "cross"):
            scfg = replace(cfg, search_mode=search)
            side = scfg.search_side(query_modality)
            found[search] = search_matrix(queries, memory.matrix(side), cfg.k, cfg.exclude_self)
        for i in range(queries.shape[0]):
            rec = {"query_id": int(query_ids[i]) if query_ids is not None else i,
                   "query_label": int(labels[i])}
            for search, (idx, sim) in found.items():
                ids = [int(memory.ids[j]) for j in idx[i]]
                rec[search] = {
                    "ids": ids,
                    "similarities": [float(s) for s in sim[i]],
                    "label_match": [label_of_id(x) == int(labels[i]) for x in ids],
                }
            records.append(rec)
    if path is not None:
        with Path(path).open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return records


def label_match_rate(records, search: str) -> float:
    flags = [f for rec in records for f in rec[search]["label_match"]]
    return float(np.mean(flags)) if flags else float("nan")


# ---------------------------------------------------------------- output


def cells_csv(baseline: float, cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["search", "fusion", "fusion_fn", "accuracy", "delta"])
    w.writerow(["-", "-", "none", f"{baseline:.6f}", "0.000000"])
    for c in cells:
        w.writerow([c.search_mode, c.fusion_mode, c.fusion_fn, f"{c.value:.6f}", f"{c.delta:.6f}"])
    return buf.getvalue()


def matrix_csv(matrix: dict, row_name: str = "k", col_name: str = "k_prime") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = sorted({c for row in matrix.values() for c in row})
    w.writerow([f"{row_name}\\{col_name}", *cols])
    for r in sorted(matrix):
        w.writerow([r, *(f"{matrix[r][c]:.6f}" for c in cols)])
    return buf.getvalue()


def rows_csv(rows: list) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cells_summary(baseline: float, cells, seeds, config) -> dict:
    return {"baseline": baseline, "cells": [asdict(c) for c in cells], "seeds": list(seeds), "config": config}
