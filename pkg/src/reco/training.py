"""Training of the fusion branches and the temperature on a frozen backbone."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from reco.exceptions import ConfigError, DivergenceError, NonFiniteError
from reco.fusion import FusionConfig, FusionParams, build_tokens, encode_tokens, is_norm_param, refine_batch
from reco.loss import TemperatureParam, info_nce, total_loss
from reco.numcore import GradTape, Tensor
from reco.retrieval import IVFIndex, RetrievalConfig, search_batch, store_of

log = logging.getLogger(__name__)

BRANCH_MODES = ("both", "image_only", "text_only")
MAX_BAD_STEPS = 3


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    base_lr: float = 1e-3
    weight_decay: float = 1e-5
    warmup_frac: float = 0.05
    k: int = 10
    seed: int = 0
    retrieval_path: str = "exact"
    n_probe: int = 8
    branch_mode: str = "both"
    search_mode: str = "uni"
    fetch_modality: str = "opposite"
    reduction: str = "sum"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    exclude_self: bool | None = None
    probe_every: int = 20
    probe_size: int = 128

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.base_lr <= 0 or self.k < 1:
            raise ConfigError("batch_size, base_lr and k must be positive; epochs >= 0")
        if self.weight_decay < 0 or not 0 <= self.warmup_frac < 1:
            raise ConfigError("weight_decay must be >= 0 and warmup_frac in [0, 1)")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.retrieval_path not in ("exact", "approx"):
            raise ConfigError("retrieval_path must be 'exact' or 'approx'")
        if self.probe_every < 0 or self.probe_size < 1:
            raise ConfigError("probe_every must be >= 0 and probe_size >= 1")

    def retrieval(self, exclude_self: bool) -> RetrievalConfig:
        return RetrievalConfig(k=self.k, search_mode=self.search_mode,
                               fetch_modality=self.fetch_modality, exclude_self=exclude_self)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam moments with decoupled weight decay on a subset of tensors."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, no_decay=()):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay = [name not in no_decay for name, _ in self.params]
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]
        self.t = 0

    def step(self, grads, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, ((_, p), g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.decay[i] and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


@dataclass
class TrainResult:
    params: FusionParams
    temperature: TemperatureParam
    metrics: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def write_metrics(self, path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def neighbor_indices(queries, source, rcfg: RetrievalConfig, modality: str, k: int, n_probe: int | None):
    """Memory rows to fetch for every query; (n, k) indices plus the fetched side."""
    idx, _, fetch = search_batch(queries, source, rcfg, modality, k=k, n_probe=n_probe)
    return idx, fetch


def _objective(mode, V, T, V_bar, T_bar, temp, reduction):
    if mode == "both":
        return total_loss(V, T, V_bar, T_bar, temp, reduction)
    if mode == "image_only":
        term = info_nce(V_bar, T, temp, reduction)
        return term, [None, term, None]
    term = info_nce(V, T_bar, temp, reduction)
    return term, [None, None, term]


def train_fusion(dataset, memory, cfg: TrainConfig, fusion_cfg: FusionConfig,
                 same_provenance: bool = False, init: FusionParams | None = None) -> TrainResult:
    """Fit the fusion branches with retrieval from ``memory`` at every step.

    ``memory`` is a :class:`MemoryStore`, an :class:`IVFIndex`, or a dict of
    one index per searched modality; neighbour
    lists are computed once up front since the backbone embeddings never
    change. Deterministic for a fixed ``cfg.seed``.
    """
    cfg.validate()
    if dataset.image.shape[1] != fusion_cfg.dim or store_of(memory).dim != fusion_cfg.dim:
        raise ConfigError("dataset, memory and fusion dimensions must agree")
    params = init.copy() if init is not None else FusionParams.init(fusion_cfg, seed=cfg.seed)
    temp = TemperatureParam()
    n = len(dataset)
    steps_per_epoch = n // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    resolved = {**asdict(cfg), "fusion": asdict(fusion_cfg)}
    result = TrainResult(params, temp, [], resolved)
    if steps_per_epoch == 0 and cfg.epochs > 0:
        raise ConfigError(f"dataset of {n} pairs is smaller than one batch of {cfg.batch_size}")
    if total_steps == 0:
        return result

    exclude_self = same_provenance if cfg.exclude_self is None else cfg.exclude_self
    rcfg = cfg.retrieval(exclude_self)
    source = memory
    if cfg.retrieval_path == "approx" and not isinstance(memory, (IVFIndex, dict)):
        raise ConfigError("approximate retrieval needs an IVFIndex or a modality -> IVFIndex mapping")
    n_probe = cfg.n_probe if cfg.retrieval_path == "approx" else None
    store = store_of(memory)

    use_image = cfg.branch_mode in ("both", "image_only")
    use_text = cfg.branch_mode in ("both", "text_only")
    fetch_img = fetch_txt = None
    if use_image:
        idx_img, side_img = neighbor_indices(dataset.image, source, rcfg, "image", cfg.k, n_probe)
        fetch_img = store.matrix(side_img)
    if use_text:
        idx_txt, side_txt = neighbor_indices(dataset.text, source, rcfg, "text", cfg.k, n_probe)
        fetch_txt = store.matrix(side_txt)

    branches = [b for b, used in (("image", use_image), ("text", use_text)) if used]
    named = [(name, t) for b in branches for name, t in params.named(b)]
    named.append(("temperature.log_inv_tau", temp.log_inv_tau))
    no_decay = {name for name, _ in named if is_norm_param(name)} | {"temperature.log_inv_tau"}
    for _, t in named:
        t.requires_grad = True
    opt = AdamW(named, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, no_decay)
    warmup = int(cfg.warmup_frac * total_steps)
    if warmup >= total_steps:
        raise ConfigError("warmup must be shorter than training")

    # A fixed slice of the training pairs, scored every ``probe_every`` steps,
    # gives a loss curve free of batch-to-batch sampling noise.
    probe = np.arange(min(cfg.probe_size, n))

    def probe_loss():
        V_bar = refine_batch(dataset.image[probe], fetch_img[idx_img[probe]], params, "image") if use_image else None
        T_bar = refine_batch(dataset.text[probe], fetch_txt[idx_txt[probe]], params, "text") if use_text else None
        loss, _ = _objective(cfg.branch_mode, dataset.image[probe], dataset.text[probe], V_bar, T_bar, temp,
                             cfg.reduction)
        return loss.item()

    rng = np.random.default_rng(cfg.seed)
    bad_streak = 0
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            rows = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            V, T = dataset.image[rows], dataset.text[rows]
            lr = cosine_lr(step, total_steps, cfg.base_lr, warmup)
            try:
                with GradTape() as tape:
                    V_bar = refine_batch(V, fetch_img[idx_img[rows]], params, "image") if use_image else None
                    T_bar = refine_batch(T, fetch_txt[idx_txt[rows]], params, "text") if use_text else None
                    loss, terms = _objective(cfg.branch_mode, V, T, V_bar, T_bar, temp, cfg.reduction)
                grads = tape.gradient(loss, [t for _, t in named])
            except NonFiniteError:
                bad_streak += 1
                log.warning("non-finite loss at step %d (%d in a row)", step, bad_streak)
                if bad_streak >= MAX_BAD_STEPS:
                    raise DivergenceError(f"loss non-finite for {bad_streak} consecutive steps")
                step += 1
                continue
            bad_streak = 0
            grad_norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            record = {}
            if cfg.probe_every and step % cfg.probe_every == 0:
                record["probe_loss"] = probe_loss()
            opt.step(grads, lr)
            result.metrics.append({
                **record,
                "step": step,
                "epoch": epoch,
                "loss": loss.item(),
                "loss_terms": [None if t is None else t.item() for t in terms],
                "lr": lr,
                "grad_norm": grad_norm,
                "inv_tau": temp.value,
            })
            step += 1
    for _, t in named:
        t.requires_grad = False
    return result


def gradient_check(seed: int, n: int = 8, dim: int = 16, k: int = 4, heads: int = 2,
                   h: float = 1e-4) -> float:
    """Worst analytic-vs-central-difference relative error of the full objective.

    Uses perturbed (non-zero) fusion parameters, random unit embeddings and
    random retrieved rows, and checks every fusion tensor plus the
    temperature.
    """
    from reco.memory import normalize_rows
    from reco.numcore import finite_diff_check

    rng = np.random.default_rng(seed)
    params = FusionParams.init(FusionConfig(dim=dim, heads=heads), seed=seed)
    for name, t in params.named():
        t.data = t.data + rng.normal(0.0, 0.1, t.shape)
        if "w_" in name:
            t.data = t.data + rng.normal(0.0, 0.2, t.shape)
    temp = TemperatureParam.from_tau(float(rng.uniform(0.3, 1.0)))
    V, T = normalize_rows(rng.standard_normal((n, dim))), normalize_rows(rng.standard_normal((n, dim)))
    fetched_v = normalize_rows(rng.standard_normal((n * k, dim))).reshape(n, k, dim)
    fetched_t = normalize_rows(rng.standard_normal((n * k, dim))).reshape(n, k, dim)

    tokens_v, tokens_t = Tensor(build_tokens(V, fetched_v)), Tensor(build_tokens(T, fetched_t))
    V, T = Tensor(V), Tensor(T)

    def image_side():
        return encode_tokens(tokens_v, params.branches["image"], params.config)

    def text_side():
        return encode_tokens(tokens_t, params.branches["text"], params.config)

    def objective(V_bar, T_bar):
        return total_loss(V, T, V_bar, T_bar, temp)[0]

    # each branch only moves its own refined output, so the other one can be
    # frozen while that branch is perturbed
    fixed_v, fixed_t = Tensor(image_side().data), Tensor(text_side().data)
    worst = finite_diff_check(lambda: objective(image_side(), text_side()), [temp.log_inv_tau], h=h)
    worst = max(worst, finite_diff_check(lambda: objective(image_side(), fixed_t), params.tensors("image"), h=h))
    worst = max(worst, finite_diff_check(lambda: objective(fixed_v, text_side()), params.tensors("text"), h=h))
    return worst
