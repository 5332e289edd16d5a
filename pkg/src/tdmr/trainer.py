"""Seeded training loop: pair synthesis, forward passes, losses, AdamW updates,
logging, checkpoints and exact resume."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ClipFeatureSequence, MomentDataset, hull_span
from .model import Model, ModelConfig, collate
from .numcore import NonFiniteError, RngStream, Tape
from .objectives import LossWeights, ObjectiveConfig, Target, TrainingDivergenceError, batch_objective
from .vsdc import PLACEMENTS, batch_similarity, select_pairs, select_random_pairs, synthesize_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 200
    max_steps: int = 0  # 0 means epochs * steps_per_epoch
    lr_drop_every: int = 0  # epochs; 0 disables the step schedule
    lr_drop_factor: float = 0.1
    grad_clip: float = 0.1  # global norm; 0 disables
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    synthesis: bool = True
    alpha: float = 0.7
    placement: str = "split"
    random_pairs: bool = False
    include_originals: bool = False
    length_bias_frac: float = 0.1
    weights: LossWeights = LossWeights()
    margin_delta: float = 0.2
    tau: float = 0.5
    bg_weight: float = 0.1
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 0 or self.max_steps < 0:
            raise ValueError("epochs and max_steps must be nonnegative")

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.weights, self.margin_delta, self.tau, self.bg_weight)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


class AdamW:
    """Adaptive moments with weight decay applied to the weights directly."""

    def __init__(self, params: dict, lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params  # name -> Parameter
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, tuple(betas), eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            p.data *= 1.0 - lr * self.weight_decay
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            p.data -= lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": {n: a.copy() for n, a in self.m.items()}, "v": {n: a.copy() for n, a in self.v.items()}}

    def load(self, state: dict) -> None:
        if set(state["m"]) != set(self.params):
            raise ValueError("optimizer state does not match the parameters")
        self.t = int(state["t"])
        self.m = {n: np.array(state["m"][n], dtype=np.float64) for n in self.params}
        self.v = {n: np.array(state["v"][n], dtype=np.float64) for n in self.params}


def clip_grad_norm(params, max_norm: float) -> float:
    norm = math.sqrt(math.fsum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            p.grad *= scale
    return norm


# ------------------------------------------------------------------ samples


@dataclass
class TrainItem:
    clips: np.ndarray
    text: np.ndarray
    windows: list  # seconds
    labels: list
    duration: float
    clip_duration: float


def training_items(dataset: MomentDataset) -> list:
    items = []
    for video, ann in dataset.samples():
        if ann.query_tokens is None:
            raise ValueError(f"query {ann.qid} has no text features")
        items.append(TrainItem(video.clips, np.asarray(ann.query_tokens, dtype=np.float64),
                               [list(map(float, w)) for w in ann.relevant_windows],
                               list(ann.saliency_labels), float(ann.duration), video.clip_duration))
    return items


def _normalise(windows, duration) -> np.ndarray:
    w = np.asarray(windows, dtype=np.float64).reshape(-1, 2) / duration
    w = np.clip(w, 0.0, 1.0)
    return np.stack([(w[:, 0] + w[:, 1]) / 2.0, w[:, 1] - w[:, 0]], axis=1)


def _original(item: TrainItem):
    L = item.clips.shape[0]
    gt_mask = np.zeros(L, dtype=bool)
    for w in item.windows:
        first = int(math.floor(w[0] / item.clip_duration))
        last = int(math.ceil(w[1] / item.clip_duration)) - 1
        gt_mask[max(0, first):min(L - 1, last) + 1] = True
    return item.clips, Target(_normalise(item.windows, item.duration), np.asarray(item.labels), gt_mask)


def _synthesized(result, clip_duration: float):
    L = result.length
    span = result.gt_span
    window = [span.first * clip_duration, (span.last + 1) * clip_duration]
    gt_mask = np.zeros(L, dtype=bool)
    gt_mask[span.first:span.last + 1] = True
    return result.tokens, Target(_normalise([window], L * clip_duration), np.asarray(result.saliency_labels), gt_mask)


def synthesize_step(items: list, cfg: TrainConfig, rng: RngStream):
    """Pair plan and synthesized pairs for one step's items (needs two or more)."""
    triples = []
    for it in items:
        gt = hull_span(it.windows, it.clip_duration, it.clips.shape[0])
        triples.append((_as_video(it), gt, it.labels))
    if cfg.random_pairs:
        plan = select_random_pairs(len(items), rng.child("pairs"))
    else:
        plan = select_pairs(batch_similarity([it.clips for it in items]))
    results = synthesize_batch(triples, plan, cfg.alpha, rng.child("synth"), cfg.length_bias_frac,
                               cfg.placement, on_degenerate="passthrough")
    return plan, results


def build_step_inputs(items: list, cfg: TrainConfig, rng: RngStream):
    """Sequences, texts and targets for one optimisation step."""
    seqs, texts, targets = [], [], []
    if cfg.synthesis and len(items) >= 2 and cfg.alpha < 1.0:
        plan, results = synthesize_step(items, cfg, rng)
        for i, (own, other) in enumerate(results):
            k = plan.partners[i]
            for res, owner in ((own, i), (other, k)):
                tokens, target = _synthesized(res, items[owner].clip_duration)
                seqs.append(tokens)
                texts.append(items[owner].text)
                targets.append(target)
        if not cfg.include_originals:
            return seqs, texts, targets
    for it in items:
        tokens, target = _original(it)
        seqs.append(tokens)
        texts.append(it.text)
        targets.append(target)
    return seqs, texts, targets


def _as_video(item: TrainItem) -> ClipFeatureSequence:
    return ClipFeatureSequence("", item.clips, item.clip_duration, item.clips.shape[0] * item.clip_duration)


# ------------------------------------------------------------------ loop


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    step: int = 0
    epoch: int = 0

    def checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.config,
            params=self.model.state_dict(),
            train_config=cfg.to_dict(),
            optimizer=self.optimizer.state(),
            step=self.step,
            epoch=self.epoch,
            rng=RngStream(cfg.seed).child("step", self.step).state(),
        )


def init_state(model_config: ModelConfig, cfg: TrainConfig) -> TrainState:
    model = Model(model_config, RngStream(cfg.seed).child("init"))
    opt = AdamW(dict(model.named_parameters()), cfg.lr, cfg.weight_decay, cfg.adam_betas, cfg.adam_eps)
    return TrainState(model, opt)


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    state = init_state(ckpt.model_config, cfg)
    state.model.load_state_dict(ckpt.params)
    state.optimizer.load(ckpt.optimizer)
    state.step, state.epoch = ckpt.step, ckpt.epoch
    return state


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_drop_every > 0:
        return cfg.lr * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)
    return cfg.lr


def train_step(items: list, state: TrainState, cfg: TrainConfig):
    """One update on ``items``; returns the loss report.  Parameters change in place."""
    rng = RngStream(cfg.seed).child("step", state.step)
    seqs, texts, targets = build_step_inputs(items, cfg, rng)
    batch = collate(seqs, texts)
    model = state.model
    try:
        with Tape() as tape:
            pred = model.forward(batch, training=True, rng=rng.child("dropout"), negatives=True)
            report = batch_objective(pred, targets, cfg.objective(), rng.child("loss"))
            tape.backward(report.total_tensor)
    except (NonFiniteError, TrainingDivergenceError) as exc:
        model.zero_grad()
        raise TrainingDivergenceError(f"step {state.step}: {exc}") from exc
    params = model.parameters()
    report.grad_norm = clip_grad_norm(params, cfg.grad_clip)
    state.optimizer.step(learning_rate(cfg, state.epoch))
    model.zero_grad()
    return report


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return RngStream(seed).child("shuffle", epoch).permutation(n)


@dataclass
class FitResult:
    state: TrainState
    checkpoint: Path | None
    losses: list = field(default_factory=list)  # per-step totals, this run only
    elapsed: float = 0.0


def fit(dataset: MomentDataset, model_config: ModelConfig, cfg: TrainConfig, out_dir=None,
        resume=None, log_path=None, hook=None, hook_every: int = 0) -> FitResult:
    """Train until ``max_steps`` (or ``epochs`` worth of steps).

    ``resume`` is a checkpoint path; the continuation is identical to an
    uninterrupted run because every step's randomness derives from
    ``(seed, step)`` and each epoch's order from ``(seed, epoch)``.
    ``hook(state)`` is called every ``hook_every`` steps.
    """
    items = training_items(dataset)
    if not items:
        raise ValueError("cannot train on an empty dataset")
    n = len(items)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps or cfg.epochs * per_epoch
    if resume is not None:
        state = state_from_checkpoint(load_checkpoint(resume, expect=model_config), cfg)
    else:
        state = init_state(model_config, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a") if log_path is not None else None
    losses = []
    start = time.perf_counter()
    try:
        order, order_epoch = None, -1
        while state.step < total:
            epoch, pos = divmod(state.step, per_epoch)
            state.epoch = epoch
            if order_epoch != epoch:
                order, order_epoch = epoch_order(n, cfg.seed, epoch), epoch
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            report = train_step([items[i] for i in idx], state, cfg)
            losses.append(report.total)
            if log_fh is not None:
                rec = {"step": state.step, "epoch": epoch, "lr": learning_rate(cfg, epoch), **report.to_record()}
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            state.step += 1
            state.epoch = state.step // per_epoch
            if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"step{state.step:07d}.ckpt", state.checkpoint(cfg))
            if hook is not None and hook_every and state.step % hook_every == 0:
                if hook(state) is False:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    path = None
    if out_dir is not None:
        path = save_checkpoint(out_dir / "final.ckpt", state.checkpoint(cfg))
    return FitResult(state, path, losses, time.perf_counter() - start)


def load_model(path, expect: ModelConfig | None = None) -> Model:
    ckpt = load_checkpoint(path, expect)
    model = Model(ckpt.model_config, RngStream(0))
    model.load_state_dict(ckpt.params)
    return model
