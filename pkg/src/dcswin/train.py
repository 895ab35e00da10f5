"""Optimization: label-smoothed cross-entropy, AdamW, the training loop and ablation runs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .data import IGNORE_LABEL, augment, compute_norm_stats, normalize, predict_tiled
from .decoder import VARIANTS, DCSwin
from .encoder import ModelConfig
from .metrics import ConfusionMatrix, f1_scores, mean_iou, overall_accuracy
from .tensor import Tensor, no_grad, ops

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    steps: int = 200
    batch: int = 4
    seed: int = 0
    eval_every: int = 50
    grad_accum: int = 1
    augment: bool = False
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.label_smoothing < 0.5:
            raise ValueError("label_smoothing must be in [0, 0.5)")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1 or self.grad_accum < 1:
            raise ValueError("steps >= 0, batch >= 1, eval_every >= 1, grad_accum >= 1")


def soft_cross_entropy(logits, labels, smoothing=0.1, ignore_label=IGNORE_LABEL):
    """Mean over labelled pixels of ``-sum_k q_k log p_k``, ``q = (1-e) onehot + e/K``."""
    B, K, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_label
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every pixel is ignored; loss undefined")
    if labels[valid].min() < 0 or labels[valid].max() >= K:
        raise ValueError(f"labels outside [0, {K})")
    target = np.where(valid, labels, 0)
    q = np.zeros((B, K, H, W), dtype=logits.dtype)
    np.put_along_axis(q, target[:, None], 1.0, axis=1)
    q = ((1.0 - smoothing) * q + smoothing / K) * valid[:, None]
    logp = ops.log_softmax(logits, axis=1)
    return ops.mul(ops.sum(ops.mul(logp, Tensor(q.astype(logits.dtype)))), -1.0 / n)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state, lr=3e-4, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=0.01, names=None):
    """One AdamW update in place: decoupled decay, then bias-corrected Adam step."""
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            who = names[i] if names else f"parameter #{i}"
            raise DivergenceError(f"non-finite gradient in {who} at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, named_params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamState()

    def step(self):
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                   self.betas, self.eps, self.weight_decay, self.names)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def predict_logits(model, image, norm_stats, tile_spec=None):
    """(K, H, W) logits for one (3, H, W) image in [0, 1]; tiles images larger than the tile."""
    def run(img):
        with no_grad():
            return model(Tensor(normalize(img, norm_stats)[None])).data[0]

    H, W = image.shape[1:]
    if tile_spec is None or (H <= tile_spec.tile and W <= tile_spec.tile):
        return run(image)
    return predict_tiled(run, image, tile_spec)


def evaluate(model, samples, norm_stats, tile_spec=None, ignore_label=IGNORE_LABEL,
             class_names=None):
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(model.cfg.num_classes, class_names, ignore_label)
    try:
        for s in samples:
            cm.accumulate(s.label, predict_logits(model, s.image, norm_stats, tile_spec).argmax(0))
    finally:
        model.train(was_training)
    return cm


def summarize(cm):
    return {"oa": overall_accuracy(cm), "miou": mean_iou(cm), "mean_f1": f1_scores(cm).mean_f1}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "loss", "oa", "miou", "mean_f1")


@dataclass
class TrainResult:
    losses: list
    log: list
    norm_stats: tuple

    def log_tsv(self):
        lines = ["\t".join(LOG_COLUMNS)]
        for row in self.log:
            lines.append("\t".join([str(row["step"])] + [f"{row[c]:.6f}" for c in LOG_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"


def _check_labels(samples, K, ignore_label):
    for s in samples:
        lab = s.label[s.label != ignore_label]
        if lab.size and (lab.min() < 0 or lab.max() >= K):
            raise ValueError(f"sample {s.id!r} has labels outside [0, {K}) for a {K}-class model")


def train(model, samples, cfg, norm_stats=None, eval_samples=None, log_path=None):
    """Train ``model`` in place; deterministic for a fixed ``cfg.seed`` and thread count."""
    if not samples:
        raise ValueError("no training samples")
    K = model.cfg.num_classes
    _check_labels(samples, K, cfg.ignore_label)
    if norm_stats is None:
        norm_stats = compute_norm_stats(samples)
    eval_samples = samples if eval_samples is None else eval_samples
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.named_parameters(), cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    model.train()
    losses, rows = [], []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(cfg.steps):
            opt.zero_grad()
            total = 0.0
            for _ in range(cfg.grad_accum):
                idx = rng.choice(len(samples), size=cfg.batch, replace=len(samples) < cfg.batch)
                batch = [augment(samples[i], rng) if cfg.augment else samples[i] for i in idx]
                x = Tensor(np.stack([normalize(s.image, norm_stats) for s in batch]))
                y = np.stack([s.label for s in batch])
                loss = soft_cross_entropy(model(x), y, cfg.label_smoothing, cfg.ignore_label)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"loss became {value} at step {step}")
                if cfg.grad_accum > 1:
                    loss = ops.mul(loss, 1.0 / cfg.grad_accum)
                loss.backward()
                total += value / cfg.grad_accum
            opt.step()
            losses.append(total)
            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
                row = {"step": step + 1, "loss": total,
                       **summarize(evaluate(model, eval_samples, norm_stats,
                                            ignore_label=cfg.ignore_label))}
                rows.append(row)
                log.info("step %d loss %.4f oa %.4f miou %.4f mean_f1 %.4f", row["step"],
                         row["loss"], row["oa"], row["miou"], row["mean_f1"])
    result = TrainResult(losses, rows, norm_stats)
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write(result.log_tsv())
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model, norm_stats, extra=None):
    meta = {
        "model": model.cfg.to_dict(),
        "variant": model.variant,
        "norm_mean": [float(v) for v in norm_stats[0]],
        "norm_std": [float(v) for v in norm_stats[1]],
        "extra": extra or {},
    }
    checkpoint.save(path, model.state_dict(), meta)


def load_model(path):
    """Rebuild the model stored at ``path``; returns ``(model, norm_stats, meta)``."""
    state, meta = checkpoint.load(path)
    model = DCSwin(ModelConfig(**meta["model"]), meta["variant"])
    checkpoint.load_into(model, state)
    norm = (np.array(meta["norm_mean"], np.float32), np.array(meta["norm_std"], np.float32))
    model.eval()
    return model, norm, meta


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_LABELS = {"baseline": "", "dc": "+DC", "dcfam_ns": "+DCFAM-NS", "dcfam": "+DCFAM"}


@dataclass
class AblationRow:
    method: str
    variant: str
    mean_f1: float
    oa: float
    miou: float
    train_accuracy: float
    steps: int
    parameters: int


def run_ablation(model_cfg, train_cfg, train_samples, eval_samples=None, variants=VARIANTS,
                 model_seed=0):
    """Train every decoder variant with the same seed and step budget."""
    rows = []
    norm = compute_norm_stats(train_samples)
    for variant in variants:
        model = DCSwin(model_cfg, variant, seed=model_seed)
        train(model, train_samples, train_cfg, norm_stats=norm)
        train_cm = evaluate(model, train_samples, norm, ignore_label=train_cfg.ignore_label)
        cm = train_cm if eval_samples is None else evaluate(
            model, eval_samples, norm, ignore_label=train_cfg.ignore_label)
        s = summarize(cm)
        rows.append(AblationRow(f"{model_cfg.name}{ABLATION_LABELS[variant]}", variant,
                                s["mean_f1"], s["oa"], s["miou"], overall_accuracy(train_cm),
                                train_cfg.steps, model.num_parameters()))
    return rows


def format_ablation_table(rows):
    width = max(len("Method"), *(len(r.method) for r in rows))
    lines = [f"{'Method':<{width}}  {'Mean F1':>7}  {'OA':>6}  {'mIoU':>6}"]
    for r in rows:
        lines.append(f"{r.method:<{width}}  {100 * r.mean_f1:7.2f}  {100 * r.oa:6.2f}  "
                     f"{100 * r.miou:6.2f}")
    return "\n".join(lines) + "\n"


def ablation_tsv(rows):
    cols = ["method", "variant", "mean_f1", "oa", "miou", "train_accuracy", "steps", "parameters"]
    lines = ["\t".join(cols)]
    for r in rows:
        d = asdict(r)
        lines.append("\t".join(f"{d[c]:.4f}" if isinstance(d[c], float) else str(d[c])
                               for c in cols))
    return "\n".join(lines) + "\n"
