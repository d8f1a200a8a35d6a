"""Training recipe: deep-supervision objective, AdamW, step decay, early stopping, metrics."""
import json
import logging
import time
from fractions import Fraction
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import AugmentSpec, pipeline
from .autograd import Tensor, bce_with_logits, cross_entropy, no_grad
from .data import HsiCube, normalize
from .model import model_forward

logger = logging.getLogger(__name__)

TASKS = ("multiclass", "multilabel")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_max: int = 50
    lr: float = 4e-4
    weight_decay: float = 1e-2
    batch: int = 8
    step_size: int = 20
    gamma: float = 0.1
    patience: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    task: str = "multiclass"
    augment: list = field(default_factory=list)
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs_max", "batch", "step_size", "patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"train: {name} must be a positive integer")
        if self.lr <= 0:
            raise ValueError("train: lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("train: weight_decay must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("train: gamma must lie in (0, 1]")
        if self.task not in TASKS:
            raise ValueError(f"train: task must be one of {TASKS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("train: dtype must be float32 or float64")
        if not self.seeds:
            raise ValueError("train: at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        self.augment = [a if isinstance(a, AugmentSpec) else AugmentSpec.from_dict(a) for a in self.augment]

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"train: unknown keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["augment"] = [a.to_dict() for a in self.augment]
        return d


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_main: float
    loss_aux_s: float
    loss_aux_p: float
    val: float
    wall_time: float = 0.0

    def log_line(self):
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d)


# ---------------------------------------------------------------- objective

def _task_loss(logits, targets, task):
    return cross_entropy(logits, targets) if task == "multiclass" else bce_with_logits(logits, targets)


def total_loss(z, z_s, z_p, targets, lambda_aux, task="multiclass"):
    """L_main + lambda_aux * (L_aux_spectral + L_aux_spatial).

    Returns (total, parts) with ``parts`` the float value of each term.
    """
    main = _task_loss(z, targets, task)
    if z_s is None or z_p is None:
        if lambda_aux > 0:
            raise ValueError("auxiliary logits are required when lambda_aux > 0")
        return main, {"main": float(main.data), "aux_s": 0.0, "aux_p": 0.0}
    aux_s = _task_loss(z_s, targets, task)
    aux_p = _task_loss(z_p, targets, task)
    total = main + (aux_s + aux_p) * lambda_aux
    return total, {"main": float(main.data), "aux_s": float(aux_s.data), "aux_p": float(aux_p.data)}


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def decays(name, shape):
    """Weight decay applies to matrices only; biases and norm affines are exempt."""
    return len(shape) > 1


def adamw_step(params, grads, state, lr, wd, decay_mask=None):
    """One in-place AdamW update of ``params`` (name -> ndarray).

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta, with
    the decay term skipped where ``decay_mask[name]`` is False.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter is {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if wd and (decay_mask is None or decay_mask.get(name, True)):
            update = update + lr * wd * theta
        theta -= update.astype(theta.dtype, copy=False)
    return params, state


def lr_at(epoch, config):
    """Step decay: lr0 * gamma ** floor((epoch - 1) / step_size), epochs counted from 1.

    The product is formed exactly on the decimal values and rounded once, so
    4e-4 decayed twice by 0.1 is exactly 4e-6.
    """
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    k = (epoch - 1) // config.step_size
    return float(Fraction(repr(float(config.lr))) * Fraction(repr(float(config.gamma))) ** k)


def early_stop(history, patience):
    """(stop, best_epoch) for a 1-based history of validation metrics (higher is better).

    Only strict improvements reset the patience counter; the earliest epoch
    holding the best value is returned.
    """
    if not history:
        raise ValueError("early_stop needs a non-empty history")
    best = int(np.argmax(history))  # first occurrence of the max
    return len(history) - 1 - best >= patience, best + 1


# ---------------------------------------------------------------- metrics

def accuracy(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty split is undefined")
    return float(np.mean(y_true == y_pred))


def _one_hot(y, K):
    out = np.zeros((len(y), K), dtype=bool)
    out[np.arange(len(y)), y] = True
    return out


def macro_f1(y_true, y_pred, num_classes=None):
    """Unweighted mean of per-class F1; a class with 2TP + FP + FN = 0 scores 0.

    Accepts class-index vectors or multi-hot indicator matrices.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape[0] == 0:
        raise ValueError("macro F1 of an empty split is undefined")
    if y_true.ndim == 1:
        K = num_classes or int(max(y_true.max(), y_pred.max())) + 1
        y_true, y_pred = _one_hot(y_true, K), _one_hot(y_pred, K)
    t, p = y_true.astype(bool), y_pred.astype(bool)
    tp = (t & p).sum(axis=0)
    fp = (~t & p).sum(axis=0)
    fn = (t & ~p).sum(axis=0)
    # exact rational arithmetic, rounded once
    f1 = [Fraction(2 * int(a), int(2 * a + b + c)) if 2 * a + b + c else Fraction(0) for a, b, c in zip(tp, fp, fn)]
    return float(sum(f1) / len(f1))


def predict_logits(params, config, X, batch=8):
    """Eval-mode main logits for a normalized [n, H, W, C] array."""
    with no_grad():
        out = [model_forward(X[i:i + batch], params, config, mode="eval").data for i in range(0, len(X), batch)]
    return np.concatenate(out)


def decide(logits, task):
    if task == "multiclass":
        return logits.argmax(axis=1)
    return logits > 0.0  # sigmoid(z) > 0.5


def evaluate(params, config, X, targets, task="multiclass", batch=8):
    """Accuracy and macro F1 in eval mode (batchnorm on running statistics)."""
    if len(X) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = decide(predict_logits(params, config, X, batch), task)
    metrics = {"macro_f1": macro_f1(targets, pred, config.num_classes)}
    if task == "multiclass":
        metrics["accuracy"] = accuracy(targets, pred)
    else:
        metrics["accuracy"] = float(np.mean(np.all(np.asarray(targets, bool) == pred, axis=1)))
    return metrics


def selection_metric(metrics, task):
    return metrics["accuracy"] if task == "multiclass" else metrics["macro_f1"]


# ---------------------------------------------------------------- training loop

def _derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _train_batch(X_raw, idx, epoch, seed, tc, stats, wavelengths, dtype):
    rows = []
    for i in idx:
        x = X_raw[i]
        if tc.augment:
            rng = np.random.default_rng(_derive_seed(seed, epoch, i))
            x = pipeline(HsiCube(x, wavelengths) if wavelengths is not None else x, tc.augment, rng)
            x = x.data if isinstance(x, HsiCube) else x
        rows.append(normalize(x, stats))
    return np.stack(rows).astype(dtype, copy=False)


def train_model(params, config, tc, X_train, y_train, X_val, y_val, stats, seed, log=None, wavelengths=None):
    """Train in place with early stopping; restores the best-epoch weights before returning.

    ``X_train``/``X_val`` are raw cubes [n, H, W, C]; augmentation (training
    cubes only) runs on raw values before normalization with ``stats``.
    Returns (history, best_epoch).
    """
    dtype = np.dtype(tc.dtype)
    Xv = normalize(np.asarray(X_val), stats).astype(dtype, copy=False)
    names = list(params.tensors)
    decay_mask = {n: decays(n, params[n].shape) for n in names}
    state = AdamWState()
    history, vals = [], []
    best_state, best_epoch = params.state_dict(), 0
    n = len(X_train)

    for epoch in range(1, tc.epochs_max + 1):
        t0 = time.perf_counter()
        lr = lr_at(epoch, tc)
        order = np.random.default_rng(_derive_seed(seed, epoch)).permutation(n)
        sums = {"main": 0.0, "aux_s": 0.0, "aux_p": 0.0}
        for start in range(0, n, tc.batch):
            idx = order[start:start + tc.batch]
            xb = _train_batch(X_train, idx, epoch, seed, tc, stats, wavelengths, dtype)
            yb = y_train[idx]
            params.zero_grad()
            out = model_forward(Tensor(xb), params, config, mode="train")
            z, z_s, z_p = out if isinstance(out, tuple) else (out, None, None)
            loss, parts = total_loss(z, z_s, z_p, yb, config.lambda_aux, tc.task)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}: {parts}")
            loss.backward()
            grads = {k: params[k].grad for k in names}
            if any(g is not None and not np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"non-finite gradient at epoch {epoch}")
            adamw_step({k: params[k].data for k in names}, grads, state, lr, tc.weight_decay, decay_mask)
            for k in sums:
                sums[k] += parts[k] * len(idx)
        val = selection_metric(evaluate(params, config, Xv, y_val, tc.task, tc.batch), tc.task)
        rec = EpochRecord(epoch, lr, sums["main"] / n, sums["aux_s"] / n, sums["aux_p"] / n, val,
                          time.perf_counter() - t0)
        history.append(rec)
        vals.append(val)
        if log is not None:
            log.write(rec.log_line() + "\n")
            log.flush()
        logger.debug("epoch %d lr=%.2e loss=%.4f val=%.4f", epoch, lr, rec.loss_main, val)
        stop, best = early_stop(vals, tc.patience)
        if best == epoch:
            best_state, best_epoch = params.state_dict(), epoch
        if stop:
            break
    params.load_state_dict(best_state)
    return history, best_epoch


# ---------------------------------------------------------------- multi-seed runs

def _aggregate(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def run(manifest, cubes, ssft_config, train_config, out_dir=None, seeds=None):
    """Train and test one model per seed; returns a JSON-ready report."""
    from .estimator import SSFTClassifier  # estimator builds on this module

    manifest.check_trainable()
    if manifest.task != train_config.task:
        raise ValueError(f"manifest task {manifest.task!r} disagrees with train task {train_config.task!r}")
    seeds = list(seeds) if seeds is not None else list(train_config.seeds)
    X = np.stack([c.data for c in cubes])
    wl = cubes[0].wavelengths
    parts = {s: manifest.indices(s) for s in ("train", "val", "test")}
    ys = {s: manifest.targets(i) for s, i in parts.items()}
    out_dir = Path(out_dir) if out_dir is not None else None

    per_seed = []
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}" if out_dir is not None else None
        record = {"seed": seed}
        try:
            est = SSFTClassifier.from_configs(ssft_config, train_config, random_state=seed)
            log = None
            if seed_dir is not None:
                seed_dir.mkdir(parents=True, exist_ok=True)
                log = (seed_dir / "epochs.jsonl").open("w")
            try:
                est.fit(X[parts["train"]], ys["train"], X_val=X[parts["val"]], y_val=ys["val"],
                        wavelengths=wl, log=log)
            finally:
                if log is not None:
                    log.close()
            record.update(status="ok", best_epoch=est.best_epoch_, epochs_run=len(est.history_),
                          val=est.history_[est.best_epoch_ - 1].val if est.best_epoch_ else None,
                          test=est.evaluate(X[parts["test"]], ys["test"]))
            if seed_dir is not None:
                est.save(seed_dir / "best.json")
        except NumericalError as exc:
            record.update(status="numeric_failure", error=str(exc))
        per_seed.append(record)

    ok = [r for r in per_seed if r["status"] == "ok"]
    report = {
        "model": ssft_config.to_dict(),
        "train": train_config.to_dict() | {"seeds": seeds},
        "seeds": per_seed,
        "aggregate": {
            f"test_{m}": _aggregate([r["test"][m] for r in ok]) for m in ("accuracy", "macro_f1")
        } if ok else {},
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report, indent=1))
    return report


__all__ = [
    "AdamWState", "EpochRecord", "NumericalError", "TrainConfig", "accuracy", "adamw_step",
    "early_stop", "evaluate", "lr_at", "macro_f1", "run", "total_loss", "train_model",
]
