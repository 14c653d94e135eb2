"""Training protocol and the experiments built on it.

One run: weighted BCE on logits, Adam, learning rate multiplied by
``plateau_factor`` after ``plateau_patience`` epochs without a strictly
lower validation loss, early stopping after ``early_stop_patience`` such
epochs, and the weights of the best validation epoch returned.
"""

import csv
import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import densenet as dn
from .dataset import TARGETS, DatasetManifest
from .errors import (
    ConfigInvalid, DegenerateClass, EcgError, EmptyDataset, NonFiniteLoss, ShapeMismatch, TooFewPositives,
)
from .evaluation import evaluate_scores, predict_scores
from .prng import Prng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.003
    plateau_factor: float = 0.8
    plateau_patience: int = 3
    max_epochs: int = 100
    early_stop_patience: int = 20
    batch_size: int = 256
    seed: int = 0
    pos_weight: object = "auto"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 64

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ConfigInvalid("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigInvalid("patience values must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("max_epochs and batch_size must be >= 1")


@dataclass
class ArrayDataset:
    x: np.ndarray  # (N, 12, 5000) float32
    y: np.ndarray  # (N,) {0, 1}
    ids: list = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float32).ravel()
        if len(self.x) != len(self.y):
            raise ShapeMismatch(f"{len(self.x)} inputs vs {len(self.y)} labels")
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.y))]

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx])


# ---------------------------------------------------------------------------
# class weighting and optimiser

def _target_vector(data, target=None):
    if isinstance(data, DatasetManifest):
        data = data.rows
    if isinstance(data, ArrayDataset):
        return data.y.astype(bool)
    if isinstance(data, (list, tuple)) and data and hasattr(data[0], "labels"):
        if target is None:
            raise ValueError("a target is needed to read labels from manifest rows")
        return np.array([target in r.labels for r in data], dtype=bool)
    arr = np.asarray(data)
    if arr.ndim == 2:
        return arr[:, TARGETS.index(target)].astype(bool)
    return arr.astype(bool).ravel()


def compute_pos_weight(data, target=None):
    """N_negative / N_positive."""
    y = _target_vector(data, target)
    npos = int(y.sum())
    nneg = int(y.size - npos)
    if npos == 0 or nneg == 0:
        raise DegenerateClass(f"need both classes, got {npos} positive / {nneg} negative")
    return nneg / npos


def pos_weight_from_counts(n_total, n_pos):
    if n_pos <= 0 or n_pos >= n_total:
        raise DegenerateClass("need both classes")
    return (n_total - n_pos) / n_pos


@dataclass
class AdamState:
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    step: int = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on every trainable tensor carrying a gradient."""
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# schedules

class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs with loss >= best."""

    def __init__(self, lr, factor=0.8, patience=3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0
        self.firings = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.firings += 1
                self.bad_epochs = 0
        return self.lr


def plateau_step(history, current_lr, cfg):
    """Rate to use after the last epoch of ``history`` (val losses so far)."""
    sched = PlateauScheduler(current_lr, cfg.plateau_factor, cfg.plateau_patience)
    fired_last = False
    for loss in history:
        before = sched.firings
        sched.step(loss)
        fired_last = sched.firings > before
    return current_lr * cfg.plateau_factor if fired_last else current_lr


def lr_trace(val_losses, cfg):
    """Learning rate in effect during each epoch for a given loss sequence."""
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    out = []
    for loss in val_losses:
        out.append(sched.lr)
        sched.step(loss)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float = 0.0


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    optimizer_params: list = field(default_factory=list)

    @property
    def val_losses(self):
        return [e.val_loss for e in self.epochs]

    @property
    def lrs(self):
        return [e.lr for e in self.epochs]

    @property
    def stop_epoch(self):
        return self.epochs[-1].epoch if self.epochs else 0

    def signature(self):
        """Everything except wall-clock timings."""
        return [(e.epoch, e.train_loss, e.val_loss, e.lr) for e in self.epochs], self.best_epoch, self.stop_reason


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
        for e in history.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr), f"{e.seconds:.3f}"])


def epoch_loop(run_epoch, validate, snapshot, cfg, on_epoch=None):
    """Drive epochs until ``max_epochs`` or early stopping.

    ``run_epoch(epoch, lr) -> train_loss``, ``validate() -> val_loss`` and
    ``snapshot() -> object`` are supplied by the caller, so the protocol can
    be exercised with crafted losses. Returns ``(best_snapshot, history)``.
    """
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    history = TrainHistory()
    best_loss = math.inf
    best = None
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        train_loss = float(run_epoch(epoch, lr))
        val_loss = float(validate())
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise NonFiniteLoss(f"epoch {epoch}: train loss {train_loss}, val loss {val_loss}")
        rec = EpochRecord(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        history.epochs.append(rec)
        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best = snapshot()
        sched.step(val_loss)
        if on_epoch is not None:
            on_epoch(rec)
        if epoch - history.best_epoch >= cfg.early_stop_patience:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    return best, history


# ---------------------------------------------------------------------------
# training a model

def _batch_loss(model, x, y, pos_weight, start, train):
    z = model.forward(x, mode="train" if train else "eval", start=start)
    return ad.bce_with_logits(z, y.reshape(-1, 1), pos_weight)


def _prefix_features(model, x, k, batch_size):
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model.forward(x[i:i + batch_size], mode="eval", stop=k).data)
    return np.concatenate(out)


def train(model, train_set, val_set, cfg=TrainConfig(), log_path=None, on_epoch=None):
    """Train ``model`` in place; return ``(best_model, history)``.

    ``best_model`` is a separate copy restored from the checkpoint taken at
    the best validation epoch. When a prefix of units is frozen its output
    is computed once per dataset and the remaining units train on it; frozen
    units are deterministic in eval mode, so the result is unchanged.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    pos_weight = compute_pos_weight(train_set) if cfg.pos_weight == "auto" else float(cfg.pos_weight)
    model.seed = cfg.seed
    params = model.parameters(trainable_only=True)
    state = AdamState()
    k = model.frozen_prefix()
    if 0 < k < len(dn.UNITS):
        start = k
        xtr = _prefix_features(model, train_set.x, k, cfg.eval_batch_size)
        xva = _prefix_features(model, val_set.x, k, cfg.eval_batch_size)
    else:
        if k == len(dn.UNITS):
            log.warning("every unit is frozen; training leaves the model unchanged")
        start = 0
        xtr, xva = train_set.x, val_set.x
    ytr = train_set.y
    yva = val_set.y
    rng = Prng(cfg.seed)
    n = len(ytr)

    def run_epoch(epoch, lr):
        perm = rng.spawn(epoch).permutation(n)
        total, seen = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:
                log.warning("skipping a single-sample batch (batch norm needs more than one sample)")
                continue
            for p in params.values():
                p.grad = None
            if not params:
                loss = _batch_loss(model, xtr[idx], ytr[idx], pos_weight, start, train=False)
                total += float(loss.data) * len(idx)
                seen += len(idx)
                continue
            with ad.Tape() as tape:
                loss = _batch_loss(model, xtr[idx], ytr[idx], pos_weight, start, train=True)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"epoch {epoch}: non-finite batch loss")
            tape.backward(loss)
            adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            total += value * len(idx)
            seen += len(idx)
        return total / max(seen, 1)

    def validate():
        total = 0.0
        for i in range(0, len(yva), cfg.eval_batch_size):
            loss = _batch_loss(model, xva[i:i + cfg.eval_batch_size], yva[i:i + cfg.eval_batch_size],
                               pos_weight, start, train=False)
            total += float(loss.data) * len(yva[i:i + cfg.eval_batch_size])
        return total / len(yva)

    best_bytes, history = epoch_loop(run_epoch, validate, lambda: dn.checkpoint_bytes(model), cfg, on_epoch)
    history.optimizer_params = sorted(state.moments)
    if log_path is not None:
        write_history(log_path, history)
    return dn.model_from_bytes(best_bytes), history


def finetune(pretrained, train_set, val_set, k_frozen=7, lr=0.003, cfg=TrainConfig(), log_path=None):
    """Freeze the first ``k_frozen`` units, re-initialise the rest, train."""
    if isinstance(pretrained, dn.DenseNet1d):
        model = dn.clone(pretrained)
    elif isinstance(pretrained, (bytes, bytearray)):
        model = dn.model_from_bytes(pretrained)
    else:
        model = dn.load_checkpoint(pretrained)
    dn.freeze_prefix(model, k_frozen)
    dn.reinit_unfrozen(model, Prng(cfg.seed).spawn(0xF1E7))
    return train(model, train_set, val_set, replace(cfg, lr=lr), log_path)


def train_from_scratch(train_set, val_set, cfg=TrainConfig(), model_config=None, log_path=None):
    model = dn.build(model_config or dn.DenseNetConfig.desk_scale())
    dn.init_params(model, Prng(cfg.seed).spawn(0x1417))
    return train(model, train_set, val_set, cfg, log_path)


# ---------------------------------------------------------------------------
# splitting and subsampling

def stratified_kfold(data, k=5, target=None, seed=0):
    """Fold index (0..k-1) per row; per-fold positives differ by at most one."""
    y = _target_vector(data, target)
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y)
    if len(pos) < k:
        raise TooFewPositives(f"{len(pos)} positives cannot fill {k} folds")
    rng = Prng(seed)
    pos = pos[rng.permutation(len(pos))]
    neg = neg[rng.permutation(len(neg))]
    folds = np.empty(y.size, dtype=np.int64)
    folds[pos] = np.arange(len(pos)) % k
    folds[neg] = (np.arange(len(neg)) + len(pos)) % k
    return folds


def stratified_split(data, fraction=0.2, target=None, seed=0):
    """(train_idx, holdout_idx) with the holdout taking ``fraction`` of each class."""
    y = _target_vector(data, target)
    rng = Prng(seed)
    train_idx, hold_idx = [], []
    for cls in (True, False):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        nh = int(round(fraction * len(idx)))
        hold_idx.append(idx[:nh])
        train_idx.append(idx[nh:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(hold_idx))


def _balanced_pick(odd, ncls, tcol, k):
    """Choose ``k`` of the odd pattern codes so each class's spare rows split evenly."""
    bits = np.array([[(c >> j) & 1 for j in range(ncls)] for c in odd], dtype=np.float64)
    order = list(np.argsort(-bits.sum(axis=1), kind="stable"))
    weights = np.ones(ncls)
    weights[tcol] = 1e3

    def cost(dev):
        return ((weights * np.abs(dev)).max(), float((weights * dev * dev).sum()))

    chosen = np.zeros(len(odd), dtype=bool)
    chosen[order[:k]] = True
    dev = bits[chosen].sum(axis=0) - 0.5 * bits.sum(axis=0)  # chosen spares minus exact half
    # swap search
    while True:
        best, move = cost(dev), None
        for i in np.flatnonzero(chosen):
            for j in np.flatnonzero(~chosen):
                c = cost(dev - bits[i] + bits[j])
                if c < best:
                    best, move = c, (i, j)
        if move is None:
            break
        i, j = move
        chosen[i], chosen[j] = False, True
        dev += bits[j] - bits[i]
    return [odd[i] for i in np.flatnonzero(chosen)]


def halve_indices(labels, target=None, seed=0):
    """Row indices of a half-size subset preserving label prevalence.

    Rows are grouped by their full label pattern and each group contributes
    half its rows. Odd-sized groups leave one spare row each; exactly enough
    of them are chosen to reach ``floor(n/2)`` rows, picked by a swap search
    that minimises the per-class deviation from exact halves, the ``target``
    column first. The target always lands within one of half.
    """
    lab = np.asarray(labels).astype(bool)
    if lab.ndim == 1:
        lab = lab[:, None]
    n, ncls = lab.shape
    tcol = 0 if target is None or lab.shape[1] == 1 else TARGETS.index(target)
    codes = lab.astype(np.int64) @ (1 << np.arange(ncls, dtype=np.int64))
    groups = {int(c): np.flatnonzero(codes == c) for c in np.unique(codes)}
    take = {c: len(idx) // 2 for c, idx in groups.items()}
    odd = sorted(c for c, idx in groups.items() if len(idx) % 2)
    if odd:
        for c in _balanced_pick(odd, ncls, tcol, n // 2 - sum(take.values())):
            take[c] += 1
    rng = Prng(seed)
    chosen = []
    for c in sorted(groups):
        idx = groups[c]
        chosen.append(idx[rng.permutation(len(idx))[:take[c]]])
    return np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)


def stratified_halve(manifest, target, seed=0):
    if isinstance(manifest, DatasetManifest):
        lab = np.array([r.labels.flags() for r in manifest.rows], dtype=bool).reshape(-1, len(TARGETS))
        idx = halve_indices(lab, target, seed)
        rows = [manifest.rows[i] for i in idx]
        note = (manifest.provenance + "; " if manifest.provenance else "") + f"halved on {target} seed={seed}"
        return DatasetManifest(rows, note)
    return halve_indices(manifest, target, seed)


# ---------------------------------------------------------------------------
# grid search

@dataclass(frozen=True)
class GridSpec:
    lrs: tuple = (0.001, 0.002, 0.003)
    factors: tuple = (0.8,)
    frozen: tuple = (None,)
    repeats: int = 15

    def __post_init__(self):
        if not self.lrs or not self.factors or not self.frozen or self.repeats < 1:
            raise ConfigInvalid("grid option lists must be non-empty and repeats >= 1")

    def cells(self):
        return [dict(lr=lr, factor=f, frozen=k) for lr, f, k in itertools.product(self.lrs, self.factors, self.frozen)]


@dataclass
class CellResult:
    params: dict
    metrics: list = field(default_factory=list)
    best_epochs: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.metrics)) if self.metrics else float("nan")

    @property
    def std(self):
        return float(np.std(self.metrics)) if self.metrics else float("nan")

    @property
    def failed(self):
        return bool(self.failures) and not self.metrics


def cell_seed(master_seed, cell_index, repeat):
    return ((master_seed + repeat) ^ cell_index) & ((1 << 64) - 1)


def grid_search(grid, run_cell, seed=0, report_path=None, workers=1):
    """Evaluate every cell ``grid.repeats`` times and rank by mean metric.

    ``run_cell(params, seed) -> (metric, best_epoch)``. A cell whose run
    raises is recorded as failed for that repeat and the search continues.
    """
    cells = grid.cells()
    jobs = [(ci, r) for ci in range(len(cells)) for r in range(grid.repeats)]

    def one(job):
        ci, r = job
        try:
            metric, best_epoch = run_cell(dict(cells[ci]), cell_seed(seed, ci, r))
            return ci, r, float(metric), int(best_epoch), None
        except EcgError as exc:
            log.warning("grid cell %s repeat %d failed: %s", cells[ci], r, exc)
            return ci, r, float("nan"), -1, str(exc)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, jobs))
    else:
        outcomes = [one(j) for j in jobs]
    results = [CellResult(dict(c)) for c in cells]
    for ci, r, metric, best_epoch, err in sorted(outcomes):
        if err is None:
            results[ci].metrics.append(metric)
            results[ci].best_epochs.append(best_epoch)
        else:
            results[ci].failures.append((r, err))
    if report_path is not None:
        with open(report_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lr", "factor", "frozen", "repeat", "metric", "best_epoch", "status"])
            for ci, r, metric, best_epoch, err in sorted(outcomes):
                p = cells[ci]
                w.writerow([p["lr"], p["factor"], "" if p["frozen"] is None else p["frozen"], r,
                            repr(metric), best_epoch, "ok" if err is None else "failed"])
    ranked = sorted(results, key=lambda c: (math.isnan(c.mean), -c.mean if not math.isnan(c.mean) else 0))
    return ranked


def make_cell_runner(data, cfg=TrainConfig(), protocol="holdout", k=5, pretrained=None, model_config=None):
    """Standard cell evaluation: validation G-mean at threshold 0.5.

    ``protocol`` is ``"cv"`` (stratified k-fold, metric averaged over folds)
    or ``"holdout"`` (one stratified 80/20 split). Cells with a ``frozen``
    value fine-tune ``pretrained``; others train from scratch.
    """
    if protocol not in ("cv", "holdout"):
        raise ConfigInvalid("protocol must be 'cv' or 'holdout'")

    def fit(train_set, val_set, params, seed):
        c = replace(cfg, lr=params["lr"], plateau_factor=params["factor"], seed=seed)
        if params.get("frozen") is None:
            best, hist = train_from_scratch(train_set, val_set, c, model_config)
        else:
            if pretrained is None:
                raise ConfigInvalid("frozen cells need a pretrained model")
            best, hist = finetune(pretrained, train_set, val_set, params["frozen"], params["lr"], c)
        scores = predict_scores(best, val_set.x, cfg.eval_batch_size)
        return evaluate_scores(scores, val_set.y).gmean, hist.best_epoch

    def run_cell(params, seed):
        if protocol == "holdout":
            tr, va = stratified_split(data, 0.2, seed=seed)
            return fit(data.take(tr), data.take(va), params, seed)
        folds = stratified_kfold(data, k, seed=seed)
        vals, epochs = [], []
        for f in range(k):
            g, e = fit(data.take(np.flatnonzero(folds != f)), data.take(np.flatnonzero(folds == f)), params, seed)
            vals.append(g)
            epochs.append(e)
        return float(np.mean(vals)), int(round(np.mean(epochs)))

    return run_cell
