"""Desk-scale experiments on the synthetic corpus.

``synthetic_end_to_end`` trains one desk_scale classifier on domain A and
scores it on a held-out 20%. ``transfer`` pretrains on domain A, then
compares block-frozen fine-tuning against training from scratch on a small
domain-B set, both with the same epoch budget.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import densenet as dn
from . import training as tr
from .evaluation import evaluate
from .prng import Prng
from .synth import SynthSpec, generate_dataset

log = logging.getLogger(__name__)

DESK_TRAIN = tr.TrainConfig(batch_size=32, max_epochs=10)


def split_3way(data, test_fraction=0.2, val_fraction=0.2, seed=0):
    """Stratified train/val/test datasets; val is carved out of the non-test part."""
    rest, test = tr.stratified_split(data, test_fraction, seed=seed)
    rest_set = data.take(rest)
    tri, vai = tr.stratified_split(rest_set, val_fraction, seed=seed + 1)
    return rest_set.take(tri), rest_set.take(vai), data.take(test)


@dataclass
class RunResult:
    gmean: float
    metrics: object
    confusion: object
    history: object
    seconds: float
    extra: dict = field(default_factory=dict)


def synthetic_end_to_end(seed=0, n_records=2000, cfg=DESK_TRAIN, data_seed=None, on_epoch=None):
    t0 = time.perf_counter()
    data, _ = generate_dataset(SynthSpec(n_records=n_records, seed=seed if data_seed is None else data_seed))
    train_set, val_set, test_set = split_3way(data, seed=seed)
    del data
    model = dn.build(dn.DenseNetConfig.desk_scale())
    dn.init_params(model, Prng(seed).spawn(0x1417))
    best, hist = tr.train(model, train_set, val_set, replace(cfg, seed=seed), on_epoch=on_epoch)
    res = evaluate(best, test_set.x, test_set.y, 0.5, test_set.ids)
    return RunResult(res.metrics.gmean, res.metrics, res.confusion, hist, time.perf_counter() - t0,
                     {"model": best, "n_train": len(train_set), "n_test": len(test_set)})


@dataclass(frozen=True)
class TransferSpec:
    n_pretrain: int = 5000
    n_target: int = 300
    n_target_test: int = 600
    k_frozen: int = 7
    pretrain_cfg: tr.TrainConfig = replace(DESK_TRAIN, max_epochs=6)
    target_cfg: tr.TrainConfig = replace(DESK_TRAIN, max_epochs=15)
    pretrain_seed: int = 100


def pretrain_domain_a(spec=TransferSpec(), on_epoch=None):
    data, _ = generate_dataset(SynthSpec.domain_a(n_records=spec.n_pretrain, seed=spec.pretrain_seed))
    rest, val = tr.stratified_split(data, 0.1, seed=spec.pretrain_seed)
    train_set, val_set = data.take(rest), data.take(val)
    del data
    model = dn.build(dn.DenseNetConfig.desk_scale())
    dn.init_params(model, Prng(spec.pretrain_seed).spawn(0x1417))
    best, hist = tr.train(model, train_set, val_set, replace(spec.pretrain_cfg, seed=spec.pretrain_seed),
                          on_epoch=on_epoch)
    return best, hist


def transfer_trial(pretrained, seed, spec=TransferSpec()):
    """One paired comparison on domain B. Returns (finetuned RunResult, scratch RunResult)."""
    small, _ = generate_dataset(SynthSpec.domain_b(n_records=spec.n_target, seed=1000 + seed))
    test, _ = generate_dataset(SynthSpec.domain_b(n_records=spec.n_target_test, seed=2000 + seed))
    tri, vai = tr.stratified_split(small, 0.2, seed=seed)
    train_set, val_set = small.take(tri), small.take(vai)
    cfg = replace(spec.target_cfg, seed=seed)

    t0 = time.perf_counter()
    tuned, h_tuned = tr.finetune(pretrained, train_set, val_set, spec.k_frozen, cfg.lr, cfg)
    r_tuned = evaluate(tuned, test.x, test.y, 0.5, test.ids)
    t1 = time.perf_counter()
    scratch, h_scratch = tr.train_from_scratch(train_set, val_set, cfg)
    r_scratch = evaluate(scratch, test.x, test.y, 0.5, test.ids)
    t2 = time.perf_counter()
    return (RunResult(r_tuned.metrics.gmean, r_tuned.metrics, r_tuned.confusion, h_tuned, t1 - t0,
                      {"model": tuned}),
            RunResult(r_scratch.metrics.gmean, r_scratch.metrics, r_scratch.confusion, h_scratch, t2 - t1))


def transfer(seeds=(0, 1, 2), spec=TransferSpec(), on_epoch=None):
    """Pretrain once, then run ``transfer_trial`` per seed."""
    pretrained, hist = pretrain_domain_a(spec, on_epoch)
    trials = []
    for s in seeds:
        tuned, scratch = transfer_trial(pretrained, s, spec)
        log.info("seed %d: finetuned %.4f vs scratch %.4f", s, tuned.gmean, scratch.gmean)
        trials.append((s, tuned, scratch))
    return pretrained, hist, trials
