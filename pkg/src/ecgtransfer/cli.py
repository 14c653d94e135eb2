"""``ecgtransfer`` command line.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 numeric abort.
Machine-readable outputs go to files; human summaries go to stderr.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import densenet as dn
from . import evaluation as ev
from . import training as tr
from .config import RunConfig, describe_schema
from .dataset import TARGETS, build_manifest, read_manifest, split_by_fold, write_manifest
from .errors import ConfigError, EcgError, MissingKey
from .preprocess import PreprocessedSample, read_cache, run_many, write_cache
from .prng import Prng
from .synth import SynthSpec, write_corpus
from .wfdb import read_record

log = logging.getLogger("ecgtransfer")

EXIT_USAGE = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg):
    print(msg, file=sys.stderr, flush=True)


def _header(cmd, **fields):
    _say(f"# ecgtransfer {cmd} " + " ".join(f"{k}={v}" for k, v in fields.items()))


# ---------------------------------------------------------------------------
# argument resolution helpers

def _load_config(args):
    _check_inputs(args.config)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or ():
        cfg.apply_override(item)
    return cfg


def _pick(args, name, cfg, section, key, default=None, required=False):
    """Command-line flag beats config file beats default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    if required and cfg.get(section, key) is None and default is None:
        raise MissingKey(f"missing config key [{section}] {key} (or pass --{name.replace('_', '-')})")
    return cfg.get(section, key, default)


def _check_inputs(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"input path does not exist: {p}")


def _check_outputs(*paths):
    for p in paths:
        if p is None:
            continue
        d = os.path.dirname(os.path.abspath(p))
        if not os.path.isdir(d):
            raise ConfigError(f"output directory does not exist: {d}")


def _target(args, cfg):
    t = _pick(args, "target", cfg, "dataset", "target", required=True)
    if t not in TARGETS:
        raise ConfigError(f"unknown target {t!r}; choose one of {', '.join(TARGETS)}")
    return t


def _train_config(args, cfg):
    tc = cfg.training()
    over = {}
    for flag, fieldname in (("lr", "lr"), ("epochs", "max_epochs"), ("batch_size", "batch_size"),
                            ("seed", "seed"), ("factor", "plateau_factor")):
        v = getattr(args, flag, None)
        if v is not None:
            over[fieldname] = v
    return replace(tc, **over)


def _dataset(cache, target, ids=None):
    if ids is None:
        idx = np.arange(len(cache))
    else:
        pos = {rid: i for i, rid in enumerate(cache.ids)}
        missing = [r for r in ids if r not in pos]
        if missing:
            log.warning("%d manifest records are absent from the cache (e.g. %s)", len(missing), missing[0])
        idx = np.array([pos[r] for r in ids if r in pos], dtype=np.int64)
    sub = cache.take(idx)
    return tr.ArrayDataset(sub.x, sub.target(target), sub.ids)


def _splits(args, cfg, cache, target, seed):
    """(train, val) datasets from the manifest's split column, else a seeded stratified 80/20."""
    manifest_path = _pick(args, "manifest", cfg, "dataset", "manifest")
    if manifest_path:
        _check_inputs(manifest_path)
        m = read_manifest(manifest_path)
        train = _dataset(cache, target, [r.record_id for r in m.subset("train")])
        val = _dataset(cache, target, [r.record_id for r in m.subset("val")])
        return train, val
    full = _dataset(cache, target)
    a, b = tr.stratified_split(full, 0.2, seed=seed)
    return full.take(a), full.take(b)


def _print_epoch(rec):
    _say(f"epoch {rec.epoch:3d}  train {rec.train_loss:.5f}  val {rec.val_loss:.5f}  lr {rec.lr:.6g}  "
         f"{rec.seconds:.1f}s")


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args, cfg):
    meta = _pick(args, "metadata", cfg, "dataset", "metadata", required=True)
    records = _pick(args, "records", cfg, "dataset", "records_dir", required=True)
    _check_inputs(meta, records)
    _check_outputs(args.out)
    m = build_manifest(meta, records)
    write_manifest(m, args.out)
    reasons = {}
    for r in m.rejections:
        reasons[r.reason] = reasons.get(r.reason, 0) + 1
    _say(f"ingest: kept {len(m)} records, rejected {len(m.rejections)} "
         + " ".join(f"{k}={v}" for k, v in sorted(reasons.items())))
    return 0


def cmd_split(args, cfg):
    _check_inputs(args.manifest)
    _check_outputs(args.out)
    test_fold = args.test_fold if args.test_fold is not None else cfg.get("dataset", "test_fold", 10)
    val_fold = args.val_fold if args.val_fold is not None else cfg.get("dataset", "val_fold", 9)
    m = split_by_fold(read_manifest(args.manifest), test_fold, val_fold)
    write_manifest(m, args.out)
    c = m.counts()
    _say(f"split: train={c['train']} val={c['val']} test={c['test']} (test fold {test_fold}, val fold {val_fold})")
    return 0


def cmd_preprocess(args, cfg):
    records = _pick(args, "records", cfg, "dataset", "records_dir", required=True)
    _check_inputs(args.manifest, records)
    _check_outputs(args.out)
    pipe = cfg.pipeline()
    m = read_manifest(args.manifest)
    items = [(read_record(os.path.join(records, r.path), r.record_id), r.labels) for r in m.rows]
    results = run_many(items, pipe, threads=args.threads)
    kept = [s for s in results if isinstance(s, PreprocessedSample)]
    tally = {}
    for s in results:
        if not isinstance(s, PreprocessedSample):
            tally[s.reason] = tally.get(s.reason, 0) + 1
            log.info("rejected %s: %s", s.record_id, s.reason)
    write_cache(kept, args.out)
    _say(f"preprocess: accepted {len(kept)}, rejected {len(results) - len(kept)} "
         + " ".join(f"{k}={v}" for k, v in sorted(tally.items())))
    return 0


def cmd_train(args, cfg):
    cache_path = _pick(args, "cache", cfg, "dataset", "cache", required=True)
    target = _target(args, cfg)
    _check_inputs(cache_path)
    _check_outputs(args.out, args.log)
    tc = _train_config(args, cfg)
    mc = cfg.model()
    if args.preset:
        mc = dn.DenseNetConfig.from_preset(args.preset)
    _header("train", seed=tc.seed, target=target, preset=mc.preset, lr=tc.lr, batch_size=tc.batch_size,
            max_epochs=tc.max_epochs)
    cache = read_cache(cache_path)
    train_set, val_set = _splits(args, cfg, cache, target, tc.seed)
    del cache
    _say(f"train: {len(train_set)} train / {len(val_set)} val records, "
         f"{int(train_set.y.sum())} positive in train")
    model = dn.build(mc)
    dn.init_params(model, Prng(tc.seed).spawn(0x1417))
    best, hist = tr.train(model, train_set, val_set, tc, log_path=args.log, on_epoch=_print_epoch)
    dn.save_checkpoint(best, args.out)
    _say(f"train: best epoch {hist.best_epoch}, val loss {min(hist.val_losses):.5f}, stop: {hist.stop_reason}")
    return 0


def cmd_finetune(args, cfg):
    cache_path = _pick(args, "cache", cfg, "dataset", "cache", required=True)
    target = _target(args, cfg)
    _check_inputs(args.checkpoint, cache_path)
    _check_outputs(args.out, args.log)
    tc = _train_config(args, cfg)
    _header("finetune", seed=tc.seed, target=target, frozen=args.frozen, lr=tc.lr, batch_size=tc.batch_size,
            max_epochs=tc.max_epochs)
    pretrained = dn.load_checkpoint(args.checkpoint)
    cache = read_cache(cache_path)
    train_set, val_set = _splits(args, cfg, cache, target, tc.seed)
    del cache
    best, hist = tr.finetune(pretrained, train_set, val_set, args.frozen, tc.lr, tc, log_path=args.log)
    for rec in hist.epochs:
        _print_epoch(rec)
    dn.save_checkpoint(best, args.out)
    _say(f"finetune: trainable units {', '.join(best.trainable_units())}; best epoch {hist.best_epoch}")
    return 0


def cmd_gridsearch(args, cfg):
    cache_path = _pick(args, "cache", cfg, "dataset", "cache", required=True)
    target = _target(args, cfg)
    grid = cfg.grid()
    protocol = cfg.get("grid", "protocol", "cv")
    pretrained_path = args.pretrained or cfg.get("grid", "pretrained")
    _check_inputs(cache_path, pretrained_path)
    _check_outputs(args.report)
    tc = _train_config(args, cfg)
    _header("gridsearch", seed=tc.seed, target=target, protocol=protocol, cells=len(grid.cells()),
            repeats=grid.repeats)
    cache = read_cache(cache_path)
    train_set, _ = _splits(args, cfg, cache, target, tc.seed) if _pick(args, "manifest", cfg, "dataset", "manifest") \
        else (_dataset(cache, target), None)
    del cache
    pretrained = dn.load_checkpoint(pretrained_path) if pretrained_path else None
    runner = tr.make_cell_runner(train_set, tc, protocol=protocol, k=cfg.get("grid", "k", 5),
                                 pretrained=pretrained, model_config=cfg.model())
    ranked = tr.grid_search(grid, runner, seed=tc.seed, report_path=args.report,
                            workers=cfg.get("grid", "workers", 1))
    for c in ranked:
        status = "failed" if c.failed else f"{c.mean:.4f} +- {c.std:.4f}"
        _say(f"gridsearch: {c.params} -> {status}")
    return 0


def cmd_subsample(args, cfg):
    target = _target(args, cfg)
    _check_inputs(args.manifest)
    _check_outputs(args.out)
    _header("subsample", seed=args.seed, target=target)
    m = read_manifest(args.manifest)
    half = tr.stratified_halve(m, target, seed=args.seed)
    write_manifest(half, args.out)
    npos = sum(target in r.labels for r in m.rows)
    hpos = sum(target in r.labels for r in half.rows)
    _say(f"subsample: {len(m)} -> {len(half)} rows, {target} positives {npos} -> {hpos}")
    return 0


def _resolve_threshold(args, cfg, model, val_getter):
    raw = args.threshold if args.threshold is not None else cfg.get("evaluation", "threshold", "0.5")
    if str(raw) == "auto":
        val = val_getter()
        if val is None or len(val) == 0:
            raise ConfigError("threshold 'auto' needs a manifest with a val split")
        t = ev.best_threshold(ev.predict_scores(model, val.x), val.y)
        _say(f"evaluate: G-mean-best threshold on {len(val)} val records = {t:.6g}")
        return t
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"threshold must be a number or 'auto', got {raw!r}") from None


def cmd_evaluate(args, cfg):
    cache_path = _pick(args, "cache", cfg, "dataset", "cache", required=True)
    target = _target(args, cfg)
    manifest_path = _pick(args, "manifest", cfg, "dataset", "manifest")
    _check_inputs(args.checkpoint, cache_path, manifest_path)
    _check_outputs(args.out, args.scores)
    model = dn.load_checkpoint(args.checkpoint)
    cache = read_cache(cache_path)
    manifest = read_manifest(manifest_path) if manifest_path else None
    if manifest is not None:
        data = _dataset(cache, target, [r.record_id for r in manifest.subset(args.split)])
    else:
        data = _dataset(cache, target)

    def val_getter():
        if manifest is None:
            return None
        return _dataset(cache, target, [r.record_id for r in manifest.subset("val")])

    threshold = _resolve_threshold(args, cfg, model, val_getter)
    _header("evaluate", seed=model.seed, target=target, threshold=threshold, records=len(data))
    res = ev.evaluate(model, data.x, data.y, threshold, data.ids)
    ev.write_metrics(args.out, [(target, res.metrics, res.confusion)])
    if args.scores:
        ev.write_scores(args.scores, res.ids, res.scores, res.labels)
    m, cm = res.metrics, res.confusion
    _say(f"evaluate: sens {m.sensitivity:.4f} spec {m.specificity:.4f} G-mean {m.gmean:.4f} F2 {m.f2:.4f} "
         f"(tp {cm.tp} fp {cm.fp} fn {cm.fn} tn {cm.tn})")
    return 0


def cmd_curve(args, cfg):
    _check_inputs(args.scores)
    _check_outputs(args.out)
    n_points = args.points if args.points is not None else cfg.get("evaluation", "n_points", 200)
    _, scores, labels = ev.read_scores(args.scores)
    pts = ev.sweep(scores, labels, n_points)
    ev.write_curve(args.out, pts)
    _say(f"curve: {len(pts)} points; G-mean-best threshold {ev.best_threshold(scores, labels, n_points):.6g}")
    return 0


def cmd_compare(args, cfg):
    _check_inputs(args.annotations, args.truth)
    _check_outputs(args.out)
    results = ev.compare_annotations(args.annotations, args.truth)
    rows = [(t, m, cm) for t, (m, cm) in sorted(results.items(), key=lambda kv: TARGETS.index(kv[0])
                                                 if kv[0] in TARGETS else len(TARGETS))]
    ev.write_metrics(args.out, rows)
    for t, m, cm in rows:
        _say(f"compare {t}: sens {m.sensitivity:.3f} spec {m.specificity:.3f} G-mean {m.gmean:.3f} F2 {m.f2:.3f}")
    return 0


def cmd_synth(args, cfg):
    base = SynthSpec.domain_b() if args.domain == "B" else SynthSpec()
    spec = cfg.synth(base)
    over = {}
    if args.records is not None:
        over["n_records"] = args.records
    if args.seed is not None:
        over["seed"] = args.seed
    if args.frac_invalid is not None:
        over["frac_invalid"] = args.frac_invalid
    spec = replace(spec, **over)
    _check_outputs(args.out)
    _header("synth", seed=spec.seed, domain=spec.domain, records=spec.n_records)
    write_corpus(spec, args.out)
    _say(f"synth: wrote {spec.n_records} records and metadata.csv to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration file (INI style key = value)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    common.add_argument("--threads", type=int, default=1, help="worker threads for parallel stages")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="ecgtransfer", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="configuration keys:\n" + describe_schema())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        return sp

    def target_opt(sp):
        sp.add_argument("--target", choices=TARGETS, help="abnormality to classify")

    def train_opts(sp):
        sp.add_argument("--lr", type=float, help="initial learning rate")
        sp.add_argument("--factor", type=float, help="plateau reduction factor")
        sp.add_argument("--epochs", type=int, help="maximum number of epochs")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int)

    sp = add("ingest", cmd_ingest, "build a filtered manifest from metadata and WFDB headers")
    sp.add_argument("--metadata", help="PTB-XL style metadata csv")
    sp.add_argument("--records", help="directory the metadata filenames are relative to")
    sp.add_argument("--out", required=True, help="manifest csv to write")

    sp = add("preprocess", cmd_preprocess, "resample, pad and normalise manifest records into an ECGP cache")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--records", help="directory the manifest paths are relative to")
    sp.add_argument("--out", required=True, help="ECGP cache to write")

    sp = add("split", cmd_split, "assign train/val/test splits from the stratification folds")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--test-fold", type=int)
    sp.add_argument("--val-fold", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a classifier from scratch")
    sp.add_argument("--cache")
    sp.add_argument("--manifest", help="manifest whose split column selects train/val rows")
    target_opt(sp)
    train_opts(sp)
    sp.add_argument("--preset", choices=["desk_scale", "paper_default"])
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.add_argument("--log", help="per-epoch training log csv")

    sp = add("finetune", cmd_finetune, "freeze a prefix of a pretrained model and train the rest")
    sp.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    sp.add_argument("--cache")
    sp.add_argument("--manifest")
    target_opt(sp)
    sp.add_argument("--frozen", type=int, default=7, help="number of leading units to freeze (0-9)")
    train_opts(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")

    sp = add("gridsearch", cmd_gridsearch, "repeated grid search over learning rate, factor and frozen units")
    sp.add_argument("--cache")
    sp.add_argument("--manifest")
    target_opt(sp)
    train_opts(sp)
    sp.add_argument("--pretrained", help="checkpoint for cells with a frozen count")
    sp.add_argument("--report", required=True, help="per-run report csv")

    sp = add("subsample", cmd_subsample, "halve a manifest preserving label prevalence")
    sp.add_argument("--manifest", required=True)
    target_opt(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score a checkpoint and write metrics plus per-record scores")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--manifest")
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    target_opt(sp)
    sp.add_argument("--threshold", help="decision threshold, or 'auto' for the G-mean-best on val")
    sp.add_argument("--out", required=True, help="metrics csv")
    sp.add_argument("--scores", help="per-record score dump csv")

    sp = add("curve", cmd_curve, "sensitivity/specificity sweep from a score dump")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--points", type=int)
    sp.add_argument("--out", required=True)

    sp = add("compare", cmd_compare, "score an annotator's labels against reference labels")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "write a seeded synthetic WFDB corpus")
    sp.add_argument("--domain", choices=["A", "B"], default="A")
    sp.add_argument("--records", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--frac-invalid", type=float)
    sp.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except EcgError as exc:
        _say(f"ecgtransfer {args.command}: {type(exc).__name__}: {exc}")
        return exc.exit_code
    except FileNotFoundError as exc:
        _say(f"ecgtransfer {args.command}: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
