"""Command-line entry point: ``deconfrec <subcommand> [options]``.

Every subcommand reads an optional JSON config (``--config``), applies flag
overrides on top, and writes its artifacts under ``--out`` (default
``$DECONFREC_OUT`` or ``./runs``).  Artifacts embed the resolved config hash
and seed; reruns with identical config reproduce them byte for byte (logs
aside, which carry wall times).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataio, experiment, mcdcf, numkit, synth
from .errors import CheckpointError, ConfigError, DeconfrecError
from .evaluation import emit_curves, evaluate_rankings, iou_at_k
from .mcdcf import ModelConfig
from .plotting import plot_curves

log = logging.getLogger("deconfrec")

OUT_ENV = "DECONFREC_OUT"


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    columns: dict = field(default_factory=lambda: {"user": "user_id", "item": "item_id", "rating": "rating",
                                                   "timestamp": None, "delimiter": ",", "scale": [1.0, 5.0]})
    strict: bool = True
    threshold: float = 5.0
    kcore: int = 10
    split_seed: int = 0
    synth: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    method: str = "mcdcf"
    baseline_margin: float | None = None
    clip_max: float | None = None
    ks: list = field(default_factory=lambda: [20, 50])
    fractions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    intervention_fixed_epochs: bool = False
    out_dir: str | None = None

    def model_config(self) -> ModelConfig:
        known = {f.name for f in fields(ModelConfig)}
        bad = set(self.model) - known
        if bad:
            raise ConfigError(f"unknown model options: {sorted(bad)}")
        return ModelConfig(**self.model)

    def synth_config(self) -> synth.SynthConfig:
        known = {f.name for f in fields(synth.SynthConfig)}
        bad = set(self.synth) - known
        if bad:
            raise ConfigError(f"unknown synth options: {sorted(bad)}")
        return synth.SynthConfig(**self.synth)

    def column_spec(self) -> dataio.ColumnSpec:
        c = dict(self.columns)
        c["scale"] = tuple(c.get("scale", (1.0, 5.0)))
        return dataio.ColumnSpec(**c)

    def resolved(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        if self.dataset and Path(self.dataset).is_file():
            # content, not location, identifies the input
            d["dataset"] = numkit.stable_hash(Path(self.dataset).read_bytes())
        d["model"] = asdict(self.model_config())
        return d

    def hash(self) -> str:
        return numkit.stable_hash(self.resolved())

    def out(self) -> Path:
        p = Path(self.out_dir or os.environ.get(OUT_ENV) or "runs")
        p.mkdir(parents=True, exist_ok=True)
        return p

    def validate(self):
        if self.method not in experiment.METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {experiment.METHODS}")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be positive integers")
        self.model_config().check()


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        known = {f.name for f in fields(ExperimentConfig)}
        if set(raw) - known:
            raise ConfigError(f"unknown config keys: {sorted(set(raw) - known)}")
        cfg = replace(cfg, **raw)
    model, syn = dict(cfg.model), dict(cfg.synth)
    for key, value in (getattr(args, "set", None) or []):
        section, _, name = key.partition(".")
        if section == "model" and name:
            model[name] = value
        elif section == "synth" and name:
            syn[name] = value
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown override {key!r}")
    flag_map = {"dataset": "dataset", "method": "method", "out": "out_dir", "threshold": "threshold",
                "kcore": "kcore", "split_seed": "split_seed", "baseline_margin": "baseline_margin"}
    for flag, attr in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, attr, v)
    if getattr(args, "lenient", False):
        cfg.strict = False
    if getattr(args, "ks", None):
        cfg.ks = args.ks
    if getattr(args, "fixed_epochs", False):
        cfg.intervention_fixed_epochs = True
    if getattr(args, "fractions", None):
        cfg.fractions = args.fractions
    for name in ("seed", "epochs", "dim", "alpha", "beta", "lr", "batch_size", "patience", "n_ctx", "margin"):
        v = getattr(args, name, None)
        if v is None:
            continue
        if name == "margin":
            try:
                v = None if v == "none" else float(v)
            except ValueError:
                raise ConfigError(f"--margin expects a number or 'none', got {v!r}") from None
        model[name] = v
    if getattr(args, "command", None) == "synth" and getattr(args, "seed", None) is not None:
        syn["rng_seed"] = args.seed
    cfg.model, cfg.synth = model, syn
    cfg.validate()
    return cfg


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.model_config().seed, **extra}


def _print_stats(title: str, st: dict):
    print(f"{title}")
    print(f"  {'users':<14}{st['users']:>10,}")
    print(f"  {'items':<14}{st['items']:>10,}")
    print(f"  {'interactions':<14}{st['interactions']:>10,}")
    for k in dataio.SPLIT_NAMES:
        print(f"    {k:<12}{st[k]:>10,}")


# -- subcommands -----------------------------------------------------------------

def cmd_preprocess(cfg: ExperimentConfig, output=None) -> Path:
    if not cfg.dataset:
        raise ConfigError("preprocess needs --dataset pointing at a raw rating file")
    loaded = dataio.load_ratings(cfg.dataset, cfg.column_spec(), strict=cfg.strict)
    pairs = dataio.binarize(loaded.records, cfg.threshold)
    ds = dataio.kcore_filter(pairs, cfg.kcore)
    ds = dataio.split_biased_unbiased(ds, dataio.SplitConfig(rng_seed=cfg.split_seed))
    out = Path(output) if output else cfg.out() / "dataset.ds"
    dataio.write_dataset(out, ds, _meta(cfg, split_seed=cfg.split_seed, skipped_rows=loaded.skipped))
    dataio.write_keys(out.with_suffix(".keys"), ds)
    _print_stats(f"{Path(cfg.dataset).name} -> {out}", dataio.stats(ds))
    return out


def cmd_synth(cfg: ExperimentConfig, output=None) -> Path:
    scfg = cfg.synth_config()
    ds, truth = synth.generate(scfg)
    out = Path(output) if output else cfg.out() / "dataset.ds"
    dataio.write_dataset(out, ds, _meta(cfg, synth=asdict(scfg)))
    synth.write_ground_truth(out.with_suffix(".gt"), truth, scfg)
    _print_stats(f"synthetic (seed {scfg.rng_seed}) -> {out}", dataio.stats(ds))
    return out


def _dataset(cfg: ExperimentConfig) -> dataio.InteractionDataset:
    if not cfg.dataset:
        raise ConfigError("--dataset (a DECONFREC-DS file) is required")
    return dataio.read_dataset(cfg.dataset)


def _train_one(cfg: ExperimentConfig, ds, method: str, out: Path, model_cfg: ModelConfig | None = None):
    model_cfg = model_cfg or cfg.model_config()
    records = []
    res = experiment.run_method(ds, model_cfg, method, cfg.baseline_margin, cfg.clip_max, log_fn=records.append)
    meta = _meta(cfg, method=method, split_hash=ds.split_hash(), model=asdict(res.cfg),
                 num_users=ds.num_users, num_items=ds.num_items, best_epoch=res.best_epoch)
    ckpt = out / f"{method}.ckpt"
    numkit.save_checkpoint(ckpt, res.params, meta)
    header = {"config_hash": meta["config_hash"], "seed": meta["seed"], "method": method,
              "split_hash": meta["split_hash"]}
    with open(out / f"{method}.log.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(mcdcf.log_lines(records))
    return ckpt, res


def cmd_train(cfg: ExperimentConfig) -> Path:
    ds = _dataset(cfg)
    ckpt, res = _train_one(cfg, ds, cfg.method, cfg.out())
    print(f"{cfg.method}: best epoch {res.best_epoch}, val recall@{res.cfg.eval_k} {res.best_val:.4f} -> {ckpt}")
    return ckpt


def _load_model(path, ds):
    arrays, meta = numkit.load_checkpoint(path)
    if arrays["user_emb"].shape[0] != ds.num_users or arrays["item_emb"].shape[0] != ds.num_items:
        raise CheckpointError(f"checkpoint {path} covers {arrays['user_emb'].shape[0]} users / "
                              f"{arrays['item_emb'].shape[0]} items but the dataset has "
                              f"{ds.num_users} / {ds.num_items}")
    return arrays, ModelConfig(**meta["model"]), meta


def cmd_evaluate(cfg: ExperimentConfig, checkpoint) -> dict:
    ds = _dataset(cfg)
    arrays, mcfg, meta = _load_model(checkpoint, ds)
    method = meta.get("method", cfg.method)
    ks = sorted(set(int(k) for k in cfg.ks))
    max_k = max(ks)
    top, truth, pop = experiment.rank_users(ds, arrays, mcfg, max_k)
    report = evaluate_rankings(top, truth, pop, ks, _meta(cfg, method=method, dataset=Path(cfg.dataset).name,
                                                          checkpoint_hash=meta.get("config_hash")))
    out = cfg.out()
    stem = out / f"{method}.metrics"
    header = f"# config_hash={report.meta['config_hash']} seed={report.meta['seed']}\n"
    Path(f"{stem}.tsv").write_text(header + emit_curves([report]), encoding="utf-8")
    Path(f"{stem}.jsonl").write_text(report.to_json() + "\n", encoding="utf-8")
    curve = [{"method": method, "x_name": "K", "x": k, "metric": "iou", "value": iou_at_k(top, pop, k)}
             for k in range(1, max_k + 1)]
    Path(out / f"{method}.iou_curve.tsv").write_text(header + emit_curves(curve), encoding="utf-8")
    plot_curves(curve, out / f"{method}.iou_curve.png")
    for k in ks:
        m = report.metrics[k]
        print(f"{method} @{k}: recall {m['recall']:.4f}  hr {m['hr']:.4f}  ndcg {m['ndcg']:.4f}  iou {m['iou']:.4f}")
    return report.metrics


def cmd_ablate(cfg: ExperimentConfig) -> Path:
    ds = _dataset(cfg)
    out = cfg.out()
    rows = []
    for method in ("mf", "mcdcf_u", "mcdcf_i", "mcdcf"):
        ckpt, res = _train_one(cfg, ds, method, out)
        report = experiment.evaluate(ds, res.params.arrays(), res.cfg, cfg.ks, meta={"method": method})
        rows.extend(report.to_rows(method))
    path = out / "ablation.tsv"
    path.write_text(f"# config_hash={cfg.hash()} seed={cfg.model_config().seed}\n" + emit_curves(rows),
                    encoding="utf-8")
    plot_curves(rows, out / "ablation.png", metrics=["recall", "ndcg", "iou"])
    print(emit_curves(rows), end="")
    return path


def cmd_intervene(cfg: ExperimentConfig) -> Path:
    ds = _dataset(cfg)
    out = cfg.out()
    mcfg = cfg.model_config()
    rows = intervention_rows(ds, mcfg, cfg.fractions, cfg.ks, cfg.baseline_margin,
                             fixed_epochs=cfg.intervention_fixed_epochs)
    path = out / "intervention.tsv"
    path.write_text(f"# config_hash={cfg.hash()} seed={mcfg.seed}\n" + emit_curves(rows), encoding="utf-8")
    plot_curves(rows, out / "intervention.png", metrics=["recall", "iou"])
    print(emit_curves(rows), end="")
    return path


def intervention_rows(ds, mcfg: ModelConfig, fractions, ks=(50,), baseline_margin=None,
                      methods=("mf", "mcdcf"), k=None, fixed_epochs=False):
    """``(fraction, method, recall, iou)`` rows at cutoff ``k`` (default max(ks)).

    By default each fraction trains exactly like ``train`` on the mixed data,
    early-stopping on whatever reserve rows remain.  ``fixed_epochs`` instead
    drops the remaining reserve and trains for the full epoch budget, so every
    fraction (including 1.0, which leaves no validation rows) is treated alike.
    """
    k = k or max(ks)
    rows = []
    for f in fractions:
        mixed = dataio.intervention_mix(ds, f, rng_seed=mcfg.seed)
        train_ds = mixed
        if fixed_epochs:
            split = np.where(mixed.split == dataio.VALIDATION, -1, mixed.split).astype(np.int8)
            train_ds = replace(mixed, split=split)
        for method in methods:
            res = experiment.run_method(train_ds, mcfg, method, baseline_margin)
            rep = experiment.evaluate(mixed, res.params.arrays(), res.cfg, (k,))
            for metric in ("recall", "iou"):
                rows.append({"method": method, "x_name": "fraction", "x": float(f), "metric": metric,
                             "value": rep.metrics[k][metric]})
    return rows


def cmd_gradcheck(cfg: ExperimentConfig, n_users=5, n_items=8, dim=4, h=1e-5, tol=1e-4) -> numkit.GradCheckReport:
    report = gradcheck_fixture(n_users, n_items, dim, h, tol, seed=cfg.model_config().seed)
    print(f"gradient check: max relative error {report.max_rel_error:.3e} at {report.worst[0]}[{report.worst[1]}] "
          f"over {report.n_checked} entries (tol {tol:g}) -> {'PASS' if report.passed else 'FAIL'}")
    return report


def gradcheck_fixture(n_users=5, n_items=8, dim=4, h=1e-5, tol=1e-4, seed=0, ctx=3, batch=6,
                      model_kw=None) -> numkit.GradCheckReport:
    """Finite-difference check of the total loss on a tiny fixture with frozen noise."""
    rng = np.random.default_rng(seed)
    mcfg = ModelConfig(dim=dim, n_ctx=ctx, seed=seed, init_scale=0.5, **(model_kw or {}))
    params = mcdcf.init_params(n_users, n_items, mcfg)
    users = rng.integers(0, n_users, batch)
    pos = rng.integers(0, n_items, batch)
    neg = (pos + 1 + rng.integers(0, n_items - 1, batch)) % n_items
    umask = np.ones((batch, ctx))
    imask = np.ones((batch, ctx))
    umask[0, 1:] = 0
    imask[-1, 2:] = 0
    b = mcdcf.Batch(users, pos, neg, rng.integers(0, n_items, (batch, ctx)), umask,
                    rng.integers(0, n_users, (batch, ctx)), imask)
    eps = {s: rng.standard_normal((batch, dim)) for s in mcdcf.SIDES}

    def fn(ps):
        loss, _, grads = mcdcf.batch_objective(ps.arrays(), mcfg, b, eps)
        return loss, grads

    return numkit.gradient_check(fn, params, h=h, tol=tol)


# -- argument parsing ------------------------------------------------------------

def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = text.split("=", 1)
    return k.strip(), _coerce(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deconfrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        sp.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE",
                        help="override a config key; model.<name> / synth.<name> for nested options")
        sp.add_argument("--seed", type=int)
        return sp

    def model_flags(sp):
        sp.add_argument("--dataset", help="DECONFREC-DS file")
        sp.add_argument("--method", choices=experiment.METHODS)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--dim", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--n-ctx", dest="n_ctx", type=int)
        sp.add_argument("--margin", help="PNSM margin for MCDCF, or 'none' for uniform negatives")
        sp.add_argument("--baseline-margin", dest="baseline_margin", type=float)
        sp.add_argument("--ks", type=int, nargs="+")
        return sp

    sp = common(sub.add_parser("preprocess", help="raw ratings -> binarized, k-core filtered, split dataset"))
    sp.add_argument("--dataset", required=False, help="raw delimited rating file")
    sp.add_argument("--output")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--kcore", type=int)
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")

    sp = common(sub.add_parser("synth", help="generate a synthetic dataset with ground-truth confounders"))
    sp.add_argument("--output")

    model_flags(common(sub.add_parser("train", help="train one method")))
    sp = model_flags(common(sub.add_parser("evaluate", help="rank test users and write metric tables")))
    sp.add_argument("--checkpoint", required=True)
    model_flags(common(sub.add_parser("ablate", help="MF vs MCDCF-U vs MCDCF-I vs MCDCF")))
    sp = model_flags(common(sub.add_parser("intervene", help="inject unbiased data into train and re-evaluate")))
    sp.add_argument("--fractions", type=float, nargs="+")
    sp.add_argument("--fixed-epochs", dest="fixed_epochs", action="store_true",
                    help="train every fraction for the full epoch budget without early stopping")
    sp = common(sub.add_parser("gradcheck", help="finite-difference check of the training objective"))
    sp.add_argument("--tol", type=float, default=1e-4)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "preprocess":
            cmd_preprocess(cfg, args.output)
        elif args.command == "synth":
            cmd_synth(cfg, args.output)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "intervene":
            cmd_intervene(cfg)
        elif args.command == "gradcheck":
            if not cmd_gradcheck(cfg, tol=args.tol).passed:
                return 5
    except DeconfrecError as e:
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error [IOError]: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
