"""Command-line experiment runner.

Option precedence, lowest to highest: built-in defaults, the ``--config``
file (flat ``key = value`` lines, ``#`` comments), then command-line flags.
Keys in the file use the flag names with dashes or underscores.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import attack as atk
from .clustering import (TrainerConfig, kmeans_baseline, load_cluster_model, predict_labels,
                         save_cluster_model, train_toy_clusterer)
from .data import resolve_dataset, train_test_split
from .defense import (adversarial_retrain, calibrate_threshold, fit_detector, injection_experiment,
                      pca_overlap, write_pca_csv)
from .errors import ClusterBreakError, ConfigValidationError
from .metrics import largest_cluster_share, write_confusion_csv
from .reporting import (REPORT_SCHEMA_VERSION, WALL_CLOCK_FIELD, delta_stats, render_tables,
                        sha256_file, write_report)
from .transfer import surrogate_resampling, transfer_matrix

log = logging.getLogger("clusterbreak")

OUT_ENV = "CLUSTERBREAK_OUT"

VERBS = {
    "train-clusterer": "train",
    "attack": "attack",
    "sweep-epsilon": "sweep",
    "transfer": "transfer",
    "defend": "defend",
    "serve-mlaas": "serve",
    "attack-mlaas": "attack-mlaas",
    "report": "report",
}


def _int_or_none(text):
    return None if str(text).lower() in ("", "none") else int(text)


def _float_or_none(text):
    return None if str(text).lower() in ("", "none") else float(text)


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_DATA = ("train-clusterer", "attack", "sweep-epsilon", "transfer", "defend", "serve-mlaas",
         "attack-mlaas")
_ATTACK = ("attack", "sweep-epsilon", "transfer", "defend", "attack-mlaas")

# name -> (type, default, help, verbs)
OPTIONS: dict[str, tuple] = {
    "out": (str, None, f"output directory (default ${OUT_ENV}/<kind> or ./runs/<kind>)", tuple(VERBS)),
    "seed": (int, 0, "master seed for models, attacks and trials", tuple(VERBS)),
    "dataset": (str, "synthetic", "synthetic | folder:<path> | file:<path>", _DATA),
    "data_seed": (int, 0, "seed for synthetic data and the train/test split", _DATA),
    "image_size": (int, 16, "square side length for folder datasets", _DATA),
    "n_per_class": (int, 400, "synthetic images per class", _DATA),
    "k_true": (int, 4, "synthetic class count", _DATA),
    "class_separation": (float, 5.0, "synthetic template distance in noise units", _DATA),
    "noise": (float, 0.2, "synthetic pixel noise half-width", _DATA),
    "illumination": (float, 0.1, "synthetic illumination nuisance amplitude", _DATA),
    "test_fraction": (float, 0.25, "held-out fraction", _DATA),
    "k": (_int_or_none, None, "cluster count (default: dataset class count)", _DATA),
    "model_id": (str, None, "model id used in reports", ("train-clusterer",)),
    "pretrain_epochs": (int, 30, "autoencoder epochs", ("train-clusterer", "serve-mlaas", "attack-mlaas")),
    "refine_epochs": (int, 10, "self-training epochs", ("train-clusterer", "serve-mlaas", "attack-mlaas")),
    "embed_dim": (int, 16, "embedding size", ("train-clusterer", "serve-mlaas", "attack-mlaas")),
    "victim": (str, None, "victim (or surrogate) checkpoint", ("attack", "sweep-epsilon", "defend", "attack-mlaas")),
    "generator": (str, None, "trained generator checkpoint", ("defend", "attack-mlaas")),
    "victims": (_str_list, None, "comma-separated victim checkpoints", ("transfer",)),
    "generators": (_str_list, None, "comma-separated generators, one per victim", ("transfer",)),
    "epsilon": (float, 0.5, "perturbation norm budget", _ATTACK),
    "alpha_a": (float, 20.0, "attack loss weight", _ATTACK),
    "alpha_c": (float, 100.0, "norm constraint weight", _ATTACK),
    "batch_size": (int, 64, "attack batch size", _ATTACK),
    "max_batches": (int, 600, "attack batch cap", _ATTACK),
    "min_batches": (int, 200, "batches before convergence may stop training", _ATTACK),
    "lr_g": (float, 2e-4, "generator learning rate", _ATTACK),
    "lr_d": (float, 2e-4, "discriminator learning rate", _ATTACK),
    "window": (int, 20, "convergence moving-average window", _ATTACK),
    "tau": (float, 1e-3, "convergence relative tolerance", _ATTACK),
    "target": (_int_or_none, None, "target cluster for a targeted attack", ("attack",)),
    "cache_clean": (_bool, True, "cache clean memberships across epochs", _ATTACK),
    "epsilons": (_float_list, [0.1, 0.2, 0.5, 1.0], "comma-separated ascending budgets", ("sweep-epsilon",)),
    "mode": (str, "all", "defend stage: all | anomaly | retrain | pca", ("defend",)),
    "components": (_int_or_none, None, "detector Gaussians (default: k)", ("defend",)),
    "shrinkage": (float, 0.1, "covariance shrinkage", ("defend",)),
    "target_fpr": (float, 0.05, "detector operating point", ("defend",)),
    "trials": (int, 10, "injection trials", ("defend",)),
    "injection_images": (int, 800, "images per injection trial", ("defend",)),
    "retrain_epochs": (int, 5, "adversarial retraining epochs", ("defend",)),
    "host": (str, "127.0.0.1", "bind address", ("serve-mlaas",)),
    "port": (int, 8000, "listen port", ("serve-mlaas",)),
    "db": (str, None, "album database file (default <out>/albums.sqlite)", ("serve-mlaas",)),
    "rate_limit": (_float_or_none, None, "requests per second", ("serve-mlaas",)),
    "backend": (str, None, "service backend checkpoint (default: train one)", ("serve-mlaas", "attack-mlaas")),
    "backend_seed": (int, 1, "seed for the service backend model", ("serve-mlaas", "attack-mlaas")),
    "url": (str, None, "service base URL (default: in-process service)", ("attack-mlaas",)),
    "runs": (int, 10, "resampling runs", ("attack-mlaas",)),
    "per_identity": (int, 10, "images per identity per run", ("attack-mlaas",)),
    "reports": (str, None, "directory to scan for reports (default: output root)", ("report",)),
}

PATH_FIELDS = ("victim", "generator", "backend")


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigValidationError(f"line {lineno}", f"expected key = value, got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


@dataclass
class RunConfig:
    kind: str
    verb: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def attack_config(self) -> atk.AttackConfig:
        return atk.AttackConfig.from_dict(self.values)

    def snapshot(self) -> dict:
        return {"kind": self.kind, **{k: self.values[k] for k in sorted(self.values)}}

    def validate(self) -> "RunConfig":
        for name in PATH_FIELDS:
            path = self.values.get(name)
            if path is not None and not Path(path).exists():
                raise ConfigValidationError(name, f"path does not exist: {path}")
        for name in ("victims", "generators"):
            for path in self.values.get(name) or []:
                if not Path(path).exists():
                    raise ConfigValidationError(name, f"path does not exist: {path}")
        if self.verb in _ATTACK:
            cfg = self.attack_config()
            if self.verb == "sweep-epsilon":
                eps = self.values["epsilons"]
                if not eps or any(e <= 0 for e in eps):
                    raise ConfigValidationError("epsilons", "budgets must be positive")
                if any(b < a for a, b in zip(eps, eps[1:])):
                    raise ConfigValidationError("epsilons", "budgets must be ascending")
            cfg.validate(self.values.get("k"))
        if self.verb == "defend" and self.values["mode"] not in ("all", "anomaly", "retrain", "pca"):
            raise ConfigValidationError("mode", "must be one of all, anomaly, retrain, pca")
        if self.verb in _DATA and not 0 < self.values["test_fraction"] < 1:
            raise ConfigValidationError("test_fraction", "must lie in (0, 1)")
        required = {"attack": ("victim",), "sweep-epsilon": ("victim",), "defend": ("victim", "generator"),
                    "attack-mlaas": ("victim",), "transfer": ("victims",)}
        for name in required.get(self.verb, ()):
            if not self.values.get(name):
                raise ConfigValidationError(name, "is required")
        if self.verb == "transfer" and self.values.get("generators") and \
                len(self.values["generators"]) != len(self.values["victims"]):
            raise ConfigValidationError("generators", "need exactly one generator per victim")
        return self


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterbreak", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key = value config file; flags override it")
        for name, (typ, default, help_text, verbs) in OPTIONS.items():
            if verb in verbs:
                p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ,
                               help=f"{help_text} (default: {default})")
    return parser


def make_config(verb: str, flags: dict, file_values: dict | None = None) -> RunConfig:
    allowed = {name: spec for name, spec in OPTIONS.items() if verb in spec[3]}
    values = {name: spec[1] for name, spec in allowed.items()}
    for key, raw in (file_values or {}).items():
        if key not in allowed:
            raise ConfigValidationError(key, f"unknown option for {verb}")
        try:
            values[key] = allowed[key][0](raw)
        except ValueError as exc:
            raise ConfigValidationError(key, str(exc)) from None
    values.update({k: v for k, v in flags.items() if k in allowed})
    if values.get("out") is None:
        root = Path(os.environ.get(OUT_ENV, "runs"))
        values["out"] = str(root if verb == "report" else root / VERBS[verb])
    return RunConfig(VERBS[verb], verb, values)


def _load_data(cfg: RunConfig):
    full = resolve_dataset(cfg.dataset, (cfg.image_size, cfg.image_size),
                           n_per_class=cfg.n_per_class, k_true=cfg.k_true,
                           class_separation=cfg.class_separation, noise=cfg.noise,
                           illumination=cfg.illumination, seed=cfg.data_seed)
    train, test = train_test_split(full, cfg.test_fraction, cfg.data_seed)
    k = cfg.k or full.k_true
    return train, test, k


def _dataset_id(cfg: RunConfig) -> str:
    if cfg.dataset == "synthetic":
        return f"synthetic-k{cfg.k_true}-n{cfg.n_per_class}-s{cfg.data_seed}"
    return cfg.dataset


def _metrics(rep) -> dict:
    return rep.to_dict()


def _train_toy(cfg: RunConfig, train, k, seed):
    tc = TrainerConfig(embed_dim=cfg.embed_dim, pretrain_epochs=cfg.pretrain_epochs,
                       refine_epochs=cfg.refine_epochs, seed=seed)
    return train_toy_clusterer(train, k, tc)


def _base(cfg: RunConfig, model_id: str, dataset: str) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION, "kind": cfg.kind, "model_id": model_id,
            "dataset": dataset, "config": cfg.snapshot(), "artifacts": {}, "warnings": []}


def _hash_artifacts(doc: dict, out: Path, names) -> None:
    doc["artifacts"] = {name: sha256_file(out / name) for name in sorted(names)}


def _ledger_warning(ledger) -> list[str]:
    if ledger.converged:
        return []
    return [f"attack did not converge within {ledger.training_batches} batches"]


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    train, test, k = _load_data(cfg)
    model_id = cfg.model_id or f"toy-s{cfg.seed}"
    model = _train_toy(cfg, train, k, cfg.seed)
    save_cluster_model(model, out / "model.ckpt")
    baseline = kmeans_baseline(train, k, seed=cfg.seed)
    pre = atk.evaluate(model, test.images, test.labels)
    doc = _base(cfg, model_id, _dataset_id(cfg))
    doc["pre"] = _metrics(pre)
    doc["kmeans_baseline"] = _metrics(atk.evaluate(baseline, test.images, test.labels))
    write_confusion_csv(pre.confusion, out / "confusion_clean.csv")
    _hash_artifacts(doc, out, ["model.ckpt", "confusion_clean.csv"])
    return doc


def cmd_attack(cfg: RunConfig, out: Path) -> dict:
    train, test, k = _load_data(cfg)
    victim = load_cluster_model(cfg.victim)
    gen, ledger = atk.train_attack(victim, train, cfg.attack_config())
    gen.save(out / "generator.pt")
    adv, norms = atk.perturb_images(gen, test.images)
    pre = atk.evaluate(victim, test.images, test.labels)
    post = atk.evaluate(victim, adv, test.labels)
    doc = _base(cfg, Path(cfg.victim).stem, _dataset_id(cfg))
    doc.update(pre=_metrics(pre), post=_metrics(post), ledger=ledger.to_dict(),
               delta_stats=delta_stats(norms.numpy()), warnings=_ledger_warning(ledger))
    doc["delta_stats"]["relative_to_image_norm"] = float(
        norms.mean() / test.images.flatten(1).norm(dim=1).mean())
    doc["largest_cluster_share"] = {
        "pre": largest_cluster_share(predict_labels(victim, test.images)),
        "post": largest_cluster_share(predict_labels(victim, adv)),
    }
    write_confusion_csv(pre.confusion, out / "confusion_clean.csv")
    write_confusion_csv(post.confusion, out / "confusion_adversarial.csv")
    _hash_artifacts(doc, out, ["generator.pt", "confusion_clean.csv", "confusion_adversarial.csv"])
    return doc


def cmd_sweep(cfg: RunConfig, out: Path) -> dict:
    train, test, k = _load_data(cfg)
    victim = load_cluster_model(cfg.victim)
    points = atk.epsilon_sweep(victim, train, cfg.attack_config(), cfg.epsilons, eval_set=test)
    doc = _base(cfg, Path(cfg.victim).stem, _dataset_id(cfg))
    doc["pre"] = _metrics(atk.evaluate(victim, test.images, test.labels))
    doc["sweep"] = [{"epsilon": p.epsilon, "mean_norm": p.mean_norm, "max_norm": p.max_norm,
                     "nmi": p.report.nmi, "ari": p.report.ari, "acc": p.report.acc,
                     "ledger": p.ledger.to_dict()} for p in points]
    nmis = [p.report.nmi for p in points]
    varied = len(points) > 1 and np.ptp(nmis) > 0
    doc["spearman_epsilon_nmi"] = float(spearmanr(cfg.epsilons, nmis).statistic) if varied else None
    doc["warnings"] = [w for p in points for w in _ledger_warning(p.ledger)]
    with open(out / "sweep.csv", "w") as fh:
        fh.write("epsilon,mean_norm,max_norm,nmi,ari,acc,batch_queries\n")
        for row in doc["sweep"]:
            fh.write(",".join(f"{row[c]:.10g}" for c in ("epsilon", "mean_norm", "max_norm", "nmi",
                                                         "ari", "acc")))
            fh.write(f",{row['ledger']['batch_queries']}\n")
    _hash_artifacts(doc, out, ["sweep.csv"])
    return doc


def cmd_transfer(cfg: RunConfig, out: Path) -> dict:
    train, test, k = _load_data(cfg)
    victims = [load_cluster_model(p) for p in cfg.victims]
    ids = [Path(p).stem for p in cfg.victims]
    doc = _base(cfg, "+".join(ids), _dataset_id(cfg))
    if cfg.generators:
        generators = [atk.TrainedGenerator.load(p) for p in cfg.generators]
    else:
        generators = []
        for vid, victim in zip(ids, victims):
            gen, ledger = atk.train_attack(victim, train, cfg.attack_config())
            gen.save(out / f"generator_{vid}.pt")
            generators.append(gen)
            doc["warnings"] += _ledger_warning(ledger)
    tm = transfer_matrix(victims, generators, test, ids)
    doc["transfer"] = tm.to_dict()
    names = ["transfer.json"]
    tm.write_json(out / "transfer.json")
    for metric in tm.post_attack:
        tm.write_csv(out / f"transfer_{metric}.csv", metric)
        names.append(f"transfer_{metric}.csv")
    names += [f"generator_{vid}.pt" for vid in ids if (out / f"generator_{vid}.pt").exists()]
    _hash_artifacts(doc, out, names)
    return doc


def cmd_defend(cfg: RunConfig, out: Path) -> dict:
    train, test, k = _load_data(cfg)
    victim = load_cluster_model(cfg.victim)
    gen = atk.TrainedGenerator.load(cfg.generator)
    adv, _ = atk.perturb_images(gen, test.images)
    doc = _base(cfg, Path(cfg.victim).stem, _dataset_id(cfg))
    doc["pre"] = _metrics(atk.evaluate(victim, test.images, test.labels))
    doc["post"] = _metrics(atk.evaluate(victim, adv, test.labels))
    names = []
    if cfg.mode in ("all", "anomaly"):
        order = np.random.default_rng(cfg.seed).permutation(test.n)
        half = test.n // 2
        holdout, evaluation = test.subset(order[:half]), test.subset(order[half:])
        det = fit_detector(train, victim, components=cfg.components or k,
                           shrinkage=cfg.shrinkage, seed=cfg.seed)
        threshold = calibrate_threshold(det, holdout, cfg.target_fpr)
        detection = injection_experiment(det, evaluation, gen, cfg.trials, cfg.seed,
                                         n_images=cfg.injection_images)
        doc["detector"] = {"threshold": threshold, "components": len(det.components),
                           "shrinkage": det.shrinkage, "report": detection.to_dict()}
    if cfg.mode in ("all", "pca"):
        overlap = pca_overlap(test, adv)
        write_pca_csv(overlap, out / "pca.csv")
        doc["pca"] = {"overlap_score": overlap.overlap_score,
                      "explained_variance_ratio": overlap.explained_variance_ratio}
        names.append("pca.csv")
    if cfg.mode in ("all", "retrain"):
        retrained = adversarial_retrain(victim, train, gen, epochs=cfg.retrain_epochs, seed=cfg.seed)
        save_cluster_model(retrained, out / "retrained.ckpt")
        doc["retrained"] = {"clean": _metrics(atk.evaluate(retrained, test.images, test.labels)),
                            "adversarial": _metrics(atk.evaluate(retrained, adv, test.labels))}
        names.append("retrained.ckpt")
    _hash_artifacts(doc, out, names)
    return doc


def _backend(cfg: RunConfig, train, k):
    from .mlaas import GroupingBackend, calibrate_threshold as calibrate_linkage
    if cfg.backend:
        model = load_cluster_model(cfg.backend)
    else:
        model = _train_toy(cfg, train, k, cfg.backend_seed)
    calib = train.images[: min(train.n, 400)]
    return model, GroupingBackend(model, calibrate_linkage(model, calib, k))


def cmd_serve(cfg: RunConfig, out: Path) -> dict:
    import uvicorn

    from .mlaas import AlbumService, create_app
    train, _, k = _load_data(cfg)
    model, backend = _backend(cfg, train, k)
    save_cluster_model(model, out / "backend.ckpt")
    service = AlbumService(backend, cfg.db or out / "albums.sqlite", rate_limit=cfg.rate_limit)
    doc = _base(cfg, f"service-s{cfg.backend_seed}", _dataset_id(cfg))
    doc["threshold"] = backend.threshold
    _hash_artifacts(doc, out, ["backend.ckpt"])
    doc[WALL_CLOCK_FIELD] = 0.0
    write_report(doc, out)
    uvicorn.run(create_app(service), host=cfg.host, port=cfg.port, log_level="info")
    return doc


def cmd_attack_mlaas(cfg: RunConfig, out: Path) -> dict:
    from .mlaas import AlbumClient, AlbumService
    train, test, k = _load_data(cfg)
    surrogate = load_cluster_model(cfg.victim)
    doc = _base(cfg, Path(cfg.victim).stem, _dataset_id(cfg))
    if cfg.url:
        client = AlbumClient(cfg.url)
    else:
        # the in-process service exposes the same label-only methods as the client
        _, backend = _backend(cfg, train, k)
        client = AlbumService(backend)
    if cfg.generator:
        gen = atk.TrainedGenerator.load(cfg.generator)
    else:
        gen, ledger = atk.train_attack(surrogate, train, cfg.attack_config())
        doc["ledger"] = ledger.to_dict()
        doc["warnings"] = _ledger_warning(ledger)
    res = surrogate_resampling(client, surrogate, train, test, generator=gen, runs=cfg.runs,
                               per_identity=cfg.per_identity, seed=cfg.seed)
    mean = {kind: {m: float(np.mean([getattr(r, m) for r in reps])) for m in ("nmi", "ari", "acc")}
            for kind, reps in (("pre", res.pre), ("post", res.post))}
    doc.update(pre=mean["pre"], post=mean["post"], resampling=res.to_dict())
    with open(out / "service_runs.csv", "w") as fh:
        fh.write("run,pre_nmi,post_nmi\n")
        for i, (a, b) in enumerate(zip(res.pre, res.post)):
            fh.write(f"{i},{a.nmi:.10g},{b.nmi:.10g}\n")
    _hash_artifacts(doc, out, ["service_runs.csv"])
    return doc


COMMANDS = {
    "train-clusterer": cmd_train, "attack": cmd_attack, "sweep-epsilon": cmd_sweep,
    "transfer": cmd_transfer, "defend": cmd_defend, "serve-mlaas": cmd_serve,
    "attack-mlaas": cmd_attack_mlaas,
}


def run(cfg: RunConfig) -> dict:
    """Validate, dispatch and write ``report.json``; returns the report document."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.verb == "report":
        paths = render_tables(cfg.reports or out)
        return {"tables": [str(p) for p in paths]}
    start = time.perf_counter()
    doc = COMMANDS[cfg.verb](cfg, out)
    doc[WALL_CLOCK_FIELD] = time.perf_counter() - start
    write_report(doc, out)
    return doc


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    verb = args.pop("verb")
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.pop("config")) if args.get("config") else {}
        args.pop("config", None)
        cfg = make_config(verb, args, file_values)
        doc = run(cfg)
    except ConfigValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ClusterBreakError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for warning in doc.get("warnings", []):
        print(f"warning: {warning}", file=sys.stderr)
    if verb == "report":
        print("\n".join(doc["tables"]))
    else:
        summary = {k: doc[k] for k in ("kind", "model_id") if k in doc}
        for key in ("pre", "post"):
            if key in doc:
                summary[key] = {m: round(doc[key][m], 4) for m in ("nmi", "ari", "acc")}
        print(json.dumps(summary, indent=2, default=str))
        print(f"report: {Path(cfg.out) / 'report.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
