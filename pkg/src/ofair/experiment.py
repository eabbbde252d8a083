"""The experiment harness: data -> baseline -> profiles -> sweep -> metrics.

Each stage writes its artefacts into the output directory. Later stages
recompute earlier ones from the config rather than reading them back, which
keeps every verb self-contained and deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from . import __version__
from .baseline import CandidateList, FactorModel, all_top_k, load_scores, split_interactions, train, write_scores
from .catalog import (
    Interactions,
    ItemCatalog,
    ProtectedSpec,
    read_interactions_csv,
    read_items_csv,
    write_interactions_csv,
    write_items_csv,
)
from .config import ExperimentConfig
from .ingest import CategorizationRule, PseudoItemConfig, SynthSpec, build_pseudo_items, categorize, synth_dataset
from .metrics import (
    MetricsRow,
    TradeoffReport,
    evaluate,
    tradeoff_table,
    write_metrics_csv,
    write_tradeoff_csv,
    write_value_exposure_csv,
)
from .profiles import ToleranceProfile, user_profiles, write_tau_csv
from .rerank import Reranker, RerankedList, write_reranked_csv

log = logging.getLogger(__name__)

STAGES = ("ingest", "train", "profile", "rerank", "evaluate", "sweep")


class ExperimentError(RuntimeError):
    pass


@dataclass
class Experiment:
    config: ExperimentConfig
    catalog: ItemCatalog | None = None
    interactions: Interactions | None = None
    spec: ProtectedSpec | None = None
    model: FactorModel | None = None
    candidates: dict[str, CandidateList] = field(default_factory=dict)
    profiles: dict[str, ToleranceProfile] = field(default_factory=dict)
    lists: dict[tuple[str, float], dict[str, RerankedList]] = field(default_factory=dict)
    rows: list[MetricsRow] = field(default_factory=list)
    reports: list[TradeoffReport] = field(default_factory=list)

    # -- stages --------------------------------------------------------------

    def load_data(self) -> None:
        cfg = self.config
        ds = cfg.dataset
        try:
            if "synthetic" in ds:
                syn = dict(ds["synthetic"])
                if isinstance(syn.get("concentration"), list):
                    syn["concentration"] = tuple(syn["concentration"])
                syn["protected"] = tuple((f, v) for f, vals in sorted(cfg.protected.items()) for v in vals)
                catalog, interactions = synth_dataset(SynthSpec(seed=cfg.sub_seed("synthetic"), **syn))
            elif "items" in ds:
                raw = read_items_csv(cfg.resolve(ds["items"]))
                interactions = read_interactions_csv(cfg.resolve(ds["interactions"]))
                catalog, interactions = self._maybe_pseudo(raw, interactions)
            else:
                table = pd.read_csv(cfg.resolve(ds["metadata"]))
                id_col = ds.get("id_column", "item_id")
                rules = [CategorizationRule(**{k: tuple(v) if k == "labels" else v for k, v in r.items()})
                         for r in ds["rules"]]
                table[id_col] = table[id_col].astype(str)
                raw = categorize(table, rules, id_column=id_col)
                interactions = read_interactions_csv(cfg.resolve(ds["ratings"]))
                catalog, interactions = self._maybe_pseudo(raw, interactions)
        except (OSError, ValueError) as exc:
            raise ExperimentError(f"ingest: {exc}") from exc
        if not any(r.split for r in interactions):
            interactions = split_interactions(
                interactions, cfg.test_fraction, seed=cfg.sub_seed("split"), per_user=cfg.per_user_split
            )
        self.catalog = catalog
        self.interactions = Interactions(interactions, catalog)
        entries = {(f, v) for f, vals in cfg.protected.items() for v in vals}
        try:
            self.spec = ProtectedSpec(entries, cfg.alpha, cfg.unprotected_weight)
            self.spec.validate(catalog.schema)
        except ValueError as exc:
            raise ExperimentError(f"protected: {exc}") from exc

    def _maybe_pseudo(self, raw, interactions):
        pi = self.config.dataset.get("pseudo_items")
        if not pi:
            return ItemCatalog.from_raw(raw), interactions
        pcfg = PseudoItemConfig(
            features=tuple(pi["features"]),
            cluster_counts=tuple(pi.get("cluster_counts", PseudoItemConfig.__dataclass_fields__["cluster_counts"].default)),
            linkage=pi.get("linkage", "average"),
            core=pi.get("core", 10),
        )
        result = build_pseudo_items(interactions, raw, pcfg)
        log.info("pseudo-items: %d clusters (silhouette %.3f)", result.n_clusters, result.silhouette)
        return ItemCatalog.from_raw(result.raw_items), result.interactions

    def build_candidates(self) -> None:
        cfg = self.config
        train_split = self.interactions.split("train")
        if cfg.scores:
            try:
                self.candidates = {
                    u: cl.prefix(cfg.k)
                    for u, cl in load_scores(cfg.resolve(cfg.scores), items=self.catalog.ids).items()
                }
            except (OSError, ValueError) as exc:
                raise ExperimentError(f"baseline.scores: {exc}") from exc
            seen = train_split.by_user()
            for u, cl in self.candidates.items():
                if set(cl.items) & set(seen.get(u, ())):
                    raise ExperimentError(f"baseline.scores: candidates for user {u!r} include training items")
            return
        p = cfg.nmf
        try:
            self.model = train(train_split, rank=p.rank, epochs=p.epochs, seed=cfg.sub_seed("nmf"),
                               missing_as_zero=p.missing_as_zero, items=self.catalog.ids, tol=p.tol)
        except ValueError as exc:
            raise ExperimentError(f"train: {exc}") from exc
        log.info("nmf objective %.4g -> %.4g", self.model.history[0], self.model.history[-1])
        self.candidates = all_top_k(self.model, cfg.k)

    def build_profiles(self) -> None:
        self.profiles = user_profiles(self.interactions.split("train").by_user(), self.catalog)

    def test_items(self) -> dict[str, set]:
        return {u: set(items) for u, items in self.interactions.split("test").by_user().items()}

    def reranker(self) -> Reranker:
        return Reranker(self.catalog, self.spec, self.profiles, self.config.sensitive_feature,
                        self.config.far_aspect)

    def sweep(self) -> None:
        """Re-rank every user for every (algorithm, lambda) and compute metrics."""
        cfg = self.config
        reranker = self.reranker()
        users = sorted(u for u, cl in self.candidates.items() if len(cl))
        test = self.test_items()

        def per_user(alg):
            def work(user):
                inst = reranker.instance(self.candidates[user], alg)
                return [inst.run(lam, cfg.k_prime) for lam in cfg.lambdas]
            return work

        self.lists = {}
        self.rows = []
        for alg in cfg.algorithms:
            started = time.perf_counter()
            results = _map(per_user(alg), users, cfg.threads)
            alg_rows = []
            for n, lam in enumerate(cfg.lambdas):
                lists = {u: res[n] for u, res in zip(users, results)}
                self.lists[(alg, lam)] = lists
                row = evaluate({u: rl.items for u, rl in lists.items()}, test, self.catalog, self.spec,
                               cfg.k_prime, alg, lam)
                alg_rows.append(row)
            self.rows.extend(alg_rows)
            log.info("%s: %d users x %d lambdas in %.1fs", alg, len(users), len(cfg.lambdas),
                     time.perf_counter() - started)

    def tradeoffs(self) -> None:
        cfg = self.config
        baseline = self.baseline_row()
        self.reports = [
            tradeoff_table([r for r in self.rows if r.algorithm == alg], cfg.loss_levels, baseline)
            for alg in cfg.algorithms
        ]

    def baseline_row(self) -> MetricsRow:
        for r in self.rows:
            if r.algorithm == "none":
                return r
        return next(r for r in self.rows if r.lam == 1.0)

    # -- output --------------------------------------------------------------

    def run(self, stage: str, out: Path) -> Path:
        if stage not in STAGES:
            raise ExperimentError(f"unknown stage {stage!r}")
        upto = STAGES.index(stage)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        self.load_data()
        if stage == "ingest":
            write_items_csv(self.catalog, out / "items.csv")
            write_interactions_csv(self.interactions, out / "interactions.csv")
            written += ["items.csv", "interactions.csv"]
        if stage == "profile" or upto >= STAGES.index("rerank"):
            self.build_profiles()
        if stage in ("train",) or upto >= STAGES.index("rerank"):
            self.build_candidates()
        if stage == "train":
            if self.model is not None:
                self.model.save(out / "model.npz")
                written.append("model.npz")
            write_scores(self.candidates, out / "candidates.csv")
            written.append("candidates.csv")
        if stage in ("profile", "sweep"):
            write_tau_csv(self.profiles, self.catalog.schema, out / "tau.csv")
            written.append("tau.csv")
        if upto >= STAGES.index("rerank"):
            self.sweep()
            if stage == "rerank" or self.config.write_lists:
                path = out / "reranked.csv"
                write_reranked_csv([], path)
                for key in sorted(self.lists):
                    write_reranked_csv((self.lists[key][u] for u in sorted(self.lists[key])), path, append=True)
                written.append("reranked.csv")
        if stage in ("evaluate", "sweep"):
            self.tradeoffs()
            write_metrics_csv(self.rows, out / "metrics.csv")
            write_tradeoff_csv(self.reports, out / "tradeoff.csv")
            write_value_exposure_csv(self.rows, out / "value_exposure.csv")
            written += ["metrics.csv", "tradeoff.csv", "value_exposure.csv"]
        self.write_manifest(out, stage, written)
        return out

    def write_manifest(self, out: Path, stage: str, written: list[str]) -> None:
        cfg = self.config
        manifest = {
            "package_version": __version__,
            "stage": stage,
            "config": cfg.to_dict(),
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "sub_seeds": {name: cfg.sub_seed(name) for name in ("synthetic", "split", "nmf")},
            "outputs": {name: _sha256(out / name) for name in written},
        }
        if self.catalog is not None:
            manifest["counts"] = {
                "items": len(self.catalog),
                "users": len(self.interactions.users()),
                "interactions": len(self.interactions),
                "candidate_lists": len(self.candidates),
            }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig, out: str | Path | None = None, stage: str = "sweep") -> Experiment:
    """Run the pipeline up to ``stage`` and write its artefacts; returns the Experiment."""
    exp = Experiment(config)
    exp.run(stage, Path(out) if out is not None else config.resolve(config.output))
    return exp


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()
