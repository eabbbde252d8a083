"""Experiment configuration: YAML in, validated and fully-defaulted dataclass out.

Every problem found is reported with the dotted path of the offending field,
and all of them are collected before raising.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .rerank import ALGORITHMS, FAR_ASPECTS

DEFAULT_LAMBDAS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0)
DEFAULT_LEVELS = (0.01, 0.02, 0.03)
DEFAULT_ALGORITHMS = ("none", "mmr", "mmr_tolerance", "mmr_fairness", "ofair", "xquad", "far", "pfar")
RULE_KEYS = {"source", "kind", "output", "threshold", "buckets", "labels", "sep"}


class ConfigError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass
class NMFParams:
    rank: int = 20
    epochs: int = 200
    missing_as_zero: bool = True
    tol: float = 0.0


@dataclass
class ExperimentConfig:
    dataset: dict
    protected: dict[str, list[str]]
    alpha: float = 1.0
    unprotected_weight: float | None = None
    nmf: NMFParams = field(default_factory=NMFParams)
    scores: str | None = None
    test_fraction: float = 0.2
    per_user_split: bool = False
    k: int = 200
    k_prime: int = 10
    algorithms: tuple[str, ...] = DEFAULT_ALGORITHMS
    sensitive_feature: str | None = None
    far_aspect: str = "value"
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    loss_levels: tuple[float, ...] = DEFAULT_LEVELS
    seed: int = 0
    output: str = "runs/experiment"
    threads: int = 1
    write_lists: bool = False
    base_dir: str = "."

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the normalised config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def sub_seed(self, name: str) -> int:
        """Named seed derived from the root seed, so components stay independent."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
        return int(ss.generate_state(1)[0])

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([("<file>", f"cannot read {path}: {exc.strerror}")]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"parse error: {exc}")]) from None
    return parse_config(raw, base_dir=str(path.parent))


validate_config = load_config


def parse_config(raw: Any, base_dir: str = ".") -> ExperimentConfig:
    errors: list[tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a mapping")])

    known = {"dataset", "protected", "baseline", "split", "k", "k_prime", "algorithms", "sensitive_feature",
             "far_aspect", "lambdas", "loss_levels", "seed", "output", "threads", "write_lists"}
    for key in sorted(set(raw) - known):
        errors.append((key, "unknown field"))

    out: dict[str, Any] = {"base_dir": base_dir}
    out["dataset"] = _dataset(raw.get("dataset"), errors)

    prot = raw.get("protected")
    protected: dict[str, list[str]] = {}
    if not isinstance(prot, dict):
        errors.append(("protected", "required mapping with 'values' and optional 'alpha'"))
    else:
        for key in sorted(set(prot) - {"values", "alpha", "unprotected_weight"}):
            errors.append((f"protected.{key}", "unknown field"))
        values = prot.get("values")
        if not isinstance(values, dict):
            errors.append(("protected.values", "must map feature names to lists of protected values"))
        else:
            for feat, vals in values.items():
                if isinstance(vals, str):
                    vals = [vals]
                if not isinstance(vals, list) or not vals:
                    errors.append((f"protected.values.{feat}", "must be a non-empty list"))
                    continue
                protected[str(feat)] = sorted(str(v) for v in vals)
        alpha = prot.get("alpha", 1.0)
        if not _is_number(alpha) or not alpha > 0:
            errors.append(("protected.alpha", "alpha must be positive"))
        else:
            out["alpha"] = float(alpha)
        uw = prot.get("unprotected_weight")
        if uw is not None:
            if not _is_number(uw) or not uw > 0:
                errors.append(("protected.unprotected_weight", "must be positive"))
            elif _is_number(alpha) and alpha > 0 and not uw < alpha:
                errors.append(("protected.unprotected_weight", "must be smaller than alpha"))
            else:
                out["unprotected_weight"] = float(uw)
    out["protected"] = protected

    base = raw.get("baseline", {}) or {}
    if not isinstance(base, dict):
        errors.append(("baseline", "must be a mapping"))
        base = {}
    for key in sorted(set(base) - {"nmf", "scores"}):
        errors.append((f"baseline.{key}", "unknown field"))
    if "scores" in base and base["scores"] is not None:
        if not isinstance(base["scores"], str):
            errors.append(("baseline.scores", "must be a path"))
        else:
            out["scores"] = base["scores"]
    nmf = base.get("nmf", {}) or {}
    if not isinstance(nmf, dict):
        errors.append(("baseline.nmf", "must be a mapping"))
        nmf = {}
    params = NMFParams()
    for key, val in nmf.items():
        p = f"baseline.nmf.{key}"
        if key in ("rank", "epochs"):
            if not _is_int(val) or val < 1:
                errors.append((p, "must be a positive integer"))
            else:
                setattr(params, key, int(val))
        elif key == "missing_as_zero":
            if not isinstance(val, bool):
                errors.append((p, "must be true or false"))
            else:
                params.missing_as_zero = val
        elif key == "tol":
            if not _is_number(val) or val < 0:
                errors.append((p, "must be a non-negative number"))
            else:
                params.tol = float(val)
        else:
            errors.append((p, "unknown field"))
    out["nmf"] = params

    split = raw.get("split", {}) or {}
    if not isinstance(split, dict):
        errors.append(("split", "must be a mapping"))
        split = {}
    for key in sorted(set(split) - {"test_fraction", "per_user"}):
        errors.append((f"split.{key}", "unknown field"))
    tf = split.get("test_fraction", 0.2)
    if not _is_number(tf) or not 0 < tf < 1:
        errors.append(("split.test_fraction", "must lie in (0, 1)"))
    else:
        out["test_fraction"] = float(tf)
    if not isinstance(split.get("per_user", False), bool):
        errors.append(("split.per_user", "must be true or false"))
    else:
        out["per_user_split"] = split.get("per_user", False)

    for key, default in (("k", 200), ("k_prime", 10), ("threads", 1)):
        val = raw.get(key, default)
        if not _is_int(val) or val < 1:
            errors.append((key, "must be a positive integer"))
        else:
            out[key] = int(val)
    if "k" in out and "k_prime" in out and out["k_prime"] > out["k"]:
        errors.append(("k_prime", "must not exceed k"))

    seed = raw.get("seed", 0)
    if not _is_int(seed) or seed < 0:
        errors.append(("seed", "must be a non-negative integer"))
    else:
        out["seed"] = int(seed)
    if "output" in raw:
        if not isinstance(raw["output"], str):
            errors.append(("output", "must be a path"))
        else:
            out["output"] = raw["output"]
    if not isinstance(raw.get("write_lists", False), bool):
        errors.append(("write_lists", "must be true or false"))
    else:
        out["write_lists"] = raw.get("write_lists", False)

    algs = raw.get("algorithms", list(DEFAULT_ALGORITHMS))
    if not isinstance(algs, list) or not algs:
        errors.append(("algorithms", "must be a non-empty list"))
    else:
        for n, a in enumerate(algs):
            if a not in ALGORITHMS:
                errors.append((f"algorithms[{n}]", f"unknown algorithm {a!r}; valid: {', '.join(ALGORITHMS)}"))
        if len(set(algs)) != len(algs):
            errors.append(("algorithms", "duplicate entries"))
        out["algorithms"] = tuple(algs)

    sens = raw.get("sensitive_feature")
    if sens is None and protected:
        sens = sorted(protected)[0]
    if sens is not None and not isinstance(sens, str):
        errors.append(("sensitive_feature", "must be a feature name"))
    out["sensitive_feature"] = sens
    if isinstance(algs, list) and {"far", "pfar"} & set(algs) and not sens:
        errors.append(("sensitive_feature", "far/pfar need a sensitive feature"))

    far_aspect = raw.get("far_aspect", "value")
    if far_aspect not in FAR_ASPECTS:
        errors.append(("far_aspect", f"must be one of {', '.join(FAR_ASPECTS)}"))
    else:
        out["far_aspect"] = far_aspect

    lams = raw.get("lambdas", list(DEFAULT_LAMBDAS))
    if not isinstance(lams, list) or len(lams) < 2 or not all(_is_number(x) for x in lams):
        errors.append(("lambdas", "must be a list of at least two numbers"))
    else:
        lams = [float(x) for x in lams]
        for n, x in enumerate(lams):
            if not 0 <= x <= 1:
                errors.append((f"lambdas[{n}]", "must lie in [0, 1]"))
        if any(b <= a for a, b in zip(lams, lams[1:])):
            errors.append(("lambdas", "must be strictly increasing"))
        if 1.0 not in lams:
            errors.append(("lambdas", "must include 1.0 (the baseline anchor)"))
        out["lambdas"] = tuple(lams)

    levels = raw.get("loss_levels", list(DEFAULT_LEVELS))
    if not isinstance(levels, list) or not levels or not all(_is_number(x) for x in levels):
        errors.append(("loss_levels", "must be a non-empty list of numbers"))
    else:
        for n, x in enumerate(levels):
            if not 0 < x < 1:
                errors.append((f"loss_levels[{n}]", "must lie in (0, 1)"))
        out["loss_levels"] = tuple(float(x) for x in levels)

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(**out)


def _dataset(ds, errors) -> dict:
    if not isinstance(ds, dict):
        errors.append(("dataset", "required mapping: 'synthetic', 'items' + 'interactions', or 'metadata' + 'ratings'"))
        return {}
    kinds = [k for k in ("synthetic", "items", "metadata") if k in ds]
    if len(kinds) != 1:
        errors.append(("dataset", "give exactly one of 'synthetic', 'items', 'metadata'"))
        return dict(ds)
    kind = kinds[0]
    if kind == "synthetic":
        from .ingest import SynthSpec

        syn = ds["synthetic"] or {}
        if not isinstance(syn, dict):
            errors.append(("dataset.synthetic", "must be a mapping"))
            return {"synthetic": {}}
        allowed = set(SynthSpec.__dataclass_fields__) - {"seed"}
        for key in sorted(set(syn) - allowed):
            errors.append((f"dataset.synthetic.{key}", "unknown field"))
        for key in ("n_users", "n_items", "min_profile"):
            if key in syn and (not _is_int(syn[key]) or syn[key] < 1):
                errors.append((f"dataset.synthetic.{key}", "must be a positive integer"))
        if "prevalence" in syn and (not _is_number(syn["prevalence"]) or not 0 < syn["prevalence"] < 1):
            errors.append(("dataset.synthetic.prevalence", "must lie in (0, 1)"))
        if "density" in syn and (not _is_number(syn["density"]) or not 0 < syn["density"] <= 1):
            errors.append(("dataset.synthetic.density", "must lie in (0, 1]"))
        conc = syn.get("concentration")
        if conc is not None:
            ok = (_is_number(conc) and conc > 0) or (
                isinstance(conc, list) and len(conc) == 2 and all(_is_number(c) and c > 0 for c in conc)
                and conc[0] <= conc[1]
            )
            if not ok:
                errors.append(("dataset.synthetic.concentration", "must be a positive number or [low, high]"))
        if "features" in syn and (not isinstance(syn["features"], dict) or
                                  not all(_is_int(c) and c >= 2 for c in syn["features"].values())):
            errors.append(("dataset.synthetic.features", "must map names to cardinalities >= 2"))
        return {"synthetic": dict(syn)}
    if kind == "items":
        for key in ("items", "interactions"):
            if not isinstance(ds.get(key), str):
                errors.append((f"dataset.{key}", "must be a path"))
        extra = set(ds) - {"items", "interactions", "pseudo_items"}
    else:
        for key in ("metadata", "ratings"):
            if not isinstance(ds.get(key), str):
                errors.append((f"dataset.{key}", "must be a path"))
        rules = ds.get("rules")
        if not isinstance(rules, list) or not rules:
            errors.append(("dataset.rules", "must be a non-empty list of categorisation rules"))
        else:
            for n, rule in enumerate(rules):
                if not isinstance(rule, dict) or "source" not in rule or "kind" not in rule:
                    errors.append((f"dataset.rules[{n}]", "needs 'source' and 'kind'"))
                    continue
                for key in sorted(set(rule) - RULE_KEYS):
                    errors.append((f"dataset.rules[{n}].{key}", "unknown field"))
        extra = set(ds) - {"metadata", "ratings", "rules", "id_column", "pseudo_items"}
    for key in sorted(extra):
        errors.append((f"dataset.{key}", "unknown field"))
    pi = ds.get("pseudo_items")
    if pi is not None:
        if not isinstance(pi, dict) or not isinstance(pi.get("features"), list) or not pi["features"]:
            errors.append(("dataset.pseudo_items.features", "must be a non-empty list"))
        else:
            for key in sorted(set(pi) - {"features", "cluster_counts", "linkage", "core"}):
                errors.append((f"dataset.pseudo_items.{key}", "unknown field"))
            if "core" in pi and (not _is_int(pi["core"]) or pi["core"] < 1):
                errors.append(("dataset.pseudo_items.core", "must be a positive integer"))
    return dict(ds)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)
