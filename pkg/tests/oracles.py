"""Slow, literal re-implementations used as test oracles.

Nothing here imports the package's scoring code: each rule is evaluated
item by item with plain Python arithmetic.
"""

import math
import random

EPS = 2.2e-16


def pairs_of(raw):
    return sorted((f, v) for f, vals in raw.items() for v in vals)


def dummy(raw_item, all_pairs):
    held = {(f, v) for f, vals in raw_item.items() for v in vals}
    return [1.0 if p in held else EPS for p in all_pairs]


def weighted_cosine(b, c, z):
    num = sum(zi * x * y for zi, x, y in zip(z, b, c))
    nb = math.sqrt(sum(zi * x * x for zi, x in zip(z, b)))
    nc = math.sqrt(sum(zi * y * y for zi, y in zip(z, c)))
    return num / (nb * nc)


def entropy(values):
    n = len(values)
    out = 0.0
    for v in set(values):
        p = values.count(v) / n
        out -= p * math.log2(p)
    return out


def tolerance_weights(profile_raw, all_pairs):
    """tau per feature, expanded onto every coordinate of that feature."""
    tau = {}
    for f in {f for f, _ in all_pairs}:
        tau[f] = entropy([v for item in profile_raw for v in item[f]])
    return tau, [tau[f] for f, _ in all_pairs]


TIE = 1e-12


def greedy(n, k_prime, marginal):
    """Pick positions one at a time; ``marginal(pos, selected)`` scores a candidate.

    Scores within a relative 1e-12 of the best are ties; the lowest position wins.
    """
    selected = []
    for _ in range(min(k_prime, n)):
        scores = {pos: marginal(pos, selected) for pos in range(n) if pos not in selected}
        top = max(scores.values())
        selected.append(min(pos for pos, s in scores.items() if s >= top - TIE * max(1.0, abs(top))))
    return selected


def mmr_select(rec, vectors, z, lam, k_prime):
    def marginal(pos, selected):
        penalty = sum(weighted_cosine(vectors[pos], vectors[s], z) for s in selected)
        return lam * rec[pos] - (1 - lam) * penalty
    return greedy(len(rec), k_prime, marginal)


def xquad_select(rec, aspect_sets, lam, k_prime):
    def marginal(pos, selected):
        covered = set()
        for s in selected:
            covered |= aspect_sets[s]
        new = any(a not in covered for a in aspect_sets[pos])
        return lam * rec[pos] + (1 - lam) * (1.0 if new else 0.0)
    return greedy(len(rec), k_prime, marginal)


def far_select(rec, aspect, lam, k_prime, t=1.0):
    def marginal(pos, selected):
        new = all(aspect[pos] != aspect[s] for s in selected)
        return lam * rec[pos] + (1 - lam) * t * (1.0 if new else 0.0)
    return greedy(len(rec), k_prime, marginal)


def random_instance(seed):
    """A small catalogue, protected set, candidate list and user profile."""
    rnd = random.Random(seed)
    features = {f"f{j}": [f"v{n}" for n in range(rnd.randint(2, 4))] for j in range(rnd.randint(2, 3))}
    n_items = rnd.randint(6, 12)
    raw = {}
    for n in range(n_items):
        item = {}
        for f, vals in features.items():
            k = 2 if (f == "f1" and rnd.random() < 0.2) else 1
            item[f] = set(rnd.sample(vals, k))
        raw[f"x{n:02d}"] = item
    observed = pairs_of(_union(raw))
    pool = [p for p in observed if p[0] != "f0"]
    protected = set(rnd.sample(pool, min(len(pool), rnd.randint(1, 2))))
    protected.add(("f0", rnd.choice(sorted({v for it in raw.values() for v in it["f0"]}))))
    ids = sorted(raw)
    cands = rnd.sample(ids, rnd.randint(2, min(8, n_items)))
    scores = sorted((rnd.random() for _ in cands), reverse=True)
    rest = [i for i in ids if i not in cands] or ids
    profile = rnd.sample(rest, min(len(rest), rnd.randint(1, 4)))
    return {
        "raw": raw,
        "protected": protected,
        "candidates": list(zip(cands, scores)),
        "profile": profile,
        "k_prime": rnd.randint(1, 4),
        "lam": rnd.choice([0.0, 1.0, rnd.random(), rnd.random(), rnd.random()]),
    }


def _union(raw):
    out = {}
    for item in raw.values():
        for f, vals in item.items():
            out.setdefault(f, set()).update(vals)
    return out
