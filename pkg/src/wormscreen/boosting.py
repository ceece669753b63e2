"""AdaBoost over decision stumps, and the bagged abstaining master classifier.

Training is deterministic: stump candidates are midpoints between consecutive
distinct sorted feature values, the winner is the candidate with the lowest
weighted error, and ties resolve to the lexicographically smallest
(feature_index, threshold). Stump outputs are confidence-rated with Laplace
smoothing, so the ensemble score is a real number rather than a vote count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# Reserved finite feature value, below any real filter response. Emitted when
# a feature's source region is empty; stumps can isolate it like any value.
EMPTY_FEATURE_SENTINEL = -1.0e6

# Decision value meaning "the ensemble declines to label this example".
ABSTAIN = 0

STUMP_FORMAT = "wormscreen/stump-ensemble/v1"
BAG_FORMAT = "wormscreen/bagged-ensemble/v1"


class TrainingError(ValueError):
    """Raised when a training set cannot produce a model."""


@dataclass
class LabeledExample:
    features: np.ndarray
    label: int
    weight: float = 1.0

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 1:
            raise ValueError("features must be a 1-D vector")
        if np.any(np.isnan(f)):
            raise ValueError("features must not contain NaN")
        if self.label not in (+1, -1):
            raise ValueError(f"label must be +1 or -1, got {self.label}")
        if not (self.weight > 0):
            raise ValueError("weight must be positive")
        object.__setattr__(self, "features", f)


@dataclass
class Stump:
    """Threshold test on one feature with per-branch confidences.

    Contributes c_left when feature < threshold, c_right otherwise.
    """

    feature_index: int
    threshold: float
    c_left: float
    c_right: float

    def output(self, value: float) -> float:
        return self.c_left if value < self.threshold else self.c_right


@dataclass
class TrainingMeta:
    rounds_requested: int
    rounds_run: int
    seed: int | None
    loss_trace: list[float] = field(default_factory=list)
    round_errors: list[float] = field(default_factory=list)
    halted_early: bool = False
    halt_reason: str | None = None


@dataclass
class StumpEnsemble:
    stumps: list[Stump]
    dimensionality: int
    feature_names: list[str] | None = None
    meta: TrainingMeta | None = None

    def score(self, features: np.ndarray) -> float:
        return score(self, features)

    def score_many(self, X: np.ndarray) -> np.ndarray:
        return score_many(self, X)


@dataclass
class BaggedEnsemble:
    members: list[StumpEnsemble]
    subsample_fraction: float
    seed: int | None = None

    @property
    def dimensionality(self) -> int:
        return self.members[0].dimensionality

    def classify(self, features: np.ndarray) -> int:
        return classify_with_abstention(self, features)


def examples_to_arrays(examples: Sequence[LabeledExample]
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not examples:
        raise TrainingError("empty training set")
    X = np.stack([e.features for e in examples])
    y = np.array([e.label for e in examples], dtype=np.float64)
    w = np.array([e.weight for e in examples], dtype=np.float64)
    return X, y, w


def examples_from_arrays(X: np.ndarray, y: np.ndarray,
                         w: np.ndarray | None = None) -> list[LabeledExample]:
    X = np.asarray(X, dtype=np.float64)
    if w is None:
        w = np.ones(len(y))
    return [LabeledExample(X[i], int(y[i]), float(w[i]))
            for i in range(len(y))]


def _best_stump(X: np.ndarray, y: np.ndarray, w: np.ndarray,
                orders: list[np.ndarray]):
    """Exhaustive stump search: lowest weighted error, lexicographic ties.

    Returns (err, feature, threshold, branch weights) or None when every
    feature is constant.
    """
    n, d = X.shape
    best = None
    for f in range(d):
        order = orders[f]
        xs = X[order, f]
        ws = w[order]
        pos = y[order] > 0
        cum_p = np.cumsum(np.where(pos, ws, 0.0))
        cum_n = np.cumsum(np.where(pos, 0.0, ws))
        total_p, total_n = cum_p[-1], cum_n[-1]
        cut = np.nonzero(xs[:-1] < xs[1:])[0]
        if cut.size == 0:
            continue
        lp, ln = cum_p[cut], cum_n[cut]
        rp, rn = total_p - lp, total_n - ln
        errs = np.minimum(lp, ln) + np.minimum(rp, rn)
        i = int(np.argmin(errs))  # first minimum = smallest threshold
        err = float(errs[i])
        if best is None or err < best[0]:
            thr = float((xs[cut[i]] + xs[cut[i] + 1]) / 2.0)
            best = (err, f, thr,
                    float(lp[i]), float(ln[i]), float(rp[i]), float(rn[i]))
    return best


def train_adaboost(examples: Sequence[LabeledExample], rounds: int,
                   seed: int | None = None,
                   feature_names: list[str] | None = None) -> StumpEnsemble:
    """Boost confidence-rated decision stumps for the given number of rounds.

    Each round picks the stump minimizing weighted error over every
    (feature, midpoint-threshold) candidate; branch outputs are
    0.5*ln((W+ + eps)/(W- + eps)) with eps = 1/(2n). Training halts early
    when the best available stump has weighted error >= 0.5.
    """
    if rounds < 1:
        raise TrainingError("rounds must be >= 1")
    X, y, w = examples_to_arrays(examples)
    if not (np.any(y > 0) and np.any(y < 0)):
        raise TrainingError("training set must contain both labels")
    n, d = X.shape
    w = w / math.fsum(w)
    eps = 1.0 / (2.0 * n)
    orders = [np.argsort(X[:, f], kind="stable") for f in range(d)]
    margins = np.zeros(n)

    meta = TrainingMeta(rounds_requested=rounds, rounds_run=0, seed=seed)
    stumps: list[Stump] = []
    for _ in range(rounds):
        found = _best_stump(X, y, w, orders)
        if found is None:
            meta.halted_early = True
            meta.halt_reason = "all features constant"
            break
        err, f, thr, lp, ln, rp, rn = found
        if err >= 0.5:
            meta.halted_early = True
            meta.halt_reason = f"best stump weighted error {err:.6f} >= 0.5"
            break
        c_left = 0.5 * math.log((lp + eps) / (ln + eps))
        c_right = 0.5 * math.log((rp + eps) / (rn + eps))
        stump = Stump(f, thr, c_left, c_right)
        stumps.append(stump)
        meta.round_errors.append(err)

        h = np.where(X[:, f] < thr, c_left, c_right)
        margins = margins + y * h
        w = w * np.exp(-y * h)
        w = w / math.fsum(w)
        meta.loss_trace.append(math.fsum(np.exp(-margins)) / n)
        meta.rounds_run += 1

    return StumpEnsemble(stumps=stumps, dimensionality=d,
                         feature_names=feature_names, meta=meta)


def score(model: StumpEnsemble, features: np.ndarray) -> float:
    """Ensemble score: the sum of per-stump outputs, in stump order."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (model.dimensionality,):
        raise ValueError(f"feature vector has shape {features.shape}, "
                         f"model expects ({model.dimensionality},)")
    total = 0.0
    for s in model.stumps:
        total += s.output(float(features[s.feature_index]))
    return total


def score_many(model: StumpEnsemble, X: np.ndarray) -> np.ndarray:
    """Vectorized score; summation order matches the scalar path."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dimensionality:
        raise ValueError(f"feature matrix has shape {X.shape}, "
                         f"model expects (*, {model.dimensionality})")
    total = np.zeros(len(X))
    for s in model.stumps:
        total = total + np.where(X[:, s.feature_index] < s.threshold,
                                 s.c_left, s.c_right)
    return total


def train_bagged(examples: Sequence[LabeledExample], K: int = 7,
                 subsample_fraction: float = 0.7, rounds: int = 50,
                 seed: int | None = None, replacement: bool = False,
                 feature_names: list[str] | None = None,
                 max_retries: int = 50) -> BaggedEnsemble:
    """Train K ensembles on independently seeded random subsets.

    Subsets default to 70% sampling without replacement; a subset that loses
    one label class is redrawn up to max_retries times.
    """
    if K < 1:
        raise TrainingError("K must be >= 1")
    if not (0.0 < subsample_fraction <= 1.0):
        raise TrainingError("subsample_fraction must be in (0, 1]")
    examples = list(examples)
    n = len(examples)
    labels = np.array([e.label for e in examples])
    if not (np.any(labels > 0) and np.any(labels < 0)):
        raise TrainingError("training set must contain both labels")
    m = max(2, int(round(subsample_fraction * n)))
    m = min(m, n)
    streams = np.random.SeedSequence(seed).spawn(K)
    members = []
    for k in range(K):
        rng = np.random.default_rng(streams[k])
        subset = None
        for _ in range(max_retries):
            idx = rng.choice(n, size=m, replace=replacement)
            sub_labels = labels[idx]
            if np.any(sub_labels > 0) and np.any(sub_labels < 0):
                subset = idx
                break
        if subset is None:
            raise TrainingError(
                f"bag member {k}: could not draw a subset with both labels "
                f"in {max_retries} tries")
        member = train_adaboost([examples[i] for i in subset], rounds=rounds,
                                seed=seed, feature_names=feature_names)
        members.append(member)
    return BaggedEnsemble(members=members,
                          subsample_fraction=subsample_fraction, seed=seed)


def classify_with_abstention(bag: BaggedEnsemble,
                             features: np.ndarray) -> int:
    """Unanimous member vote, else ABSTAIN.

    A member score of exactly 0 carries no sign and therefore always forces
    abstention.
    """
    votes = []
    for member in bag.members:
        s = score(member, features)
        votes.append(0 if s == 0.0 else (+1 if s > 0 else -1))
    return _resolve_votes(votes)


def _resolve_votes(votes: Sequence[int]) -> int:
    first = votes[0]
    if first == 0:
        return ABSTAIN
    for v in votes[1:]:
        if v != first:
            return ABSTAIN
    return first


# ---------------------------------------------------------------------------
# model files

def _stump_ensemble_to_dict(model: StumpEnsemble) -> dict:
    meta = model.meta
    return {
        "format": STUMP_FORMAT,
        "dimensionality": model.dimensionality,
        "feature_names": model.feature_names,
        "stumps": [
            {"feature_index": s.feature_index, "threshold": s.threshold,
             "c_left": s.c_left, "c_right": s.c_right}
            for s in model.stumps
        ],
        "meta": None if meta is None else {
            "rounds_requested": meta.rounds_requested,
            "rounds_run": meta.rounds_run,
            "seed": meta.seed,
            "loss_trace": meta.loss_trace,
            "round_errors": meta.round_errors,
            "halted_early": meta.halted_early,
            "halt_reason": meta.halt_reason,
        },
    }


def _stump_ensemble_from_dict(d: dict) -> StumpEnsemble:
    if d.get("format") != STUMP_FORMAT:
        raise ValueError(f"unsupported model format: {d.get('format')!r}")
    meta = None
    if d.get("meta") is not None:
        meta = TrainingMeta(**d["meta"])
    return StumpEnsemble(
        stumps=[Stump(**s) for s in d["stumps"]],
        dimensionality=d["dimensionality"],
        feature_names=d.get("feature_names"),
        meta=meta,
    )


def save_model(path: str | Path,
               model: StumpEnsemble | BaggedEnsemble) -> None:
    if isinstance(model, BaggedEnsemble):
        payload = {
            "format": BAG_FORMAT,
            "subsample_fraction": model.subsample_fraction,
            "seed": model.seed,
            "members": [_stump_ensemble_to_dict(m) for m in model.members],
        }
    else:
        payload = _stump_ensemble_to_dict(model)
    Path(path).write_text(json.dumps(payload, indent=1))


def load_model(path: str | Path) -> StumpEnsemble | BaggedEnsemble:
    d = json.loads(Path(path).read_text())
    fmt = d.get("format")
    if fmt == BAG_FORMAT:
        return BaggedEnsemble(
            members=[_stump_ensemble_from_dict(m) for m in d["members"]],
            subsample_fraction=d["subsample_fraction"],
            seed=d.get("seed"),
        )
    if fmt == STUMP_FORMAT:
        return _stump_ensemble_from_dict(d)
    raise ValueError(f"unsupported model format: {fmt!r}")
