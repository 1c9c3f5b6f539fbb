"""View-combination search and the feedback (active re-labelling) loop."""
from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, FeedbackError
from .evaluate import mrmse
from .views import FUSION_CANDIDATES, ViewRole, format_views, parse_views

_ORDER = {r: i for i, r in enumerate(FUSION_CANDIDATES)}


def _sort_key(combo):
    return tuple(_ORDER.get(r, len(_ORDER) + list(ViewRole).index(r)) for r in combo)


def canonical(combo) -> tuple[ViewRole, ...]:
    """Views of a combination in candidate order (2CH, 4CH, Top, Mid, Bottom)."""
    return tuple(sorted(parse_views(combo), key=lambda r: _sort_key((r,))))


@dataclass(frozen=True)
class ScoredCombo:
    views: tuple[ViewRole, ...]
    rmse_edv: float
    rmse_esv: float

    @property
    def mrmse(self) -> float:
        return mrmse(self.rmse_edv, self.rmse_esv)

    def __str__(self):
        return f"{format_views(self.views)} {self.mrmse:.3f}"


def score_all(evaluator, combos, threads: int = 1) -> list[ScoredCombo]:
    """Evaluate every combination; the result order follows ``combos``
    whatever the thread count."""
    combos = [canonical(c) for c in combos]

    def run(c):
        edv, esv = evaluator(c)
        return ScoredCombo(c, float(edv), float(esv))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, combos))
    return [run(c) for c in combos]


def _ranked(scored):
    return sorted(scored, key=lambda s: (s.mrmse, _sort_key(s.views)))


def pairwise_view_search(evaluator, candidates=FUSION_CANDIDATES, top_k: int = 4, threads: int = 1):
    """Score all unordered pairs by MRMSE.  Returns (best ``top_k`` pairs,
    union of their views in candidate order).  Ties go to the pair that comes
    first in candidate order."""
    candidates = canonical(candidates)
    if len(candidates) < 2:
        raise ConfigError("pairwise search needs at least two candidate views")
    pairs = list(itertools.combinations(candidates, 2))
    ranked = _ranked(score_all(evaluator, pairs, threads))
    top = ranked[:top_k]
    members = {r for s in top for r in s.views}
    return top, canonical(members)


def stage_two_combinations(optimal) -> list[tuple[ViewRole, ...]]:
    """All size-3 subsets of the optimal set plus the full set."""
    optimal = canonical(optimal)
    if len(optimal) <= 3:
        return [optimal]
    return [tuple(c) for c in itertools.combinations(optimal, 3)] + [optimal]


def optimal_set_search(evaluator, optimal, threads: int = 1, combinations=None):
    """Return (best ScoredCombo, all scored stage-two combinations)."""
    combos = combinations if combinations is not None else stage_two_combinations(optimal)
    if not combos:
        raise ConfigError("no combinations to evaluate")
    scored = score_all(evaluator, combos, threads)
    return _ranked(scored)[0], scored


# ---------------------------------------------------------------- fixtures

class FixtureEvaluator:
    """Look-up evaluator over a ``views,rmse_edv,rmse_esv`` table."""

    def __init__(self, table: dict):
        self.table = {canonical(k): tuple(map(float, v)) for k, v in table.items()}

    @classmethod
    def load(cls, path):
        table = {}
        with Path(path).open(newline="") as fh:
            rows = csv.DictReader(fh)
            missing = {"views", "rmse_edv", "rmse_esv"} - set(rows.fieldnames or ())
            if missing:
                raise ConfigError(f"{path}: missing columns {sorted(missing)}")
            for row in rows:
                table[row["views"]] = (row["rmse_edv"], row["rmse_esv"])
        return cls(table)

    def __call__(self, combo):
        key = canonical(combo)
        if key not in self.table:
            raise ConfigError(f"fixture has no entry for {format_views(key)}")
        return self.table[key]


def write_scores(scored, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["views", "rmse_edv", "rmse_esv", "mrmse"])
        for s in scored:
            w.writerow([format_views(s.views), f"{s.rmse_edv:.6f}", f"{s.rmse_esv:.6f}", f"{s.mrmse:.6f}"])
    return path


# ---------------------------------------------------------------- feedback

@dataclass(frozen=True)
class FeedbackEvent:
    kind: str  # "train" / "test" (initial membership), "good", "removed", "retrained"
    case_id: str
    truth_ml: float | None = None
    pred_ml: float | None = None
    streak_after: int = 0


EVENT_KINDS = ("train", "test", "good", "removed", "retrained")


@dataclass(frozen=True)
class FeedbackState:
    train_ids: frozenset
    test_ids: frozenset
    W: float = 10.0  # acceptable absolute error, ml
    R: float = 0.1  # train/test ratio target
    F: int = 1000  # good-feedback streak target
    good_streak: int = 0
    history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise FeedbackError(f"ids in both sets: {sorted(self.train_ids & self.test_ids)[:5]}")
        if self.W < 0 or self.R <= 0 or self.F < 1:
            raise FeedbackError("need W >= 0, R > 0 and F >= 1")

    @classmethod
    def initial(cls, train_ids, test_ids, W=10.0, R=0.1, F=1000):
        train_ids, test_ids = [str(i) for i in train_ids], [str(i) for i in test_ids]
        events = tuple(FeedbackEvent("train", i) for i in train_ids) + tuple(FeedbackEvent("test", i) for i in test_ids)
        return cls(frozenset(train_ids), frozenset(test_ids), W, R, F, 0, events)

    @property
    def retrain(self) -> bool:
        """Raised by a removal, lowered by a ``retrained`` event."""
        for e in reversed(self.history):
            if e.kind == "removed":
                return True
            if e.kind == "retrained":
                return False
        return False


def feedback_step(state: FeedbackState, case) -> FeedbackState:
    """``case`` = (id, truth ml, prediction ml).  A case whose absolute error
    exceeds W moves from test to train and resets the streak; otherwise the
    good-feedback streak grows."""
    cid, truth, pred = case
    cid = str(cid)
    if cid in state.train_ids:
        raise FeedbackError(f"case {cid} is already in the training set")
    if cid not in state.test_ids:
        raise FeedbackError(f"unknown case {cid}")
    truth, pred = float(truth), float(pred)
    if abs(truth - pred) > state.W:
        ev = FeedbackEvent("removed", cid, truth, pred, 0)
        return replace(
            state,
            train_ids=state.train_ids | {cid},
            test_ids=state.test_ids - {cid},
            good_streak=0,
            history=state.history + (ev,),
        )
    streak = state.good_streak + 1
    ev = FeedbackEvent("good", cid, truth, pred, streak)
    return replace(state, good_streak=streak, history=state.history + (ev,))


def feedback_converged(state: FeedbackState) -> bool:
    if not state.test_ids:
        raise FeedbackError("test set is empty")
    return len(state.train_ids) / len(state.test_ids) < state.R and state.good_streak >= state.F


def mark_retrained(state: FeedbackState) -> FeedbackState:
    ev = FeedbackEvent("retrained", "-", None, None, state.good_streak)
    return replace(state, history=state.history + (ev,))


def _num(x):
    return "" if x is None else repr(float(x))


def write_log(state: FeedbackState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# W={state.W!r} R={state.R!r} F={state.F}", "event_kind,case_id,truth_ml,pred_ml,streak_after"]
    lines += [f"{e.kind},{e.case_id},{_num(e.truth_ml)},{_num(e.pred_ml)},{e.streak_after}" for e in state.history]
    path.write_text("\n".join(lines) + "\n")
    return path


def append_events(state: FeedbackState, events, path) -> None:
    with Path(path).open("a") as fh:
        for e in events:
            fh.write(f"{e.kind},{e.case_id},{_num(e.truth_ml)},{_num(e.pred_ml)},{e.streak_after}\n")


def replay(path) -> FeedbackState:
    """Rebuild a FeedbackState from its event log."""
    params = {}
    init_train, init_test, steps = [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                k, _, v = tok.partition("=")
                params[k] = v
            continue
        if line.startswith("event_kind,"):
            continue
        kind, cid, truth, pred, streak = line.split(",")
        if kind not in EVENT_KINDS:
            raise FeedbackError(f"unknown event kind {kind!r}")
        if kind == "train":
            init_train.append(cid)
        elif kind == "test":
            init_test.append(cid)
        elif kind == "retrained":
            steps.append((kind, cid, None, None, int(streak)))
        else:
            steps.append((kind, cid, float(truth), float(pred), int(streak)))
    if not {"W", "R", "F"} <= set(params):
        raise FeedbackError(f"{path}: missing '# W=.. R=.. F=..' header")
    state = FeedbackState.initial(init_train, init_test, float(params["W"]), float(params["R"]), int(params["F"]))
    for kind, cid, truth, pred, streak in steps:
        if kind == "retrained":
            state = mark_retrained(state)
            continue
        state = feedback_step(state, (cid, truth, pred))
        last = state.history[-1]
        if last.kind != kind or last.streak_after != streak:
            raise FeedbackError(f"log event for {cid} disagrees with replay ({kind} vs {last.kind})")
    return state


class TrainingEvaluator:
    """Evaluator that trains one EDV and one ESV model per combination on
    prepared inputs and reports their best validation RMSEs."""

    def __init__(self, inputs, vgg, config, val_fraction: float = 0.2, seed: int = 0):
        from . import trainer

        self.inputs = list(inputs)
        self.vgg = vgg
        self.config = config
        self.train_idx, self.val_idx = trainer.split_indices(len(self.inputs), val_fraction, seed)

    def __call__(self, combo):
        from dataclasses import replace as dc_replace

        from . import trainer

        out = []
        for target in ("EDV", "ESV"):
            data = trainer.dataset_from_inputs(self.inputs, canonical(combo), target)
            cfg = dc_replace(self.config, target=target)
            res = trainer.fit(data.subset(self.train_idx), data.subset(self.val_idx), self.vgg, cfg)
            out.append(res.best.validation_loss)
        return tuple(out)
