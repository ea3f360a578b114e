"""Model-comparison workflows built on :mod:`n400kit.lmm` and :mod:`n400kit.stats`.

* nested ladders of mixed models compared by likelihood-ratio tests and AIC,
* held-out prediction with directional Welch t-tests between conditions,
* predictor / similarity correlations at the stimulus level.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from . import lmm, stats
from .errors import ConfigError, InputError
from .ingest import CONDITIONS, ID_COLUMNS, KEY_COLUMNS
from .metrics import pearson_r

DEFAULT_RANDOM = ("subject", "frame_id", "electrode")
N400_ROIS = ("Central", "Posterior")


@dataclass(frozen=True)
class LadderSpec:
    """A baseline model followed by cumulative blocks of added terms."""

    name: str
    additions: tuple
    baseline: tuple = ("roi",)
    random_intercepts: tuple = DEFAULT_RANDOM
    outcome: str = "amplitude"

    def __post_init__(self):
        adds = tuple(tuple([a]) if isinstance(a, str) else tuple(a) for a in self.additions)
        object.__setattr__(self, "additions", adds)
        object.__setattr__(self, "baseline", tuple(self.baseline))
        object.__setattr__(self, "random_intercepts", tuple(self.random_intercepts))
        if not adds:
            raise ConfigError(f"ladder {self.name!r} has no rungs beyond the baseline")
        seen = set(self.baseline)
        for block in adds:
            if not block:
                raise ConfigError(f"ladder {self.name!r} has an empty rung")
            repeated = seen.intersection(block)
            if repeated:
                raise ConfigError(f"ladder {self.name!r} repeats terms {sorted(repeated)}")
            seen.update(block)

    def rungs(self):
        terms = list(self.baseline)
        out = [("baseline", tuple(terms))]
        for block in self.additions:
            terms = terms + list(block)
            out.append(("+" + "+".join(block), tuple(terms)))
        return out

    def spec(self, terms):
        return lmm.ModelSpec(self.outcome, terms, self.random_intercepts)


def predictor_ladder(predictor, by="roi", random_intercepts=DEFAULT_RANDOM):
    """ROI baseline, then the predictor, then its interaction with ROI."""
    return LadderSpec(name=predictor, additions=((predictor,), (f"{predictor}:{by}",)),
                      baseline=(by,), random_intercepts=random_intercepts)


def partition_ladder(base, added, by="roi", random_intercepts=DEFAULT_RANDOM):
    """Baseline ``base * ROI``; then ``added``; then ``added x ROI``."""
    return LadderSpec(name=f"{base}|{added}", additions=((added,), (f"{added}:{by}",)),
                      baseline=(by, base, f"{base}:{by}"), random_intercepts=random_intercepts)


@dataclass(frozen=True)
class RungResult:
    ladder: str
    index: int
    label: str
    terms: tuple
    n_params: int
    loglik: float
    aic: float
    delta_aic: float
    converged: bool
    singular: bool
    test: Optional[stats.TestResult] = None
    dropped: tuple = ()
    note: str = ""

    def significant(self, alpha=0.05):
        if self.test is None:
            return False
        p = self.test.p_adjusted if self.test.p_adjusted is not None else self.test.p_raw
        return p < alpha


@dataclass
class LadderReport:
    rungs: list
    fdr_method: str
    models: dict = field(default_factory=dict, repr=False)

    @property
    def tests(self):
        return [r.test for r in self.rungs if r.test is not None]

    def ladder(self, name):
        return [r for r in self.rungs if r.ladder == name]

    def rung(self, ladder, index):
        for r in self.rungs:
            if r.ladder == ladder and r.index == index:
                return r
        raise KeyError((ladder, index))

    def top(self, ladder):
        return self.ladder(ladder)[-1]

    def best_ladder(self):
        """Name of the ladder whose top rung has the lowest AIC."""
        names = list(dict.fromkeys(r.ladder for r in self.rungs))
        return min(names, key=lambda nm: self.top(nm).aic)

    def to_frame(self):
        rows = []
        for r in self.rungs:
            t = r.test
            rows.append({
                "ladder": r.ladder, "rung": r.index, "label": r.label,
                "terms": " + ".join(r.terms), "n_params": r.n_params,
                "loglik": r.loglik, "aic": r.aic, "delta_aic": r.delta_aic,
                "statistic": t.statistic if t else (0.0 if r.index else np.nan),
                "df": t.df if t else (0.0 if r.index else np.nan),
                "p_raw": t.p_raw if t else (1.0 if r.index else np.nan),
                "p_adjusted": t.p_adjusted if t else (1.0 if r.index else np.nan),
                "alternative": t.alternative if t else "",
                "method": self.fdr_method,
                "converged": r.converged, "singular": r.singular, "note": r.note,
            })
        return pd.DataFrame(rows)


def canonical_order(table):
    """Rows sorted on the identifying columns so results do not depend on input order."""
    keys = [c for c in KEY_COLUMNS if c in table.columns]
    rest = [c for c in table.columns if c not in keys and c not in ID_COLUMNS]
    return table.sort_values(keys + rest, kind="mergesort").reset_index(drop=True)


def run_ladders(table, ladders, fdr_method="BY", drop_redundant=False, fit_kwargs=None):
    """Fit every rung of every ladder and test consecutive rungs.

    All LRT p-values from all ladders form one FDR family. Identical models
    appearing in several ladders (typically the shared baseline) are fit once.
    """
    table = canonical_order(table)
    fit_kwargs = fit_kwargs or {}
    cache = {}
    rungs = []

    def get_fit(ladder, terms):
        key = (ladder.outcome, frozenset(terms), ladder.random_intercepts)
        if key not in cache:
            cache[key] = lmm.fit(table, ladder.spec(terms), drop_redundant=drop_redundant,
                                 **fit_kwargs)
        return cache[key]

    for ladder in ladders:
        prev = None
        base_aic = None
        for i, (label, terms) in enumerate(ladder.rungs()):
            model = get_fit(ladder, terms)
            if base_aic is None:
                base_aic = model.aic
            test = None
            note = ""
            if prev is not None:
                if model.n_params < prev.n_params:
                    raise InputError(f"ladder {ladder.name!r}: rung {label} has fewer parameters "
                                     f"than its predecessor; rungs do not nest")
                if model.n_params == prev.n_params:
                    new = sorted(set(model.dropped) - set(prev.dropped))
                    note = "redundant: no new columns" + (f" (dropped {', '.join(new)})" if new else "")
                else:
                    test = stats.lrt(prev, model, label=f"{ladder.name}: {label}")
            rungs.append(RungResult(
                ladder=ladder.name, index=i, label=label, terms=terms, n_params=model.n_params,
                loglik=model.loglik, aic=model.aic, delta_aic=model.aic - base_aic,
                converged=model.converged, singular=model.singular, test=test,
                dropped=model.dropped, note=note))
            prev = model
    tests = [r.test for r in rungs if r.test is not None]
    if tests:
        adjusted = iter(stats.adjust_results(tests, fdr_method))
        rungs = [replace(r, test=next(adjusted)) if r.test is not None else r for r in rungs]
    models = {}
    for key, m in cache.items():
        models[key] = m
    return LadderReport(rungs=rungs, fdr_method=fdr_method.upper(), models=models)


def run_ladder(table, ladder, fdr_method="BY", **kwargs):
    return run_ladders(table, [ladder], fdr_method=fdr_method, **kwargs)


def compare_predictors(table, predictors, by="roi", random_intercepts=DEFAULT_RANDOM,
                       fdr_method="BY", **kwargs):
    ladders = [predictor_ladder(p, by, random_intercepts) for p in predictors]
    return run_ladders(table, ladders, fdr_method=fdr_method, **kwargs)


def variance_partition(table, base, added, by="roi", random_intercepts=DEFAULT_RANDOM,
                       fdr_method="BY", **kwargs):
    """Does ``added`` explain variance beyond ``base`` and its ROI interaction?

    Redundant columns (e.g. ``added`` identical to ``base``) are dropped from
    the design and the affected rungs reported with a zero statistic.
    """
    return run_ladders(table, [partition_ladder(base, added, by, random_intercepts)],
                       fdr_method=fdr_method, drop_redundant=True, **kwargs)


# ---------------------------------------------------------------- holdout


@dataclass(frozen=True)
class HoldoutSpec:
    fraction: float = 0.15
    seed: int = 0
    stratify: bool = False
    mode: str = "conditional"

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError(f"holdout fraction must lie strictly between 0 and 1, got {self.fraction}")
        if self.mode not in ("conditional", "marginal"):
            raise ConfigError(f"unknown prediction mode {self.mode!r}")


@dataclass(frozen=True)
class Contrast:
    """Welch test of ``a`` against ``b``; ``source`` is ``"observed"`` or a model name."""

    a_source: str
    a_condition: str
    b_source: str
    b_condition: str
    alternative: str = "less"

    @property
    def label(self):
        op = {"less": "<", "greater": ">", "two_sided": "!="}[self.alternative]
        if self.a_source == self.b_source:
            return f"{self.a_source}: {self.a_condition} {op} {self.b_condition}"
        if self.a_condition == self.b_condition:
            return f"{self.a_condition}: {self.a_source} {op} {self.b_source}"
        return f"{self.a_source}/{self.a_condition} {op} {self.b_source}/{self.b_condition}"


@dataclass(frozen=True)
class ContrastPlan:
    contrasts: tuple
    rois: tuple = N400_ROIS

    def __post_init__(self):
        object.__setattr__(self, "contrasts", tuple(self.contrasts))
        object.__setattr__(self, "rois", tuple(self.rois))
        for c in self.contrasts:
            for cond in (c.a_condition, c.b_condition):
                if cond not in CONDITIONS:
                    raise ConfigError(f"unknown condition {cond!r} in contrast plan")
            if (c.a_source, c.a_condition) == (c.b_source, c.b_condition):
                raise ConfigError(f"contrast compares a cell with itself: {c.label}")
            if c.alternative not in stats.ALTERNATIVES:
                raise ConfigError(f"unknown alternative {c.alternative!r}")


def ordered_condition_contrasts(source, order=CONDITIONS, alternative="less"):
    """Adjacent-pair tests ``order[i] < order[i+1]`` for one source."""
    return [Contrast(source, a, source, b, alternative) for a, b in zip(order, order[1:])]


def default_plan(models, include_observed=True, between=None, rois=N400_ROIS,
                 alternative="less"):
    """Adjacent condition contrasts for each model (and the observed data).

    ``between`` optionally maps a condition to ``(model_a, model_b, alternative)``
    for same-condition comparisons of two models' predictions.
    """
    contrasts = []
    sources = (["observed"] if include_observed else []) + list(models)
    for s in sources:
        contrasts += ordered_condition_contrasts(s, alternative=alternative)
    for cond, (ma, mb, alt) in (between or {}).items():
        contrasts.append(Contrast(ma, cond, mb, cond, alt))
    return ContrastPlan(tuple(contrasts), rois)


def split_holdout(table, holdout):
    """Boolean mask of held-out rows (independent per-row draws unless stratified)."""
    rng = np.random.default_rng(holdout.seed)
    n = len(table)
    if not holdout.stratify:
        return rng.random(n) < holdout.fraction
    mask = np.zeros(n, dtype=bool)
    cond = table["condition"].to_numpy()
    for c in sorted(set(cond)):
        idx = np.flatnonzero(cond == c)
        k = int(round(holdout.fraction * idx.size))
        mask[rng.permutation(idx)[:k]] = True
    return mask


@dataclass
class HoldoutReport:
    cells: pd.DataFrame
    tests: list
    n_train: int
    n_test: int
    predictions: pd.DataFrame = field(repr=False, default=None)
    fdr_method: str = "BY"
    models: dict = field(default_factory=dict, repr=False)

    def test(self, label):
        for t in self.tests:
            if t.label == label:
                return t
        raise KeyError(label)

    def to_frame(self):
        return pd.DataFrame([{
            "label": t.label, "statistic": t.statistic, "df": t.df, "p_raw": t.p_raw,
            "p_adjusted": t.p_adjusted, "alternative": t.alternative, "method": t.method,
        } for t in self.tests])


def holdout_eval(table, specs, holdout=HoldoutSpec(), plan=None, fdr_method="BY",
                 outcome="amplitude"):
    """Fit on a random training split and compare predictions on the held-out rows.

    Parameters
    ----------
    specs : ModelSpec or mapping of name to ModelSpec
    plan : ContrastPlan, optional
        Defaults to adjacent condition contrasts for every model and for the
        observed amplitudes.
    """
    if isinstance(specs, lmm.ModelSpec):
        specs = {"model": specs}
    if plan is None:
        plan = default_plan(list(specs))
    table = canonical_order(table)
    mask = split_holdout(table, holdout)
    train = table[~mask].reset_index(drop=True)
    test = table[mask].reset_index(drop=True)
    if len(test) == 0 or len(train) == 0:
        raise InputError("holdout split left an empty training or test set")
    preds = test[list(c for c in ID_COLUMNS if c in test.columns) + [outcome]].copy()
    preds = preds.rename(columns={outcome: "observed"})
    models = {}
    for name, spec in specs.items():
        if name == "observed":
            raise ConfigError("'observed' is reserved for the measured amplitudes")
        model = lmm.fit(train, spec)
        models[name] = model
        preds[name] = lmm.predict(model, test, mode=holdout.mode)

    roi_rows = preds[preds["roi"].isin(plan.rois)] if plan.rois else preds
    sources = ["observed"] + list(specs)
    cells = []
    values = {}
    for s in sources:
        for c in CONDITIONS:
            v = roi_rows.loc[roi_rows["condition"] == c, s].to_numpy()
            values[(s, c)] = v
            if v.size:
                cells.append({"source": s, "condition": c, "n": int(v.size),
                              "mean": float(v.mean()),
                              "se": stats.standard_error(v) if v.size > 1 else np.nan})
    results = []
    for con in plan.contrasts:
        for key in ((con.a_source, con.a_condition), (con.b_source, con.b_condition)):
            if key[0] not in sources:
                raise ConfigError(f"contrast references unknown source {key[0]!r}")
            if values[key].size == 0:
                raise InputError(f"held-out set has no rows for {key[0]}/{key[1]} "
                                 f"in ROIs {list(plan.rois)}")
        results.append(stats.welch_t(values[(con.a_source, con.a_condition)],
                                     values[(con.b_source, con.b_condition)],
                                     con.alternative, label=con.label))
    if results:
        results = stats.adjust_results(results, fdr_method)
    return HoldoutReport(cells=pd.DataFrame(cells), tests=results, n_train=len(train),
                         n_test=len(test), predictions=preds, fdr_method=fdr_method.upper(),
                         models=models)


def adjust_jointly(ladder=None, holdout=None, fdr_method="BY"):
    """Re-adjust the LRTs of ``ladder`` and the t-tests of ``holdout`` as one family."""
    lrts = ladder.tests if ladder is not None else []
    tts = holdout.tests if holdout is not None else []
    adjusted = stats.adjust_results(lrts + tts, fdr_method)
    if ladder is not None:
        it = iter(adjusted[:len(lrts)])
        ladder.rungs = [replace(r, test=next(it)) if r.test is not None else r
                        for r in ladder.rungs]
        ladder.fdr_method = fdr_method.upper()
    if holdout is not None:
        holdout.tests = adjusted[len(lrts):]
        holdout.fdr_method = fdr_method.upper()
    return ladder, holdout


# ------------------------------------------------------------ correlation


@dataclass
class CorrelationReport:
    predictor: str
    similarity: str
    r: float
    n: int
    by_condition: dict
    scatter: pd.DataFrame = field(repr=False, default=None)


def corr_analysis(table, predictor, similarity, by_condition=True):
    """Pearson correlation between two stimulus-level columns.

    The table is first reduced to one row per ``(frame_id, condition)``;
    both columns must be constant within a stimulus.
    """
    for c in (predictor, similarity):
        if c not in table.columns:
            raise InputError(f"column {c!r} not in table")
    keys = ["frame_id", "condition"]
    sub = table[keys + [predictor, similarity]]
    spread = sub.groupby(keys)[[predictor, similarity]].nunique()
    if (spread > 1).any().any():
        raise InputError(f"{predictor!r}/{similarity!r} vary within a stimulus; "
                         "they are not stimulus-level predictors")
    uniq = (sub.drop_duplicates(subset=keys)
            .sort_values(keys, kind="mergesort").reset_index(drop=True))
    if len(uniq) < 3:
        raise InputError(f"need at least 3 distinct stimuli, found {len(uniq)}")
    r = pearson_r(uniq[predictor], uniq[similarity])
    per = {}
    if by_condition:
        for c in CONDITIONS:
            part = uniq[uniq["condition"] == c]
            if len(part) >= 3:
                per[c] = pearson_r(part[predictor], part[similarity])
    return CorrelationReport(predictor, similarity, r, len(uniq), per, uniq)


def compare_correlations(table, pairs):
    """Correlation for each named (predictor, similarity) pair.

    Returns the reports and the name with the largest absolute ``r``.
    """
    reports = {name: corr_analysis(table, p, s) for name, (p, s) in pairs.items()}
    strongest = max(reports, key=lambda nm: abs(reports[nm].r))
    return reports, strongest
