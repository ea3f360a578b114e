"""Readers for stimuli, language-model output and EEG measurements.

Everything is joined on ``(frame_id, condition)`` into a long-format
analysis table (a :class:`pandas.DataFrame`), one row per
subject x sentence x electrode measurement.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import metrics
from .errors import InputError


class Condition(str, enum.Enum):
    BEST = "best"
    RELATED = "related"
    UNRELATED = "unrelated"
    IMPLAUSIBLE = "implausible"

    @property
    def display(self):
        return _CONDITION_DISPLAY[self]

    @classmethod
    def parse(cls, label):
        key = re.sub(r"[\s_-]", "", str(label)).lower()
        try:
            return _CONDITION_ALIASES[key]
        except KeyError:
            valid = ", ".join(c.value for c in cls)
            raise InputError(f"unknown condition {label!r}; valid labels: {valid}") from None


_CONDITION_DISPLAY = {
    Condition.BEST: "BestCompletion",
    Condition.RELATED: "Related",
    Condition.UNRELATED: "Unrelated",
    Condition.IMPLAUSIBLE: "Implausible",
}
_CONDITION_ALIASES = {c.value: c for c in Condition}
_CONDITION_ALIASES.update({"bestcompletion": Condition.BEST})

CONDITIONS = tuple(c.value for c in Condition)

ROIS = ("Prefrontal", "FrontoCentral", "Central", "Posterior", "LeftTemporal", "RightTemporal")
_ROI_ALIASES = {r.lower(): r for r in ROIS}


def parse_roi(label):
    key = re.sub(r"[\s_-]", "", str(label)).lower()
    try:
        return _ROI_ALIASES[key]
    except KeyError:
        raise InputError(f"unknown ROI {label!r}; valid levels: {', '.join(ROIS)}") from None


ID_COLUMNS = ("subject", "frame_id", "condition", "electrode", "roi")
KEY_COLUMNS = ("subject", "frame_id", "condition", "electrode")
TRIAL_COLUMNS = ("subject", "frame_id", "condition", "electrode", "roi", "amplitude")
EPOCH_COLUMNS = ("subject", "frame_id", "condition", "electrode", "roi", "time_ms", "amplitude")
DEFAULT_WINDOW = (300.0, 500.0)


@dataclass(frozen=True)
class Stimulus:
    frame_id: str
    condition: str
    words: tuple
    target_index: int
    cloze: Optional[float] = None

    @property
    def key(self):
        return (self.frame_id, self.condition)

    @property
    def target(self):
        return self.words[self.target_index]


@dataclass(frozen=True, eq=False)
class LMSentenceRecord:
    model_id: str
    frame_id: str
    condition: str
    tokens: tuple
    logprobs: tuple
    word_alignment: tuple
    embeddings: np.ndarray

    @property
    def key(self):
        return (self.frame_id, self.condition)

    @property
    def dim(self):
        return self.embeddings.shape[1]


def _open_text(source):
    if isinstance(source, (str, Path)):
        return open(source, encoding="utf-8", newline=""), str(source)
    return source, getattr(source, "name", None)


def parse_stimuli(source, delimiter="\t"):
    """Parse a stimulus table.

    Parameters
    ----------
    source : path or text stream
        Header row with ``frame_id``, ``condition``, ``sentence``,
        ``target_index`` and optionally ``cloze``.
    delimiter : str
        Field separator, tab by default.

    Returns
    -------
    list of Stimulus
    """
    stream, name = _open_text(source)
    try:
        reader = csv.reader(stream, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError("empty stimulus file", source=name) from None
        required = ("frame_id", "condition", "sentence", "target_index")
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"stimulus header lacks columns {missing}", source=name, line=1)
        col = {h: i for i, h in enumerate(header)}
        has_cloze = "cloze" in col
        out = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise InputError(f"expected {len(header)} fields, found {len(row)}",
                                 source=name, line=lineno)
            try:
                cond = Condition.parse(row[col["condition"]]).value
            except InputError as exc:
                raise InputError(str(exc), source=name, line=lineno) from None
            words = tuple(row[col["sentence"]].split())
            try:
                target = int(row[col["target_index"]])
            except ValueError:
                raise InputError(f"target_index {row[col['target_index']]!r} is not an integer",
                                 source=name, line=lineno) from None
            if not 0 <= target < len(words):
                raise InputError(f"target_index {target} outside sentence of {len(words)} words",
                                 source=name, line=lineno)
            cloze = None
            if has_cloze and row[col["cloze"]].strip() not in ("", "NA", "nan"):
                try:
                    cloze = float(row[col["cloze"]])
                except ValueError:
                    raise InputError(f"cloze {row[col['cloze']]!r} is not a number",
                                     source=name, line=lineno) from None
                if not 0.0 <= cloze <= 1.0:
                    raise InputError(f"cloze {cloze} outside [0, 1]", source=name, line=lineno)
                if cond == Condition.IMPLAUSIBLE.value and cloze != 0.0:
                    raise InputError(f"implausible item with nonzero cloze {cloze}",
                                     source=name, line=lineno)
            frame = row[col["frame_id"]].strip()
            if (frame, cond) in seen:
                raise InputError(f"duplicate stimulus {frame}/{cond}", source=name, line=lineno)
            seen.add((frame, cond))
            out.append(Stimulus(frame, cond, words, target, cloze))
        return out
    finally:
        if stream is not source:
            stream.close()


def write_stimuli(stimuli, stream):
    has_cloze = any(s.cloze is not None for s in stimuli)
    header = ["frame_id", "condition", "sentence", "target_index"] + (["cloze"] if has_cloze else [])
    stream.write("\t".join(header) + "\n")
    for s in stimuli:
        fields = [s.frame_id, s.condition, " ".join(s.words), str(s.target_index)]
        if has_cloze:
            fields.append("" if s.cloze is None else format(s.cloze, ".9g"))
        stream.write("\t".join(fields) + "\n")


def _validate_record(rec):
    n = len(rec["tokens"])
    if n == 0:
        raise InputError("record has no tokens")
    lps = rec["logprobs"]
    if len(lps) != n:
        raise InputError(f"{len(lps)} logprobs for {n} tokens")
    for i, lp in enumerate(lps):
        if lp is None:
            continue
        if not isinstance(lp, (int, float)) or not math.isfinite(lp):
            raise InputError(f"token {i}: logprob {lp!r} is not a finite number")
        if lp > 0:
            raise InputError(f"token {i}: positive logprob {lp} (natural-log convention)")
    spans = rec["word_alignment"]
    pos = 0
    for w, span in enumerate(spans):
        if len(span) != 2:
            raise InputError(f"word {w}: alignment span {span!r} is not [start, end)")
        start, end = int(span[0]), int(span[1])
        if start != pos:
            kind = "gap" if start > pos else "overlap"
            raise InputError(f"word {w}: alignment {kind} at token {pos}")
        if end <= start:
            raise InputError(f"word {w}: empty alignment span [{start}, {end})")
        pos = end
    if pos != n:
        raise InputError(f"alignment covers {pos} of {n} tokens")
    emb = rec["embeddings"]
    if len(emb) != n:
        raise InputError(f"{len(emb)} embeddings for {n} tokens")
    dims = {len(v) for v in emb}
    if len(dims) > 1:
        raise InputError(f"embedding dimension mismatch: {sorted(dims)}")
    arr = np.asarray(emb, dtype=float)
    if (arr.ndim != 2 or not np.all(np.isfinite(arr))):
        raise InputError("embeddings must be finite numbers")
    if np.any(~arr.any(axis=1)):
        raise InputError("zero embedding vector")
    return arr


def parse_lm_output(source):
    """Parse line-delimited JSON language-model records.

    Each line holds ``model_id``, ``frame_id``, ``condition``, ``tokens``,
    ``logprobs`` (natural log, ``null`` allowed), ``word_alignment``
    (``[start, end)`` token spans) and per-token ``embeddings``.
    """
    stream, name = _open_text(source)
    required = ("model_id", "frame_id", "condition", "tokens", "logprobs",
                "word_alignment", "embeddings")
    out = []
    try:
        for lineno, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"invalid JSON: {exc.msg}", source=name, line=lineno) from None
            if not isinstance(rec, dict):
                raise InputError("record is not a JSON object", source=name, line=lineno)
            missing = [k for k in required if k not in rec]
            if missing:
                raise InputError(f"record lacks fields {missing}", source=name, line=lineno)
            try:
                emb = _validate_record(rec)
                cond = Condition.parse(rec["condition"]).value
            except InputError as exc:
                raise InputError(str(exc), source=name, line=lineno) from None
            out.append(LMSentenceRecord(
                model_id=str(rec["model_id"]),
                frame_id=str(rec["frame_id"]),
                condition=cond,
                tokens=tuple(str(t) for t in rec["tokens"]),
                logprobs=tuple(None if lp is None else float(lp) for lp in rec["logprobs"]),
                word_alignment=tuple((int(a), int(b)) for a, b in rec["word_alignment"]),
                embeddings=emb.reshape(len(rec["tokens"]), -1),
            ))
    finally:
        if stream is not source:
            stream.close()
    by_model = {}
    for r in out:
        by_model.setdefault(r.model_id, set()).add(r.dim)
    for model, ds in by_model.items():
        if len(ds) > 1:
            raise InputError(f"model {model}: embedding dimension mismatch {sorted(ds)}",
                             source=name)
    return out


def record_to_json(rec):
    return json.dumps({
        "model_id": rec.model_id,
        "frame_id": rec.frame_id,
        "condition": rec.condition,
        "tokens": list(rec.tokens),
        "logprobs": list(rec.logprobs),
        "word_alignment": [list(s) for s in rec.word_alignment],
        "embeddings": rec.embeddings.tolist(),
    }, separators=(",", ":"))


def window_mean(samples, window=DEFAULT_WINDOW):
    """Mean amplitude over the samples whose time lies in ``[start, end]``.

    Parameters
    ----------
    samples : iterable of (time_ms, amplitude)
    window : (start_ms, end_ms)
        Both bounds are inclusive.
    """
    arr = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples,
                     dtype=float).reshape(-1, 2)
    start, end = window
    if start > end:
        raise InputError(f"window start {start} after end {end}")
    inside = (arr[:, 0] >= start) & (arr[:, 0] <= end)
    if not inside.any():
        raise InputError(f"no samples in window [{start}, {end}] ms")
    return float(arr[inside, 1].mean())


def _normalize_ids(df, name):
    for c in ID_COLUMNS:
        if c in df.columns:
            df[c] = df[c].astype(str).str.strip()
    if "condition" in df.columns:
        try:
            df["condition"] = [Condition.parse(c).value for c in df["condition"]]
        except InputError as exc:
            raise InputError(str(exc), source=name) from None
    if "roi" in df.columns:
        try:
            df["roi"] = [parse_roi(r) for r in df["roi"]]
        except InputError as exc:
            raise InputError(str(exc), source=name) from None
    return df


def _read_csv(source, columns, name):
    try:
        df = pd.read_csv(source, dtype={c: str for c in ID_COLUMNS}, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot parse CSV: {exc}", source=name) from None
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise InputError(f"missing columns {missing}", source=name)
    df = df[list(columns)].copy()
    for c in ("amplitude", "time_ms"):
        if c in df.columns:
            vals = pd.to_numeric(df[c], errors="coerce")
            bad = ~np.isfinite(vals.to_numpy(dtype=float))
            if bad.any():
                line = int(np.flatnonzero(bad)[0]) + 2
                raise InputError(f"non-finite {c} value {df[c].iloc[line - 2]!r}",
                                 source=name, line=line)
            df[c] = vals.astype(float)
    return _normalize_ids(df, name)


def read_trials(source):
    """Read per-measurement window means (``eeg.csv``)."""
    name = str(source) if isinstance(source, (str, Path)) else getattr(source, "name", None)
    return _read_csv(source, TRIAL_COLUMNS, name)


def read_epochs(source, window=DEFAULT_WINDOW):
    """Read per-sample epochs (``epochs.csv``) and reduce them to window means."""
    name = str(source) if isinstance(source, (str, Path)) else getattr(source, "name", None)
    df = _read_csv(source, EPOCH_COLUMNS, name)
    return epochs_to_trials(df, window, name)


def epochs_to_trials(df, window=DEFAULT_WINDOW, name=None):
    start, end = window
    if start > end:
        raise InputError(f"window start {start} after end {end}")
    keys = list(KEY_COLUMNS)
    all_keys = df[keys + ["roi"]].drop_duplicates(subset=keys)
    inside = df[(df["time_ms"] >= start) & (df["time_ms"] <= end)]
    means = inside.groupby(keys, sort=True)["amplitude"].mean().reset_index()
    if len(means) != len(all_keys):
        merged = all_keys.merge(means, on=keys, how="left")
        empty = merged[merged["amplitude"].isna()].head(5)
        raise InputError(
            f"no samples in window [{start}, {end}] ms for "
            f"{[tuple(r) for r in empty[keys].itertuples(index=False)]}", source=name)
    roi = all_keys.set_index(keys)["roi"]
    means["roi"] = roi.loc[pd.MultiIndex.from_frame(means[keys])].to_numpy()
    return means[list(TRIAL_COLUMNS)]


def _parse_recipe(recipe):
    kind, _, model = recipe.partition(":")
    kind = kind.strip().lower()
    if kind not in ("surprisal", "cossim", "cloze"):
        raise InputError(f"unknown predictor recipe {recipe!r}; "
                         "expected surprisal:<model>, cossim:<model> or cloze")
    if kind != "cloze" and not model:
        raise InputError(f"predictor recipe {recipe!r} names no model")
    return kind, model.strip()


def default_recipes(stimuli, model_ids):
    recipes = []
    for m in model_ids:
        recipes += [f"surprisal:{m}", f"cossim:{m}"]
    if stimuli and all(s.cloze is not None for s in stimuli):
        recipes.append("cloze")
    return recipes


def _index_records(lm_records):
    if isinstance(lm_records, Mapping):
        flat = [r for recs in lm_records.values() for r in recs]
    else:
        flat = list(lm_records)
    index = {}
    for r in flat:
        key = (r.model_id, r.frame_id, r.condition)
        if key in index:
            raise InputError(f"duplicate LM record for model {r.model_id}, "
                             f"{r.frame_id}/{r.condition}")
        index[key] = r
    return index


def stimulus_predictors(stimuli, lm_records, recipes=None, base=math.e):
    """Per-stimulus predictor table keyed by ``(frame_id, condition)``.

    Recipes are ``"surprisal:<model>"``, ``"cossim:<model>"`` (which also
    yields the cosine distance) and ``"cloze"``.
    """
    index = _index_records(lm_records)
    models = sorted({k[0] for k in index})
    if recipes is None:
        recipes = default_recipes(stimuli, models)
    parsed = [_parse_recipe(r) for r in recipes]
    missing = []
    for kind, model in parsed:
        if kind == "cloze":
            continue
        for s in stimuli:
            if (model, s.frame_id, s.condition) not in index:
                missing.append((model, s.frame_id, s.condition))
    if missing:
        raise InputError(f"{len(missing)} stimuli lack LM records, e.g. {sorted(set(missing))[:5]}")
    rows = []
    for s in stimuli:
        row = {"frame_id": s.frame_id, "condition": s.condition}
        for kind, model in parsed:
            if kind == "cloze":
                if s.cloze is None:
                    raise InputError(f"cloze requested but missing for {s.frame_id}/{s.condition}")
                row["cloze"] = s.cloze
                continue
            rec = index[(model, s.frame_id, s.condition)]
            if len(rec.word_alignment) != len(s.words):
                raise InputError(
                    f"model {model} {s.frame_id}/{s.condition}: alignment has "
                    f"{len(rec.word_alignment)} words, stimulus has {len(s.words)}")
            if kind == "surprisal":
                row[f"surprisal_{model}"] = metrics.word_surprisal(rec, s.target_index, base)
            else:
                score = metrics.target_similarity(rec, s.target_index)
                row[f"cossim_{model}"] = score.similarity
                row[f"cosdist_{model}"] = score.distance
        rows.append(row)
    df = pd.DataFrame(rows)
    return df.sort_values(["frame_id", "condition"], kind="mergesort").reset_index(drop=True)


def build_analysis_table(stimuli, lm_records, trials, recipes=None, base=math.e):
    """Join trials, stimuli and LM-derived predictors into one long table.

    Rows are sorted by subject, frame, condition and electrode. Raises
    :class:`InputError` when a trial has no matching stimulus.
    """
    trials = trials.copy()
    missing_cols = [c for c in TRIAL_COLUMNS if c not in trials.columns]
    if missing_cols:
        raise InputError(f"trial table lacks columns {missing_cols}")
    keys = {s.key for s in stimuli}
    trial_keys = set(zip(trials["frame_id"], trials["condition"]))
    unmatched = sorted(trial_keys - keys)
    if unmatched:
        raise InputError(f"{len(unmatched)} trial (frame_id, condition) keys have no stimulus: "
                         f"{unmatched[:10]}")
    preds = stimulus_predictors(stimuli, lm_records, recipes, base)
    table = trials[list(TRIAL_COLUMNS)].merge(preds, on=["frame_id", "condition"], how="left",
                                              validate="many_to_one")
    order = ["amplitude", "roi", "subject", "frame_id", "electrode", "condition"]
    table = table[order + [c for c in preds.columns if c not in ("frame_id", "condition")]]
    table = table.sort_values(list(KEY_COLUMNS), kind="mergesort").reset_index(drop=True)
    return validate_table(table)


def validate_table(table, columns: Optional[Sequence[str]] = None):
    cols = list(columns) if columns is not None else list(table.columns)
    absent = [c for c in cols if c not in table.columns]
    if absent:
        raise InputError(f"analysis table lacks columns {absent}")
    nulls = [c for c in cols if table[c].isna().any()]
    if nulls:
        raise InputError(f"analysis table has missing values in {nulls}")
    if "roi" in cols:
        bad = set(table["roi"]) - set(ROIS)
        if bad:
            raise InputError(f"unknown ROI levels {sorted(bad)}")
    return table


def write_table(table, dest):
    """Write an analysis table as CSV with 9 significant digits."""
    text = table.to_csv(index=False, float_format="%.9g", lineterminator="\n")
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text, encoding="utf-8")
    elif dest is not None:
        dest.write(text)
    return text


def read_table(source):
    if isinstance(source, str) and "\n" in source:
        source = io.StringIO(source)
    try:
        df = pd.read_csv(source, dtype={c: str for c in ID_COLUMNS}, keep_default_na=False,
                         na_values=[""])
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot parse analysis table: {exc}") from None
    for c in df.columns:
        if c not in ID_COLUMNS:
            df[c] = df[c].astype(float)
    return df
