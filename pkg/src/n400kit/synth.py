"""Synthetic analysis tables with known ground truth.

The generator mirrors the crossed design of a single-trial ERP study:
every subject sees every sentence frame in every condition and is recorded
at every electrode, electrodes belong to fixed scalp regions, and each
subject, frame and electrode carries a Gaussian random intercept.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, InputError
from .ingest import CONDITIONS, KEY_COLUMNS, ROIS, LMSentenceRecord, Stimulus, record_to_json
from .lmm import INTERCEPT

# summary statistics of cloze norms per condition (mean, sd)
CLOZE_NORMS = {"best": (0.458, 0.261), "related": (0.043, 0.058),
               "unrelated": (0.024, 0.037), "implausible": (0.0, 0.0)}

DEFAULT_SURPRISAL_MEANS = {"best": 5.0, "related": 8.0, "unrelated": 9.0, "implausible": 11.0}
DEFAULT_SIMILARITY_MEANS = {"best": 0.35, "related": 0.35, "unrelated": 0.3, "implausible": 0.25}


@dataclass(frozen=True)
class PredictorFamily:
    """Surprisal and cosine-similarity generator for one synthetic language model.

    Within a condition the pair is bivariate normal with correlation ``rho``.
    """

    model_id: str
    surprisal_means: dict = field(default_factory=lambda: dict(DEFAULT_SURPRISAL_MEANS))
    surprisal_sd: float = 1.2
    similarity_means: dict = field(default_factory=lambda: dict(DEFAULT_SIMILARITY_MEANS))
    similarity_sd: float = 0.08
    rho: float = 0.0

    @property
    def surprisal_column(self):
        return f"surprisal_{self.model_id}"

    @property
    def similarity_column(self):
        return f"cossim_{self.model_id}"


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 10
    n_frames: int = 50
    n_electrodes: int = 8
    intercept: float = 0.0
    roi_offsets: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    interaction_slopes: dict = field(default_factory=dict)
    random_sd: dict = field(default_factory=lambda: {"subject": 1.0, "frame_id": 0.5,
                                                     "electrode": 0.5})
    residual_sd: float = 5.0
    predictors: tuple = ()
    seed: int = 0

    def validate(self):
        for name, count in (("n_subjects", self.n_subjects), ("n_frames", self.n_frames),
                            ("n_electrodes", self.n_electrodes)):
            if count < 2:
                raise ConfigError(f"{name} must be at least 2, got {count}")
        sds = dict(self.random_sd, residual=self.residual_sd)
        for f in self.predictors:
            sds[f"{f.model_id}.surprisal"] = f.surprisal_sd
            sds[f"{f.model_id}.similarity"] = f.similarity_sd
            if not abs(f.rho) < 1:
                raise ConfigError(f"predictor family {f.model_id}: |rho| must be < 1")
        negative = [k for k, v in sds.items() if not v >= 0]
        if negative:
            raise ConfigError(f"standard deviations must be nonnegative: {negative}")
        unknown = set(self.random_sd) - {"subject", "frame_id", "electrode"}
        if unknown:
            raise ConfigError(f"random_sd names unknown grouping factors {sorted(unknown)}")
        bad_roi = (set(self.roi_offsets) | {r for d in self.interaction_slopes.values() for r in d}) - set(ROIS)
        if bad_roi:
            raise ConfigError(f"unknown ROI names {sorted(bad_roi)}")
        return self


@dataclass
class GroundTruth:
    coefficients: dict
    random_sd: dict
    residual_sd: float
    random_effects: dict
    seed: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def electrode_rois(n_electrodes):
    return {f"e{i + 1:02d}": ROIS[i % len(ROIS)] for i in range(n_electrodes)}


def _labels(prefix, n):
    width = max(2, len(str(n)))
    return [f"{prefix}{i + 1:0{width}d}" for i in range(n)]


def stimulus_values(spec, rng):
    """Per-(frame, condition) predictor draws for every family, plus cloze."""
    frames = _labels("f", spec.n_frames)
    rows = []
    draws = {}
    for fam in spec.predictors:
        chol = np.linalg.cholesky(np.array([[1.0, fam.rho], [fam.rho, 1.0]]))
        z = rng.standard_normal((spec.n_frames * len(CONDITIONS), 2)) @ chol.T
        draws[fam.model_id] = z
    cloze_z = rng.standard_normal(spec.n_frames * len(CONDITIONS))
    i = 0
    for frame in frames:
        for cond in CONDITIONS:
            row = {"frame_id": frame, "condition": cond}
            for fam in spec.predictors:
                z1, z2 = draws[fam.model_id][i]
                row[fam.surprisal_column] = fam.surprisal_means[cond] + fam.surprisal_sd * z1
                sim = fam.similarity_means[cond] + fam.similarity_sd * z2
                row[fam.similarity_column] = sim
                row[f"cosdist_{fam.model_id}"] = 1.0 - sim
            mu, sd = CLOZE_NORMS[cond]
            row["cloze"] = float(np.clip(mu + sd * cloze_z[i], 0.0, 1.0))
            rows.append(row)
            i += 1
    return pd.DataFrame(rows)


def expected_coefficients(spec, reference_roi=None):
    """Planted effects expressed in the treatment coding ``lmm`` uses.

    Covers the intercept, ROI contrasts, predictor slopes and
    predictor x ROI contrasts (the latter only for predictors listed in
    ``interaction_slopes``).
    """
    ref = reference_roi or sorted(set(electrode_rois(spec.n_electrodes).values()))[0]
    present = sorted(set(electrode_rois(spec.n_electrodes).values()))
    off = {r: spec.roi_offsets.get(r, 0.0) for r in present}
    coefs = {INTERCEPT: spec.intercept + off[ref]}
    for r in present:
        if r != ref:
            coefs[f"roi[{r}]"] = off[r] - off[ref]
    for col, slope in spec.slopes.items():
        inter = spec.interaction_slopes.get(col, {})
        coefs[col] = slope + inter.get(ref, 0.0)
    for col, inter in spec.interaction_slopes.items():
        coefs.setdefault(col, inter.get(ref, 0.0))
        for r in present:
            if r != ref:
                coefs[f"{col}:roi[{r}]"] = inter.get(r, 0.0) - inter.get(ref, 0.0)
    return coefs


def generate(spec):
    """Draw an analysis table from ``spec``.

    Returns
    -------
    table : pandas.DataFrame
        Sorted by subject, frame, condition and electrode.
    truth : GroundTruth
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    subjects = _labels("s", spec.n_subjects)
    frames = _labels("f", spec.n_frames)
    rois = electrode_rois(spec.n_electrodes)
    electrodes = list(rois)

    values = stimulus_values(spec, rng)
    effects = {}
    for factor, levels in (("subject", subjects), ("frame_id", frames), ("electrode", electrodes)):
        sd = spec.random_sd.get(factor, 0.0)
        effects[factor] = dict(zip(levels, (sd * rng.standard_normal(len(levels))).tolist()))

    S, F, C, E = spec.n_subjects, spec.n_frames, len(CONDITIONS), spec.n_electrodes
    n = S * F * C * E
    idx = np.indices((S, F, C, E)).reshape(4, -1)
    table = pd.DataFrame({
        "subject": np.array(subjects)[idx[0]],
        "frame_id": np.array(frames)[idx[1]],
        "condition": np.array(CONDITIONS)[idx[2]],
        "electrode": np.array(electrodes)[idx[3]],
    })
    table["roi"] = table["electrode"].map(rois)
    stim_row = idx[1] * C + idx[2]
    pred_cols = [c for c in values.columns if c not in ("frame_id", "condition")]
    for c in pred_cols:
        table[c] = values[c].to_numpy()[stim_row]

    fixed = np.full(n, float(spec.intercept))
    fixed += table["roi"].map(lambda r: spec.roi_offsets.get(r, 0.0)).to_numpy(dtype=float)
    for col, slope in spec.slopes.items():
        if col not in table.columns:
            raise ConfigError(f"slope given for unknown predictor {col!r}")
        fixed += slope * table[col].to_numpy()
    for col, inter in spec.interaction_slopes.items():
        if col not in table.columns:
            raise ConfigError(f"interaction given for unknown predictor {col!r}")
        fixed += table["roi"].map(lambda r: inter.get(r, 0.0)).to_numpy(dtype=float) * table[col].to_numpy()
    rand = np.zeros(n)
    for factor, eff in effects.items():
        rand += table[factor].map(eff).to_numpy(dtype=float)
    noise = spec.residual_sd * rng.standard_normal(n)
    table.insert(0, "amplitude", fixed + rand + noise)
    table = table[["amplitude", "roi", "subject", "frame_id", "electrode", "condition"] + pred_cols]
    table = table.sort_values(list(KEY_COLUMNS), kind="mergesort").reset_index(drop=True)
    truth = GroundTruth(coefficients=expected_coefficients(spec),
                        random_sd={k: float(spec.random_sd.get(k, 0.0))
                                   for k in ("subject", "frame_id", "electrode")},
                        residual_sd=float(spec.residual_sd), random_effects=effects,
                        seed=spec.seed)
    return table, truth


def fixed_part(spec, table):
    """Noise-free, random-effect-free amplitude for each row of ``table``."""
    out = np.full(len(table), float(spec.intercept))
    out += table["roi"].map(lambda r: spec.roi_offsets.get(r, 0.0)).to_numpy(dtype=float)
    for col, slope in spec.slopes.items():
        out += slope * table[col].to_numpy()
    for col, inter in spec.interaction_slopes.items():
        out += table["roi"].map(lambda r: inter.get(r, 0.0)).to_numpy(dtype=float) * table[col].to_numpy()
    return out


def make_stimuli(spec, values=None, rng=None):
    """Synthetic sentences, one per (frame, condition).

    Context length varies between 3 and 8 words; the target is the last word.
    """
    rng = rng or np.random.default_rng(spec.seed + 7919)
    frames = _labels("f", spec.n_frames)
    if values is not None:
        cloze = {(r.frame_id, r.condition): r.cloze for r in values.itertuples(index=False)}
    else:
        cloze = {}
    out = []
    for fi, frame in enumerate(frames):
        n_ctx = 3 + int(rng.integers(0, 6))
        context = [f"w{fi}x{j}" for j in range(n_ctx)]
        for cond in CONDITIONS:
            target = f"{cond[:3]}{fi}target"
            words = tuple(context + [target])
            c = cloze.get((frame, cond))
            out.append(Stimulus(frame, cond, words, n_ctx, None if c is None else float(c)))
    return out


def lm_record_for(stimulus, model_id, surprisal, similarity, dim=6, filler_logprob=-2.5,
                  split_target=True):
    """Build an LM record whose derived predictors equal the given values.

    With ``split_target`` the target word becomes two subtokens carrying half
    the surprisal each; otherwise a single token with log-probability
    ``-surprisal``. Context word ``k`` (0-based) has embedding ``(k + 1) e1`` split
    symmetrically over two subtokens when ``k`` is odd, so the context mean
    lies along ``e1``; the target embedding is
    ``similarity e1 + sqrt(1 - similarity^2) e2``.
    """
    if not -1.0 < similarity < 1.0:
        raise InputError(f"requested cosine {similarity} outside (-1, 1)")
    if not (surprisal >= 0 and math.isfinite(surprisal)):
        raise InputError(f"requested surprisal {surprisal} must be finite and >= 0")
    if dim < 4:
        raise InputError("fixture embeddings need at least 4 dimensions")
    if stimulus.target_index < 1:
        raise InputError(f"{stimulus.frame_id}/{stimulus.condition}: target has no context")
    e = np.eye(dim)
    tokens, logprobs, spans, emb = [], [], [], []
    for k, word in enumerate(stimulus.words):
        start = len(tokens)
        if k == stimulus.target_index:
            vec = similarity * e[0] + math.sqrt(1.0 - similarity * similarity) * e[1]
            if split_target:
                half = max(1, len(word) // 2)
                tokens += [word[:half], word[half:] or "##"]
                logprobs += [-surprisal / 2.0, -surprisal / 2.0]
                emb += [vec + 0.25 * e[2], vec - 0.25 * e[2]]
            else:
                tokens.append(word)
                logprobs.append(0.0 - surprisal)
                emb.append(vec)
        elif k < stimulus.target_index:
            vec = (k + 1) * e[0]
            lp = None if k == 0 else filler_logprob
            if k % 2 == 1:
                tokens += [word, "##"]
                logprobs += [lp, filler_logprob]
                emb += [vec + 0.5 * e[3], vec - 0.5 * e[3]]
            else:
                tokens.append(word)
                logprobs.append(lp)
                emb.append(vec)
        else:
            tokens.append(word)
            logprobs.append(filler_logprob)
            emb.append(e[0] + e[3])
        spans.append((start, len(tokens)))
    return LMSentenceRecord(model_id=model_id, frame_id=stimulus.frame_id,
                            condition=stimulus.condition, tokens=tuple(tokens),
                            logprobs=tuple(logprobs), word_alignment=tuple(spans),
                            embeddings=np.array(emb))


def emit_lm_fixture(spec, stimuli, values):
    """Line-delimited JSON LM output reproducing the planted predictor values.

    ``values`` is the per-stimulus table from :func:`stimulus_values` (or the
    distinct stimulus rows of a generated table).
    """
    lookup = values.set_index(["frame_id", "condition"])
    lines = []
    for fam in spec.predictors:
        for s in stimuli:
            row = lookup.loc[(s.frame_id, s.condition)]
            rec = lm_record_for(s, fam.model_id, float(row[fam.surprisal_column]),
                                float(row[fam.similarity_column]))
            lines.append(record_to_json(rec))
    return "\n".join(lines) + "\n"


def stimulus_table(table):
    """Distinct per-stimulus predictor rows of an analysis table."""
    cols = [c for c in table.columns
            if c not in ("amplitude", "roi", "subject", "electrode")]
    return (table[cols].drop_duplicates(subset=["frame_id", "condition"])
            .sort_values(["frame_id", "condition"], kind="mergesort").reset_index(drop=True))


def spec_to_dict(spec):
    d = asdict(spec)
    d["predictors"] = [asdict(p) for p in spec.predictors]
    return d


def spec_from_dict(d):
    d = dict(d)
    d["predictors"] = tuple(PredictorFamily(**p) for p in d.get("predictors", ()))
    return SynthSpec(**d)
