"""Detection scoring: EER, average detection cost, score fusion, score files and reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError, FormatError, UndefinedMetricError


@dataclass
class TrialScoreSet:
    """Per-utterance detection scores (log-odds) against every target language."""

    utterance_ids: list
    labels: np.ndarray
    scores: np.ndarray
    languages: list
    durations: Optional[list] = None
    config_hash: Optional[str] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n, nl = self.scores.shape
        if len(self.utterance_ids) != n or len(self.labels) != n:
            raise AlignmentError(f"{n} score rows but {len(self.utterance_ids)} ids / {len(self.labels)} labels")
        if len(self.languages) != nl:
            raise AlignmentError(f"{nl} score columns but {len(self.languages)} language names")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if n and (self.labels.min() < 0 or self.labels.max() >= nl):
            raise ValueError(f"labels must lie in [0, {nl})")

    def __len__(self):
        return len(self.utterance_ids)

    def subset(self, mask) -> "TrialScoreSet":
        mask = np.asarray(mask, dtype=bool)
        ids = [u for u, m in zip(self.utterance_ids, mask) if m]
        durs = None if self.durations is None else [d for d, m in zip(self.durations, mask) if m]
        return TrialScoreSet(ids, self.labels[mask], self.scores[mask], list(self.languages), durs, self.config_hash)

    def target_nontarget(self) -> tuple[np.ndarray, np.ndarray]:
        """Pool every (utterance, language) trial into target and non-target scores."""
        is_target = np.zeros(self.scores.shape, dtype=bool)
        is_target[np.arange(len(self)), self.labels] = True
        return self.scores[is_target], self.scores[~is_target]


def log_odds_from_log_posteriors(log_post: np.ndarray) -> np.ndarray:
    """log(p / (1 - p)) per language, computed without forming 1 - p directly."""
    log_post = np.asarray(log_post, dtype=np.float64)
    log_post = np.minimum(log_post, -1e-300)
    with np.errstate(divide="ignore", invalid="ignore", under="ignore"):  # both branches run
        log1m = np.where(log_post > -0.693, np.log(-np.expm1(log_post)), np.log1p(-np.exp(log_post)))
    return log_post - log1m


# ---------------------------------------------------------------- EER


def interpolate_crossing(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    """Point where the swept miss and false-alarm curves meet.

    Curves are indexed by increasing threshold; miss rises from 0, false
    alarms fall to 0.  Between the last sweep point with ``miss < fa`` and the
    next one, both are interpolated linearly.
    """
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(p_miss[i])
    d0, d1 = diff[i - 1], diff[i]
    t = -d0 / (d1 - d0)
    return float(p_miss[i - 1] + t * (p_miss[i] - p_miss[i - 1]))


def eer_from_trials(target: np.ndarray, nontarget: np.ndarray) -> float:
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    if target.size == 0 or nontarget.size == 0:
        raise UndefinedMetricError(f"EER needs target and non-target trials "
                                   f"(got {target.size} and {nontarget.size})")
    thresholds = np.append(np.unique(np.concatenate([target, nontarget])), np.inf)
    miss = np.searchsorted(np.sort(target), thresholds, side="left")
    fa = nontarget.size - np.searchsorted(np.sort(nontarget), thresholds, side="left")
    return interpolate_crossing(miss / target.size, fa / nontarget.size)


def compute_eer(scores: TrialScoreSet) -> float:
    return eer_from_trials(*scores.target_nontarget())


# ---------------------------------------------------------------- Cavg


C_MISS = 1.0
C_FA = 1.0
P_TARGET = 0.5


def detection_rates(scores: TrialScoreSet, threshold: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """``p_miss[T]`` and ``p_fa[T, N]`` from hard decisions ``score >= threshold``.

    ``p_fa[T, N]`` is the fraction of language-N utterances accepted as T.
    """
    nl = len(scores.languages)
    counts = np.bincount(scores.labels, minlength=nl)
    missing = [scores.languages[i] for i in range(nl) if counts[i] == 0]
    if missing:
        raise UndefinedMetricError(f"no target trials for language(s): {', '.join(missing)}")
    accept = scores.scores >= threshold
    p_miss = np.array([1.0 - accept[scores.labels == t, t].mean() for t in range(nl)])
    p_fa = np.zeros((nl, nl))
    for n in range(nl):
        p_fa[:, n] = accept[scores.labels == n].mean(axis=0)
    np.fill_diagonal(p_fa, 0.0)
    return p_miss, p_fa


def cavg_from_rates(p_miss: np.ndarray, p_fa: np.ndarray, p_target: float = P_TARGET,
                    c_miss: float = C_MISS, c_fa: float = C_FA) -> float:
    nl = len(p_miss)
    if nl < 2:
        raise UndefinedMetricError("Cavg needs at least 2 languages")
    p_non = (1.0 - p_target) / (nl - 1)
    per_target = c_miss * p_target * p_miss + c_fa * p_non * p_fa.sum(axis=1)
    return float(per_target.sum() / nl)


def compute_cavg(scores: TrialScoreSet, threshold: float = 0.0) -> float:
    return cavg_from_rates(*detection_rates(scores, threshold))


# ---------------------------------------------------------------- fusion


def fuse_scores(sets: Sequence[TrialScoreSet], weights: Optional[Sequence[float]] = None) -> TrialScoreSet:
    """Weighted per-trial mean of aligned score sets (equal weights by default)."""
    if not sets:
        raise ValueError("nothing to fuse")
    weights = np.full(len(sets), 1.0 / len(sets)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(weights) != len(sets):
        raise ValueError(f"{len(weights)} weights for {len(sets)} score sets")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"fusion weights must sum to 1, got {weights.sum()}")
    ref = sets[0]
    for other in sets[1:]:
        if other.utterance_ids != ref.utterance_ids:
            raise AlignmentError("score sets do not list the same trials in the same order")
        if list(other.languages) != list(ref.languages):
            raise AlignmentError("score sets disagree on the language inventory")
        if not np.array_equal(other.labels, ref.labels):
            raise AlignmentError("score sets disagree on the true labels")
    if len(sets) == 1:
        fused = ref.scores.copy()
    else:
        fused = sum(w * s.scores for w, s in zip(weights, sets))
    return TrialScoreSet(list(ref.utterance_ids), ref.labels.copy(), fused, list(ref.languages),
                         None if ref.durations is None else list(ref.durations))


# ---------------------------------------------------------------- files


HASH_PREFIX = "# config_hash="


def write_scores(path, scores: TrialScoreSet) -> None:
    """Tab-separated scores; a ``# config_hash=`` line leads when the set carries one."""
    durs = scores.durations or ["-"] * len(scores)
    with open(path, "w", encoding="utf-8") as f:
        if scores.config_hash:
            f.write(f"{HASH_PREFIX}{scores.config_hash}\n")
        f.write("\t".join(["utterance", "duration", "label", *scores.languages]) + "\n")
        for uid, dur, lab, row in zip(scores.utterance_ids, durs, scores.labels, scores.scores):
            f.write("\t".join([uid, dur, scores.languages[lab], *(repr(float(v)) for v in row)]) + "\n")


def read_scores(path) -> TrialScoreSet:
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    digest = None
    if lines and lines[0].startswith(HASH_PREFIX):
        digest = lines.pop(0)[len(HASH_PREFIX):].strip()
    if not lines:
        raise FormatError(f"{path}: empty score file")
    header = lines[0].split("\t")
    if header[:3] != ["utterance", "duration", "label"]:
        raise FormatError(f"{path}: unexpected header {header[:3]}")
    languages = header[3:]
    ids, durs, labels, rows = [], [], [], []
    first = 3 if digest is not None else 2
    for lineno, line in enumerate(lines[1:], start=first):
        parts = line.split("\t")
        if len(parts) != 3 + len(languages):
            raise FormatError(f"{path}:{lineno}: expected {3 + len(languages)} fields, got {len(parts)}")
        if parts[2] not in languages:
            raise FormatError(f"{path}:{lineno}: unknown label {parts[2]!r}")
        ids.append(parts[0])
        durs.append(parts[1])
        labels.append(languages.index(parts[2]))
        rows.append([float(v) for v in parts[3:]])
    return TrialScoreSet(ids, labels, np.array(rows).reshape(len(ids), len(languages)), languages, durs, digest)


# ---------------------------------------------------------------- reports


def _duration_key(tag: str):
    digits = "".join(ch for ch in tag if ch.isdigit() or ch == ".")
    try:
        return (0, float(digits), tag)
    except ValueError:
        return (1, 0.0, tag)


def _percent(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100 * value:.2f}"


def _defined_or_none(metric, *args) -> Optional[float]:
    try:
        return metric(*args)
    except UndefinedMetricError:
        return None


@dataclass
class MetricReport:
    """Pooled metrics plus per-duration ``(cavg, eer)``; a per-duration entry is None when that
    subset lacks trials for some language (the pooled numbers are always defined)."""

    cavg: float
    eer: float
    per_duration: dict = field(default_factory=dict)
    system: str = "system"

    @property
    def cavg_percent(self) -> float:
        return 100.0 * self.cavg

    @property
    def eer_percent(self) -> float:
        return 100.0 * self.eer

    def table(self) -> str:
        """Table-1 style row: Cavg(%) and EER(%) per duration, two decimals."""
        tags = sorted(self.per_duration, key=_duration_key)
        header = ["System"] + [f"Cavg {t}" for t in tags] + ["Cavg all"] + \
                 [f"EER {t}" for t in tags] + ["EER all"]
        cells = [self.system] + [_percent(self.per_duration[t][0]) for t in tags] + \
                [f"{self.cavg_percent:.2f}"] + \
                [_percent(self.per_duration[t][1]) for t in tags] + [f"{self.eer_percent:.2f}"]
        widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
        fmt = lambda row: "  ".join(v.rjust(w) for v, w in zip(row, widths))
        return fmt(header) + "\n" + fmt(cells)

    def key_values(self) -> str:
        lines = [f"cavg={self.cavg:.6f}", f"cavg_percent={self.cavg_percent:.2f}",
                 f"eer={self.eer:.6f}", f"eer_percent={self.eer_percent:.2f}"]
        for tag in sorted(self.per_duration, key=_duration_key):
            c, e = self.per_duration[tag]
            lines += [f"cavg_percent.{tag}={_percent(c)}", f"eer_percent.{tag}={_percent(e)}"]
        return "\n".join(lines)


def report(scores: TrialScoreSet, system: str = "system", threshold: float = 0.0) -> MetricReport:
    per = {}
    if scores.durations is not None:
        for tag in sorted(set(scores.durations), key=_duration_key):
            sub = scores.subset([d == tag for d in scores.durations])
            per[tag] = (_defined_or_none(compute_cavg, sub, threshold), _defined_or_none(compute_eer, sub))
    return MetricReport(compute_cavg(scores, threshold), compute_eer(scores), per, system)
