"""Dataset manifests and a generator of synthetic spectral-texture "languages".

Manifest format: UTF-8, one record per line, tab-separated ``path``,
``label``, ``duration tag``.  Relative paths resolve against the manifest's
directory.  An optional first line ``# labels: a b c`` declares the closed
label inventory; without it the inventory is the sorted set of labels used.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import DataError, ManifestError
from .features import AudioSignal, FeatureConfig, extract, read_wav, write_wav

log = logging.getLogger(__name__)

LABELS_PREFIX = "# labels:"


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    duration_tag: str

    @property
    def utterance_id(self) -> str:
        return Path(self.path).stem


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def label_id(self, label: str) -> int:
        return self.labels.index(label)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path, labels: Optional[Sequence[str]] = None, check_paths: bool = True) -> Manifest:
    """Parse a manifest; ``check_paths`` rejects records whose file does not exist."""
    path = Path(path)
    declared = list(labels) if labels is not None else None
    records, seen = [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith(LABELS_PREFIX) and declared is None:
                    declared = line[len(LABELS_PREFIX):].split()
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields "
                                    f"(path, label, duration tag), got {len(parts)}")
            rec = ManifestRecord(*parts)
            if declared is not None and rec.label not in declared:
                raise ManifestError(f"{path}:{lineno}: unknown label {rec.label!r}")
            uid = rec.utterance_id
            if uid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utterance id {uid!r} "
                                    f"(first seen on line {seen[uid]})")
            seen[uid] = lineno
            if check_paths:
                target = Path(rec.path) if Path(rec.path).is_absolute() else path.parent / rec.path
                if not target.exists():
                    raise ManifestError(f"{path}:{lineno}: file not found: {target}")
            records.append(rec)
    if declared is None:
        declared = sorted({r.label for r in records})
    return Manifest(records, declared, path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{LABELS_PREFIX} {' '.join(manifest.labels)}\n")
        for r in manifest.records:
            f.write(f"{r.path}\t{r.label}\t{r.duration_tag}\n")


def load_features(manifest: Manifest, config: Optional[FeatureConfig] = None, skipped: Optional[list] = None):
    """Extract features for every record; failures are logged and listed in ``skipped``."""
    out = []
    for rec in manifest:
        try:
            seq = extract(read_wav(manifest.resolve(rec)), config, rec.utterance_id, manifest.label_id(rec.label))
        except (DataError, OSError) as exc:
            log.warning("skipping %s: %s", rec.utterance_id, exc)
            if skipped is not None:
                skipped.append((rec.utterance_id, str(exc)))
            continue
        out.append((rec, seq))
    return out


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthLanguageSpec:
    """Generative recipe of one synthetic class.

    ``states`` holds one resonance triple (Hz) per phone-like state and
    ``bandwidths`` the matching triples of bandwidths.  Utterances step through
    the states in their listed order, one segment per ``1 / cadence_hz`` s.
    """

    name: str
    states: tuple
    bandwidths: tuple
    cadence_hz: float
    noise_floor: float = 0.01

    @property
    def resonances(self) -> tuple:
        """Every resonance frequency the class uses, sorted."""
        return tuple(sorted(f for state in self.states for f in state))


RESONANCE_STEP = 220.0
GRID_COLUMNS = 5
STATES_PER_CLASS = 3


def make_language_specs(num_classes: int, seed: int = 0, sample_rate: int = 8000) -> list[SynthLanguageSpec]:
    """Class k's first state sits on a grid: f1 = 300 + 220 (k mod 5) and
    f2 = f1 + 600 + 220 (k div 5), so any two classes differ by >= 220 Hz in f1
    or f2.  The remaining states are random draws."""
    if num_classes < 2:
        raise ValueError("need at least 2 synthetic classes")
    top = sample_rate / 2.0 - 250.0
    rows = -(-num_classes // GRID_COLUMNS)
    highest_f2 = 300.0 + RESONANCE_STEP * (GRID_COLUMNS - 1) + 600.0 + RESONANCE_STEP * (rows - 1)
    if highest_f2 > top - 500.0:
        raise ValueError(f"{num_classes} classes do not fit below {top:.0f} Hz at {sample_rate} Hz")
    rng = np.random.default_rng(seed)
    cadences = np.linspace(3.0, 8.0, num_classes)
    specs = []
    for k in range(num_classes):
        states, bws = [], []
        for j in range(STATES_PER_CLASS):
            if j == 0:
                f1 = 300.0 + RESONANCE_STEP * (k % GRID_COLUMNS)
                f2 = f1 + 600.0 + RESONANCE_STEP * (k // GRID_COLUMNS)
            else:
                f1 = rng.uniform(250.0, 1000.0)
                f2 = min(f1 + rng.uniform(500.0, 1200.0), top - 500.0)
            f3 = min(f2 + rng.uniform(500.0, 1200.0), top)
            states.append((float(f1), float(f2), float(f3)))
            bws.append(tuple(float(b) for b in rng.uniform(60.0, 120.0, size=3)))
        specs.append(SynthLanguageSpec(f"lang{k:02d}", tuple(states), tuple(bws), float(cadences[k])))
    return specs


def _resonate(excitation: np.ndarray, freqs, bws, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(excitation)
    for f, bw in zip(freqs, bws):
        f = f * (1.0 + rng.uniform(-0.02, 0.02))
        r = np.exp(-np.pi * bw / sample_rate)
        a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * f / sample_rate), r * r]
        out += lfilter([1.0 - r], a, excitation)
    return out


def synthesize(spec: SynthLanguageSpec, duration: float, rng: np.random.Generator,
               sample_rate: int = 8000) -> AudioSignal:
    """Noise shaped by the class's states in turn, each segment under a raised-sine envelope."""
    n = int(round(duration * sample_rate))
    excitation = rng.standard_normal(n)
    shaped = [_resonate(excitation, f, b, sample_rate, rng) for f, b in zip(spec.states, spec.bandwidths)]
    x = np.zeros(n)
    pos, state = 0, int(rng.integers(len(spec.states)))
    while pos < n:
        seg = max(1, int(round(sample_rate / spec.cadence_hz * rng.uniform(0.8, 1.2))))
        seg = min(seg, n - pos)
        envelope = 0.2 + 0.8 * np.sin(np.pi * (np.arange(seg) + 0.5) / seg)
        x[pos:pos + seg] = shaped[state][pos:pos + seg] * envelope
        pos += seg
        state = (state + 1) % len(spec.states)
    x /= np.max(np.abs(x)) + 1e-12
    x += spec.noise_floor * rng.standard_normal(n)
    x *= rng.uniform(0.3, 0.8) / (np.max(np.abs(x)) + 1e-12)
    return AudioSignal(x, sample_rate)


def duration_tag(seconds: float) -> str:
    return f"{int(round(seconds))}s"


def generate_synthetic(out_dir, num_classes: int, utts_per_class: int,
                       duration_range: tuple = (2.0, 10.0), seed: int = 0, language_seed: int = 0,
                       sample_rate: int = 8000, prefix: str = "utt") -> Manifest:
    """Write ``num_classes * utts_per_class`` WAV files plus ``manifest.tsv`` into ``out_dir``.

    ``language_seed`` fixes the class recipes, so train and held-out sets drawn
    with different ``seed`` values share the same classes.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    specs = make_language_specs(num_classes, language_seed, sample_rate)
    rng = np.random.default_rng(seed)
    lo, hi = duration_range
    records = []
    for k, spec in enumerate(specs):
        for i in range(utts_per_class):
            dur = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
            sig = synthesize(spec, dur, rng, sample_rate)
            rel = f"wav/{prefix}_{spec.name}_{i:04d}.wav"
            write_wav(out_dir / rel, sig)
            records.append(ManifestRecord(rel, spec.name, duration_tag(dur)))
    manifest = Manifest(records, [s.name for s in specs], out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
