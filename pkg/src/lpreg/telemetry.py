"""Exploration-dynamics measurements: token probes, densities, class gaps, metric rows."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

METRICS_HEADER = ("step", "eval_accuracy", "mean_entropy", "loss", "delta", "reg_ratio", "gated_count",
                  "spark_frequency", "irrelevant_low_prob_rate")


@dataclass
class TokenProbeRecord:
    step: int
    token_id: int
    sampled_prob: float
    position_entropy: float
    cls: str

    def to_json(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TokenProbeRecord":
        return cls(int(d["step"]), int(d["token_id"]), float(d["sampled_prob"]), float(d["position_entropy"]),
                   d["class"])


@dataclass
class MetricsRow:
    step: int
    eval_accuracy: float | None = None
    mean_entropy: float | None = None
    loss: float | None = None
    delta: float | None = None
    reg_ratio: float | None = None
    gated_count: int | None = None
    spark_frequency: float | None = None
    irrelevant_low_prob_rate: float | None = None

    def cells(self) -> list[str]:
        return ["" if getattr(self, k) is None else repr(getattr(self, k)) for k in METRICS_HEADER]


def token_classes(tokens: np.ndarray, designated: dict) -> np.ndarray:
    cls = np.full(tokens.shape, "other", dtype=object)
    for name in ("spark", "irrelevant"):
        ids = designated.get(name, ())
        if ids:
            cls[np.isin(tokens, ids)] = name
    return cls


def probe(tokens, sampled_probs, entropies, designated: dict, subsample_rate: float, step: int,
          rng: np.random.Generator) -> list[TokenProbeRecord]:
    """Every designated-token occurrence, plus a seeded subsample of the rest."""
    tokens = np.asarray(tokens)
    cls = token_classes(tokens, designated)
    keep = cls != "other"
    # draw for every token so the selection does not depend on the designations
    draws = rng.random(tokens.size)
    keep |= (cls == "other") & (draws < subsample_rate)
    return [TokenProbeRecord(int(step), int(tokens[i]), float(sampled_probs[i]), float(entropies[i]), str(cls[i]))
            for i in np.flatnonzero(keep)]


def density_summary(records, bins: int = 50, window: int = 100, lo: float = 0.0, hi: float = 1.0) -> dict:
    """Normalized histograms of sampled probabilities keyed by the start step of each window."""
    edges = np.linspace(lo, hi, bins + 1)
    by_window: dict[int, list[float]] = {}
    for r in records:
        by_window.setdefault((r.step // window) * window, []).append(r.sampled_prob)
    out = {}
    for start in sorted(by_window):
        counts, _ = np.histogram(np.clip(by_window[start], lo, hi), bins=edges)
        out[start] = counts / counts.sum()
    return out


def class_mean_prob_gap(records, window: tuple[float, float] = (0.0, 0.1)) -> list[dict]:
    """Per step mean sampled prob of spark vs irrelevant occurrences inside ``window``.

    Steps where either class is absent are omitted.
    """
    lo, hi = window
    sums: dict[int, dict[str, list[float]]] = {}
    for r in records:
        if r.cls in ("spark", "irrelevant") and lo <= r.sampled_prob <= hi:
            sums.setdefault(r.step, {"spark": [], "irrelevant": []})[r.cls].append(r.sampled_prob)
    rows = []
    for step in sorted(sums):
        s, i = sums[step]["spark"], sums[step]["irrelevant"]
        if s and i:
            ms, mi = float(np.mean(s)), float(np.mean(i))
            rows.append({"step": step, "spark_mean": ms, "irrelevant_mean": mi, "gap": ms - mi})
    return rows


def token_frequency_table(records, vocab_tokens, top: int = 20) -> list[tuple[str, int]]:
    """Ranked token counts (stands in for word-cloud rendering)."""
    counts: dict[int, int] = {}
    for r in records:
        counts[r.token_id] = counts.get(r.token_id, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    return [(vocab_tokens[t], c) for t, c in ranked]


# ---------------------------------------------------------------- persistence

class MetricsWriter:
    """Appends one CSV row per step, flushing as it goes."""

    def __init__(self, path, resume_from_step: int | None = None):
        self.path = Path(path)
        try:
            if resume_from_step is None:
                with open(self.path, "w", newline="") as f:
                    csv.writer(f, lineterminator="\n").writerow(METRICS_HEADER)
            else:
                truncate_metrics(self.path, resume_from_step)
        except OSError as exc:
            raise OSError(f"cannot write metrics to {self.path}: {exc.strerror}") from exc

    def write(self, row: MetricsRow):
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(row.cells())


def truncate_metrics(path, last_step: int):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_step]
    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(kept)


def read_metrics(path) -> list[MetricsRow]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for rec in reader:
            kw = {}
            for k in METRICS_HEADER:
                v = rec[k]
                if v == "":
                    kw[k] = None
                elif k in ("step", "gated_count"):
                    kw[k] = int(v)
                else:
                    kw[k] = float(v)
            out.append(MetricsRow(**kw))
    return out


def append_probes(path, records):
    with open(path, "a") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_probes(path) -> list[TokenProbeRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as f:
        return [TokenProbeRecord.from_json(json.loads(line)) for line in f if line.strip()]


def truncate_probes(path, last_step: int):
    path = Path(path)
    if not path.exists():
        return
    keep = [r for r in read_probes(path) if r.step <= last_step]
    path.write_text("")
    append_probes(path, keep)


def emit(rows, records, out_dir, plots: bool = True) -> list[Path]:
    """Write metrics.csv, probes.jsonl and (for non-empty runs) SVG figures; returns the figure paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.cells())
        (out / "metrics.csv").write_text(buf.getvalue())
        (out / "probes.jsonl").write_text("")
    except OSError as exc:
        raise OSError(f"cannot write telemetry to {out}: {exc.strerror}") from exc
    append_probes(out / "probes.jsonl", records)
    if not plots or not rows:
        return []
    from .plotting import render_all
    return render_all(out)


def smoothed(values, window: int) -> list[float]:
    """Trailing mean over up to ``window`` defined entries (None entries skipped)."""
    out, buf = [], []
    for v in values:
        if v is not None and not (isinstance(v, float) and math.isnan(v)):
            buf.append(v)
            buf = buf[-window:]
        out.append(float(np.mean(buf)) if buf else float("nan"))
    return out
