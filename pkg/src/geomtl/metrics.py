"""PR-AUC (average precision), relative gains, score histograms, case study."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input (e.g. no positives)."""


def rank_order(scores, stable_index=None) -> np.ndarray:
    """Indices sorted by score descending, ties by stable index ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if stable_index is None:
        stable_index = np.arange(scores.size)
    return np.lexsort((np.asarray(stable_index), -scores))


def pr_auc(scores, labels, stable_index=None) -> float:
    """Average precision: sum over positive hits of (R_k - R_{k-1}) * P_k."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC undefined: no positive examples")
    if n_pos == labels.size:
        raise UndefinedMetricError("PR-AUC undefined: no negative examples")
    ranked = np.ascontiguousarray((labels[rank_order(scores, stable_index)] != 0).astype(np.int64))
    return float(kernels.ap_ranked(ranked))


def relative_gain(pr_new: float, pr_base: float) -> float:
    """Percentage change of ``pr_new`` over ``pr_base``."""
    if pr_base <= 0:
        raise UndefinedMetricError(f"relative gain undefined for baseline PR-AUC {pr_base}")
    return 100.0 * (pr_new - pr_base) / pr_base


@dataclass
class Histogram:
    bin_edges: np.ndarray
    normalized_counts: np.ndarray

    @property
    def mean_bin_center(self) -> float:
        centers = 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])
        return float(np.dot(centers, self.normalized_counts))


def score_histogram(scores, n_bins: int = 20) -> Histogram:
    """Uniform bins over [0, 1] (last bin closed) normalized to unit mass."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("cannot histogram an empty score set")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts = kernels.hist_counts(scores, edges)
    return Histogram(edges, counts / scores.size)


def per_territory_pr_auc(scores, territory, labels) -> dict[int, float]:
    """PR-AUC per territory; territories lacking either class are skipped."""
    territory = np.asarray(territory)
    out = {}
    for t in np.unique(territory):
        rows = np.flatnonzero(territory == t)
        try:
            out[int(t)] = pr_auc(np.asarray(scores)[rows], np.asarray(labels)[rows])
        except UndefinedMetricError:
            continue
    return out


# --------------------------------------------------------------- reports

GAIN_COLUMNS = ("territory", "day", "comparison", "pr_auc_new", "pr_auc_base", "gain")
COMPARISONS = (("mtl", "baseline"), ("mtl", "baseline-upsampled"))


def gain_table(pr: dict[str, dict[int, dict[int, float]]], comparisons=COMPARISONS) -> list[dict]:
    """Relative-gain rows from ``pr[model][day][territory]``.

    One row per (territory, day, comparison) plus an ``avg`` row per
    (territory, comparison) averaging the per-day gains.
    """
    rows = []
    new0, _ = comparisons[0]
    days = sorted(pr[new0])
    territories = sorted(set().union(*(pr[m][d].keys() for m in pr for d in pr[m])))
    for new, base in comparisons:
        name = f"{new}_vs_{base}"
        for t in territories:
            gains = []
            for d in days:
                a, b = pr[new][d].get(t), pr[base][d].get(t)
                g = relative_gain(a, b) if a is not None and b is not None and b > 0 else float("nan")
                if np.isfinite(g):
                    gains.append(g)
                rows.append({"territory": t, "day": d, "comparison": name, "pr_auc_new": a,
                             "pr_auc_base": b, "gain": g})
            rows.append({"territory": t, "day": "avg", "comparison": name, "pr_auc_new": None,
                         "pr_auc_base": None, "gain": float(np.mean(gains)) if gains else float("nan")})
    return rows


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


def csv_to_rows(text: str) -> list[dict]:
    def conv(v: str):
        if v == "":
            return None
        try:
            return int(v)
        except ValueError:
            pass
        try:
            return float(v)
        except ValueError:
            return v

    reader = csv.DictReader(io.StringIO(text))
    return [{k: conv(v) for k, v in r.items()} for r in reader]


# ------------------------------------------------------------ case study

@dataclass
class TitlePick:
    territory: int
    title_id: int
    scope: str  # "local" | "global"
    positives: int


@dataclass
class CaseStudyReport:
    picks: list[TitlePick]
    pr_auc: dict[tuple[int, str], float]  # (title, model) -> title-level PR-AUC
    histograms: dict[tuple[int, str], Histogram]
    mean_scores: dict[tuple[int, str], float]
    models: tuple[str, ...]
    gains: list[dict] = field(default_factory=list)

    def delta(self, title: int, new: str = "mtl", base: str = "baseline") -> float:
        return self.mean_scores[(title, new)] - self.mean_scores[(title, base)]

    def title_rows(self) -> list[dict]:
        rows = []
        for p in self.picks:
            row = {"territory": p.territory, "title_id": p.title_id, "scope": p.scope,
                   "positives": p.positives}
            for m in self.models:
                row[f"pr_auc_{m}"] = self.pr_auc.get((p.title_id, m))
                row[f"mean_score_{m}"] = self.mean_scores[(p.title_id, m)]
            for new, base in COMPARISONS:
                a, b = self.pr_auc.get((p.title_id, new)), self.pr_auc.get((p.title_id, base))
                row[f"gain_{new}_vs_{base}"] = relative_gain(a, b) if a is not None and b else None
            row["delta_mean_mtl_vs_baseline"] = self.delta(p.title_id)
            rows.append(row)
        return rows

    def title_columns(self) -> list[str]:
        cols = ["territory", "title_id", "scope", "positives"]
        cols += [f"pr_auc_{m}" for m in self.models] + [f"mean_score_{m}" for m in self.models]
        cols += [f"gain_{n}_vs_{b}" for n, b in COMPARISONS] + ["delta_mean_mtl_vs_baseline"]
        return cols

    def histogram_rows(self) -> list[dict]:
        rows = []
        for p in self.picks:
            for m in self.models:
                h = self.histograms[(p.title_id, m)]
                for i, mass in enumerate(h.normalized_counts):
                    rows.append({"title_id": p.title_id, "model": m, "bin": i, "lo": float(h.bin_edges[i]),
                                 "hi": float(h.bin_edges[i + 1]), "mass": float(mass)})
        return rows

    def to_csv(self) -> tuple[str, str]:
        return (rows_to_csv(self.title_rows(), self.title_columns()),
                rows_to_csv(self.histogram_rows(), ("title_id", "model", "bin", "lo", "hi", "mass")))


def pick_titles(positives: dict[int, int], title_territory_scope: dict[int, str], territory: int,
                max_ratio_gap: float = 0.25, min_positives: int = 5) -> tuple[TitlePick, TitlePick]:
    """Choose one local and one global title with comparable positive counts.

    Among all (local, global) pairs whose positive counts differ by less
    than ``max_ratio_gap`` relative to the larger count, take the pair with
    the most combined positives; ties go to the lower title ids.
    """
    locs = [(c, t) for t, c in positives.items() if title_territory_scope.get(t) == "local" and c >= min_positives]
    glbs = [(c, t) for t, c in positives.items() if title_territory_scope.get(t) == "global" and c >= min_positives]
    best = None
    for cl, tl in locs:
        for cg, tg in glbs:
            if abs(cl - cg) < max_ratio_gap * max(cl, cg):
                key = (-(cl + cg), tl, tg)
                if best is None or key < best[0]:
                    best = (key, TitlePick(territory, tl, "local", cl), TitlePick(territory, tg, "global", cg))
    if best is None:
        raise ValueError(
            f"no local/global title pair with comparable positives in territory {territory}; "
            "try more test users, a higher daily_positives or a different studied territory"
        )
    return best[1], best[2]


def case_study(scorers: dict[str, callable], picks: list[TitlePick], eligible_users: dict[int, np.ndarray],
               labelled: dict[int, tuple[np.ndarray, np.ndarray]], n_bins: int = 20) -> CaseStudyReport:
    """Per-title PR-AUC, score histograms and mean scores for each model.

    ``scorers[model](users, title)`` returns propensity scores of ``title``
    for every user in ``users``. ``eligible_users[title]`` is the user set
    whose score distribution is studied; ``labelled[title]`` holds
    ``(scores_index_users, labels)`` used for the title-level PR-AUC.
    """
    models = tuple(scorers)
    prs, hists, means = {}, {}, {}
    for p in picks:
        for m in models:
            s = scorers[m](eligible_users[p.title_id], p.title_id)
            hists[(p.title_id, m)] = score_histogram(s, n_bins)
            means[(p.title_id, m)] = float(np.mean(s))
            users, labels = labelled[p.title_id]
            try:
                prs[(p.title_id, m)] = pr_auc(scorers[m](users, p.title_id), labels)
            except UndefinedMetricError:
                pass
    return CaseStudyReport(picks, prs, hists, means, models)


def histogram_svg(hist: Histogram, title: str, width: int = 360, height: int = 220) -> str:
    """Standalone SVG bar chart of a normalized histogram."""
    pad = 30
    n = hist.normalized_counts.size
    top = max(float(hist.normalized_counts.max()), 1e-12)
    bw = (width - 2 * pad) / n
    bars = []
    for i, mass in enumerate(hist.normalized_counts):
        h = (height - 2 * pad) * float(mass) / top
        x = pad + i * bw
        y = height - pad - h
        bars.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bw * 0.9:.2f}" height="{h:.2f}" fill="#4a78a8"/>')
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">\n'
        f'<text x="{pad}" y="18" font-size="12" font-family="sans-serif">{title}</text>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<text x="{pad}" y="{height - 10}" font-size="10" font-family="sans-serif">0</text>\n'
        f'<text x="{width - pad - 6}" y="{height - 10}" font-size="10" font-family="sans-serif">1</text>\n'
        + "\n".join(bars) + "\n</svg>\n"
    )
