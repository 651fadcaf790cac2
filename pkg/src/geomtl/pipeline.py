"""End-to-end experiment stages writing a fixed artifact layout.

    <out>/config.json
    <out>/data/{world.json, user_embeddings.npy, title_embeddings.npy,
                train_<v>.csv, incremental_<v>.csv, test_dayNN.csv, manifest.json}
    <out>/train/<variant>/{model.ckpt, manifest.json, loss_curve.csv}
    <out>/eval/<variant>/dayNN.ckpt, <out>/eval/{pr_auc.csv, gains.csv, manifest.json}
    <out>/case_study/{titles.csv, histograms.csv, manifest.json, svg/*.svg}

with ``<v>`` in {random, upsampled}. Every stage reads only files written by
earlier stages and writes only under its own directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .towers import TowerConfig, build_model, checkpoint_load, checkpoint_save
from .trainer import Features, RunManifest, TrainConfig, evaluation_schedule, score, train
from .worldgen import (
    DataConfig,
    EmbeddingTable,
    Interactions,
    Split,
    build_datasets,
    build_world,
)

log = logging.getLogger(__name__)

VARIANTS = {
    # name -> (model kind, dataset variant)
    "baseline": ("baseline", "random"),
    "baseline-upsampled": ("baseline", "upsampled"),
    "mtl": ("mtl", "upsampled"),
}


class PipelineError(RuntimeError):
    pass


@dataclass
class ModelSection:
    hidden_dim: int = 32  # production: 512
    head_bias: bool = True


@dataclass
class EvalSection:
    n_bins: int = 20
    case_territories: int = 2
    max_ratio_gap: float = 0.25
    min_title_positives: int = 5
    affinity_margin: float = 0.5  # logit gap below the weighted norm for a global pick
    min_local_lean: float = 1.5  # logit lean towards local titles for a studied territory


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"seed", "out_dir", "world", "train", "model", "eval"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(
            seed=int(d.get("seed", 0)),
            out_dir=str(d.get("out_dir", "runs/default")),
            world=DataConfig.from_dict(d.get("world", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            model=ModelSection(**d.get("model", {})),
            eval=EvalSection(**d.get("eval", {})),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        self.world.validate()
        self.train.validate()
        if self.eval.n_bins < 2:
            raise ValueError("eval.n_bins must be >= 2")
        if not 0.0 < self.eval.max_ratio_gap <= 1.0:
            raise ValueError("eval.max_ratio_gap must be in (0, 1]")
        if self.eval.affinity_margin < 0 or self.eval.case_territories < 1:
            raise ValueError("eval.affinity_margin must be >= 0 and eval.case_territories >= 1")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "world": self.world.to_dict(),
            "train": asdict(self.train),
            "model": asdict(self.model),
            "eval": asdict(self.eval),
        }

    def tower_config(self) -> TowerConfig:
        w = self.world
        return TowerConfig(w.user_dim, w.title_dim, self.model.hidden_dim, w.n_groups, self.model.head_bias)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": self.seed})


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Layout:
    def __init__(self, out: Path):
        self.out = Path(out)
        self.data = self.out / "data"
        self.train = self.out / "train"
        self.eval = self.out / "eval"
        self.case = self.out / "case_study"

    def test_file(self, day: int) -> Path:
        return self.data / f"test_day{day:02d}.csv"


# ---------------------------------------------------------------- gen-data

def _world_summary(world) -> dict:
    c = world.config
    return {
        "seed": world.seed,
        "volume": world.volume.tolist(),
        "is_major": world.is_major.tolist(),
        "group_map": world.group_map.tolist(),
        "territory_bias": world.territory_bias.tolist(),
        "title_is_global": world.title_is_global.tolist(),
        "title_scope": [np.flatnonzero(row).tolist() for row in world.title_scope],
        "global_pop": world.global_pop.tolist(),
        "local_pop": [[None if np.isnan(v) else float(v) for v in row] for row in world.local_pop],
        "positive_targets": world.positive_targets().tolist(),
        "train_days": list(c.train_day_range),
        "test_days": list(c.test_day_range),
    }


def gen_data(cfg: ExperimentConfig) -> dict:
    lay = Layout(cfg.out_dir)
    world = build_world(cfg.world, cfg.seed)
    bundle = build_datasets(world, cfg.seed)
    files: dict[str, Path] = {}
    meta = {"seed": cfg.seed, "world": cfg.world.to_dict()}
    files["world.json"] = _write(lay.data / "world.json", _json(_world_summary(world)))

    ids = np.unique(np.concatenate([bundle.users_random.all_ids, bundle.users_test.all_ids]))
    lay.data.mkdir(parents=True, exist_ok=True)
    EmbeddingTable(ids, world.user_embeddings[ids]).save(lay.data / "user_embeddings.npy")
    EmbeddingTable(np.arange(cfg.world.n_titles), world.title_embeddings).save(lay.data / "title_embeddings.npy")
    files["user_embeddings.npy"] = lay.data / "user_embeddings.npy"
    files["title_embeddings.npy"] = lay.data / "title_embeddings.npy"

    counts = {}
    for variant in ("random", "upsampled"):
        split = bundle.variant(variant)
        for name, inter in ((f"train_{variant}.csv", split.train),
                            (f"incremental_{variant}.csv", Interactions.concat(split.incremental.values()))):
            m = {**meta, "file": name, "rows": len(inter), "positives": int(inter.label.sum())}
            inter.save(lay.data / name, m)
            files[name] = lay.data / name
            counts[name] = len(inter)
    for day, inter in bundle.random_split.tests.items():
        name = lay.test_file(day).name
        inter.save(lay.test_file(day), {**meta, "file": name, "day": day, "rows": len(inter),
                                        "positives": int(inter.label.sum())})
        files[name] = lay.test_file(day)
        counts[name] = len(inter)

    hashes = {k: _sha256(p) for k, p in sorted(files.items())}
    manifest = {
        "seed": cfg.seed,
        "config": cfg.world.to_dict(),
        "files": hashes,
        "counts": counts,
        "total_rows": int(sum(counts.values())),
        "users": {"random": int(bundle.users_random.random_ids.size),
                  "active": int(bundle.users_random.active_ids.size),
                  "test": int(bundle.users_test.random_ids.size)},
        "dataset_id": hashlib.sha256(_json(hashes).encode()).hexdigest()[:16],
    }
    _write(lay.data / "manifest.json", _json(manifest))
    _write(lay.out / "config.json", _json(cfg.to_dict()))
    log.info("gen-data: %d rows across %d files", manifest["total_rows"], len(counts))
    return manifest


# ------------------------------------------------------------------- train

def _load_data_manifest(lay: Layout) -> dict:
    path = lay.data / "manifest.json"
    if not path.exists():
        raise PipelineError(f"dataset not found: {path} (run gen-data first)")
    return json.loads(path.read_text())


def _features(lay: Layout) -> Features:
    world = json.loads((lay.data / "world.json").read_text())
    return Features(
        EmbeddingTable.load(lay.data / "user_embeddings.npy"),
        EmbeddingTable.load(lay.data / "title_embeddings.npy"),
        np.asarray(world["group_map"], dtype=np.int64),
    )


def train_variant(cfg: ExperimentConfig, variant: str) -> RunManifest:
    if variant not in VARIANTS:
        raise ValueError(f"unknown model {variant!r}; choose from {', '.join(VARIANTS)}")
    lay = Layout(cfg.out_dir)
    dman = _load_data_manifest(lay)
    kind, data_variant = VARIANTS[variant]
    data, _ = Interactions.load(lay.data / f"train_{data_variant}.csv")
    feats = _features(lay)
    tcfg = cfg.train_config()
    model = build_model(kind, cfg.tower_config(), seed=cfg.seed)
    model, man = train(model, data, feats, tcfg, variant=variant, dataset_id=dman["dataset_id"])
    man.config = {**man.config, "model": asdict(cfg.tower_config()), "dataset_variant": data_variant,
                  "train_file": f"train_{data_variant}.csv"}
    if kind == "mtl":
        gm = feats.group_map.tolist()
        man.config["num_groups"] = cfg.world.n_groups
        man.config["group_map_sha256"] = hashlib.sha256(json.dumps(gm).encode()).hexdigest()
    out = lay.train / variant
    ckpt = _write(out / "model.ckpt", checkpoint_save(model))
    man.stages[0]["checkpoint"] = str(ckpt.relative_to(lay.out))
    _write(out / "manifest.json", _json(man.to_dict()))
    _write(out / "loss_curve.csv", man.loss_csv())
    return man


# -------------------------------------------------------------------- eval

def _load_checkpoint(lay: Layout, variant: str):
    path = lay.train / variant / "model.ckpt"
    if not path.exists():
        raise PipelineError(f"missing checkpoint for variant {variant!r}: {path}")
    man = json.loads((lay.train / variant / "manifest.json").read_text())
    return checkpoint_load(path.read_bytes()), man


def _manifest_from_dict(d: dict) -> RunManifest:
    return RunManifest(d["variant"], d["model_kind"], d["dataset_id"], d["config"],
                       [dict(s) for s in d["stages"]], [])


def evaluate(cfg: ExperimentConfig) -> list[dict]:
    lay = Layout(cfg.out_dir)
    _load_data_manifest(lay)
    feats = _features(lay)
    world = json.loads((lay.data / "world.json").read_text())
    tcfg = cfg.train_config()
    loaded = {v: _load_checkpoint(lay, v) for v in VARIANTS}
    tests = {d: Interactions.load(lay.test_file(d))[0] for d in world["test_days"]}
    pr: dict[str, dict[int, dict[int, float]]] = {}
    pr_rows = []
    eval_manifest = {}
    for variant, (model, man_d) in loaded.items():
        _, data_variant = VARIANTS[variant]
        incr, _ = Interactions.load(lay.data / f"incremental_{data_variant}.csv")
        split = Split(Interactions.empty(), tests, {d: incr.select(incr.day == d) for d in world["test_days"]})
        man = _manifest_from_dict(man_d)
        pr[variant] = {}
        for day, m, seen in evaluation_schedule(model, split, feats, tcfg, man):
            ckpt = _write(lay.eval / variant / f"day{day:02d}.ckpt", checkpoint_save(m))
            man.stages[-1]["checkpoint"] = str(ckpt.relative_to(lay.out))
            s = score(m, tests[day], feats)
            pr[variant][day] = metrics.per_territory_pr_auc(s, tests[day].territory, tests[day].label)
            for t, v in sorted(pr[variant][day].items()):
                pr_rows.append({"territory": t, "day": day, "model": variant, "pr_auc": v})
        eval_manifest[variant] = {"stages": man.stages,
                                  "incremental_loss": [list(r) for r in man.loss_curve]}
    gains = metrics.gain_table(pr)
    _write(lay.eval / "pr_auc.csv", metrics.rows_to_csv(pr_rows, ("territory", "day", "model", "pr_auc")))
    _write(lay.eval / "gains.csv", metrics.rows_to_csv(gains, metrics.GAIN_COLUMNS))
    _write(lay.eval / "manifest.json", _json(eval_manifest))
    return gains


# -------------------------------------------------------------- case study

def _out_of_affinity(local_pop_row: list, territory: int, volume, margin: float = 0.0) -> bool:
    # less popular here, by at least ``margin``, than its viewing-volume
    # weighted average over the territories that offer it
    idx = [k for k, v in enumerate(local_pop_row) if v is not None]
    if local_pop_row[territory] is None:
        return False
    ref = np.average([local_pop_row[k] for k in idx], weights=[volume[k] for k in idx])
    return local_pop_row[territory] < ref - margin


def _local_leaning(world: dict) -> dict[int, float]:
    """Margin by which each territory's home-grown titles beat the volume-weighted norm (positive only)."""
    T = len(world["volume"])
    own = np.full(T, np.nan)
    for t in range(T):
        vals = [row[t] for j, row in enumerate(world["local_pop"])
                if not world["title_is_global"][j] and row[t] is not None]
        if vals:
            own[t] = np.mean(vals)
    ok = ~np.isnan(own)
    ref = np.average(own[ok], weights=np.asarray(world["volume"])[ok])
    return {t: float(own[t] - ref) for t in range(T) if ok[t] and own[t] > ref}


def case_study(cfg: ExperimentConfig) -> metrics.CaseStudyReport:
    """Score-distribution study of local vs global titles per studied territory.

    Studied territories are those leaning towards home-grown content (their
    local titles beat the volume-weighted norm by ``eval.min_local_lean``),
    visited from the strongest lean down. In each, one local title and one global
    title for which the territory is out-of-affinity (the title is less
    popular there, by ``eval.affinity_margin``, than its volume-weighted
    average over the territories it is offered in) are paired by comparable
    positive counts in the upsampled training set. Eligible users are the
    territory's test users.
    """
    lay = Layout(cfg.out_dir)
    feats = _features(lay)
    world = json.loads((lay.data / "world.json").read_text())
    days = world["test_days"]
    last = days[-1]
    models = {}
    for variant in VARIANTS:
        path = lay.eval / variant / f"day{last:02d}.ckpt"
        if not path.exists():
            raise PipelineError(f"missing evaluated checkpoint for {variant!r}: {path} (run eval first)")
        models[variant] = checkpoint_load(path.read_bytes())
        models[variant].eval()
    test = Interactions.concat(Interactions.load(lay.test_file(d))[0] for d in days)
    scope_sets = [set(s) for s in world["title_scope"]]
    group_map = np.asarray(world["group_map"])

    # "comparable" is judged on the positive examples the models learn from
    train_up, _ = Interactions.load(lay.data / "train_upsampled.csv")
    pos = train_up.positives()
    leaning = _local_leaning(world)
    studied = {t for t, lean in leaning.items() if lean >= cfg.eval.min_local_lean}
    terr_order = sorted(set(test.territory.tolist()) & studied, key=lambda t: (-leaning[t], t))
    picks = []
    for t in terr_order:
        if len(picks) >= 2 * cfg.eval.case_territories:
            break
        counts = {}
        rows_t = pos.select(pos.territory == t)
        for j, c in zip(*np.unique(rows_t.title_id, return_counts=True)):
            counts[int(j)] = int(c)
        kinds = {}
        used = {p.title_id for p in picks}  # each title is studied once
        for j in counts:
            if j in used:
                continue
            if not world["title_is_global"][j] and scope_sets[j] == {t}:
                kinds[j] = "local"
            elif world["title_is_global"][j] and _out_of_affinity(world["local_pop"][j], t, world["volume"],
                                                                      cfg.eval.affinity_margin):
                kinds[j] = "global"
        try:
            picks.extend(metrics.pick_titles(counts, kinds, t, cfg.eval.max_ratio_gap, cfg.eval.min_title_positives))
        except ValueError:
            continue
    if not picks:
        raise PipelineError(
            f"case study: none of the {len(terr_order)} local-leaning territories has a local/global title "
            "pair with comparable positives; raise daily_positives or n_active_upsample, or relax "
            "eval.max_ratio_gap, eval.affinity_margin or eval.min_local_lean"
        )

    eligible, labelled = {}, {}
    for p in picks:
        eligible[p.title_id] = np.unique(test.user_id[test.territory == p.territory])
        rows = (test.territory == p.territory) & (test.title_id == p.title_id)
        labelled[p.title_id] = (test.user_id[rows], test.label[rows])
    user_terr = {}
    for u, t in zip(test.user_id.tolist(), test.territory.tolist()):
        user_terr[u] = t

    def scorer_for(model):
        def f(users, title):
            users = np.asarray(users)
            terr = np.array([user_terr[int(u)] for u in users], dtype=np.int64)
            inter = Interactions(users, np.full(users.size, title), terr, np.zeros(users.size), np.zeros(users.size))
            return score(model, inter, feats)
        return f

    report = metrics.case_study({v: scorer_for(m) for v, m in models.items()}, picks, eligible, labelled,
                                cfg.eval.n_bins)
    titles_csv, hist_csv = report.to_csv()
    _write(lay.case / "titles.csv", titles_csv)
    _write(lay.case / "histograms.csv", hist_csv)
    for p in picks:
        for v in models:
            svg = metrics.histogram_svg(report.histograms[(p.title_id, v)],
                                        f"{p.scope} title {p.title_id} (T{p.territory}) - {v}")
            _write(lay.case / "svg" / f"title{p.title_id:04d}_{v}.svg", svg)
    _write(lay.case / "manifest.json", _json({
        "picks": [asdict(p) for p in picks],
        "models": list(models),
        "group_of_territory": {str(p.territory): int(group_map[p.territory]) for p in picks},
    }))
    return report


def run_all(cfg: ExperimentConfig) -> None:
    gen_data(cfg)
    for v in VARIANTS:
        train_variant(cfg, v)
    evaluate(cfg)
    case_study(cfg)
