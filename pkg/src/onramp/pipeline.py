"""Staged prediction pipeline: ingest, scenes, pretrain, fit, forecast,
classify-train, evaluate and report.

Every stage reads its inputs from and writes its outputs to one bundle
directory, so stages can run one at a time from the command line.  All
randomness is derived from the top-level seed and a stage/entity name.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import platform
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
import yaml

from . import __version__
from .carfollow import FAMILIES, FitConfig, fit_window, params_from_record
from .evaluate import ClassificationScore, score_forecast
from .features import FEATURE_NAMES, build_training_sets
from .forest import HORIZONS, KINDS, Forest, ForestConfig, importance_report, train_forest
from .ingest import Schema, ingest_file, read_tracks, write_tracks
from .kinematics import Track, VehicleState, differentiate_kinematics
from .lstm import INPUT_STEPS, LstmNetwork, TrainConfig, make_windows, pretrain_neighbor, train
from .rollout import RolloutConfig, actual_leader, forecast, select_nearest_adjacent_leader
from .scenes import (ADJACENT_ROLES, NeighborRole, Scene, SceneGeometry, TrackIndex,
                     extract_scenes, read_scene_archive, write_scene_archive)
from .synth import generate_synthetic_corpus, random_scenario

logger = logging.getLogger(__name__)

STAGES = ("ingest", "scenes", "pretrain", "fit", "forecast", "classify-train", "evaluate", "report")
LANE_MODELS = ("ramp", "adjacent")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {
        "source": "synthetic",  # or "files"
        "files": {},  # window number -> path
        "schema": "ngsim",  # "ngsim", "canonical" or a mapping for Schema.from_dict
        "synthetic": {"n_ramp": 30, "n_target": 40, "noise": 0.0},
    },
    "split": {"train": [1, 3], "test": [2]},
    "geometry": {},
    "ingest": {"native_dt": 0.1, "target_dt": 0.2, "sg_window": 11, "sg_order": 3},
    "scenes": {"window_len": 19.0, "samples_per_vehicle": 2},
    "lstm": {"hidden": 100, "layers": 4, "epochs": 100, "batch_size": 64,
             "learning_rate": 1e-3, "final_learning_rate": None, "huber_delta": 1.0,
             "clip_norm": 5.0, "max_windows": None},
    "cf": {"families": list(FAMILIES), "n_starts": 16, "maxiter": 150},
    "rollout": {"t_max": 15.0},
    "forest": {"n_trees": 100, "max_depth": 12, "feature_subset_size": 7, "min_samples_leaf": 2,
               "kinds": list(KINDS), "horizons": list(HORIZONS)},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def derive_seed(root: int, *names) -> int:
    """Stable 32-bit seed for a named stage or entity."""
    keys = [int(root)] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(keys).generate_state(1)[0])


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    doc = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        base = Path(path).resolve().parent
        files = doc.get("data", {}).get("files", {})
        for k, p in list(files.items()):
            files[k] = str((base / p).resolve()) if not Path(p).is_absolute() else p
    return _merge(_merge(DEFAULT_CONFIG, doc), overrides or {})


@dataclass
class Bundle:
    """Paths of the artifacts inside one output directory."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def tracks(self, w) -> Path:
        return self.path("tracks", f"window{w}.csv")

    def scenes(self, w) -> Path:
        return self.path("scenes", f"window{w}.jsonl")

    def lstm(self, lane) -> Path:
        return self.path("models", f"lstm_{lane}.npz")

    def forest(self, kind, t) -> Path:
        return self.path("forests", f"{kind}_t{int(t):02d}.json")


# -- helpers -------------------------------------------------------------------

def _geometry(cfg) -> SceneGeometry:
    return SceneGeometry.from_dict(cfg["geometry"]) if cfg["geometry"] else SceneGeometry()


def _windows(cfg) -> list[int]:
    return sorted({int(w) for w in cfg["split"]["train"] + cfg["split"]["test"]})


def _schema(cfg) -> Schema:
    s = cfg["data"]["schema"]
    if isinstance(s, dict):
        return Schema.from_dict(s)
    return {"ngsim": Schema.ngsim, "canonical": Schema.canonical}[s]()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _load_tracks(bundle: Bundle, cfg) -> dict[int, list[Track]]:
    dt = cfg["ingest"]["target_dt"]
    out = {}
    for w in _windows(cfg):
        p = bundle.tracks(w)
        if not p.exists():
            raise FileNotFoundError(f"missing {p}; run the ingest stage first")
        out[w] = read_tracks(p, dt)
    return out


def _load_registry(bundle: Bundle, cfg) -> dict:
    reg = {}
    for kind in cfg["forest"]["kinds"]:
        for t in cfg["forest"]["horizons"]:
            p = bundle.forest(kind, t)
            if p.exists():
                reg[(kind, int(t))] = Forest.load(p)
    return reg


# -- stages ----------------------------------------------------------------------

def stage_ingest(cfg, bundle: Bundle) -> dict:
    ing = cfg["ingest"]
    counts = {}
    for w in _windows(cfg):
        if cfg["data"]["source"] == "synthetic":
            syn = cfg["data"]["synthetic"]
            scenario = random_scenario(derive_seed(cfg["seed"], "synthetic", w), syn["n_ramp"],
                                       syn["n_target"], _geometry(cfg), noise=syn["noise"])
            raw = bundle.path("raw", f"window{w}.csv")
            generate_synthetic_corpus(scenario).write(raw)
            schema = Schema.canonical()
        else:
            files = {int(k): v for k, v in cfg["data"]["files"].items()}
            if w not in files:
                raise FileNotFoundError(f"no input file configured for window {w}")
            raw, schema = files[w], _schema(cfg)
        tracks, info = ingest_file(raw, schema, ing["native_dt"], ing["target_dt"],
                                   ing["sg_window"], ing["sg_order"])
        write_tracks(tracks, bundle.tracks(w))
        counts[f"window{w}"] = info
    return counts


def stage_scenes(cfg, bundle: Bundle) -> dict:
    tracks = _load_tracks(bundle, cfg)
    g = _geometry(cfg)
    counts = {}
    for w in cfg["split"]["test"]:
        scenes, skipped = extract_scenes(tracks[w], g, cfg["scenes"]["window_len"],
                                         cfg["scenes"]["samples_per_vehicle"],
                                         derive_seed(cfg["seed"], "scenes", w))
        write_scene_archive(scenes, bundle.scenes(w))
        counts[f"window{w}"] = {"scenes": len(scenes), "skipped_short": skipped}
    return counts


def lane_sequences(tracks, geometry: SceneGeometry, lane_model: str) -> list[np.ndarray]:
    """Contiguous position runs on the ramp lane or in the adjacent lane's
    influence interval."""
    lane = geometry.ramp_lane if lane_model == "ramp" else geometry.target_lane
    lo, hi = geometry.influence
    out = []
    for tr in tracks:
        mask = tr.lane_ids == lane
        if lane_model == "adjacent":
            mask &= (tr.x >= lo) & (tr.x <= hi)
        edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
        for s, e in zip(edges[::2], edges[1::2]):
            if e - s > INPUT_STEPS:
                out.append(tr.x[s:e].copy())
    return out


def stage_pretrain(cfg, bundle: Bundle) -> dict:
    tracks = _load_tracks(bundle, cfg)
    g = _geometry(cfg)
    lc = cfg["lstm"]
    counts = {}
    for lane in LANE_MODELS:
        seqs = [s for w in cfg["split"]["train"] for s in lane_sequences(tracks[w], g, lane)]
        net = LstmNetwork.initialize(lc["hidden"], lc["layers"], derive_seed(cfg["seed"], "lstm-init", lane),
                                     lane=lane)
        windows = make_windows(seqs, net)
        if not windows:
            raise ValueError(f"no {lane} training windows")
        if lc["max_windows"] and len(windows) > lc["max_windows"]:
            rng = np.random.default_rng(derive_seed(cfg["seed"], "lstm-subsample", lane))
            keep = np.sort(rng.choice(len(windows), lc["max_windows"], replace=False))
            windows = [windows[i] for i in keep]
        tcfg = TrainConfig(learning_rate=lc["learning_rate"], batch_size=lc["batch_size"],
                           epochs=lc["epochs"], huber_delta=lc["huber_delta"], clip_norm=lc["clip_norm"],
                           seed=derive_seed(cfg["seed"], "lstm-train", lane),
                           final_learning_rate=lc["final_learning_rate"])
        net, hist = train(net, windows, tcfg)
        net.meta["seed"] = tcfg.seed
        net.save(bundle.lstm(lane))
        counts[lane] = {"sequences": len(seqs), "windows": len(windows), "final_loss": hist[-1]}
    return counts


def _scenes(bundle: Bundle, cfg, tracks) -> list[tuple[int, Scene]]:
    out = []
    for w in cfg["split"]["test"]:
        index = TrackIndex(tracks[w])
        out.extend((w, sc) for sc in read_scene_archive(bundle.scenes(w), index))
    return out


def fit_inputs(scene: Scene) -> tuple[list[VehicleState], list[VehicleState]]:
    """Central states and actual-leader states over the 20 input steps."""
    egos, leaders = [], []
    x_end = scene.geometry.x_end
    for k in range(scene.anchor + 1):
        ego = scene.central.state(k)
        adj = {r: scene.neighbors[r].state(k) for r in ADJACENT_ROLES}
        _, nearest = select_nearest_adjacent_leader(ego.x, adj)
        egos.append(ego)
        leaders.append(actual_leader(scene.neighbors[NeighborRole.L].state(k), nearest, x_end))
    return egos, leaders


FIT_COLUMNS = ["window", "scene_id", "family", "p_0", "p_1", "p_2", "p_3", "p_4", "p_5",
               "mse", "converged", "iterations"]


def stage_fit(cfg, bundle: Bundle) -> dict:
    tracks = _load_tracks(bundle, cfg)
    fit_cfg = FitConfig(n_starts=cfg["cf"]["n_starts"], maxiter=cfg["cf"]["maxiter"],
                        seed=derive_seed(cfg["seed"], "cf-fit"))
    rows = []
    for w, sc in _scenes(bundle, cfg, tracks):
        egos, leaders = fit_inputs(sc)
        for fam in cfg["cf"]["families"]:
            rec = fit_window(fam, egos, leaders, fit_cfg).to_record()
            names = [k for k in rec if k.startswith("p_")]
            row = {"window": w, "scene_id": sc.scene_id, "family": fam, "mse": rec["mse"],
                   "converged": rec["converged"], "iterations": rec["iterations"]}
            row.update({f"p_{i}": rec[n] for i, n in enumerate(names)})
            rows.append(row)
    write_rows(bundle.path("fits.csv"), rows, FIT_COLUMNS)
    return {"fits": len(rows)}


def _fit_from_row(row) -> "object":
    from .carfollow import param_names
    fam = row["family"]
    rec = {"family": fam, "mse": row["mse"], "converged": row["converged"],
           "iterations": row["iterations"]}
    rec.update({f"p_{n}": row[f"p_{i}"] for i, n in enumerate(param_names(fam))})
    return params_from_record(rec)


def neighbor_tables(scenes: list[Scene], nets: dict[str, LstmNetwork], n_steps: int
                    ) -> list[dict[NeighborRole, np.ndarray]]:
    """Pre-trained ``(x, v, a)`` tables for each scene's leaders and adjacent
    neighbors; row 0 is the anchor, row k the prediction k steps later.

    Real neighbors are rolled forward by the model of the lane they occupy
    at the anchor; virtual ones keep their constant state.
    """
    requests = {lane: [] for lane in LANE_MODELS}
    tables = [dict() for _ in scenes]
    roles = (NeighborRole.L, *ADJACENT_ROLES)
    for i, sc in enumerate(scenes):
        a = sc.anchor
        for role in roles:
            nb = sc.neighbors[role]
            if not nb.real:
                s = nb.state(a)
                tables[i][role] = np.tile([s.x, s.v, s.a], (n_steps, 1))
                continue
            lane = "ramp" if int(nb.track.lane_ids[a]) == sc.geometry.ramp_lane else "adjacent"
            requests[lane].append((i, role, nb.track.x[a - INPUT_STEPS + 1:a + 1]))
    for lane, reqs in requests.items():
        if not reqs:
            continue
        init = np.array([r[2] for r in reqs])
        pred = pretrain_neighbor(nets[lane], init, n_steps, lane=lane)
        for (i, role, hist), p in zip(reqs, pred):
            seq = np.concatenate([hist, p])
            v, acc = differentiate_kinematics(seq, scenes[i].geometry.dt)
            k0 = INPUT_STEPS - 1
            tables[i][role] = np.column_stack([seq[k0:k0 + n_steps], v[k0:k0 + n_steps],
                                               acc[k0:k0 + n_steps]])
    return tables


FORECAST_COLUMNS = ["window", "scene_id", "family", "step", "t", "x_hat", "v_hat", "a_hat",
                    "leader_role", "flags", "truth_x"]


def stage_forecast(cfg, bundle: Bundle) -> dict:
    tracks = _load_tracks(bundle, cfg)
    pairs = _scenes(bundle, cfg, tracks)
    nets = {lane: LstmNetwork.load(bundle.lstm(lane)) for lane in LANE_MODELS}
    fits = {(r["scene_id"], r["family"]): _fit_from_row(r) for r in read_rows(bundle.path("fits.csv"))}
    g = _geometry(cfg)
    t_max = cfg["rollout"]["t_max"]
    n = int(round(t_max / g.dt))
    scenes = [sc for _, sc in pairs]
    tables = neighbor_tables(scenes, nets, n)
    rows = []
    for (w, sc), tab in zip(pairs, tables):
        a = sc.anchor
        truth = sc.central.x[a + 1:a + 1 + n]
        initial = sc.central.state(a)
        adj = {r: tab[r] for r in ADJACENT_ROLES}
        for fam in cfg["cf"]["families"]:
            fitted = fits[(sc.scene_id, fam)]
            rc = RolloutConfig.for_params(fitted, g.dt, t_max)
            res = forecast(initial, tab[NeighborRole.L], adj, sc.geometry.x_end, rc,
                           truth if truth.size == n else None)
            for k in range(n):
                rows.append({"window": w, "scene_id": sc.scene_id, "family": fam, "step": k + 1,
                             "t": round(float(res.t[k]), 9), "x_hat": res.x[k], "v_hat": res.v[k],
                             "a_hat": res.a[k], "leader_role": res.leader_role[k],
                             "flags": res.flags[k].code(),
                             "truth_x": float(truth[k]) if k < truth.size else None})
    write_rows(bundle.path("forecast_rows.csv"), rows, FORECAST_COLUMNS)
    return {"forecast_scenes": len(pairs), "rows": len(rows)}


def _sets_for(cfg, tracks, windows, role: str) -> dict:
    """``(kind, t) -> (X, y, meta rows)`` pooled over ``windows``."""
    g = _geometry(cfg)
    out = {}
    caches = {w: {} for w in windows}
    indexes = {w: TrackIndex(tracks[w]) for w in windows}
    for kind in cfg["forest"]["kinds"]:
        for t in cfg["forest"]["horizons"]:
            Xs, ys, meta = [], [], []
            for w in windows:
                try:
                    ts = build_training_sets(tracks[w], indexes[w], g, kind, int(t),
                                             seed=derive_seed(cfg["seed"], "anchors", role, w),
                                             cache=caches[w])
                except ValueError as exc:
                    logger.info("%s", exc)
                    continue
                Xs.append(ts.X)
                ys.append(ts.y)
                meta.extend({"window": w, "vehicle_id": int(v), "step": int(s)}
                            for v, s in zip(ts.vehicle_ids, ts.steps))
            if Xs:
                out[(kind, int(t))] = (np.vstack(Xs), np.concatenate(ys), meta)
    return out


def stage_classify_train(cfg, bundle: Bundle) -> dict:
    tracks = _load_tracks(bundle, cfg)
    fc = cfg["forest"]
    sets = _sets_for(cfg, tracks, cfg["split"]["train"], "train")
    counts = {}
    for (kind, t), (X, y, _) in sorted(sets.items()):
        if (y == 1).all() or (y == 0).all():
            continue
        fcfg = ForestConfig(fc["n_trees"], fc["max_depth"], fc["feature_subset_size"],
                            fc["min_samples_leaf"], derive_seed(cfg["seed"], "forest", kind, t))
        forest = train_forest(X, y, kind, t, fcfg)
        forest.save(bundle.forest(kind, t))
        counts[f"{kind}_t{t:02d}"] = {"n_train": int(len(y)), "oob_accuracy": forest.oob_accuracy}
    return {"forests": len(counts), "detail": counts}


CLASSIFICATION_ROW_COLUMNS = ["kind", "t", "window", "vehicle_id", "step", "label", "prob", "pred"]


def stage_evaluate(cfg, bundle: Bundle) -> dict:
    tracks = _load_tracks(bundle, cfg)
    registry = _load_registry(bundle, cfg)
    sets = _sets_for(cfg, tracks, cfg["split"]["test"], "test")
    rows = []
    for (kind, t), forest in sorted(registry.items()):
        if (kind, t) not in sets:
            continue
        X, y, meta = sets[(kind, t)]
        prob = forest.predict_proba(X)
        for m, label, p in zip(meta, y, prob):
            rows.append({"kind": kind, "t": t, **m, "label": int(label), "prob": float(p),
                         "pred": int(p >= 0.5)})
    write_rows(bundle.path("classification_rows.csv"), rows, CLASSIFICATION_ROW_COLUMNS)
    imp_rows, group_rows = [], []
    for (kind, t), forest in sorted(registry.items()):
        imp_rows.extend({"kind": kind, "t": t, "feature": name, "score": float(s)}
                        for name, s in zip(FEATURE_NAMES, forest.importances))
        for grouping, table in importance_report(forest).items():
            group_rows.extend({"kind": kind, "t": t, "grouping": grouping, "group": k, "score": v}
                              for k, v in table.items())
    write_rows(bundle.path("importance_rows.csv"), imp_rows, ["kind", "t", "feature", "score"])
    write_rows(bundle.path("metrics", "importance_groups.csv"), group_rows,
               ["kind", "t", "grouping", "group", "score"])
    return rescore(bundle.root)


def rescore(root) -> dict:
    """Recompute every metric file from the stored per-scene/per-sample rows."""
    bundle = Bundle(root)
    summary = {}
    fits_path = bundle.root / "fits.csv"
    if fits_path.exists():
        by_fam = {}
        for r in read_rows(fits_path):
            by_fam.setdefault(r["family"], []).append(float(r["mse"]))
        rows = [{"family": f, "n": len(v), "mse_mean": float(np.mean(v)), "mse_median": float(np.median(v))}
                for f, v in sorted(by_fam.items())]
        write_rows(bundle.path("metrics", "cf_fit.csv"), rows, ["family", "n", "mse_mean", "mse_median"])
        summary["cf_fit"] = rows
    fc_path = bundle.root / "forecast_rows.csv"
    if fc_path.exists():
        per = {}
        for r in read_rows(fc_path):
            key = (r["family"], r["window"], r["scene_id"])
            per.setdefault(key, ([], []))
            per[key][0].append(float(r["x_hat"]))
            per[key][1].append(float(r["truth_x"]) if r["truth_x"] != "" else np.nan)
        summary["forecast"] = {}
        for fam in sorted({k[0] for k in per}):
            preds = [v[0] for k, v in sorted(per.items()) if k[0] == fam]
            truths = [v[1] for k, v in sorted(per.items()) if k[0] == fam]
            score = score_forecast(preds, truths)
            write_rows(bundle.path("metrics", f"forecast_{fam}.csv"), score.rows(),
                       ["horizon_s", "within_5m", "within_10m", "mae_m", "n"])
            summary["forecast"][fam] = {"n": score.n_scenes, "excluded": score.excluded,
                                        "within_10m_5s": float(score.within_10m[4])}
    cl_path = bundle.root / "classification_rows.csv"
    if cl_path.exists():
        groups = {}
        for r in read_rows(cl_path):
            groups.setdefault((r["kind"], int(r["t"])), []).append((int(r["label"]), int(r["pred"])))
        rows = []
        for (kind, t), pairs in sorted(groups.items()):
            y, p = np.array(pairs).T
            s = ClassificationScore.from_labels(y, p)
            rows.append({"kind": kind, "t": t, "n": s.n, "tp": s.tp, "fp": s.fp, "tn": s.tn, "fn": s.fn,
                         "accuracy": s.accuracy, "tnr": s.tnr, "ppv": s.ppv})
        write_rows(bundle.path("metrics", "classification.csv"), rows,
                   ["kind", "t", "n", "tp", "fp", "tn", "fn", "accuracy", "tnr", "ppv"])
        summary["classification"] = {
            kind: float(np.mean([r["accuracy"] for r in rows if r["kind"] == kind]))
            for kind in sorted({r["kind"] for r in rows})}
    return summary


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def stage_report(cfg, bundle: Bundle, counts: dict | None = None) -> dict:
    counts_path = bundle.root / "counts.json"
    stored = json.loads(counts_path.read_text()) if counts_path.exists() else {}
    stored.update(counts or {})
    files = {str(p.relative_to(bundle.root)): _sha256(p)
             for p in sorted(bundle.root.rglob("*"))
             if p.is_file() and p.name not in ("manifest.json",)}
    manifest = {
        "package": "artifact", "version": __version__,
        "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
        "seed": cfg["seed"], "config": cfg, "counts": stored, "files": files,
    }
    bundle.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


STAGE_FUNCS: dict[str, Callable] = {
    "ingest": stage_ingest, "scenes": stage_scenes, "pretrain": stage_pretrain, "fit": stage_fit,
    "forecast": stage_forecast, "classify-train": stage_classify_train, "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(name: str, cfg: dict, out_dir) -> dict:
    """Run one stage, recording its counts; failures become :class:`StageError`."""
    bundle = Bundle(out_dir)
    bundle.root.mkdir(parents=True, exist_ok=True)
    try:
        result = STAGE_FUNCS[name](cfg, bundle)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - tag and re-raise every stage failure
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    if name != "report":
        counts_path = bundle.root / "counts.json"
        stored = json.loads(counts_path.read_text()) if counts_path.exists() else {}
        stored[name] = result
        counts_path.write_text(json.dumps(stored, indent=2, sort_keys=True, default=_json_default) + "\n")
    return result


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o)}")


def run_pipeline(cfg: dict, out_dir, stages=STAGES) -> dict:
    """Execute the requested stages in order and return the manifest."""
    for name in stages:
        logger.info("stage %s", name)
        run_stage(name, cfg, out_dir)
    manifest_path = Path(out_dir) / "manifest.json"
    return json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
