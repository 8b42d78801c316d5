"""Pipeline stages wired through on-disk artifacts in the run's work directory.

Each artifact gets a ``<name>.meta.json`` sidecar recording the config hash
and the stage that wrote it; reading an artifact written under a different
config fails fast.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import dcn as dcn_mod
from .config import RunConfig
from .encoders import PleBins, encode_ple_matrix, fit_ple
from .events import (SECONDS_PER_DAY, DataSplit, Event, EventType, UserHistory,
                     build_user_histories, parse_events, restrict, write_events)
from .features import (FEATURE_NAMES, compute_feature_matrix, fit_corpus_stats, load_stats,
                       read_feature_csv, save_stats, standardize, write_feature_csv)
from .nn import load_checkpoint, save_checkpoint
from .profile import (ABLATION_MASKS, Component, assemble_profile, read_profile, run_ablation,
                      train_linear_probe, write_ablation_csv, write_profile)
from .seq_encoder import SeqEncoder, train_seq_encoder
from .synth import generate_corpus
from .twhin import build_graph, make_twhin, select_users, train_twhin

log = logging.getLogger(__name__)

STAGES = ("gen-synth", "ingest", "split", "features", "train-seq", "train-twhin", "train-dcn",
          "assemble", "eval", "ablate")
PIPELINE = STAGES[1:]


class MissingArtifactError(RuntimeError):
    pass


class ConfigMismatchError(RuntimeError):
    pass


class Artifacts:
    def __init__(self, cfg: RunConfig):
        self.root = cfg.workdir
        self.hash = cfg.config_hash()

    def path(self, name: str) -> Path:
        return self.root / name

    def written(self, name: str, stage: str) -> Path:
        p = self.path(name)
        meta = {"config_hash": self.hash, "stage": stage}
        Path(str(p) + ".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        return p

    def need(self, name: str, stage: str) -> Path:
        """Path of an upstream artifact; ``stage`` is what produces it."""
        p = self.path(name)
        meta_path = Path(str(p) + ".meta.json")
        if not p.exists() or not meta_path.exists():
            raise MissingArtifactError(f"missing {p}; run `{stage}` first")
        meta = json.loads(meta_path.read_text())
        if meta.get("config_hash") != self.hash:
            raise ConfigMismatchError(
                f"{p} was written under config {meta.get('config_hash')}, current config is "
                f"{self.hash}; rerun `{stage}`")
        return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- data stages ---------------------------------------------------------------------------
def events_path(cfg: RunConfig) -> Path:
    p = Path(cfg.data.events)
    return p if p.is_absolute() else cfg.workdir / p


def stage_gen_synth(cfg: RunConfig, art: Artifacts) -> None:
    events, manifest = generate_corpus(cfg.synth, cfg.run.seed)
    out = events_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        write_events(events, fh, cfg.data.format)
    _write_json(art.path("manifest.json"), manifest)
    art.written("manifest.json", "gen-synth")
    log.info("wrote %d synthetic events to %s", len(events), out)


_COLUMNS = ("user", "etype", "ts", "sku", "category", "price", "url")


def stage_ingest(cfg: RunConfig, art: Artifacts) -> None:
    src = events_path(cfg)
    if not src.exists():
        raise MissingArtifactError(f"missing {src}; run `gen-synth` first or set data.events")
    with open(src, "rb") as fh:
        result = parse_events(fh, cfg.data.format, strict=cfg.data.strict)
    evs = sorted(result.events, key=lambda e: (e.user_id, e.timestamp))
    cols = {
        "user": [e.user_id for e in evs], "etype": [int(e.event_type) for e in evs],
        "ts": [e.timestamp for e in evs],
        "sku": [-1 if e.sku is None else e.sku for e in evs],
        "category": [-1 if e.category is None else e.category for e in evs],
        "price": [-1 if e.price_bucket is None else e.price_bucket for e in evs],
        "url": [-1 if e.url_id is None else e.url_id for e in evs],
    }
    arrays = {k: np.asarray(v, dtype=np.int64) for k, v in cols.items()}
    arrays["has_emb"] = np.array([e.text_embedding is not None for e in evs], dtype=bool)
    arrays["emb"] = np.array([e.text_embedding or (0,) * 16 for e in evs], dtype=np.int16
                             ).reshape(len(evs), 16)
    np.savez(art.path("events.npz"), **arrays)
    art.written("events.npz", "ingest")
    report = {"n_events": len(evs), "n_users": len(set(cols["user"])),
              "n_diagnostics": len(result.diagnostics),
              "diagnostics": [{"line": d.line, "message": d.message}
                              for d in result.diagnostics[:100]]}
    _write_json(art.path("ingest_report.json"), report)
    art.written("ingest_report.json", "ingest")
    log.info("ingested %d events (%d rejected lines)", len(evs), len(result.diagnostics))


def load_histories(art: Artifacts) -> dict[int, UserHistory]:
    with np.load(art.need("events.npz", "ingest")) as z:
        a = {k: z[k] for k in z.files}
    events = []
    opt = (lambda v: None if v < 0 else int(v))
    for i in range(len(a["user"])):
        events.append(Event(int(a["user"][i]), EventType(int(a["etype"][i])), int(a["ts"][i]),
                            sku=opt(a["sku"][i]), category=opt(a["category"][i]),
                            price_bucket=opt(a["price"][i]), url_id=opt(a["url"][i]),
                            text_embedding=tuple(a["emb"][i].tolist()) if a["has_emb"][i] else None))
    return build_user_histories(events)


def stage_split(cfg: RunConfig, art: Artifacts) -> None:
    with np.load(art.need("events.npz", "ingest")) as z:
        ts = z["ts"]
    if len(ts) == 0:
        raise ValueError("no events to split")
    target_end = cfg.split.target_end or int((ts.max() // SECONDS_PER_DAY + 1) * SECONDS_PER_DAY)
    split = DataSplit.ending_at(target_end, cfg.split.target_days)
    dcn_end = split.train_end - cfg.split.dcn_target_days * SECONDS_PER_DAY
    _write_json(art.path("split.json"), {"train_end": split.train_end, "target_end": target_end,
                                         "dcn_end": dcn_end})
    art.written("split.json", "split")


def load_split(art: Artifacts) -> dict:
    return json.loads(art.need("split.json", "split").read_text())


def period_histories(art: Artifacts) -> dict[str, dict[int, UserHistory]]:
    s = load_split(art)
    full = load_histories(art)
    return {
        "input": restrict(full, end=s["train_end"]),
        "target": restrict(full, start=s["train_end"], end=s["target_end"]),
        "dcn_input": restrict(full, end=s["dcn_end"]),
        "dcn_target": restrict(full, start=s["dcn_end"], end=s["train_end"]),
    }


def stage_features(cfg: RunConfig, art: Artifacts) -> None:
    s = load_split(art)
    hs = period_histories(art)
    mode = cfg.features.anchor_mode
    stats = fit_corpus_stats(hs["input"], k_seed=cfg.features.kmeans_seed)
    save_stats(art.path("stats.json"), stats, period_end=s["train_end"])
    art.written("stats.json", "features")
    fm = compute_feature_matrix(hs["input"], stats, s["train_end"], mode)
    write_feature_csv(art.path("features.csv"), fm)
    art.written("features.csv", "features")

    dstats = fit_corpus_stats(hs["dcn_input"], k_seed=cfg.features.kmeans_seed)
    save_stats(art.path("stats_dcn.json"), dstats, period_end=s["dcn_end"])
    art.written("stats_dcn.json", "features")
    write_feature_csv(art.path("features_dcn_train.csv"),
                      compute_feature_matrix(hs["dcn_input"], dstats, s["dcn_end"], mode))
    art.written("features_dcn_train.csv", "features")
    write_feature_csv(art.path("features_dcn_infer.csv"),
                      compute_feature_matrix(hs["input"], dstats, s["train_end"], mode))
    art.written("features_dcn_infer.csv", "features")


# -- model stages -----------------------------------------------------------------------------
def _seed(cfg: RunConfig, offset: int) -> int:
    return int(cfg.run.seed) * 1000 + offset


def _write_loss_csv(path: Path, rows: list[dict]) -> None:
    keys = list(rows[0]) if rows else ["step", "loss"]
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def stage_train_seq(cfg: RunConfig, art: Artifacts) -> None:
    hs = period_histories(art)
    runs = (("seq_profile", hs["input"], 1), ("seq_dcn", hs["dcn_input"], 2))
    models = {}
    for name, data, off in runs:
        t0 = time.time()
        model, trace = train_seq_encoder(data, cfg.seq, cfg.seq_train, seed=_seed(cfg, off))
        log.info("%s trained in %.1fs, loss %.4f -> %.4f", name, time.time() - t0,
                 trace.loss[0], trace.loss[-1])
        save_checkpoint(art.path(f"{name}.ubpc"), model.state_dict())
        art.written(f"{name}.ubpc", "train-seq")
        _write_loss_csv(art.path(f"{name}_loss.csv"),
                        [{"step": s, "loss": l, **t} for s, l, t in
                         zip(trace.steps, trace.loss, trace.terms)])
        art.written(f"{name}_loss.csv", "train-seq")
        models[name] = model
    exports = (("seq_profile.ubpe", models["seq_profile"], hs["input"]),
               ("seq_dcn_train.ubpe", models["seq_dcn"], hs["dcn_input"]),
               ("seq_dcn_infer.ubpe", models["seq_dcn"], hs["input"]))
    for fname, model, data in exports:
        uids = np.array(sorted(data), dtype=np.int64)
        write_profile(art.path(fname), uids, model.encode_histories([data[u] for u in uids]))
        art.written(fname, "train-seq")


def load_seq_model(cfg: RunConfig, art: Artifacts, name: str) -> SeqEncoder:
    model = SeqEncoder(cfg.seq)
    model.load_state_dict(load_checkpoint(art.need(f"{name}.ubpc", "train-seq")))
    model.eval()
    return model


def stage_train_twhin(cfg: RunConfig, art: Artifacts) -> None:
    hs = period_histories(art)["input"]
    edges = build_graph(hs)
    with open(art.path("edges.csv"), "w") as fh:
        edges.write_csv(fh)
    art.written("edges.csv", "train-twhin")
    users = select_users(edges, sorted(hs))
    seq_model = catalog = None
    if cfg.twhin.item_source == "pretrained":
        from .seq_encoder import ItemCatalog
        seq_model = load_seq_model(cfg, art, "seq_profile")
        catalog = ItemCatalog(hs.values())
    model = make_twhin(edges, users, cfg.twhin, _seed(cfg, 3), seq_model, catalog)
    losses = train_twhin(edges, model, _seed(cfg, 3))
    save_checkpoint(art.path("twhin.ubpc"), model.state_dict())
    art.written("twhin.ubpc", "train-twhin")
    _write_loss_csv(art.path("twhin_loss.csv"), [{"step": i, "loss": l} for i, l in enumerate(losses)])
    art.written("twhin_loss.csv", "train-twhin")
    uids, emb = model.user_embeddings()
    write_profile(art.path("twhin.ubpe"), uids, emb)
    art.written("twhin.ubpe", "train-twhin")


def _n_categories(*histories: dict[int, UserHistory]) -> int:
    top = -1
    for hs in histories:
        for h in hs.values():
            c = h.arrays.category
            if len(c):
                top = max(top, int(c.max()))
    return top + 1


def _aligned_seq(art: Artifacts, name: str, uids: np.ndarray) -> np.ndarray:
    ids, emb = read_profile(art.need(name, "train-seq"))
    comp = Component(ids, emb)
    if not np.all(np.isin(uids, ids)):
        raise ValueError(f"{name} lacks embeddings for some users")
    return comp.aligned(uids)


def stage_train_dcn(cfg: RunConfig, art: Artifacts) -> None:
    dc = cfg.dcn
    s = load_split(art)
    hs = period_histories(art)
    train_fm = read_feature_csv(art.need("features_dcn_train.csv", "features"), s["dcn_end"])
    infer_fm = read_feature_csv(art.need("features_dcn_infer.csv", "features"), s["train_end"])
    dstats = load_stats(art.need("stats_dcn.json", "features"))
    seq_model = load_seq_model(cfg, art, "seq_dcn")
    uids = train_fm.user_ids
    bins = fit_ple(train_fm.values)
    _write_json(art.path("ple_bins.json"), {"edges": bins.to_json()})
    art.written("ple_bins.json", "train-dcn")

    sku_vocab = np.array(dstats.top100_skus[:dc.top_k_skus], dtype=np.int64)
    n_cat = _n_categories(hs["dcn_input"], hs["dcn_target"])
    targets = [dcn_mod.derive_targets(hs["dcn_target"].get(int(u)), dc.churn_rule) for u in uids]
    churn, sku, cat = dcn_mod.label_matrices(targets, sku_vocab, n_cat)

    aug = None
    if dc.contrastive:
        views = []
        for draw in (0, 1):
            ah = {int(u): dcn_mod.augment_mask(hs["dcn_input"][int(u)], dc.mask_rate,
                                               _seed(cfg, 5), draw) for u in uids}
            fm = compute_feature_matrix(ah, dstats, s["dcn_end"], cfg.features.anchor_mode)
            emb = seq_model.encode_histories([ah[int(u)] for u in uids])
            views.append((encode_ple_matrix(fm.rows_for(uids), bins), emb))
        aug = tuple(views)
    data = dcn_mod.DcnData(uids, encode_ple_matrix(train_fm.values, bins),
                           _aligned_seq(art, "seq_dcn_train.ubpe", uids), churn, sku, cat, aug)
    model, metrics = dcn_mod.train_dcn(data, dc, seed=_seed(cfg, 4))
    save_checkpoint(art.path("dcn.ubpc"), model.state_dict())
    art.written("dcn.ubpc", "train-dcn")
    _write_loss_csv(art.path("dcn_metrics.csv"), metrics)
    art.written("dcn_metrics.csv", "train-dcn")

    iu = infer_fm.user_ids
    emb = dcn_mod.dcn_embeddings(model, encode_ple_matrix(infer_fm.values, bins),
                                 _aligned_seq(art, "seq_dcn_infer.ubpe", iu))
    write_profile(art.path("dcn.ubpe"), iu, emb)
    art.written("dcn.ubpe", "train-dcn")


# -- profile stages ---------------------------------------------------------------------------
def load_components(art: Artifacts) -> dict[str, Component]:
    s = load_split(art)
    comps = {}
    for name, fname, stage in (("seq", "seq_profile.ubpe", "train-seq"),
                               ("twhin", "twhin.ubpe", "train-twhin"),
                               ("dcn", "dcn.ubpe", "train-dcn")):
        comps[name] = Component(*read_profile(art.need(fname, stage)))
    fm = read_feature_csv(art.need("features.csv", "features"), s["train_end"])
    z, _, _ = standardize(fm.values)
    comps["features"] = Component(fm.user_ids, z.astype(np.float32))
    users = comps["features"].user_ids
    # restrict every component to the profile user set (users active in the input period)
    for name in ("seq", "twhin", "dcn"):
        c = comps[name]
        keep = np.isin(c.user_ids, users)
        comps[name] = Component(c.user_ids[keep], c.values[keep])
    return comps


def stage_assemble(cfg: RunConfig, art: Artifacts) -> None:
    prof = assemble_profile(load_components(art))
    write_profile(art.path("profile.ubpe"), prof.user_ids, prof.matrix)
    art.written("profile.ubpe", "assemble")
    layout = {k: [v.start, v.stop] for k, v in prof.slices.items()}
    _write_json(art.path("profile_layout.json"), {"dim": prof.dim, "slices": layout})
    art.written("profile_layout.json", "assemble")


def probe_labels(cfg: RunConfig, art: Artifacts, user_ids: np.ndarray) -> dict:
    hs = period_histories(art)
    stats = load_stats(art.need("stats.json", "features"))
    targets = [dcn_mod.derive_targets(hs["target"].get(int(u)), cfg.dcn.churn_rule)
               for u in user_ids]
    n_cat = _n_categories(hs["input"], hs["target"])
    churn, sku, cat = dcn_mod.label_matrices(
        targets, np.array(stats.top100_skus[:cfg.dcn.top_k_skus], dtype=np.int64), n_cat)
    allowed = {"churn": churn, "category": cat, "sku": sku}
    return {t: (user_ids, allowed[t]) for t in cfg.probe.tasks}


def stage_eval(cfg: RunConfig, art: Artifacts) -> list:
    comps = load_components(art)
    prof = assemble_profile(comps)
    labels = probe_labels(cfg, art, prof.user_ids)
    results = []
    for task, (uids, y) in labels.items():
        r = train_linear_probe(prof.matrix, y, task, seed=cfg.run.seed, epochs=cfg.probe.epochs,
                               lr=cfg.probe.lr, train_frac=cfg.probe.train_frac)
        results.append(r)
        log.info("probe %s auc %.4f", task, r.auc)
    with open(art.path("eval.csv"), "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "auc", "n_pos", "n_neg"])
        for r in results:
            w.writerow([r.task, f"{r.auc:.6f}", r.n_pos, r.n_neg])
    art.written("eval.csv", "eval")
    return results


def stage_ablate(cfg: RunConfig, art: Artifacts) -> list[dict]:
    comps = load_components(art)
    users = comps["features"].user_ids
    labels = probe_labels(cfg, art, users)
    seeds = [cfg.run.seed * 100 + i for i in range(cfg.probe.n_seeds)]
    rows = run_ablation(comps, labels, seeds=seeds, masks=ABLATION_MASKS, epochs=cfg.probe.epochs,
                        lr=cfg.probe.lr, train_frac=cfg.probe.train_frac)
    with open(art.path("ablation.csv"), "w") as fh:
        write_ablation_csv(rows, fh)
    art.written("ablation.csv", "ablate")
    for r in rows:
        log.info("ablation %-12s %-8s %.4f +- %.4f", r["mask"], r["task"], r["mean_auc"], r["std_auc"])
    return rows


STAGE_FUNCS = {
    "gen-synth": stage_gen_synth, "ingest": stage_ingest, "split": stage_split,
    "features": stage_features, "train-seq": stage_train_seq, "train-twhin": stage_train_twhin,
    "train-dcn": stage_train_dcn, "assemble": stage_assemble, "eval": stage_eval,
    "ablate": stage_ablate,
}


def run_stage(name: str, cfg: RunConfig) -> None:
    if name == "all":
        for stage in PIPELINE:
            run_stage(stage, cfg)
        return
    if name not in STAGE_FUNCS:
        raise ValueError(f"unknown subcommand {name!r}")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    art = Artifacts(cfg)
    t0 = time.time()
    STAGE_FUNCS[name](cfg, art)
    log.info("stage %s done in %.1fs", name, time.time() - t0)
