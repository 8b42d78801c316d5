"""Profile assembly, AUC-ROC, linear probes and the component ablation."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .nn import Adam, Linear

COMPONENTS = ("seq", "twhin", "dcn", "features")
ABLATION_MASKS = {
    "all": COMPONENTS,
    "no_seq": ("twhin", "dcn", "features"),
    "no_twhin": ("seq", "dcn", "features"),
    "no_dcn": ("seq", "twhin", "features"),
    "no_features": ("seq", "twhin", "dcn"),
}
PROFILE_MAGIC = b"UBPE"
PROFILE_VERSION = 1


# -- AUC ------------------------------------------------------------------------------
def auc_roc(scores, labels) -> float:
    """P(random positive outscores random negative), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- profile assembly -------------------------------------------------------------------
@dataclass
class Component:
    user_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or len(self.values) != len(self.user_ids):
            raise ValueError("component values must be [n_users, dim]")

    def aligned(self, user_ids: np.ndarray) -> np.ndarray:
        order = np.argsort(self.user_ids, kind="stable")
        pos = np.searchsorted(self.user_ids[order], user_ids)
        return self.values[order[pos]]


@dataclass
class Profile:
    user_ids: np.ndarray
    matrix: np.ndarray
    slices: dict[str, slice]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def component(self, name: str) -> np.ndarray:
        return self.matrix[:, self.slices[name]]


def assemble_profile(components: dict[str, Component], mask=COMPONENTS) -> Profile:
    """Concatenate the selected components in the fixed seq/twhin/dcn/features order."""
    mask = [c for c in COMPONENTS if c in set(mask)]
    if not mask:
        raise ValueError("ablation mask selects no component")
    missing = [c for c in mask if c not in components]
    if missing:
        raise ValueError(f"missing components: {missing}")
    users = np.sort(components[mask[0]].user_ids)
    for name in mask:
        ids = components[name].user_ids
        if len(ids) != len(users) or not np.array_equal(np.sort(ids), users):
            raise ValueError(f"component {name!r} covers a different user set")
    parts, slices, at = [], {}, 0
    for name in mask:
        v = components[name].aligned(users).astype(np.float32)
        parts.append(v)
        slices[name] = slice(at, at + v.shape[1])
        at += v.shape[1]
    return Profile(users, np.concatenate(parts, axis=1), slices)


def write_profile(path, user_ids, matrix) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    user_ids = np.asarray(user_ids, dtype="<u8")
    n, d = matrix.shape
    with open(path, "wb") as f:
        f.write(PROFILE_MAGIC + struct.pack("<III", PROFILE_VERSION, n, d))
        rec = np.zeros(n, dtype=[("uid", "<u8"), ("v", "<f4", (d,))])
        rec["uid"] = user_ids
        rec["v"] = matrix
        f.write(rec.tobytes())


def read_profile(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:4] != PROFILE_MAGIC:
            raise ValueError(f"{path}: not a profile file")
        version, n, d = struct.unpack("<III", head[4:])
        if version != PROFILE_VERSION:
            raise ValueError(f"{path}: unsupported profile version {version}")
        body = f.read()
    rec_t = np.dtype([("uid", "<u8"), ("v", "<f4", (d,))])
    if len(body) != n * rec_t.itemsize:
        raise ValueError(f"{path}: truncated profile file")
    rec = np.frombuffer(body, dtype=rec_t)
    return rec["uid"].astype(np.int64), rec["v"].reshape(n, d).astype(np.float32)


# -- probes -------------------------------------------------------------------------------
@dataclass
class ProbeResult:
    task: str
    auc: float
    n_pos: int
    n_neg: int


def split_users(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def train_linear_probe(x, y, task: str, seed: int = 0, epochs: int = 200, lr: float = 0.01,
                       train_frac: float = 0.8) -> ProbeResult:
    """Logistic regression probe; ``y`` is [n] binary or [n, K] one-vs-rest labels.

    Multi-label targets report the macro AUC over labels with both classes in
    the held-out split.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if len(x) != len(y):
        raise ValueError("profiles and labels disagree on the number of users")
    tr, te = split_users(len(x), seed, train_frac)
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - mu) / sd
    usable = [k for k in range(y.shape[1])
              if 0 < y[tr, k].sum() < len(tr) and 0 < y[te, k].sum() < len(te)]
    if not usable:
        raise ValueError(f"{task}: degenerate label distribution")
    rng = np.random.default_rng(seed)
    layer = Linear(x.shape[1], len(usable), rng, dtype=np.float64)
    opt = Adam([{"params": layer.parameters(), "lr": lr}])
    xtr, ytr = z[tr], y[tr][:, usable]
    scale = 1.0 / ytr.size
    for _ in range(epochs):
        # mean BCE over (user, label); its gradient in closed form
        resid = (expit(xtr @ layer.weight.data + layer.bias.data) - ytr) * scale
        layer.weight.grad = xtr.T @ resid
        layer.bias.grad = resid.sum(axis=0)
        opt.step()
    scores = z[te] @ layer.weight.data + layer.bias.data
    aucs = [auc_roc(scores[:, i], y[te, k]) for i, k in enumerate(usable)]
    yte = y[te][:, usable]
    return ProbeResult(task, float(np.mean(aucs)), int(yte.sum()), int(yte.size - yte.sum()))


def run_ablation(components: dict[str, Component], labels: dict[str, tuple[np.ndarray, np.ndarray]],
                 seeds=range(5), masks: dict = ABLATION_MASKS, epochs: int = 200,
                 lr: float = 0.01, train_frac: float = 0.8) -> list[dict]:
    """Probe every (mask, task) pair over the seeds; rows are mean/std of the AUCs.

    ``labels`` maps task -> (user_ids, label array) and must cover the profile users.
    """
    rows = []
    seeds = list(seeds)
    for mask_name, mask in masks.items():
        prof = assemble_profile(components, mask)
        for task, (uids, y) in labels.items():
            y = Component(uids, np.asarray(y).reshape(len(uids), -1)).aligned(prof.user_ids)
            aucs = [train_linear_probe(prof.matrix, y, task, seed=s, epochs=epochs, lr=lr,
                                       train_frac=train_frac).auc for s in seeds]
            rows.append({"mask": mask_name, "task": task, "mean_auc": float(np.mean(aucs)),
                         "std_auc": float(np.std(aucs)), "n_seeds": len(seeds)})
    return rows


def write_ablation_csv(rows: list[dict], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["mask", "task", "mean_auc", "std_auc", "n_seeds"])
    for r in rows:
        w.writerow([r["mask"], r["task"], f"{r['mean_auc']:.6f}", f"{r['std_auc']:.6f}",
                    r["n_seeds"]])


def read_ablation_csv(stream) -> list[dict]:
    return [{"mask": r["mask"], "task": r["task"], "mean_auc": float(r["mean_auc"]),
             "std_auc": float(r["std_auc"]), "n_seeds": int(r["n_seeds"])}
            for r in csv.DictReader(stream)]
