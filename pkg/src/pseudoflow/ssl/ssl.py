"""Iterative pseudo-labeling orchestrator.

Per iteration: the master model labels the unlabeled target split; a
fresh student (re-initialized from the pretrained "ours" checkpoint every
iteration) trains S steps on those labels; k-fold cross validation on the
small labeled target split picks the finetuning step count S_ft; the
student finetunes S_ft steps on ground truth; the finetuned student
becomes the next master. The loop stops after N iterations or when the
test-split F1-all gain over the previous iteration falls below eps_stop.

Run directory layout:
    run_dir/state.json            resume manifest (completed phases)
    run_dir/report.jsonl          one line per iteration
    run_dir/iter_<i>/pseudo_labels/NNNNNN.bin
    run_dir/iter_<i>/train_unlabeled.jsonl
    run_dir/iter_<i>/ckpt_unlabeled/step_NNNNNN.ckpt (+ final.ckpt)
    run_dir/iter_<i>/cv/fold_<j>/curve.json, cv/report.json
    run_dir/iter_<i>/finetune.jsonl
    run_dir/iter_<i>/ckpt_final
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ..flowcore import io as fio
from ..flowcore.metrics import outlier_counts
from ..losses import LossConfig
from ..model import load_checkpoint, params_hash, save_checkpoint
from ..parallel import run_parallel
from ..synthdata import LabeledPair
from ..trainer import TrainConfig, evaluate, train_loop


@dataclass(frozen=True)
class SslConfig:
    iterations: int = 2           # N
    unlabeled_steps: int = 2000   # S
    folds: int = 5                # k
    eval_every: int = 50          # E
    finetune_cap: int = 500
    eps_stop: float = 0.05        # F1-all percentage points
    seed: int = 0
    contrastive_unlabeled: bool = True
    contrastive_finetune: bool = True
    unlabeled_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=2e-4, schedule="one_cycle"))
    finetune_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=5e-5, schedule="constant"))
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not np.isfinite(self.eps_stop):
            raise ValueError("eps_stop must be finite")

    def phase_loss(self, phase: str) -> LossConfig:
        on = {"unlabeled": self.contrastive_unlabeled,
              "finetune": self.contrastive_finetune}[phase]
        if on:
            return self.loss
        return replace(self.loss, lambda_ct=0.0)


@dataclass
class CvReport:
    steps: list            # checkpoint grid, starts at 0
    fold_curves: list      # folds x len(steps) F1-all values
    mean_curve: list
    s_ft: int
    fold_sizes: list
    fold_indices: list     # audit: held-out pair indices per fold

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "fold_curves": self.fold_curves,
            "mean_curve": self.mean_curve,
            "s_ft": self.s_ft,
            "fold_sizes": self.fold_sizes,
            "fold_indices": self.fold_indices,
        }


# ---------------------------------------------------------------------------
# pseudo labels


def _label_job(args):
    ckpt_path, chunk = args
    net, _ = load_checkpoint(ckpt_path)
    out = []
    for idx, img1, img2 in chunk:
        try:
            out.append((idx, net.predict(img1, img2)))
        except Exception as e:  # noqa: BLE001 - report the failing pair id
            raise RuntimeError(f"pseudo-label inference failed on pair {idx}: {e}")
    return out


def generate_pseudo_labels(master_ckpt: str, unlabeled, out_dir: str,
                           threads: int = 1):
    """Label every unlabeled pair with the master's final flow estimate.

    Returns a list of LabeledPair with all-true validity masks; the raw
    flow files are persisted under out_dir for provenance/reuse.
    """
    os.makedirs(out_dir, exist_ok=True)
    items = [(i, p.img1, p.img2) for i, p in enumerate(unlabeled)]
    n_chunks = max(1, min(threads * 4, len(items)))
    chunks = [items[i::n_chunks] for i in range(n_chunks)]
    results = run_parallel(_label_job,
                           [(master_ckpt, c) for c in chunks if c], threads)
    flows = {}
    for chunk_out in results:
        for idx, flow in chunk_out:
            flows[idx] = flow
    labeled = []
    for i, p in enumerate(unlabeled):
        flow = flows[i]
        fio.write_flow_raw(flow, os.path.join(out_dir, f"{i:06d}.bin"))
        labeled.append(LabeledPair(
            img1=p.img1, img2=p.img2, flow=flow.astype(np.float64),
            mask=np.ones(p.img1.shape[:2], dtype=bool), seed=p.seed))
    return labeled


def labels_hash(out_dir: str) -> str:
    h = hashlib.sha256()
    for name in sorted(os.listdir(out_dir)):
        if name.endswith(".bin"):
            h.update(name.encode())
            with open(os.path.join(out_dir, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# unlabeled training


def train_unlabeled(net, pseudo_pairs, cfg: SslConfig, ckpt_dir: str,
                    log_fh=None, salt: int = 0):
    """S optimization steps against pseudo labels, checkpointing every E."""
    tcfg = replace(cfg.unlabeled_train, total_steps=cfg.unlabeled_steps,
                   seed=cfg.seed)
    return train_loop(net, pseudo_pairs, tcfg, cfg.phase_loss("unlabeled"),
                      phase="unlabeled", log_fh=log_fh,
                      ckpt_every=cfg.eval_every, ckpt_dir=ckpt_dir,
                      salt=salt)


# ---------------------------------------------------------------------------
# k-fold cross validation


def fold_partition(n: int, k: int):
    """Contiguous index blocks; the last fold absorbs any remainder."""
    if k < 2 or n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    size = n // k
    folds = []
    for j in range(k):
        lo = j * size
        hi = (j + 1) * size if j < k - 1 else n
        folds.append(list(range(lo, hi)))
    return folds


def select_finetune_steps(curves: dict):
    """curves: step -> per-fold F1-all list. Returns (s_ft, mean per step).

    Argmin of the fold mean; ties resolve to the smallest step.
    """
    if not curves:
        raise ValueError("empty CV curves")
    means = {int(s): float(np.mean(v)) for s, v in curves.items()}
    s_ft = min(sorted(means), key=lambda s: (means[s], s))
    return s_ft, means


def _pooled_f1(net, pairs) -> float:
    out = val = 0
    for p in pairs:
        o, v = outlier_counts(net.predict(p.img1, p.img2), p.flow, p.mask)
        out += o
        val += v
    return float(100.0 * out / val)


def _cv_fold_job(args):
    (fold_idx, ckpt_path, train_pairs, val_pairs, steps_grid, tcfg,
     loss_cfg) = args
    net, _ = load_checkpoint(ckpt_path)
    curve = [_pooled_f1(net, val_pairs)]          # step 0 = no finetuning
    done = 0
    for s in steps_grid[1:]:
        train_loop(net, train_pairs, tcfg, loss_cfg, phase=f"cv_fold{fold_idx}",
                   steps=s - done, salt=1000 + fold_idx)
        done = s
        curve.append(_pooled_f1(net, val_pairs))
    return fold_idx, curve


def kfold_cv(ckpt_path: str, labeled_pairs, cfg: SslConfig,
             threads: int = 1) -> CvReport:
    """Finetune one copy of the checkpoint per fold; pick S_ft.

    Every fold starts from the same checkpoint, trains on the other k-1
    folds, and is scored (pooled F1-all) on its held-out fold at steps
    0, E, 2E, ..., cap.
    """
    n = len(labeled_pairs)
    folds = fold_partition(n, cfg.folds)
    steps_grid = list(range(0, cfg.finetune_cap + 1, cfg.eval_every))
    tcfg = replace(cfg.finetune_train, seed=cfg.seed)
    loss_cfg = cfg.phase_loss("finetune")
    jobs = []
    for j, held in enumerate(folds):
        held_set = set(held)
        train_pairs = [labeled_pairs[i] for i in range(n) if i not in held_set]
        val_pairs = [labeled_pairs[i] for i in held]
        jobs.append((j, ckpt_path, train_pairs, val_pairs, steps_grid, tcfg,
                     loss_cfg))
    results = run_parallel(_cv_fold_job, jobs, threads)
    curves_by_fold = dict(results)
    fold_curves = [curves_by_fold[j] for j in range(len(folds))]
    curves = {s: [fc[i] for fc in fold_curves]
              for i, s in enumerate(steps_grid)}
    s_ft, means = select_finetune_steps(curves)
    return CvReport(steps=steps_grid, fold_curves=fold_curves,
                    mean_curve=[means[s] for s in steps_grid], s_ft=s_ft,
                    fold_sizes=[len(f) for f in folds], fold_indices=folds)


# ---------------------------------------------------------------------------
# finetuning


def finetune(net, labeled_pairs, s_ft: int, cfg: SslConfig, log_fh=None,
             salt: int = 0):
    """Exactly s_ft steps on the full labeled target-train split."""
    if s_ft == 0:
        return []
    tcfg = replace(cfg.finetune_train, total_steps=s_ft, seed=cfg.seed)
    return train_loop(net, labeled_pairs, tcfg, cfg.phase_loss("finetune"),
                      phase="finetune", log_fh=log_fh, salt=salt)


# ---------------------------------------------------------------------------
# the full loop


def _load_state(run_dir: str) -> dict:
    path = os.path.join(run_dir, "state.json")
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    return {"completed": {}, "report": []}


def _save_state(run_dir: str, state: dict) -> None:
    path = os.path.join(run_dir, "state.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(state, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def run(splits, phi_bs: str, phi_ours: str, cfg: SslConfig, run_dir: str,
        threads: int = 1) -> dict:
    """Execute the full iterative loop; returns the report dict.

    Resumable at phase granularity: completed phases recorded in
    state.json are skipped when their artifacts are still present.
    """
    os.makedirs(run_dir, exist_ok=True)
    state = _load_state(run_dir)
    report_path = os.path.join(run_dir, "report.jsonl")

    unlabeled = splits["target_unlabeled"]
    labeled = splits["target_train"]
    test = splits["target_test"]

    _, ours_flags = load_checkpoint(phi_ours)
    master_ckpt = phi_bs
    net_bs, _ = load_checkpoint(phi_bs)
    prev_test = state.get("prev_test")
    if prev_test is None:
        ev = evaluate(net_bs, test)
        prev_test = {"f1_all": ev["f1_all"], "epe": ev["epe"]}
        state["prev_test"] = prev_test
        state["baseline_test"] = dict(prev_test)
        _save_state(run_dir, state)
    del net_bs

    report_lines = list(state.get("report", []))
    for i in range(1, cfg.iterations + 1):
        iter_dir = os.path.join(run_dir, f"iter_{i}")
        os.makedirs(iter_dir, exist_ok=True)
        completed = set(state["completed"].get(f"iter_{i}", []))
        ck_final = os.path.join(iter_dir, "ckpt_final")

        if "iteration" in completed and os.path.exists(ck_final):
            master_ckpt = ck_final
            prev_test = state["prev_test"]
            continue

        # 1) pseudo labels from the current master
        label_dir = os.path.join(iter_dir, "pseudo_labels")
        pseudo = generate_pseudo_labels(master_ckpt, unlabeled, label_dir,
                                        threads=threads)
        label_digest = labels_hash(label_dir)

        # 2) student re-init from the pretrained "ours" checkpoint
        student, _ = load_checkpoint(phi_ours)
        reinit_hash = params_hash(student)

        # 3) unlabeled training with per-step logging + E-interval ckpts
        ck_dir = os.path.join(iter_dir, "ckpt_unlabeled")
        with open(os.path.join(iter_dir, "train_unlabeled.jsonl"), "w") as fh:
            train_unlabeled(student, pseudo, cfg, ck_dir, log_fh=fh,
                            salt=10 * i)
        ck_unlabeled = os.path.join(ck_dir, "final.ckpt")
        save_checkpoint(ck_unlabeled, student,
                        flags=ours_flags | {"phase": "unlabeled", "iter": i})

        # 4) k-fold CV for the finetuning step count
        cv_report = kfold_cv(ck_unlabeled, labeled, cfg, threads=threads)
        cv_dir = os.path.join(iter_dir, "cv")
        os.makedirs(cv_dir, exist_ok=True)
        for j, fc in enumerate(cv_report.fold_curves):
            fold_dir = os.path.join(cv_dir, f"fold_{j}")
            os.makedirs(fold_dir, exist_ok=True)
            with open(os.path.join(fold_dir, "curve.json"), "w") as fh:
                json.dump({"steps": cv_report.steps, "f1_all": fc,
                           "held_out": cv_report.fold_indices[j]}, fh,
                          indent=2)
                fh.write("\n")
        with open(os.path.join(cv_dir, "report.json"), "w") as fh:
            json.dump(cv_report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

        # 5) finetune on ground truth for S_ft steps
        with open(os.path.join(iter_dir, "finetune.jsonl"), "w") as fh:
            finetune(student, labeled, cv_report.s_ft, cfg, log_fh=fh,
                     salt=10 * i + 1)
        save_checkpoint(ck_final, student,
                        flags=ours_flags | {"phase": "final", "iter": i,
                                            "s_ft": cv_report.s_ft})

        # 6) evaluate + report; the student becomes the master
        ev = evaluate(student, test)
        val_f1 = cv_report.mean_curve[cv_report.steps.index(cv_report.s_ft)]
        line = {
            "iteration": i,
            "s_ft": cv_report.s_ft,
            "val_f1_all": val_f1,
            "test_f1_all": ev["f1_all"],
            "test_epe": ev["epe"],
            # relative so logs stay byte-comparable across run directories
            "master_was": os.path.relpath(master_ckpt, run_dir),
            "pseudo_labels_sha256": label_digest,
            "student_reinit_sha256": reinit_hash,
        }
        gain = prev_test["f1_all"] - ev["f1_all"]
        line["test_f1_gain"] = gain
        report_lines.append(line)
        with open(report_path, "w") as fh:
            for ln in report_lines:
                fh.write(json.dumps(ln, sort_keys=True) + "\n")

        master_ckpt = ck_final
        prev_test = {"f1_all": ev["f1_all"], "epe": ev["epe"]}
        state["prev_test"] = prev_test
        state["completed"].setdefault(f"iter_{i}", []).append("iteration")
        state["report"] = report_lines
        _save_state(run_dir, state)

        if gain < cfg.eps_stop and i < cfg.iterations:
            line["stopped_early"] = True
            with open(report_path, "w") as fh:
                for ln in report_lines:
                    fh.write(json.dumps(ln, sort_keys=True) + "\n")
            _save_state(run_dir, state)
            break

    return {
        "baseline_test": state["baseline_test"],
        "iterations": report_lines,
        "final_master": master_ckpt,
    }


__all__ = [
    "CvReport",
    "SslConfig",
    "finetune",
    "fold_partition",
    "generate_pseudo_labels",
    "kfold_cv",
    "labels_hash",
    "run",
    "select_finetune_steps",
    "train_unlabeled",
]
