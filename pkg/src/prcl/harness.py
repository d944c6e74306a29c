"""Teacher-student training loop, evaluation metrics, sweeps, and run reports.

Each step draws equal pixel counts from the labeled and unlabeled streams.
The teacher pseudo-labels the unlabeled batch (optionally with oracle label
corruption injected on top, so noise level is controlled independently of
teacher quality), the student is trained on the supervised and pseudo-label
cross entropies plus the prototype-contrastive loss, and the teacher tracks
the student by EMA. Runs are single threaded and bitwise reproducible for a
fixed config and seed.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .contrastive import (
    ContrastBatch,
    SchedulerConfig,
    infonce_l2_loss,
    lambda_c,
    lambda_u,
    prcl_loss,
    total_loss,
)
from .data import DatasetSpec, PixelDataset
from .model import (
    ModelConfig,
    OptimConfig,
    TeacherStudent,
    ToyModel,
    _softmax_rows,
    backward_step,
    ce_loss_batch,
    ema_update,
    save_checkpoint,
)
from .prob_embed import (
    DistPrototype,
    PointPrototype,
    ProbRep,
    fuse_gaussians,
    mls,
    mls_batch,
)
from .sampling import PixelCandidate, SamplingConfig, allocate_negatives, filter_valid, sample_anchors

METHOD_PRCL = "prcl"
METHOD_BASELINE = "deterministic-baseline"

STUDENT_CKPT = "student.ckpt"
TEACHER_CKPT = "teacher.ckpt"
REPORT_CSV = "report.csv"
SUMMARY_JSON = "summary.json"


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or activation."""


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec | str = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    scheduler: SchedulerConfig | None = None
    temperature: float = 0.5
    delta_u: float = 0.95
    method: str = METHOD_PRCL
    p_flip: float = 0.0
    augment_strength: float = 0.5
    freeze_lambda_c: bool = False
    epochs: int = 40
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in (METHOD_PRCL, METHOD_BASELINE):
            raise ValueError(f"method must be '{METHOD_PRCL}' or '{METHOD_BASELINE}'")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.delta_u <= 1.0:
            raise ValueError("delta_u must lie in [0, 1]")
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError("p_flip must lie in [0, 1]")
        if self.augment_strength < 0.0:
            raise ValueError("augment_strength must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass
class EpochRecord:
    epoch: int
    loss_sup: float
    loss_unsup: float
    loss_contrast: float
    lambda_u: float
    lambda_c: float
    pixel_acc: float | None
    miou: float | None
    rep_sigma2_mean: float | None
    rep_sigma2_std: float | None
    proto_sigma2_mean: float | None
    proto_acc: float | None


REPORT_COLUMNS = [f.name for f in fields(EpochRecord)]


@dataclass
class RunReport:
    records: list[EpochRecord]
    summary: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for rec in self.records:
                writer.writerow(
                    "" if v is None else repr(v) if isinstance(v, float) else v
                    for v in (getattr(rec, c) for c in REPORT_COLUMNS)
                )

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_report(csv_path, summary_path) -> RunReport:
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            kwargs = {}
            for col in REPORT_COLUMNS:
                raw = row[col]
                if raw == "":
                    kwargs[col] = None
                elif col == "epoch":
                    kwargs[col] = int(raw)
                else:
                    kwargs[col] = float(raw)
            records.append(EpochRecord(**kwargs))
    with open(summary_path) as fh:
        summary = json.load(fh)
    return RunReport(records, summary)


@dataclass(eq=False)
class EvalResult:
    pixel_acc: float
    per_class_iou: dict[int, float]
    miou: float


def evaluate(model: ToyModel, split) -> EvalResult:
    """Pixel accuracy and IoU of argmax predictions over (features, labels) pairs.

    Classes absent from both prediction and ground truth are left out of the
    mean; for every included class IoU = TP / (TP + FP + FN).
    """
    k = model.config.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    pairs = list(split)
    if pairs:
        feats = np.concatenate(
            [np.asarray(f, dtype=np.float64).reshape(-1, model.config.d_in) for f, _ in pairs]
        )
        truth = np.concatenate([np.asarray(l).reshape(-1).astype(np.int64) for _, l in pairs])
        pred = np.argmax(model.forward_batch(feats).logits, axis=1)
        np.add.at(confusion, (truth, pred), 1)
    total = confusion.sum()
    pixel_acc = float(np.trace(confusion) / total) if total else 0.0
    per_class = {}
    for c in range(k):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        if tp + fp + fn > 0:
            per_class[c] = float(tp / (tp + fp + fn))
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(pixel_acc, per_class, miou)


def _resolve_dataset(cfg: RunConfig) -> PixelDataset:
    if isinstance(cfg.dataset, DatasetSpec):
        return data_mod.generate(cfg.dataset)
    return data_mod.load_dataset(cfg.dataset)


def _flatten_labeled(ds: PixelDataset):
    feats = np.concatenate([img.features.reshape(-1, ds.spec.d_in) for img in ds.labeled])
    labels = np.concatenate([img.labels.reshape(-1).astype(np.int64) for img in ds.labeled])
    return feats, labels


def _flatten_unlabeled(ds: PixelDataset) -> np.ndarray:
    if not ds.unlabeled:
        return np.zeros((0, ds.spec.d_in))
    return np.concatenate([img.features.reshape(-1, ds.spec.d_in) for img in ds.unlabeled])


def _build_prototypes(pools, method: str):
    """Per-class prototype over candidate pools: fused Gaussian or mean vector."""
    prototypes = {}
    for cls in sorted(pools):
        pool = pools[cls]
        if not pool:
            continue
        mu = np.stack([c.rep.mu for c in pool])
        if method == METHOD_PRCL:
            s2 = np.stack([c.rep.sigma2 for c in pool])
            mu_hat, s2_hat = fuse_gaussians(mu, s2)
            prototypes[cls] = DistPrototype(mu_hat, s2_hat, n_obs=len(pool), class_id=cls)
        else:
            prototypes[cls] = PointPrototype(mu.mean(axis=0), class_id=cls)
    return prototypes


def _point_similarity(a, b) -> float:
    d = a.mu - b.mu
    return -float(d @ d)


@dataclass(eq=False)
class _StepStats:
    loss_sup: float
    loss_unsup: float
    loss_contrast: float
    lam_u: float
    rep_sigma2: np.ndarray  # per-candidate mean variance over dims, may be empty
    proto_sigma2: np.ndarray  # per-class mean fused variance, may be empty


def _train_step(
    ts: TeacherStudent,
    cfg: RunConfig,
    spec: DatasetSpec,
    lab_X,
    lab_y,
    unl_X,
    lam_c: float,
    rng: np.random.Generator,
    seed_iter,
) -> _StepStats:
    student = ts.student
    b = cfg.optim.batch_pixels
    li = rng.choice(len(lab_X), size=b, replace=len(lab_X) < b)
    ui = rng.choice(len(unl_X), size=b, replace=len(unl_X) < b)
    x_l, y_l = lab_X[li], lab_y[li]
    x_u = unl_X[ui]

    t_probs = _softmax_rows(ts.teacher.forward_batch(x_u).logits)
    pseudo = np.argmax(t_probs, axis=1)
    conf = t_probs[np.arange(b), pseudo]
    if cfg.p_flip > 0.0:
        pseudo, _ = data_mod.corrupt_labels(pseudo, cfg.p_flip, spec.num_classes, next(seed_iter))
    x_ua = data_mod.augment(x_u, cfg.augment_strength, spec.spread, next(seed_iter))

    fp_l = student.forward_batch(x_l)
    fp_u = student.forward_batch(x_ua)

    loss_sup, dlogits_l = ce_loss_batch(fp_l.logits, y_l)
    conf_mask = conf > cfg.delta_u
    lam_u = lambda_u(conf, cfg.delta_u)
    dlogits_u = np.zeros_like(fp_u.logits)
    if conf_mask.any():
        loss_unsup, d_masked = ce_loss_batch(fp_u.logits[conf_mask], pseudo[conf_mask])
        dlogits_u[conf_mask] = d_masked
    else:
        loss_unsup = 0.0

    # Candidate pool: labeled pixels keep ground truth and the student's own
    # confidence; unlabeled pixels carry the teacher's (possibly corrupted)
    # pseudo-label with the teacher's confidence. pixel_id indexes the
    # concatenated [labeled, unlabeled] batch for gradient routing.
    s_probs_l = _softmax_rows(fp_l.logits)
    stud_conf = s_probs_l[np.arange(b), np.argmax(s_probs_l, axis=1)]
    candidates = [
        PixelCandidate(
            ProbRep(fp_l.mu[i], fp_l.sigma2[i]),
            confidence=float(stud_conf[i]),
            class_id=int(y_l[i]),
            source="labeled",
            pixel_id=i,
        )
        for i in range(b)
    ]
    candidates.extend(
        PixelCandidate(
            ProbRep(fp_u.mu[j], fp_u.sigma2[j]),
            confidence=float(conf[j]),
            class_id=int(pseudo[j]),
            source="unlabeled",
            pixel_id=b + j,
        )
        for j in range(b)
    )

    valid = filter_valid(candidates, cfg.sampling.delta_w)
    pools: dict[int, list[PixelCandidate]] = {}
    for c in valid:
        pools.setdefault(c.class_id, []).append(c)
    prototypes = _build_prototypes(pools, cfg.method)

    anchor_map = sample_anchors(valid, replace(cfg.sampling, rng_seed=next(seed_iter)))
    anchor_cands = [c for cls in sorted(anchor_map) for c in anchor_map[cls]]

    dmu = np.zeros((2 * b, student.config.embed_dim))
    dsig = np.zeros((2 * b, student.config.embed_dim))
    loss_contrast = 0.0
    if anchor_cands:
        similarity = mls if cfg.method == METHOD_PRCL else _point_similarity
        neg_lists = []
        for cand in anchor_cands:
            try:
                negs = allocate_negatives(
                    cand.class_id,
                    prototypes,
                    pools,
                    cfg.sampling.negatives_per_anchor,
                    seed=next(seed_iter),
                    tau=cfg.temperature,
                    similarity=similarity,
                )
            except ValueError:
                negs = []
            neg_lists.append(negs)

        if cfg.method == METHOD_PRCL:
            batch = ContrastBatch(
                anchors=[(c.rep, c.class_id) for c in anchor_cands],
                prototypes=prototypes,
                negatives={
                    i: [(c.rep, c.class_id) for c in negs] for i, negs in enumerate(neg_lists) if negs
                },
                temperature=cfg.temperature,
            )
            loss_contrast, grads = prcl_loss(batch)
            for i, cand in enumerate(anchor_cands):
                dmu[cand.pixel_id] += lam_c * grads.anchor_mu[i]
                dsig[cand.pixel_id] += lam_c * grads.anchor_sigma2[i]
            for i, negs in enumerate(neg_lists):
                if i in grads.neg_mu:
                    for j, neg in enumerate(negs):
                        dmu[neg.pixel_id] += lam_c * grads.neg_mu[i][j]
                        dsig[neg.pixel_id] += lam_c * grads.neg_sigma2[i][j]
        else:
            loss_contrast, grads = infonce_l2_loss(
                anchors=[(c.rep.mu, c.class_id) for c in anchor_cands],
                prototypes=prototypes,
                negatives={
                    i: [(c.rep.mu, c.class_id) for c in negs]
                    for i, negs in enumerate(neg_lists)
                    if negs
                },
                tau=cfg.temperature,
            )
            for i, cand in enumerate(anchor_cands):
                dmu[cand.pixel_id] += lam_c * grads.anchor_mu[i]
            for i, negs in enumerate(neg_lists):
                if i in grads.neg_mu:
                    for j, neg in enumerate(negs):
                        dmu[neg.pixel_id] += lam_c * grads.neg_mu[i][j]

    grads_l = student.backprop(fp_l, dlogits_l, dmu[:b], dsig[:b])
    grads_u = student.backprop(fp_u, lam_u * dlogits_u, dmu[b:], dsig[b:])
    combined = {name: grads_l[name] + grads_u[name] for name in grads_l}
    backward_step(student, combined, cfg.optim)
    ema_update(ts, cfg.optim.ema_decay)

    if cfg.method == METHOD_PRCL:
        rep_sigma2 = np.array([float(c.rep.sigma2.mean()) for c in valid])
        proto_sigma2 = np.array([float(p.sigma2_hat.mean()) for p in prototypes.values()])
    else:
        rep_sigma2 = np.empty(0)
        proto_sigma2 = np.empty(0)
    return _StepStats(loss_sup, loss_unsup, loss_contrast, lam_u, rep_sigma2, proto_sigma2)


def _prototype_accuracy(
    student: ToyModel,
    lab_X,
    lab_y,
    sample_X,
    sample_y,
    method: str,
) -> float:
    """Nearest-prototype accuracy on held-out pixels, under the run's similarity.

    Prototypes are rebuilt from the labeled split's representations with their
    true labels.
    """
    fp = student.forward_batch(lab_X)
    fp_s = student.forward_batch(sample_X)
    classes = sorted(set(int(c) for c in lab_y))
    scores = np.full((len(sample_X), len(classes)), -np.inf)
    for col, cls in enumerate(classes):
        rows = lab_y == cls
        if method == METHOD_PRCL:
            mu_hat, s2_hat = fuse_gaussians(fp.mu[rows], fp.sigma2[rows])
            proto = DistPrototype(mu_hat, s2_hat, n_obs=int(rows.sum()), class_id=cls)
            scores[:, col] = mls_batch(fp_s.mu, fp_s.sigma2, proto)
        else:
            proto_mu = fp.mu[rows].mean(axis=0)
            d = fp_s.mu - proto_mu[None, :]
            scores[:, col] = -np.sum(d * d, axis=1)
    pred = np.array(classes)[np.argmax(scores, axis=1)]
    return float(np.mean(pred == sample_y))


def _boundary_variance_stats(student: ToyModel, ds: PixelDataset):
    """Mean per-pixel variance (normalized l1 norm) over boundary vs interior pixels."""
    if not ds.unlabeled:
        return None, None
    feats = np.concatenate([img.features.reshape(-1, ds.spec.d_in) for img in ds.unlabeled])
    mask = np.concatenate([m.reshape(-1) for m in ds.evaluation.unlabeled_boundary])
    sigma2 = student.forward_batch(feats).sigma2.mean(axis=1)
    boundary, interior = sigma2[mask], sigma2[~mask]
    return (
        float(boundary.mean()) if boundary.size else None,
        float(interior.mean()) if interior.size else None,
    )


def train(cfg: RunConfig) -> RunReport:
    """Run the full semi-supervised loop described by the config.

    Writes report.csv, summary.json, and student/teacher checkpoints to
    cfg.output_dir when set. Raises DivergenceError with epoch/step context if
    any loss or activation goes non-finite.
    """
    ds = _resolve_dataset(cfg)
    spec = ds.spec
    mcfg = replace(cfg.model, d_in=spec.d_in, num_classes=spec.num_classes, seed=cfg.seed)
    student = ToyModel(mcfg)
    ts = TeacherStudent.from_student(student)
    sched = cfg.scheduler or SchedulerConfig(total_epochs=max(cfg.epochs, 1))
    if cfg.epochs > sched.total_epochs:
        raise ValueError("epochs exceeds the scheduler's total_epochs")

    lab_X, lab_y = _flatten_labeled(ds)
    unl_X = _flatten_unlabeled(ds)
    if len(unl_X) == 0:
        raise ValueError("training requires at least one unlabeled image")

    root = np.random.SeedSequence(cfg.seed)
    batch_ss, step_ss, eval_ss = root.spawn(3)
    rng_batch = np.random.default_rng(batch_ss)
    seed_gen = np.random.default_rng(step_ss)

    def seed_iter():
        while True:
            yield int(seed_gen.integers(np.iinfo(np.int64).max))

    seeds = seed_iter()

    has_eval = ds.has_evaluation
    if has_eval:
        rng_eval = np.random.default_rng(eval_ss)
        unl_labels = np.concatenate(
            [lbl.reshape(-1).astype(np.int64) for lbl in ds.evaluation.unlabeled_labels]
        )
        n_sample = min(2048, len(unl_X))
        sample_idx = np.sort(rng_eval.choice(len(unl_X), size=n_sample, replace=False))
        eval_pairs = [
            (img.features, lbl) for img, lbl in zip(ds.unlabeled, ds.evaluation.unlabeled_labels)
        ]

    records: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        lam_c = sched.lambda_c0 if cfg.freeze_lambda_c else lambda_c(epoch, sched)
        sup, unsup, contrast, lam_us = [], [], [], []
        rep_chunks, proto_chunks = [], []
        for step in range(cfg.optim.steps_per_epoch):
            try:
                stats = _train_step(ts, cfg, spec, lab_X, lab_y, unl_X, lam_c, rng_batch, seeds)
                total_loss(stats.loss_sup, stats.loss_unsup, stats.loss_contrast, stats.lam_u, lam_c)
            except ValueError as exc:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, step {step}: {exc}"
                ) from exc
            sup.append(stats.loss_sup)
            unsup.append(stats.loss_unsup)
            contrast.append(stats.loss_contrast)
            lam_us.append(stats.lam_u)
            rep_chunks.append(stats.rep_sigma2)
            proto_chunks.append(stats.proto_sigma2)

        if cfg.method == METHOD_PRCL:
            rep_all = np.concatenate(rep_chunks) if rep_chunks else np.empty(0)
            proto_all = np.concatenate(proto_chunks) if proto_chunks else np.empty(0)
            rep_mean = float(rep_all.mean()) if rep_all.size else None
            rep_std = float(rep_all.std()) if rep_all.size else None
            proto_mean = float(proto_all.mean()) if proto_all.size else None
        else:
            rep_mean = rep_std = proto_mean = None

        pixel_acc = miou = proto_acc = None
        if has_eval:
            res = evaluate(ts.student, eval_pairs)
            pixel_acc, miou = res.pixel_acc, res.miou
            proto_acc = _prototype_accuracy(
                ts.student, lab_X, lab_y, unl_X[sample_idx], unl_labels[sample_idx], cfg.method
            )

        records.append(
            EpochRecord(
                epoch=epoch,
                loss_sup=float(np.mean(sup)),
                loss_unsup=float(np.mean(unsup)),
                loss_contrast=float(np.mean(contrast)),
                lambda_u=float(np.mean(lam_us)),
                lambda_c=lam_c,
                pixel_acc=pixel_acc,
                miou=miou,
                rep_sigma2_mean=rep_mean,
                rep_sigma2_std=rep_std,
                proto_sigma2_mean=proto_mean,
                proto_acc=proto_acc,
            )
        )

    boundary_mean = interior_mean = None
    if cfg.method == METHOD_PRCL and has_eval and cfg.epochs > 0:
        boundary_mean, interior_mean = _boundary_variance_stats(ts.student, ds)

    summary = {
        "method": cfg.method,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "p_flip": cfg.p_flip,
        "final": None if not records else {c: getattr(records[-1], c) for c in REPORT_COLUMNS},
        "boundary_sigma2_mean": boundary_mean,
        "interior_sigma2_mean": interior_mean,
    }
    report = RunReport(records, summary)

    if cfg.output_dir is not None:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / REPORT_CSV)
        report.write_summary(out / SUMMARY_JSON)
        save_checkpoint(ts.student, out / STUDENT_CKPT)
        save_checkpoint(ts.teacher, out / TEACHER_CKPT)
    return report


def sweep(base_cfg: RunConfig, axes: dict[str, list], seeds, output_dir=None) -> list[dict]:
    """Run the cross product of axis values over the given seeds.

    Axis keys address RunConfig fields, optionally dotted into nested configs
    (for example "sampling.negatives_per_anchor"). Individual run failures are
    recorded in the summary table and the sweep continues. Returns one summary
    row per configuration point.
    """
    from .configio import apply_override

    axis_keys = sorted(axes)
    rows = []
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for values in itertools.product(*(axes[k] for k in axis_keys)):
        point = dict(zip(axis_keys, values))
        finals, errors = [], []
        for seed in seeds:
            cfg = base_cfg
            for key, value in point.items():
                cfg = apply_override(cfg, key, value)
            label = "_".join(f"{k.split('.')[-1]}-{v}" for k, v in point.items()) or "base"
            run_dir = None if out is None else str(out / f"run_{label}_seed{seed}")
            cfg = replace(cfg, seed=seed, output_dir=run_dir)
            try:
                report = train(cfg)
                finals.append(report.summary["final"])
            except Exception as exc:  # noqa: BLE001 - failures become table rows
                errors.append(f"seed {seed}: {exc}")
        row = dict(point)
        row["n_seeds"] = len(finals)
        row["errors"] = "; ".join(errors)
        for metric in ("miou", "pixel_acc", "proto_acc"):
            vals = [f[metric] for f in finals if f and f[metric] is not None]
            row[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{metric}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)

    if out is not None:
        columns = list(rows[0].keys()) if rows else []
        with open(out / "sweep_summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow("" if row[c] is None else row[c] for c in columns)
        with open(out / "sweep_summary.json", "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rows
